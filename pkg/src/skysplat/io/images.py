"""PNG, PFM and 16-bit depth PNG readers and writers."""
import re

import numpy as np
from PIL import Image

from ..errors import ParseError


def read_image(path) -> np.ndarray:
    """RGB float image in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, rgb):
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return (arr > 127).astype(np.float64)


def write_mask(path, mask):
    Image.fromarray(((np.asarray(mask) > 0.5) * 255).astype(np.uint8)).save(path)


def write_pfm(path, data):
    data = np.asarray(data, dtype="<f4")
    color = data.ndim == 3
    H, W = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{W} {H}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ParseError(path, 1, "bad PFM magic")
        dims = fh.readline().decode()
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ParseError(path, 2, f"bad PFM dimensions {dims!r}")
        W, H = int(m.group(1)), int(m.group(2))
        try:
            scale = float(fh.readline())
        except ValueError as exc:
            raise ParseError(path, 3, "bad PFM scale") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        C = 3 if magic == b"PF" else 1
        raw = np.frombuffer(fh.read(), dtype=dtype)
    if raw.size != W * H * C:
        raise ParseError(path, 4, f"expected {W * H * C} floats, got {raw.size}")
    shape = (H, W, 3) if C == 3 else (H, W)
    return np.flipud(raw.reshape(shape)).astype(np.float64)


def write_depth_png16(path, depth, scale=1000.0):
    arr = np.clip(np.round(np.asarray(depth) * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def read_depth(path, png_scale=1000.0) -> np.ndarray:
    """Depth in meters from PFM or a 16-bit PNG storing ``depth * png_scale``."""
    path = str(path)
    if path.lower().endswith(".pfm"):
        return read_pfm(path)
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / png_scale
