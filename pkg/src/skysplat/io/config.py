"""TOML or JSON configuration files."""
import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..errors import ParseError


def load_config(path) -> dict:
    path = str(path)
    if path.endswith(".json"):
        with open(path) as fh:
            try:
                return json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(path, exc.lineno, exc.msg) from exc
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(path, getattr(exc, "lineno", 0), str(exc)) from exc


def split_sections(cfg: dict, sections=("largescale", "mesh", "desk")):
    """Separate pipeline-level tables from the training config proper."""
    cfg = dict(cfg)
    extra = {name: cfg.pop(name) for name in sections if name in cfg}
    return cfg, extra
