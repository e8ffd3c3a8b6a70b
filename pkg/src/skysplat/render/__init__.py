"""Differentiable software rasterizer (ellipsoid and disk modes)."""
from .normals import depth_to_normal, depth_to_normal_backward
from .project import Culled, Splat2D, SplatBatch, project, project_batch
from .raster import (
    BACKEND,
    GaussianGrads,
    RasterContext,
    RenderOutput,
    bin_splats,
    rasterize,
    rasterize_backward,
    render,
    use_backend,
)

__all__ = [
    "BACKEND", "Culled", "GaussianGrads", "RasterContext", "RenderOutput", "Splat2D", "SplatBatch",
    "bin_splats", "depth_to_normal", "depth_to_normal_backward", "project", "project_batch",
    "rasterize", "rasterize_backward", "render", "use_backend",
]
