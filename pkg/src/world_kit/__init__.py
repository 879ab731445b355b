"""Layered 3D world reconstruction from equirectangular panoramas."""

from .depth import AffineDepthTransform, DepthMap
from .erp import PinholeCamera, dir_to_erp_pixel, erp_pixel_to_dir, erp_to_pinhole, pinhole_to_erp
from .sheet_warp import GridMesh, LayeredWorldMesh, warp_layer

__version__ = "0.1.0"

__all__ = [
    "AffineDepthTransform", "DepthMap", "GridMesh", "LayeredWorldMesh", "PinholeCamera",
    "dir_to_erp_pixel", "erp_pixel_to_dir", "erp_to_pinhole", "pinhole_to_erp", "warp_layer",
]
