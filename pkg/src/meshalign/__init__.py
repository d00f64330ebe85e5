"""Mesh-based image alignment with contextual correlation and depth-aware losses."""
from .aligner import AlignConfig, AlignmentResult, NoOverlapError, align
from .imaging import Image, load_image, save_image
from .mesh import InvalidMeshError, Mesh

__all__ = [
    "AlignConfig",
    "AlignmentResult",
    "Image",
    "InvalidMeshError",
    "Mesh",
    "NoOverlapError",
    "align",
    "load_image",
    "save_image",
]
