"""One-shot contour-evolution segmentation toolkit.

Train a cascaded graph-convolutional contour model from a single labeled
exemplar plus unlabeled images, and refine it with human-drawn partial contour
corrections.
"""

from .contour import (
    Contour,
    center_initialize,
    hausdorff,
    iou,
    match_segment,
    rasterize,
    resample_uniform,
)
from .errors import CtnError, DataError, GeometryError, NumericError

__version__ = "0.1.0"

__all__ = [
    "Contour",
    "center_initialize",
    "hausdorff",
    "iou",
    "match_segment",
    "rasterize",
    "resample_uniform",
    "CtnError",
    "DataError",
    "GeometryError",
    "NumericError",
]
