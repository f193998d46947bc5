"""Whole-slide-image segmentation workbench: tile pyramids, tissue-gated
tiling, pluggable per-tile segmentation, contour extraction to layered
annotations, JSON/ImageScope-XML interchange, metrics, training-data export,
and an HTTP service for human-in-the-loop correction."""

from .annotations import (AnnotationDocument, AnnotationLayer, PolygonElement,
                          apply_edit, from_json, merge_predicted, rasterize,
                          to_json)
from .backends import (Backend, BackendConfig, ClassRule, LabelMask,
                       TrainingHyperparams)
from .contours import Contour, StitchedRegion, extract_contours, simplify, stitch
from .errors import (BackendError, FormatError, ProtocolError, SlidesegError,
                     ValidationError)
from .metrics import (ConfusionCounts, MetricsReport, confusion, metrics,
                      micro_average)
from .pipeline import SegmentationResult, TimingRecord, segment_slide
from .pyramid import RegionSpec, SlidePyramid, build_pyramid
from .synthetic import make_synthetic
from .tiles import TilePlan, merge_boxes, plan_tiles
from .tissue import TissueMask, detect_tissue, otsu_threshold, tissue_bounds
from .training import TrainingManifest, export_training_patches

__version__ = "1.0.0"

__all__ = [
    "AnnotationDocument", "AnnotationLayer", "Backend", "BackendConfig",
    "BackendError", "ClassRule", "ConfusionCounts", "Contour", "FormatError",
    "LabelMask", "MetricsReport", "PolygonElement", "ProtocolError",
    "RegionSpec", "SegmentationResult", "SlidePyramid", "SlidesegError",
    "StitchedRegion", "TilePlan", "TimingRecord", "TissueMask",
    "TrainingHyperparams", "TrainingManifest", "ValidationError",
    "apply_edit", "build_pyramid", "confusion", "detect_tissue",
    "export_training_patches", "extract_contours", "from_json",
    "make_synthetic", "merge_boxes", "merge_predicted", "metrics",
    "micro_average", "otsu_threshold", "plan_tiles", "rasterize",
    "segment_slide", "simplify", "stitch", "tissue_bounds", "to_json",
]
