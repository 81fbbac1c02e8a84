"""sketchforge: sketch-conditioned dataset tooling.

Instance sketch synthesis from images and masks, long-tail pretraining
curation, multi-source sketch pool assembly and auditing, instruction-corpus
generation for counting/detection/VQA/retrieval, and the matching evaluation
metrics. Everything is seeded and deterministic; worker counts only change
throughput, never bytes.
"""

__version__ = "0.1.0"

from .datamodel import (
    Annotation,
    BoundingBox,
    ImageRecord,
    InstructionSample,
    ParsedBoxes,
    PredictionRecord,
    SketchRecord,
    SketchSource,
    TaskKind,
    denormalize_box,
    format_box_list,
    normalize_box,
    parse_box_list,
    parse_count_answer,
    parse_yes_probability,
)
from .errors import (
    EmptyAnswerError,
    EmptyPoolError,
    EmptySketchError,
    GeometryError,
    MissingScoreError,
    SampleGenerationError,
    SketchForgeError,
    UnparseableCountError,
    UnparseableSbirError,
    ValidationError,
)
from .evalmetrics import (
    DetectionInstance,
    GallerySpec,
    MatchResult,
    MetricReport,
    build_sbir_gallery,
    counting_accuracy,
    detection_accuracy,
    greedy_match,
    iou,
    mean_average_precision,
    rank_gallery,
    sbir_acc_at_k,
)
from .sketchgen import (
    MaskRaster,
    StylizerKind,
    StylizerSpec,
    generate_instance_sketch,
    generate_sketch_raster,
    load_sketch,
    save_sketch,
)
from .util import derive_seed

__all__ = [
    "__version__",
    "Annotation",
    "BoundingBox",
    "DetectionInstance",
    "EmptyAnswerError",
    "EmptyPoolError",
    "EmptySketchError",
    "GallerySpec",
    "GeometryError",
    "ImageRecord",
    "InstructionSample",
    "MaskRaster",
    "MatchResult",
    "MetricReport",
    "MissingScoreError",
    "ParsedBoxes",
    "PredictionRecord",
    "SampleGenerationError",
    "SketchForgeError",
    "SketchRecord",
    "SketchSource",
    "StylizerKind",
    "StylizerSpec",
    "TaskKind",
    "UnparseableCountError",
    "UnparseableSbirError",
    "ValidationError",
    "build_sbir_gallery",
    "counting_accuracy",
    "denormalize_box",
    "derive_seed",
    "detection_accuracy",
    "format_box_list",
    "generate_instance_sketch",
    "generate_sketch_raster",
    "greedy_match",
    "iou",
    "load_sketch",
    "mean_average_precision",
    "normalize_box",
    "parse_box_list",
    "parse_count_answer",
    "parse_yes_probability",
    "rank_gallery",
    "save_sketch",
    "sbir_acc_at_k",
]
