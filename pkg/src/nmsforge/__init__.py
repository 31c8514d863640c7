"""Greedy, MaxpoolNMS and PSRR-MaxpoolNMS suppression with a benchmark harness."""

from .boxcore import (
    BoundingBox,
    Detection,
    DetectionBatch,
    NmsConfig,
    SourceAnchor,
    UnsupportedInputError,
    center_and_size,
    iou,
    normalize,
)
from .evalmetrics import OverlapReport, overlap_ratio, sparsity, time_engine, time_sweep, voc_ap
from .greedy import KeptSet, greedy_nms, greedy_nms_all_classes
from .ingest import DetectionDump, SyntheticSpec, generate_synthetic, read_dump, write_dump
from .poolnms import (
    KernelSpec,
    PoolStage,
    PyramidSchedule,
    kernel_for_channel,
    maxpoolnms_legacy,
    psrr_nms,
    pyramid_run,
)
from .scoremap import ScoreMapStack, build_score_maps

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Detection",
    "DetectionBatch",
    "NmsConfig",
    "SourceAnchor",
    "UnsupportedInputError",
    "center_and_size",
    "iou",
    "normalize",
    "OverlapReport",
    "overlap_ratio",
    "sparsity",
    "time_engine",
    "time_sweep",
    "voc_ap",
    "KeptSet",
    "greedy_nms",
    "greedy_nms_all_classes",
    "DetectionDump",
    "SyntheticSpec",
    "generate_synthetic",
    "read_dump",
    "write_dump",
    "KernelSpec",
    "PoolStage",
    "PyramidSchedule",
    "kernel_for_channel",
    "maxpoolnms_legacy",
    "psrr_nms",
    "pyramid_run",
    "ScoreMapStack",
    "build_score_maps",
]
