"""Approximation quality, AP and timing measurements."""

from __future__ import annotations

import gc
import statistics
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .boxcore import DetectionBatch, NmsConfig, as_batch, iou_one_to_many
from .engines import check_engine
from .greedy import KeptSet, greedy_nms
from .poolnms import collect_survivors, maxpoolnms_legacy, psrr_nms, pyramid_run, schedule_of
from .scoremap import ScoreMapStack, build_score_maps


@dataclass(frozen=True)
class OverlapReport:
    n_greedy: int
    n_approx: int
    n_common: int
    ratio: float


def overlap_ratio(approx: KeptSet, oracle: KeptSet, mode: str = "jaccard") -> OverlapReport:
    """Agreement between an approximate kept set and the greedy oracle's.

    ``jaccard`` is ``|A & G| / |A | G|``; ``recall`` is ``|A & G| / |G|``.
    Two empty sets agree perfectly (ratio 1).
    """
    a, g = approx.ids, oracle.ids
    common = len(a & g)
    if mode == "jaccard":
        denom = len(a | g)
    elif mode == "recall":
        denom = len(g)
    else:
        raise ValueError(f"mode must be 'jaccard' or 'recall', got {mode!r}")
    if denom == 0:
        ratio = 1.0 if not a and not g else 0.0
    else:
        ratio = common / denom
    return OverlapReport(len(g), len(a), common, ratio)


def sparsity(stack: ScoreMapStack) -> float:
    """Fraction of non-empty cells."""
    total = stack.det_ids.size
    return stack.n_nonempty / total if total else 0.0


@dataclass
class ApResult:
    class_id: int
    ap: float
    recall: np.ndarray = field(default_factory=lambda: np.zeros(0))
    precision: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_gt: int = 0


def average_precision(recall: np.ndarray, precision: np.ndarray, use_11_point: bool = False) -> float:
    """Area under the interpolated precision/recall curve."""
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    if use_11_point:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t]
            ap += (above.max() if above.size else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def voc_ap(
    dets: Mapping[object, tuple[np.ndarray, np.ndarray]],
    groundtruth: Mapping[object, np.ndarray],
    iou_match: float = 0.5,
    class_id: int = 0,
    use_11_point: bool = False,
) -> ApResult:
    """VOC-style AP of one class.

    Args:
        dets: image id -> ``(boxes (N, 4), scores (N,))``.
        groundtruth: image id -> GT boxes ``(M, 4)``.
        iou_match: minimum IoU for a true positive.

    Detections are visited in descending score order (stable across images
    in iteration order). Each one is compared with the GT box it overlaps
    most; it is a true positive iff that IoU reaches ``iou_match`` and the
    GT box is still unmatched. AP is NaN when the class has no GT boxes.
    """
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in groundtruth.values())
    image_keys, boxes, scores = [], [], []
    for key, (b, s) in dets.items():
        b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
        image_keys.extend([key] * len(b))
        boxes.append(b)
        scores.append(np.asarray(s, dtype=np.float64).reshape(-1))
    if n_gt == 0:
        return ApResult(class_id, float("nan"), n_gt=0)
    if not image_keys:
        return ApResult(class_id, 0.0, n_gt=n_gt)

    boxes = np.concatenate(boxes)
    scores = np.concatenate(scores)
    order = np.argsort(-scores, kind="stable")
    gt = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in groundtruth.items()}
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gt.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        g = gt.get(image_keys[i])
        if g is None or len(g) == 0:
            continue
        ious = iou_one_to_many(boxes[i], g)
        j = int(np.argmax(ious))
        if ious[j] >= iou_match and not taken[image_keys[i]][j]:
            taken[image_keys[i]][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    return ApResult(class_id, average_precision(recall, precision, use_11_point), recall, precision, n_gt)


def mean_ap(results: Sequence[ApResult]) -> float:
    """Mean AP over classes with ground truth; others are skipped with a warning."""
    valid = []
    for r in results:
        if np.isnan(r.ap):
            warnings.warn(f"class {r.class_id} has no ground truth; excluded from mAP", stacklevel=2)
        else:
            valid.append(r.ap)
    return float(np.mean(valid)) if valid else float("nan")


@dataclass
class TimingStats:
    engine: str
    n_boxes: int
    samples_ms: list[float]
    phases_ms: dict[str, list[float]] = field(default_factory=dict)

    @property
    def median_ms(self) -> float:
        return statistics.median(self.samples_ms)

    @property
    def iqr_ms(self) -> float:
        q1, q3 = np.percentile(self.samples_ms, [25, 75])
        return float(q3 - q1)

    def phase_median_ms(self, phase: str) -> float:
        return statistics.median(self.phases_ms[phase])


def _psrr_phased(batch: DetectionBatch, config: NmsConfig):
    clock = time.perf_counter
    t0 = clock()
    stack = build_score_maps(batch, config, "recovery")
    t1 = clock()
    kept = collect_survivors(pyramid_run(stack, schedule_of(config), config), config.top_k)
    t2 = clock()
    return kept, {"rr": (t1 - t0) * 1e3, "ps": (t2 - t1) * 1e3}


def engine_callable(name: str, config: NmsConfig) -> Callable[[DetectionBatch], KeptSet]:
    """Engine by name: ``greedy``, ``psrr`` or ``legacy-{single,ratio,scale}``."""
    check_engine(name)
    if name == "greedy":
        return lambda b: greedy_nms(b, config.greedy_iou, config.top_k)
    if name == "psrr":
        return lambda b: psrr_nms(b, config)
    variant = name.split("-", 1)[1]
    return lambda b: maxpoolnms_legacy(b, config, variant)


def _prepare(engine, config: NmsConfig):
    """``(label, step)`` where ``step(batch)`` returns the phase split or ``None``."""
    if engine == "psrr":
        return engine, lambda b: _psrr_phased(b, config)[1]
    fn = engine_callable(engine, config) if isinstance(engine, str) else engine
    label = engine if isinstance(engine, str) else getattr(engine, "__name__", "engine")

    def step(batch):
        fn(batch)

    return label, step


def _check_repeats(repeats: int, warmup: int) -> None:
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")


def time_sweep(
    engines: Sequence[str | Callable[[DetectionBatch], KeptSet]],
    pools: Sequence,
    config: NmsConfig | None = None,
    repeats: int = 5,
    warmup: int = 1,
    configs: Sequence[NmsConfig] | None = None,
) -> list[TimingStats]:
    """Time every engine on every candidate pool.

    Repeats are interleaved: each round visits every (pool, engine) cell once,
    so slow drifts of the host spread evenly instead of skewing one pool.
    The garbage collector is paused while measuring. Results come back in
    pool-major order. ``configs`` optionally gives one config per pool.
    """
    _check_repeats(repeats, warmup)
    config = config or NmsConfig()
    configs = list(configs) if configs is not None else [config] * len(pools)
    if len(configs) != len(pools):
        raise ValueError("configs must match pools one to one")
    batches = [as_batch(p) for p in pools]
    cells = []
    for batch, cfg in zip(batches, configs):
        for engine in engines:
            label, step = _prepare(engine, cfg)
            cells.append((batch, step, TimingStats(label, len(batch), [], {})))

    clock = time.perf_counter
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(warmup):
            for batch, step, _ in cells:
                step(batch)
        for _ in range(repeats):
            for batch, step, stats in cells:
                t0 = clock()
                split = step(batch)
                stats.samples_ms.append((clock() - t0) * 1e3)
                for k, v in (split or {}).items():
                    stats.phases_ms.setdefault(k, []).append(v)
    finally:
        if gc_was_enabled:
            gc.enable()
    return [stats for _, _, stats in cells]


def time_engine(
    engine: str | Callable[[DetectionBatch], KeptSet],
    dets,
    config: NmsConfig | None = None,
    repeats: int = 5,
    warmup: int = 1,
) -> TimingStats:
    """Wall-clock an engine on one candidate pool.

    ``engine`` is an engine name or a callable taking a :class:`DetectionBatch`.
    The ``psrr`` engine also records its recovery (``rr``) and pooling
    (``ps``) phases.
    """
    return time_sweep([engine], [dets], config, repeats, warmup)[0]
