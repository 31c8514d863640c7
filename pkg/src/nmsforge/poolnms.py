"""
Max-pooling NMS on score-map stacks.

Pooling here is pool-then-unpool: inside each window only the maximal cell
keeps its ``(score, det_id)`` at its original position, every other cell in
the window is emptied. A channel group is pooled as one block whose depth is
the whole group, so a window spans ``k_y x k_x`` cells on every channel of
the group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxcore import Detection, DetectionBatch, NmsConfig, as_batch
from .greedy import KeptSet
from .scoremap import EMPTY, ScoreMapStack, build_score_maps, round_half_up

STAGE_KINDS = ("single", "ratio", "scale", "all")


@dataclass(frozen=True)
class KernelSpec:
    k_x: int
    k_y: int
    s_x: int
    s_y: int

    def __post_init__(self):
        if min(self.k_x, self.k_y, self.s_x, self.s_y) < 1:
            raise ValueError(f"kernel sizes and strides must be >= 1: {self}")

    @property
    def half_shift(self) -> tuple[int, int]:
        return self.k_x // 2, self.k_y // 2


def kernel_for_channel(scale: float, ratio: float, alpha: float, beta: float) -> KernelSpec:
    """Kernel of the channel whose default box has area ``scale`` and h:w ``ratio``.

    ``k = s = max(round(alpha * side / beta), 1)`` per axis, with
    ``w = sqrt(scale / ratio)`` and ``h = sqrt(scale * ratio)``.
    """
    w = math.sqrt(scale / ratio)
    h = math.sqrt(scale * ratio)
    kx = max(int(round_half_up(alpha * w / beta)), 1)
    ky = max(int(round_half_up(alpha * h / beta)), 1)
    return KernelSpec(kx, ky, kx, ky)


def channel_kernels(config: NmsConfig) -> list[KernelSpec]:
    return [
        kernel_for_channel(s, r, config.alpha, config.beta)
        for s in config.scales
        for r in config.ratios
    ]


def group_kernel(group: Sequence[int], specs: Sequence[KernelSpec]) -> KernelSpec:
    """Componentwise minimum of the kernels of the channels in ``group``."""
    if not group:
        raise ValueError("channel group must be non-empty")
    members = [specs[c] for c in group]
    return KernelSpec(
        min(k.k_x for k in members),
        min(k.k_y for k in members),
        min(k.s_x for k in members),
        min(k.s_y for k in members),
    )


def stage_passes(kind: str, n_scales: int, n_ratios: int) -> list[list[list[int]]]:
    """Channel groups of a stage kind, as sequential passes of disjoint groups.

    Groups inside one pass never share a channel and may be pooled together.
    Cross-scale pairs overlap, so pair ``(s_j, s_j+1)`` of every ratio forms
    pass ``j`` and the passes run in ascending scale order.
    """
    ch = lambda s, r: s * n_ratios + r  # noqa: E731
    if kind == "single":
        return [[[c] for c in range(n_scales * n_ratios)]]
    if kind == "ratio":
        return [[[ch(s, r) for r in range(n_ratios)] for s in range(n_scales)]]
    if kind == "scale":
        if n_scales == 1:
            return [[[ch(0, r)] for r in range(n_ratios)]]
        return [
            [[ch(s, r), ch(s + 1, r)] for r in range(n_ratios)]
            for s in range(n_scales - 1)
        ]
    if kind == "all":
        return [[list(range(n_scales * n_ratios))]]
    raise ValueError(f"unknown stage kind {kind!r}; expected one of {STAGE_KINDS}")


@dataclass(frozen=True)
class PoolStage:
    kind: str
    shifted: bool = True
    passes: tuple = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}; expected one of {STAGE_KINDS}")

    def resolve(self, n_scales: int, n_ratios: int) -> list[list[list[int]]]:
        if self.passes is not None:
            return [list(map(list, p)) for p in self.passes]
        return stage_passes(self.kind, n_scales, n_ratios)

    def channel_groups(self, n_scales: int, n_ratios: int) -> list[list[int]]:
        return [g for p in self.resolve(n_scales, n_ratios) for g in p]


@dataclass(frozen=True)
class PyramidSchedule:
    stages: tuple[PoolStage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule must contain at least one stage")

    @property
    def label(self) -> str:
        return "+".join(s.kind for s in self.stages)

    @classmethod
    def parse(cls, text: str, shifted: bool = True, reverse: bool = False) -> PyramidSchedule:
        kinds = [k.strip() for k in text.split("+") if k.strip()]
        if reverse:
            kinds = kinds[::-1]
        return cls(tuple(PoolStage(k, shifted) for k in kinds))

    @classmethod
    def default(cls) -> PyramidSchedule:
        return cls.parse("single+ratio+scale+all")


def _pool_groups(
    stack: ScoreMapStack,
    groups: Sequence[Sequence[int]],
    specs: Sequence[KernelSpec],
    shifts: Sequence[tuple[int, int]],
) -> ScoreMapStack:
    """Pool several channel-disjoint groups in one vectorized pass."""
    C, H, W = stack.shape
    flat_ids = stack.det_ids.ravel()
    flat = np.flatnonzero(flat_ids != EMPTY)
    if flat.size < 2:
        return stack

    group_of = np.full(C, -1, dtype=np.int64)
    for gi, g in enumerate(groups):
        group_of[list(g)] = gi
    c, rem = np.divmod(flat, H * W)
    g = group_of[c]
    member = g >= 0
    flat, g, rem = flat[member], g[member], rem[member]
    if flat.size < 2:
        return stack
    y, x = np.divmod(rem, W)

    kx = np.array([s.s_x for s in specs], dtype=np.int64)[g]
    ky = np.array([s.s_y for s in specs], dtype=np.int64)[g]
    dx = np.array([d[0] for d in shifts], dtype=np.int64)[g]
    dy = np.array([d[1] for d in shifts], dtype=np.int64)[g]
    wx = (x + dx) // kx
    wy = (y + dy) // ky
    window = (g * (2 * H + 1) + wy) * (2 * W + 1) + wx

    # flat is in (channel, Y, X) order and lexsort is stable, so equal
    # scores resolve to the lexicographically lowest cell
    order = np.lexsort((-stack.scores.ravel()[flat], window))
    w_sorted = window[order]
    losers = flat[order[1:][w_sorted[1:] == w_sorted[:-1]]]
    if losers.size == 0:
        return stack
    scores = stack.scores.ravel().copy()
    ids = flat_ids.copy()
    scores[losers] = 0.0
    ids[losers] = EMPTY
    return stack.replace(scores.reshape(stack.shape), ids.reshape(stack.shape))


def pool_keep(
    stack: ScoreMapStack,
    group: Sequence[int],
    spec: KernelSpec,
    shift: tuple[int, int] = (0, 0),
) -> ScoreMapStack:
    """Max-pool one channel group, keeping window winners in place.

    ``shift`` offsets the window grid by zero-padding ``shift`` cells on the
    top/left border; border windows that fall partly outside the map are
    pooled over the cells they do cover.
    """
    C = stack.shape[0]
    if any(c < 0 or c >= C for c in group):
        raise ValueError(f"group {list(group)} references channels outside 0..{C - 1}")
    return _pool_groups(stack, [list(group)], [spec], [tuple(shift)])


def run_stage(stack: ScoreMapStack, stage: PoolStage, config: NmsConfig) -> ScoreMapStack:
    """Apply one pyramid stage: each group pooled, then re-pooled half-shifted."""
    specs = channel_kernels(config)
    for groups in stage.resolve(len(config.scales), len(config.ratios)):
        gspecs = [group_kernel(g, specs) for g in groups]
        stack = _pool_groups(stack, groups, gspecs, [(0, 0)] * len(groups))
        if stage.shifted:
            stack = _pool_groups(stack, groups, gspecs, [s.half_shift for s in gspecs])
    return stack


def pyramid_trace(
    stack: ScoreMapStack, schedule: PyramidSchedule, config: NmsConfig
) -> tuple[ScoreMapStack, list[int]]:
    """Run the schedule, returning the final stack and the non-empty cell
    count before the first stage and after each stage."""
    counts = [stack.n_nonempty]
    for stage in schedule.stages:
        stack = run_stage(stack, stage, config)
        counts.append(stack.n_nonempty)
    return stack, counts


def pyramid_run(stack: ScoreMapStack, schedule: PyramidSchedule, config: NmsConfig) -> ScoreMapStack:
    for stage in schedule.stages:
        stack = run_stage(stack, stage, config)
    return stack


def collect_survivors(stack: ScoreMapStack, top_k: int | None = None) -> KeptSet:
    """Surviving detections sorted by descending score, ties by ascending id."""
    flat = np.flatnonzero(stack.det_ids.ravel() != EMPTY)
    ids = stack.det_ids.ravel()[flat]
    scores = stack.scores.ravel()[flat]
    order = np.lexsort((ids, -scores))
    if top_k is not None:
        order = order[:top_k]
    return KeptSet.from_arrays(ids[order], scores[order])


def schedule_of(config: NmsConfig) -> PyramidSchedule:
    return PyramidSchedule.parse(config.schedule, shifted=config.shifted)


def maxpool_nms(
    dets: DetectionBatch | Sequence[Detection],
    config: NmsConfig,
    projection: str = "recovery",
    schedule: PyramidSchedule | None = None,
) -> KeptSet:
    """Generic score-map NMS: project, run a pooling schedule, collect."""
    stack = build_score_maps(dets, config, projection)
    stack = pyramid_run(stack, schedule or schedule_of(config), config)
    return collect_survivors(stack, config.top_k)


def psrr_nms(dets: DetectionBatch | Sequence[Detection], config: NmsConfig) -> KeptSet:
    """Relationship-recovery projection followed by the pyramid shifted schedule
    named in ``config``."""
    return maxpool_nms(dets, config, "recovery", schedule_of(config))


def maxpoolnms_legacy(
    dets: DetectionBatch | Sequence[Detection], config: NmsConfig, variant: str = "single"
) -> KeptSet:
    """Original anchor-projected MaxpoolNMS: one unshifted stage of ``variant``.

    Raises:
        UnsupportedInputError: some detection lacks a source anchor.
    """
    if variant not in ("single", "ratio", "scale"):
        raise ValueError(f"legacy variant must be single, ratio or scale, got {variant!r}")
    schedule = PyramidSchedule((PoolStage(variant, shifted=False),))
    return maxpool_nms(dets, config, "legacy", schedule)


def psrr_nms_all_classes(dets, config: NmsConfig) -> dict[int, KeptSet]:
    batch = as_batch(dets)
    return {cls: psrr_nms(sub, config) for cls, sub in batch.by_class().items()}
