"""Name-addressable engines with their score-map traces."""

from __future__ import annotations

from dataclasses import dataclass, field

from .boxcore import DetectionBatch, NmsConfig
from .greedy import KeptSet, greedy_nms
from .poolnms import PoolStage, PyramidSchedule, collect_survivors, pyramid_trace, schedule_of
from .scoremap import build_score_maps

ENGINES = ("greedy", "psrr", "legacy-single", "legacy-ratio", "legacy-scale")


@dataclass
class EngineResult:
    kept: KeptSet
    # non-empty cell counts after projection and after every stage
    stage_counts: list[int] = field(default_factory=list)
    stage_kinds: list[str] = field(default_factory=list)
    total_cells: int = 0

    @property
    def sparsity(self) -> float | None:
        if not self.total_cells:
            return None
        return self.stage_counts[-1] / self.total_cells


def check_engine(name: str) -> None:
    if name not in ENGINES:
        raise ValueError(f"unknown engine {name!r}; expected one of {', '.join(ENGINES)}")


def needs_sources(name: str) -> bool:
    return name.startswith("legacy-")


def run_maxpool(
    batch: DetectionBatch, config: NmsConfig, projection: str, schedule: PyramidSchedule
) -> EngineResult:
    stack = build_score_maps(batch, config, projection)
    final, counts = pyramid_trace(stack, schedule, config)
    return EngineResult(
        collect_survivors(final, config.top_k),
        counts,
        ["project"] + [s.kind for s in schedule.stages],
        stack.det_ids.size,
    )


def run_engine(name: str, batch: DetectionBatch, config: NmsConfig) -> EngineResult:
    check_engine(name)
    if name == "greedy":
        return EngineResult(greedy_nms(batch, config.greedy_iou, config.top_k))
    if name == "psrr":
        return run_maxpool(batch, config, "recovery", schedule_of(config))
    variant = name.split("-", 1)[1]
    return run_maxpool(batch, config, "legacy", PyramidSchedule((PoolStage(variant, shifted=False),)))
