"""End-to-end acceptance checks; each prints one verdict line in the summary."""

import itertools
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from nmsforge.boxcore import NmsConfig, pairwise_iou
from nmsforge.cli import cmd_timing, main
from nmsforge.engines import run_engine
from nmsforge.evalmetrics import overlap_ratio, voc_ap
from nmsforge.greedy import greedy_nms
from nmsforge.ingest import SyntheticSpec, generate_synthetic
from nmsforge.poolnms import KernelSpec, PoolStage, PyramidSchedule, kernel_for_channel, pyramid_trace, run_stage
from nmsforge.scoremap import build_score_maps
from ap_oracle import brute_force_ap
from conftest import make_det

CONFIG = NmsConfig()


@pytest.fixture(scope="module")
def corpus():
    """100 scenes as (image, per-class batch) pairs."""
    dump = generate_synthetic(SyntheticSpec(seed=2024, n_scenes=100), CONFIG)
    return [(image, sub) for image in dump for _, sub in sorted(image.batch.by_class().items())]


def mean_overlap(corpus, engine_fn):
    values = []
    for image, batch in corpus:
        cfg = replace(CONFIG, image_w=image.width, image_h=image.height)
        oracle = greedy_nms(batch, cfg.greedy_iou, cfg.top_k)
        values.append(overlap_ratio(engine_fn(batch, cfg), oracle).ratio)
    return float(np.mean(values))


def test_greedy_soundness_on_1000_scenes(criterion_report):
    thr = 0.5
    start = time.perf_counter()
    dump = generate_synthetic(SyntheticSpec(seed=1, n_scenes=1000, n_classes=3), CONFIG)
    violations = 0
    for image in dump:
        for _, batch in image.batch.by_class().items():
            kept_ids = set(greedy_nms(batch, thr).det_ids)
            rank = np.empty(len(batch), dtype=np.int64)
            rank[np.lexsort((batch.det_ids, -batch.scores))] = np.arange(len(batch))
            is_kept = np.array([int(d) in kept_ids for d in batch.det_ids])
            ious = pairwise_iou(batch.boxes, batch.boxes)
            k = np.flatnonzero(is_kept)
            sub = ious[np.ix_(k, k)]
            np.fill_diagonal(sub, 0.0)
            violations += int((sub >= thr).sum())
            for i in np.flatnonzero(~is_kept):
                blockers = is_kept & (rank < rank[i]) & (ious[i] >= thr)
                violations += int(not blockers.any())
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 30
    criterion_report(1, "greedy oracle soundness", ok, f"(violations={violations}, {elapsed:.1f}s)")
    assert violations == 0
    assert elapsed < 30


# Hand-evaluated kernel sizes: side = sqrt(scale / ratio) for w, sqrt(scale * ratio) for h,
# then round-half-up(0.75 * side / 16). For 64^2, r=0.5: w = 90.51 -> 4.24 -> 4, h = 45.25 -> 2.12 -> 2.
KERNEL_TABLE = {
    (64, 0.5): (4, 2), (64, 1.0): (3, 3), (64, 2.0): (2, 4),
    (128, 0.5): (8, 4), (128, 1.0): (6, 6), (128, 2.0): (4, 8),
    (256, 0.5): (17, 8), (256, 1.0): (12, 12), (256, 2.0): (8, 17),
    (512, 0.5): (34, 17), (512, 1.0): (24, 24), (512, 2.0): (17, 34),
}


def test_kernel_table(criterion_report):
    mismatches = []
    for (side, ratio), (kx, ky) in KERNEL_TABLE.items():
        got = kernel_for_channel(float(side) ** 2, ratio, 0.75, 16)
        if got != KernelSpec(kx, ky, kx, ky):
            mismatches.append(((side, ratio), got))
    criterion_report(2, "kernel table over 4 scales x 3 ratios", not mismatches, f"(mismatches={len(mismatches)})")
    assert not mismatches


def test_edge_effect_fixture(criterion_report):
    cfg = NmsConfig(alpha=0.5, image_w=160, image_h=160, scales=(64.0**2, 128.0**2))
    # two 64x64 boxes centered in adjacent cells X=1 and X=2 of the 2x2-kernel channel
    dets = [make_det(-4, 8, 60, 72, 0.9, 0), make_det(4, 8, 68, 72, 0.8, 1)]
    stack = build_score_maps(dets, cfg)
    plain = run_stage(stack, PoolStage("single", shifted=False), cfg).n_nonempty
    shifted_stack = run_stage(stack, PoolStage("single", shifted=True), cfg)
    shifted = shifted_stack.n_nonempty
    ok = plain == 2 and shifted == 1 and shifted_stack.cells()[0][4] == 0
    criterion_report(3, "edge-effect fixture", ok, f"(unshifted={plain}, shifted={shifted})")
    assert ok


def test_overlap_ranking_against_legacy(corpus, criterion_report):
    start = time.perf_counter()
    scores = {name: mean_overlap(corpus, lambda b, c, name=name: run_engine(name, b, c).kept)
              for name in ("psrr", "legacy-single", "legacy-ratio", "legacy-scale")}
    elapsed = time.perf_counter() - start
    best_legacy = max(v for k, v in scores.items() if k != "psrr")
    ok = scores["psrr"] > best_legacy and elapsed < 120
    detail = ", ".join(f"{k}={v:.4f}" for k, v in scores.items())
    criterion_report(4, "overlap ranking vs legacy", ok, f"({detail}; {elapsed:.1f}s)")
    assert scores["psrr"] > best_legacy
    assert elapsed < 120


def test_schedule_chain(corpus, criterion_report):
    chain = ["single", "single+ratio", "single+ratio+all", "single+ratio+scale+all"]
    scores = {}
    for text in chain:
        schedule = PyramidSchedule.parse(text)

        def engine(batch, cfg, schedule=schedule):
            from nmsforge.engines import run_maxpool
            return run_maxpool(batch, cfg, "recovery", schedule).kept

        scores[text] = mean_overlap(corpus, engine)
    values = [scores[t] for t in chain]
    ok = all(b >= a for a, b in zip(values, values[1:])) and values[-1] >= max(values)
    detail = " <= ".join(f"{v:.4f}" for v in values)
    criterion_report(5, "schedule chain", ok, f"({detail})")
    assert ok


def test_sparsity_monotonic(corpus, criterion_report):
    bad = 0
    for image, batch in corpus:
        cfg = replace(CONFIG, image_w=image.width, image_h=image.height)
        stack = build_score_maps(batch, cfg)
        for schedule in (PyramidSchedule.default(), PyramidSchedule.parse("single+ratio+scale+all", reverse=True)):
            _, counts = pyramid_trace(stack, schedule, cfg)
            bad += any(b > a for a, b in zip(counts, counts[1:]))
    criterion_report(6, "per-stage sparsity non-increasing", bad == 0, f"(violating scenes={bad})")
    assert bad == 0


@pytest.mark.slow
def test_timing_scaling(criterion_report):
    start = time.perf_counter()
    n_list = [1000, 2000, 4000, 8000]
    summary, _ = cmd_timing(n_list, ["greedy", "psrr"], SyntheticSpec(seed=0), repeats=15)
    medians = {(r[2], r[3]): r[5] for r in summary}
    y = np.array([medians["psrr", n] for n in n_list])
    x = np.array(n_list, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    speedup = medians["greedy", 8000] / medians["psrr", 8000]
    elapsed = time.perf_counter() - start
    ok = r2 >= 0.9 and speedup >= 2.0 and elapsed < 300
    detail = (f"(R2={r2:.3f}, greedy@8000={medians['greedy', 8000]:.1f}ms, "
              f"psrr@8000={medians['psrr', 8000]:.1f}ms, speedup={speedup:.2f}x, {elapsed:.0f}s)")
    criterion_report(7, "timing scaling", ok, detail)
    assert r2 >= 0.9
    assert speedup >= 2.0
    assert elapsed < 300


# A (10x10), B (10x14, IoU .714 with A), C (10x20, IoU exactly .5 with A), D disjoint
UNIVERSE = [(0.0, 0.0, 10.0, 10.0), (0.0, 0.0, 10.0, 14.0), (0.0, 0.0, 10.0, 20.0), (30.0, 30.0, 40.0, 40.0)]


def test_ap_exhaustive_small_instances(criterion_report):
    worst, count = 0.0, 0
    gt_sets = [g for n in range(1, 4) for g in itertools.combinations_with_replacement(UNIVERSE[:3], n)]
    gt_sets += [(UNIVERSE[3],), (UNIVERSE[0], UNIVERSE[3])]
    for gts in gt_sets:
        for n_det in range(0, 6):
            for picks in itertools.product(UNIVERSE, repeat=n_det):
                dets = [(box, 1.0 - 0.1 * i) for i, box in enumerate(picks)]
                boxes = np.array(picks, dtype=float).reshape(-1, 4)
                got = voc_ap({"im": (boxes, np.array([s for _, s in dets]))}, {"im": np.array(gts)}).ap
                worst = max(worst, abs(got - brute_force_ap(dets, list(gts))))
                count += 1
    empty_gt = voc_ap({"im": (np.array([UNIVERSE[0]]), np.array([0.5]))}, {"im": np.zeros((0, 4))}).ap
    ok = worst <= 1e-9 and math.isnan(empty_gt)
    criterion_report(8, "AP vs brute force", ok, f"(instances={count}, max |diff|={worst:.1e})")
    assert ok


def test_cli_determinism(tmp_path, criterion_report):
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({
        "input": {"synthetic": {"seed": 13, "n_scenes": 10, "n_classes": 2}},
        "engines": ["greedy", "psrr", "legacy-single", "legacy-ratio", "legacy-scale"],
        "config": {"assignment": "random", "seed": 13},
        "trace": True,
    }))
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["run", "--manifest", str(manifest), "--out-dir", str(out)]) == 0
        for which in ("assignment", "schedule", "shift", "recovery"):
            assert main(["ablate", "--which", which, "--manifest", str(manifest),
                         "--out", f"ablate_{which}.csv", "--out-dir", str(out)]) == 0
        runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    ok = runs[0] == runs[1] and len(runs[0]) == 7
    criterion_report(9, "byte-identical CSVs", ok, f"(files={len(runs[0])})")
    assert ok
