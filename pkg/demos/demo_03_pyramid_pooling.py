"""
Pyramid pooling and the shifted pass
====================================

Cells get sparser after each stage of the pyramid, and the shifted pass
catches neighbours split by a window border.
"""

from nmsforge import NmsConfig, PyramidSchedule, build_score_maps, generate_synthetic, psrr_nms
from nmsforge.boxcore import BoundingBox, Detection
from nmsforge.ingest import SyntheticSpec
from nmsforge.poolnms import PoolStage, pyramid_trace, run_stage
from nmsforge.greedy import greedy_nms
from nmsforge.evalmetrics import overlap_ratio

# two boxes in adjacent cells on either side of a window edge
cfg = NmsConfig(alpha=0.5, image_w=160, image_h=160)
pair = [Detection(BoundingBox(-4, 8, 60, 72), 0.9, 0, 0), Detection(BoundingBox(4, 8, 68, 72), 0.8, 0, 1)]
stack = build_score_maps(pair, cfg)
print("unshifted survivors:", run_stage(stack, PoolStage("single", shifted=False), cfg).n_nonempty)
print("shifted survivors:  ", run_stage(stack, PoolStage("single", shifted=True), cfg).n_nonempty)

# a synthetic scene through the full pyramid
cfg = NmsConfig()
scene = generate_synthetic(SyntheticSpec(seed=3, n_scenes=1), cfg).images[0]
stack = build_score_maps(scene.batch, cfg)
_, counts = pyramid_trace(stack, PyramidSchedule.default(), cfg)
stages = ["project"] + [s.kind for s in PyramidSchedule.default().stages]
for name, n in zip(stages, counts):
    print(f"{name:>8}: {n:4d} non-empty cells ({n / stack.det_ids.size:.4%})")

kept = psrr_nms(scene.batch, cfg)
oracle = greedy_nms(scene.batch, cfg.greedy_iou, cfg.top_k)
print("overlap with greedy:", round(overlap_ratio(kept, oracle).ratio, 3))
