"""
How close is the approximation?
===============================

Overlap with the greedy kept set and VOC AP against the synthetic ground
truth, for the pyramid engine and the three single-stage legacy engines.
"""

from dataclasses import replace

import numpy as np

from nmsforge import NmsConfig, generate_synthetic
from nmsforge.engines import run_engine
from nmsforge.evalmetrics import overlap_ratio, voc_ap
from nmsforge.ingest import SyntheticSpec

cfg = NmsConfig()
dump = generate_synthetic(SyntheticSpec(seed=0, n_scenes=30), cfg)

for engine in ("greedy", "psrr", "legacy-single", "legacy-ratio", "legacy-scale"):
    overlaps, dets, gts = [], {}, {}
    for image in dump:
        icfg = replace(cfg, image_w=image.width, image_h=image.height)
        batch = image.batch
        kept = run_engine(engine, batch, icfg).kept
        oracle = run_engine("greedy", batch, icfg).kept
        overlaps.append(overlap_ratio(kept, oracle).ratio)
        rows = np.searchsorted(batch.det_ids, kept.det_ids)
        dets[image.image_id] = (batch.boxes[rows], batch.scores[rows])
        gts[image.image_id] = np.array([g.box.as_tuple() for g in image.gt])
    ap = voc_ap(dets, gts).ap
    print(f"{engine:>14}: overlap {np.mean(overlaps):.3f}  AP {ap:.3f}")
