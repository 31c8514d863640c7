"""
Greedy NMS as the reference answer
==================================

Three overlapping boxes around one object plus a lone box elsewhere.
"""

import numpy as np

from nmsforge import BoundingBox, Detection, greedy_nms, iou

dets = [
    Detection(BoundingBox(10, 10, 110, 110), 0.90, class_id=0, det_id=0),
    Detection(BoundingBox(15, 12, 112, 108), 0.75, class_id=0, det_id=1),
    Detection(BoundingBox(30, 30, 120, 130), 0.60, class_id=0, det_id=2),
    Detection(BoundingBox(300, 200, 360, 280), 0.40, class_id=0, det_id=3),
]

# pairwise overlaps with the top box
for d in dets[1:]:
    print(f"IoU(0, {d.det_id}) = {iou(dets[0].box, d.box):.3f}")

kept = greedy_nms(dets, iou_thresh=0.5)
print("kept ids:", kept.det_ids)
print("kept scores:", np.round(kept.scores, 2))

# a permissive threshold lets the near-duplicates through
print("kept at 0.9:", greedy_nms(dets, iou_thresh=0.9).det_ids)
