"""
Projecting boxes onto score maps
================================

Every box lands in one cell of one (scale, ratio) channel. The cell comes
from the box center, the channel from its area and aspect ratio.
"""

from nmsforge import NmsConfig, build_score_maps
from nmsforge.boxcore import BoundingBox, Detection
from nmsforge.poolnms import channel_kernels
from nmsforge.scoremap import channel_recover

cfg = NmsConfig(image_w=320, image_h=320)
print("map shape (channels, Y, X):", build_score_maps([], cfg).shape)

# a 100x50 box is closest to the 64^2 area with ratio 0.5
print("channel of a 100x50 box:", channel_recover(100, 50, cfg.scales, cfg.ratios))

dets = [
    Detection(BoundingBox(0, 0, 100, 50), 0.8, 0, 0),
    Detection(BoundingBox(2, 1, 98, 52), 0.6, 0, 1),
    Detection(BoundingBox(160, 160, 300, 300), 0.5, 0, 2),
]
stack = build_score_maps(dets, cfg)

# the first two share a cell; max assignment keeps the 0.8 box there
for c, y, x, score, det_id in stack.cells():
    print(f"channel {c:2d} cell ({y}, {x}) score {score:.2f} id {det_id}")

# pooling kernels grow with the channel's default box
for c, k in enumerate(channel_kernels(cfg)):
    scale, ratio = stack.channel_meta(c)
    print(f"channel {c:2d}: scale {scale:>6.0f} ratio {ratio:3.1f} kernel {k.k_x}x{k.k_y}")
