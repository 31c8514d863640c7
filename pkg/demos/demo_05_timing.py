"""
Runtime against the number of boxes
===================================

Greedy NMS grows roughly quadratically in the worst case; the map-based
engine does a fixed amount of pooling plus linear projection work.
"""

from nmsforge.cli import cmd_timing
from nmsforge.ingest import SyntheticSpec

summary, _ = cmd_timing([500, 1000, 2000, 4000, 8000], ["greedy", "psrr"], SyntheticSpec(seed=0), repeats=5)
print(f"{'N':>6} {'engine':>7} {'median ms':>10} {'rr ms':>7} {'ps ms':>7}")
for row in summary:
    _, _, engine, n, _, median, _, rr, ps = row
    extra = f"{rr:7.2f} {ps:7.2f}" if rr is not None else ""
    print(f"{n:6d} {engine:>7} {median:10.2f} {extra}")
