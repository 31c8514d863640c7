"""
Detection dumps and the command line
====================================

Write a synthetic dump, read it back, then drive the same file through the
``nmsforge`` command line.
"""

import csv
import tempfile
from pathlib import Path

from nmsforge import SyntheticSpec, generate_synthetic, read_dump, write_dump
from nmsforge.cli import main

work = Path(tempfile.mkdtemp())
dump_path = work / "scenes.jsonl"
write_dump(generate_synthetic(SyntheticSpec(seed=7, n_scenes=3, boxes_per_scene=50)), dump_path)
print(dump_path.read_text().splitlines()[0])

dump = read_dump(dump_path)
print(len(dump), "images,", sum(len(im.dets) for im in dump), "detections, sources:", dump.has_sources)

main(["run", "--dump", str(dump_path), "--engines", "greedy,psrr,legacy-ratio", "--trace",
      "--out-dir", str(work)])
with open(work / "overlap.csv") as fh:
    for row in csv.DictReader(fh):
        print(row["image_id"], row["engine"], row["n_greedy"], row["n_kept"], row["overlap"])

main(["ablate", "--which", "shift", "--dump", str(dump_path), "--out-dir", str(work)])
print((work / "ablate.csv").read_text())
