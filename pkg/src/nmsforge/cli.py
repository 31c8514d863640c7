"""
Command line front end.

    nmsforge gen     --out scenes.jsonl [--seed 7 --scenes 100 ...]
    nmsforge run     --manifest run.json [--engines greedy,psrr --trace]
    nmsforge timing  --n-list 1000,2000,4000,8000 --engines greedy,psrr
    nmsforge ablate  --which {assignment,schedule,shift,recovery} [--dump ...]

A manifest is a JSON object::

    {"config": {"alpha": 0.75, "beta": 16, ...},
     "input": {"dump": "scenes.jsonl"} | {"synthetic": {"seed": 7, ...}},
     "engines": ["greedy", "psrr"],
     "outputs": {"overlap": "overlap.csv", "ap": "ap.csv", "trace": "trace.csv"},
     "trace": false}

Flags override manifest entries; ``NMSFORGE_SEED`` overrides every seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import uuid
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .boxcore import NmsConfig, UnsupportedInputError
from .engines import ENGINES, EngineResult, check_engine, needs_sources, run_engine, run_maxpool
from .evalmetrics import ApResult, mean_ap, overlap_ratio, time_sweep, voc_ap
from .ingest import DetectionDump, DumpFormatError, SyntheticSpec, generate_synthetic, read_dump, write_dump
from .poolnms import PoolStage, PyramidSchedule, schedule_of

log = logging.getLogger("nmsforge")

OVERLAP_HEADER = ["schema", "image_id", "class_id", "engine", "n_candidates", "n_greedy", "n_kept",
                  "n_common", "overlap", "sparsity"]
AP_HEADER = ["schema", "engine", "class_id", "n_gt", "ap"]
TRACE_HEADER = ["schema", "image_id", "class_id", "engine", "stage", "stage_kind", "nonempty", "sparsity"]
TIMING_HEADER = ["schema", "run_id", "engine", "n_boxes", "repeats", "median_ms", "iqr_ms",
                 "rr_median_ms", "ps_median_ms"]
SAMPLES_HEADER = ["schema", "run_id", "engine", "n_boxes", "repeat", "total_ms", "rr_ms", "ps_ms"]
ABLATE_HEADER = ["schema", "ablation", "setting", "projection", "schedule", "shifted", "assignment",
                 "n_images", "n_candidates", "n_greedy", "n_kept", "mean_overlap", "map"]
ABLATIONS = ("assignment", "schedule", "shift", "recovery")


class CliError(Exception):
    """Invalid manifest, flags or input; reported without a traceback."""


@dataclass
class RunManifest:
    config: NmsConfig = field(default_factory=NmsConfig)
    dump: str | None = None
    synthetic: SyntheticSpec | None = None
    engines: list[str] = field(default_factory=lambda: ["greedy", "psrr"])
    outputs: dict[str, str] = field(default_factory=dict)
    trace: bool = False

    def validate(self) -> None:
        if not self.engines:
            raise CliError("at least one engine is required")
        for name in self.engines:
            try:
                check_engine(name)
            except ValueError as exc:
                raise CliError(str(exc)) from None
        if self.dump is None and self.synthetic is None:
            raise CliError("no input: give a dump path or a synthetic spec")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (float, np.floating)):
        return f"{x:.6f}"
    return str(x)


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([[_fmt(v) for v in row] for row in rows])
    return buf.getvalue()


def _write_all(outputs: dict[Path, str]) -> None:
    for path, text in outputs.items():
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _known(cls, values: dict, what: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise CliError(f"unknown {what} keys: {', '.join(sorted(unknown))}")
    return values


def _make_config(values: dict) -> NmsConfig:
    try:
        return NmsConfig(**_known(NmsConfig, values, "config"))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from None


def _make_spec(values: dict) -> SyntheticSpec:
    try:
        return SyntheticSpec(**_known(SyntheticSpec, values, "synthetic"))
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid synthetic spec: {exc}") from None


def load_manifest(path: str | None) -> RunManifest:
    if path is None:
        return RunManifest()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read manifest {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError("manifest must be a JSON object")
    _known(RunManifest, {k: v for k, v in raw.items() if k != "input"}, "manifest")
    source = raw.get("input", {})
    base = Path(path).parent
    dump = source.get("dump")
    if dump is not None and not Path(dump).is_absolute():
        dump = str(base / dump)
    synthetic = _make_spec(source["synthetic"]) if "synthetic" in source else None
    return RunManifest(
        config=_make_config(raw.get("config", {})),
        dump=dump,
        synthetic=synthetic,
        engines=list(raw.get("engines", ["greedy", "psrr"])),
        outputs=dict(raw.get("outputs", {})),
        trace=bool(raw.get("trace", False)),
    )


def _apply_overrides(manifest: RunManifest, args) -> RunManifest:
    overrides = {k: getattr(args, k) for k in ("alpha", "beta", "top_k", "greedy_iou", "assignment")
                 if getattr(args, k, None) is not None}
    config = manifest.config
    if overrides:
        config = _make_config({**asdict(config), **overrides})
    if getattr(args, "dump", None):
        manifest = replace(manifest, dump=args.dump, synthetic=None)
    if getattr(args, "engines", None):
        manifest = replace(manifest, engines=[e.strip() for e in args.engines.split(",") if e.strip()])
    if getattr(args, "trace", False):
        manifest = replace(manifest, trace=True)
    seed = os.environ.get("NMSFORGE_SEED", getattr(args, "seed", None))
    if seed is not None:
        try:
            seed = int(seed)
        except ValueError:
            raise CliError(f"seed must be an integer, got {seed!r}") from None
        config = replace(config, seed=seed)
        if manifest.synthetic is not None:
            manifest = replace(manifest, synthetic=replace(manifest.synthetic, seed=seed))
    if manifest.dump is None and manifest.synthetic is None:
        manifest = replace(manifest, synthetic=SyntheticSpec(seed=config.seed))
    return replace(manifest, config=config)


def _load_input(manifest: RunManifest) -> DetectionDump:
    if manifest.dump is not None:
        try:
            return read_dump(manifest.dump)
        except OSError as exc:
            raise CliError(f"cannot read dump: {exc}") from None
        except DumpFormatError as exc:
            raise CliError(f"{manifest.dump}: {exc}") from None
    return generate_synthetic(manifest.synthetic, manifest.config)


def _require_sources(dump: DetectionDump, engines) -> None:
    legacy = [e for e in engines if needs_sources(e)]
    if legacy and not dump.has_sources:
        raise CliError(
            f"engine(s) {', '.join(legacy)} require a source anchor ('src') on every detection; "
            "the input dump lacks them"
        )


def _image_config(config: NmsConfig, image) -> NmsConfig:
    return replace(config, image_w=image.width, image_h=image.height)


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _per_class_tasks(dump: DetectionDump):
    for image in dump:
        for cls, sub in sorted(image.batch.by_class().items()):
            yield image, cls, sub


def _ap_rows(label: str, kept_boxes: dict, dump: DetectionDump) -> list[ApResult]:
    """AP per class for one engine; kept_boxes maps (image_id, class) -> (boxes, scores)."""
    classes = sorted({c for (_, c) in kept_boxes} | {g.class_id for im in dump if im.gt for g in im.gt})
    results = []
    for cls in classes:
        dets = {}
        gts = {}
        for im in dump:
            key = str(im.image_id)
            dets[key] = kept_boxes.get((key, cls), (np.zeros((0, 4)), np.zeros(0)))
            gts[key] = np.array([g.box.as_tuple() for g in (im.gt or []) if g.class_id == cls]).reshape(-1, 4)
        results.append(voc_ap(dets, gts, class_id=cls))
    return results


def cmd_run(manifest: RunManifest, out_dir: Path, workers: int = 1) -> dict[Path, str]:
    """Run every engine on every image/class; returns CSV texts keyed by path."""
    manifest.validate()
    dump = _load_input(manifest)
    _require_sources(dump, manifest.engines)
    config = manifest.config
    approx = [e for e in manifest.engines if e != "greedy"]

    def work(task):
        image, cls, sub = task
        cfg = _image_config(config, image)
        oracle = run_engine("greedy", sub, cfg)
        return image, cls, sub, oracle, {e: run_engine(e, sub, cfg) for e in approx}

    results = _map(work, list(_per_class_tasks(dump)), workers)

    overlap_rows, trace_rows = [], []
    kept_boxes: dict[str, dict] = {e: {} for e in manifest.engines}
    for image, cls, sub, oracle, per_engine in results:
        image_id = str(image.image_id)
        by_id = {int(d): i for i, d in enumerate(sub.det_ids)}
        all_results = {"greedy": oracle, **per_engine}
        for name, res in all_results.items():
            if name in kept_boxes:
                idx = [by_id[i] for i in res.kept.det_ids]
                kept_boxes[name][(image_id, cls)] = (sub.boxes[idx], sub.scores[idx])
        for name, res in per_engine.items():
            rep = overlap_ratio(res.kept, oracle.kept)
            overlap_rows.append(["overlap/1", image_id, cls, name, len(sub), rep.n_greedy, rep.n_approx,
                                 rep.n_common, rep.ratio, res.sparsity])
            if manifest.trace:
                for stage, (kind, count) in enumerate(zip(res.stage_kinds, res.stage_counts)):
                    trace_rows.append(["trace/1", image_id, cls, name, stage, kind, count,
                                       count / res.total_cells])

    outputs = {out_dir / manifest.outputs.get("overlap", "overlap.csv"): _csv_text(OVERLAP_HEADER, overlap_rows)}
    if manifest.trace:
        outputs[out_dir / manifest.outputs.get("trace", "trace.csv")] = _csv_text(TRACE_HEADER, trace_rows)
    if dump.has_groundtruth:
        ap_rows = []
        for name in manifest.engines:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = _ap_rows(name, kept_boxes[name], dump)
                m = mean_ap(res)
            for r in res:
                if np.isnan(r.ap):
                    log.warning("class %s has no ground truth; excluded from mAP", r.class_id)
                ap_rows.append(["ap/1", name, r.class_id, r.n_gt, r.ap])
            ap_rows.append(["ap/1", name, "mAP", sum(r.n_gt for r in res), m])
        outputs[out_dir / manifest.outputs.get("ap", "ap.csv")] = _csv_text(AP_HEADER, ap_rows)
    return outputs


def cmd_timing(
    n_list: list[int],
    engines: list[str],
    spec: SyntheticSpec,
    repeats: int,
    config: NmsConfig | None = None,
    boxes_per_cluster: int = 20,
    warmup: int = 1,
):
    """Time each engine on one synthetic scene per N.

    Engines see every box (``top_k = N``). Returns ``(summary_rows, sample_rows)``.
    """
    if not n_list:
        raise CliError("n_list must not be empty")
    if any(n < 1 for n in n_list) or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise CliError("n_list must hold positive, strictly ascending box counts")
    if repeats < 3:
        raise CliError(f"repeats must be >= 3, got {repeats}")
    for name in engines:
        try:
            check_engine(name)
        except ValueError as exc:
            raise CliError(str(exc)) from None
    config = config or NmsConfig()
    run_id = uuid.uuid4().hex[:12]
    pools, configs = [], []
    for n in n_list:
        scene_spec = replace(spec, n_scenes=1, boxes_per_scene=n, n_clusters=max(1, n // boxes_per_cluster))
        image = generate_synthetic(scene_spec, config).images[0]
        pools.append(image.batch)
        configs.append(replace(_image_config(config, image), top_k=n))
    summary, samples = [], []
    for stats in time_sweep(engines, pools, repeats=repeats, warmup=warmup, configs=configs):
        name, n = stats.engine, stats.n_boxes
        rr = stats.phase_median_ms("rr") if stats.phases_ms else None
        ps = stats.phase_median_ms("ps") if stats.phases_ms else None
        summary.append(["timing/1", run_id, name, n, repeats, stats.median_ms, stats.iqr_ms, rr, ps])
        for i, total in enumerate(stats.samples_ms):
            samples.append(["timing-sample/1", run_id, name, n, i, total,
                            stats.phases_ms["rr"][i] if stats.phases_ms else None,
                            stats.phases_ms["ps"][i] if stats.phases_ms else None])
        log.info("N=%d %s median %.2f ms", n, name, stats.median_ms)
    return summary, samples


def ablation_grid(which: str, config: NmsConfig) -> list[tuple[str, NmsConfig, str, PyramidSchedule]]:
    """``(setting label, config, projection, schedule)`` cells of one ablation."""
    if which == "assignment":
        return [(a, replace(config, assignment=a), "recovery", schedule_of(config))
                for a in ("random", "sum", "max")]
    if which == "shift":
        return [(f"shifted={s}", config, "recovery", PyramidSchedule.parse(config.schedule, shifted=s))
                for s in (False, True)]
    if which == "schedule":
        cells = [(k, config, "recovery", PyramidSchedule.parse(k)) for k in ("single", "ratio", "scale", "all")]
        for text in ("single+ratio", "single+ratio+all", "single+ratio+scale+all"):
            cells.append((text, config, "recovery", PyramidSchedule.parse(text)))
            cells.append((f"reverse:{text}", config, "recovery", PyramidSchedule.parse(text, reverse=True)))
        return cells
    if which == "recovery":
        return [
            (f"{proj}/{kind}", config, proj, PyramidSchedule((PoolStage(kind, shifted=config.shifted),)))
            for proj in ("legacy", "spatial", "recovery")
            for kind in ("single", "ratio", "scale", "all")
        ]
    raise CliError(f"unknown ablation {which!r}; expected one of {', '.join(ABLATIONS)}")


def cmd_ablate(which: str, manifest: RunManifest, workers: int = 1) -> list[list]:
    dump = _load_input(manifest)
    grid = ablation_grid(which, manifest.config)
    if which == "recovery" and not dump.has_sources:
        raise CliError("the recovery ablation requires a source anchor ('src') on every detection")
    tasks = list(_per_class_tasks(dump))
    oracles = _map(lambda t: run_engine("greedy", t[2], _image_config(manifest.config, t[0])).kept, tasks, workers)

    rows = []
    for label, cfg, projection, schedule in grid:
        def work(task, cfg=cfg, projection=projection, schedule=schedule) -> EngineResult:
            image, _, sub = task
            return run_maxpool(sub, _image_config(cfg, image), projection, schedule)

        results = _map(work, tasks, workers)
        overlaps = [overlap_ratio(r.kept, o).ratio for r, o in zip(results, oracles)]
        map_value = None
        if dump.has_groundtruth:
            kept_boxes = {}
            for (image, cls, sub), r in zip(tasks, results):
                by_id = {int(d): i for i, d in enumerate(sub.det_ids)}
                idx = [by_id[i] for i in r.kept.det_ids]
                kept_boxes[(str(image.image_id), cls)] = (sub.boxes[idx], sub.scores[idx])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                map_value = mean_ap(_ap_rows(label, kept_boxes, dump))
        rows.append([
            "ablate/1", which, label, projection, schedule.label, schedule.stages[0].shifted, cfg.assignment,
            len(dump), sum(len(t[2]) for t in tasks), sum(len(o) for o in oracles),
            sum(len(r.kept) for r in results), float(np.mean(overlaps)) if overlaps else None, map_value,
        ])
    return rows


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="JSON run manifest")
    p.add_argument("--dump", help="detection dump (overrides the manifest input)")
    p.add_argument("--seed", type=int, help="seed for synthetic input and random assignment")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--greedy-iou", dest="greedy_iou", type=float)
    p.add_argument("--assignment", choices=("max", "sum", "random"))
    p.add_argument("--workers", type=int, default=1, help="threads for per-image work")
    p.add_argument("--out-dir", default=".", help="directory for CSV outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nmsforge", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run engines and compare them with the greedy oracle")
    _add_config_flags(p)
    p.add_argument("--engines", help=f"comma-separated subset of {','.join(ENGINES)}")
    p.add_argument("--trace", action="store_true", help="also write per-stage sparsity trace CSV")

    p = sub.add_parser("timing", help="execution time versus number of boxes")
    _add_config_flags(p)
    p.add_argument("--n-list", default="1000,2000,4000,8000")
    p.add_argument("--engines", default="greedy,psrr")
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--boxes-per-cluster", type=int, default=20)
    p.add_argument("--out", default="timing.csv")
    p.add_argument("--samples-out", help="optional per-repeat samples CSV")

    p = sub.add_parser("ablate", help="overlap (and mAP) over an ablation grid")
    _add_config_flags(p)
    p.add_argument("--which", required=True, choices=ABLATIONS)
    p.add_argument("--out", default="ablate.csv")

    p = sub.add_parser("gen", help="write a synthetic detection dump")
    p.add_argument("--manifest", help="JSON manifest whose input.synthetic seeds the spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--scenes", type=int)
    p.add_argument("--boxes", type=int)
    p.add_argument("--clusters", type=int)
    p.add_argument("--classes", type=int)
    return parser


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"expected comma-separated integers, got {text!r}") from None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen":
            manifest = load_manifest(args.manifest)
            spec = manifest.synthetic or SyntheticSpec()
            updates = {k: v for k, v in (("seed", args.seed), ("n_scenes", args.scenes),
                                         ("boxes_per_scene", args.boxes), ("n_clusters", args.clusters),
                                         ("n_classes", args.classes)) if v is not None}
            if "NMSFORGE_SEED" in os.environ:
                updates["seed"] = int(os.environ["NMSFORGE_SEED"])
            spec = _make_spec({**asdict(spec), **updates})
            write_dump(generate_synthetic(spec, manifest.config), args.out)
            return 0

        manifest = _apply_overrides(load_manifest(args.manifest), args)
        out_dir = Path(args.out_dir)
        if args.command == "run":
            _write_all(cmd_run(manifest, out_dir, args.workers))
        elif args.command == "timing":
            summary, samples = cmd_timing(
                _ints(args.n_list), [e.strip() for e in args.engines.split(",") if e.strip()],
                manifest.synthetic or SyntheticSpec(seed=manifest.config.seed), args.repeats,
                manifest.config, args.boxes_per_cluster, args.warmup,
            )
            outputs = {out_dir / args.out: _csv_text(TIMING_HEADER, summary)}
            if args.samples_out:
                outputs[out_dir / args.samples_out] = _csv_text(SAMPLES_HEADER, samples)
            _write_all(outputs)
        elif args.command == "ablate":
            _write_all({out_dir / args.out: _csv_text(ABLATE_HEADER, cmd_ablate(args.which, manifest, args.workers))})
    except CliError as exc:
        print(f"nmsforge: error: {exc}", file=sys.stderr)
        return 2
    except (UnsupportedInputError, ValueError) as exc:
        print(f"nmsforge: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
