"""
Detection dumps and synthetic scenes.

A dump is a UTF-8 text file of JSON lines. The first line is the header
``{"format":"nmsdump","version":1}``; every following line is one image::

    {"dets": [{"class": 0, "score": 0.9, "x1": .., "y1": .., "x2": .., "y2": ..,
               "src": {"channel": 4, "x1": .., "y1": .., "x2": .., "y2": ..}}],
     "gt": [{"class": 0, "x1": .., "y1": .., "x2": .., "y2": ..}],
     "h": 600, "image_id": "0", "w": 1000}

``src`` and ``gt`` are optional. Detection ids are positions in ``dets``.
An empty dump is written as an empty file, and an empty file reads back as
an empty dump.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .boxcore import (
    BoundingBox,
    Detection,
    DetectionBatch,
    NmsConfig,
    SourceAnchor,
    normalize,
    pairwise_iou,
)
from .scoremap import nearest_channel_box

FORMAT_HEADER = {"format": "nmsdump", "version": 1}


class DumpFormatError(ValueError):
    """Malformed dump content; the message names the line and field."""


@dataclass(frozen=True)
class GroundTruth:
    box: BoundingBox
    class_id: int


@dataclass
class ImageRecord:
    image_id: str | int
    width: float
    height: float
    dets: list[Detection] = field(default_factory=list)
    gt: list[GroundTruth] | None = None

    @cached_property
    def batch(self) -> DetectionBatch:
        return DetectionBatch.from_detections(self.dets)


@dataclass
class DetectionDump:
    images: list[ImageRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    @property
    def has_sources(self) -> bool:
        return all(d.source is not None for im in self.images for d in im.dets)

    @property
    def has_groundtruth(self) -> bool:
        return any(im.gt is not None for im in self.images)


def _box_record(box: BoundingBox) -> dict:
    return {"x1": box.x1, "y1": box.y1, "x2": box.x2, "y2": box.y2}


def _image_record(image: ImageRecord) -> dict:
    dets = []
    for d in image.dets:
        rec = _box_record(d.box)
        rec.update(score=d.score, **{"class": d.class_id})
        if d.source is not None:
            rec["src"] = dict(_box_record(d.source.box), channel=d.source.channel)
        dets.append(rec)
    out = {"image_id": image.image_id, "w": image.width, "h": image.height, "dets": dets}
    if image.gt is not None:
        out["gt"] = [dict(_box_record(g.box), **{"class": g.class_id}) for g in image.gt]
    return out


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False, ensure_ascii=False)


def write_dump(dump: DetectionDump, path) -> None:
    """Write ``dump`` deterministically (sorted keys, shortest round-trip floats)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if not dump.images:
            return
        fh.write(_dumps(FORMAT_HEADER) + "\n")
        for image in dump.images:
            fh.write(_dumps(_image_record(image)) + "\n")


def _reject_constant(token):
    raise ValueError(f"non-finite number {token}")


class _LineParser:
    def __init__(self, lineno: int):
        self.lineno = lineno

    def fail(self, where: str, msg: str):
        raise DumpFormatError(f"line {self.lineno}: field '{where}': {msg}")

    def number(self, rec: dict, key: str, where: str) -> float:
        if key not in rec:
            self.fail(f"{where}{key}", "missing")
        value = rec[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"{where}{key}", f"expected a number, got {value!r}")
        if not math.isfinite(value):
            self.fail(f"{where}{key}", "non-finite number")
        return float(value)

    def integer(self, rec: dict, key: str, where: str) -> int:
        value = rec.get(key)
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(f"{where}{key}", f"expected an integer, got {value!r}")
        return value

    def box(self, rec: dict, where: str) -> BoundingBox:
        if not isinstance(rec, dict):
            self.fail(where.rstrip("."), "expected an object")
        coords = [self.number(rec, k, where) for k in ("x1", "y1", "x2", "y2")]
        return normalize(BoundingBox(*coords))


def _parse_image(obj, lineno: int) -> ImageRecord:
    p = _LineParser(lineno)
    if not isinstance(obj, dict):
        p.fail("<record>", "expected a JSON object")
    if "image_id" not in obj:
        p.fail("image_id", "missing")
    width = p.number(obj, "w", "")
    height = p.number(obj, "h", "")
    if width <= 0:
        p.fail("w", "must be positive")
    if height <= 0:
        p.fail("h", "must be positive")
    raw_dets = obj.get("dets", [])
    if not isinstance(raw_dets, list):
        p.fail("dets", "expected a list")
    dets = []
    for i, rec in enumerate(raw_dets):
        where = f"dets[{i}]."
        box = p.box(rec, where)
        score = p.number(rec, "score", where)
        if not 0.0 <= score <= 1.0:
            p.fail(f"{where}score", f"must lie in [0, 1], got {score}")
        class_id = p.integer(rec, "class", where)
        source = None
        if rec.get("src") is not None:
            src = rec["src"]
            src_box = p.box(src, f"{where}src.")
            channel = p.integer(src, "channel", f"{where}src.")
            if channel < 0:
                p.fail(f"{where}src.channel", "must be >= 0")
            source = SourceAnchor(src_box, channel)
        dets.append(Detection(box, score, class_id, i, source))
    gt = None
    if obj.get("gt") is not None:
        if not isinstance(obj["gt"], list):
            p.fail("gt", "expected a list")
        gt = [
            GroundTruth(p.box(rec, f"gt[{i}]."), p.integer(rec, "class", f"gt[{i}]."))
            for i, rec in enumerate(obj["gt"])
        ]
    return ImageRecord(obj["image_id"], width, height, dets, gt)


def read_dump(path) -> DetectionDump:
    """Parse a dump file.

    Raises:
        DumpFormatError: malformed JSON, a missing or invalid field, or a
            non-finite number.
    """
    images = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line, parse_constant=_reject_constant)
            except ValueError as exc:
                raise DumpFormatError(f"line {lineno}: field '<record>': {exc}") from exc
            if isinstance(obj, dict) and obj.get("format") == FORMAT_HEADER["format"]:
                if obj.get("version") != FORMAT_HEADER["version"]:
                    raise DumpFormatError(
                        f"line {lineno}: field 'version': unsupported version {obj.get('version')!r}"
                    )
                continue
            images.append(_parse_image(obj, lineno))
    return DetectionDump(images)


@dataclass(frozen=True)
class SyntheticSpec:
    """Clustered synthetic detector output.

    Each cluster is one latent object. Its candidates are the object box
    perturbed by ``center_jitter`` (fraction of object size), ``size_jitter``
    and ``ratio_jitter`` (log-normal std). Each candidate also gets a source
    anchor: the object box perturbed by the larger ``anchor_jitter`` and then
    snapped to the anchor grid (cell centers) and the nearest default
    channel shape. ``background_fraction`` of the boxes are isolated low
    scoring false positives.
    """

    seed: int = 0
    n_scenes: int = 100
    boxes_per_scene: int = 200
    n_clusters: int = 10
    n_classes: int = 1
    image_w: float = 1000.0
    image_h: float = 600.0
    min_object_side: float = 40.0
    max_object_side: float = 400.0
    center_jitter: float = 0.08
    size_jitter: float = 0.10
    ratio_jitter: float = 0.10
    anchor_jitter: float = 0.5
    background_fraction: float = 0.0
    score_sharpness: float = 4.0
    score_noise: float = 0.05

    def __post_init__(self):
        if self.n_scenes < 0 or self.boxes_per_scene < 0:
            raise ValueError("n_scenes and boxes_per_scene must be non-negative")
        if self.n_clusters < 1 or self.n_classes < 1:
            raise ValueError("n_clusters and n_classes must be >= 1")
        if not 0.0 <= self.background_fraction <= 1.0:
            raise ValueError("background_fraction must lie in [0, 1]")
        if self.min_object_side <= 0 or self.max_object_side < self.min_object_side:
            raise ValueError("object side range must be positive and ordered")


def _anchor_for(box: np.ndarray, config: NmsConfig) -> tuple[BoundingBox, int]:
    """Snap a box to the anchor grid: cell-centered, default channel shape."""
    w, h = box[2] - box[0], box[3] - box[1]
    channel, aw, ah = nearest_channel_box(w, h, config)
    beta = config.beta
    cx = (np.floor(np.clip((box[0] + box[2]) / 2, 0, config.image_w - 1e-9) / beta) + 0.5) * beta
    cy = (np.floor(np.clip((box[1] + box[3]) / 2, 0, config.image_h - 1e-9) / beta) + 0.5) * beta
    return BoundingBox(float(cx - aw / 2), float(cy - ah / 2), float(cx + aw / 2), float(cy + ah / 2)), channel


def _perturb(rng, truth: np.ndarray, n: int, center: float, size: float, ratio: float) -> np.ndarray:
    w, h = truth[2] - truth[0], truth[3] - truth[1]
    cx, cy = (truth[0] + truth[2]) / 2, (truth[1] + truth[3]) / 2
    cx = cx + rng.normal(0.0, center, n) * w
    cy = cy + rng.normal(0.0, center, n) * h
    area_scale = np.exp(rng.normal(0.0, size, n))
    ratio_scale = np.exp(rng.normal(0.0, ratio, n))
    nw = w * area_scale / np.sqrt(ratio_scale)
    nh = h * area_scale * np.sqrt(ratio_scale)
    return np.stack([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2], axis=1)


def _clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, height)
    return np.round(out, 3)


def _scene(rng, spec: SyntheticSpec, config: NmsConfig, image_id) -> ImageRecord:
    W, H = spec.image_w, spec.image_h
    n_bg = int(round(spec.boxes_per_scene * spec.background_fraction))
    n_fg = spec.boxes_per_scene - n_bg
    per_cluster = np.bincount(rng.integers(0, spec.n_clusters, n_fg), minlength=spec.n_clusters)

    dets: list[Detection] = []
    gt: list[GroundTruth] = []
    lo, hi = np.log(spec.min_object_side), np.log(spec.max_object_side)
    for k in range(spec.n_clusters):
        side = np.exp(rng.uniform(lo, hi))
        r = np.exp(rng.uniform(np.log(0.4), np.log(2.5)))
        ow, oh = min(side / np.sqrt(r), W), min(side * np.sqrt(r), H)
        cx = rng.uniform(ow / 2, W - ow / 2)
        cy = rng.uniform(oh / 2, H - oh / 2)
        truth = np.array([cx - ow / 2, cy - oh / 2, cx + ow / 2, cy + oh / 2])
        class_id = int(rng.integers(0, spec.n_classes))
        peak = rng.uniform(0.5, 1.0)
        gt.append(GroundTruth(BoundingBox(*map(float, np.round(truth, 3))), class_id))

        n = int(per_cluster[k])
        boxes = _clip_boxes(
            _perturb(rng, truth, n, spec.center_jitter, spec.size_jitter, spec.ratio_jitter), W, H
        )
        anchors = _perturb(rng, truth, n, spec.center_jitter * (1 + spec.anchor_jitter),
                           spec.anchor_jitter, spec.anchor_jitter)
        fit = pairwise_iou(boxes, truth[None, :])[:, 0]
        scores = peak * fit**spec.score_sharpness + rng.normal(0.0, spec.score_noise, n)
        scores = np.round(np.clip(scores, 0.01, 1.0), 6)
        for b, a, s in zip(boxes, anchors, scores):
            src_box, channel = _anchor_for(a, config)
            dets.append(Detection(BoundingBox(*map(float, b)), float(s), class_id, len(dets),
                                  SourceAnchor(src_box, channel)))

    for _ in range(n_bg):
        side = np.exp(rng.uniform(lo, hi))
        r = np.exp(rng.uniform(np.log(0.4), np.log(2.5)))
        bw, bh = min(side / np.sqrt(r), W), min(side * np.sqrt(r), H)
        cx, cy = rng.uniform(bw / 2, W - bw / 2), rng.uniform(bh / 2, H - bh / 2)
        box = _clip_boxes(np.array([[cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2]]), W, H)[0]
        score = float(np.round(rng.uniform(0.01, 0.2), 6))
        src_box, channel = _anchor_for(box, config)
        dets.append(Detection(BoundingBox(*map(float, box)), score, int(rng.integers(0, spec.n_classes)),
                              len(dets), SourceAnchor(src_box, channel)))
    return ImageRecord(image_id, W, H, dets, gt)


def generate_synthetic(spec: SyntheticSpec, config: NmsConfig | None = None) -> DetectionDump:
    """Generate ``spec.n_scenes`` scenes; the same spec always yields the same dump.

    ``config`` supplies the anchor grid (beta, scales, ratios) used for the
    source anchors; image size always comes from ``spec``.
    """
    config = config or NmsConfig()
    config = replace(config, image_w=spec.image_w, image_h=spec.image_h)
    rng = np.random.default_rng(spec.seed)
    return DetectionDump([_scene(rng, spec, config, str(i)) for i in range(spec.n_scenes)])
