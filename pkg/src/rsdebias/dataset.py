"""COCO annotation ingest, data-group assignment and evaluation partitions."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import AnnotationParseError, EmptyDatasetError, StructuralError

logger = logging.getLogger(__name__)

SMALL_AREA = 32 * 32
LARGE_AREA = 96 * 96

REGION_CENTER = "center"
REGION_MIDDLE = "middle"
REGION_OUTER = "outer"

FREQUENT = "frequent"
COMMON = "common"
RARE = "rare"


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def is_valid(self, width: float, height: float) -> bool:
        coords = (self.x1, self.y1, self.x2, self.y2)
        return (
            all(math.isfinite(c) for c in coords)
            and 0 <= self.x1 < self.x2 <= width
            and 0 <= self.y1 < self.y2 <= height
        )

    def clamp(self, width: float, height: float) -> BBox:
        return BBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> BBox:
        return cls(x, y, x + w, y + h)


@dataclass(frozen=True)
class Instance:
    instance_id: int
    image_id: int
    class_id: int
    bbox: BBox
    embedding_id: int | None = None


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    instances: tuple[Instance, ...] = ()
    file_name: str | None = None

    @property
    def class_set(self) -> frozenset[int]:
        return frozenset(inst.class_id for inst in self.instances)


@dataclass(frozen=True)
class GroupKey:
    class_id: int
    size_bin: int
    pos_bin: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.class_id, self.size_bin, self.pos_bin)


@dataclass(frozen=True)
class BinningConfig:
    """Size and horizontal-position binning.

    With the default thresholds a box is small when its area is below 32²,
    large when its area exceeds 96², and normal otherwise (both 32² and 96²
    themselves are normal).
    """

    s_bins: int = 3
    size_thresholds: tuple[float, ...] = (float(SMALL_AREA), float(LARGE_AREA))
    u_bins: int = 3

    def __post_init__(self):
        thresholds = tuple(float(t) for t in self.size_thresholds)
        object.__setattr__(self, "size_thresholds", thresholds)
        if self.s_bins < 1 or self.u_bins < 1:
            raise ValueError("bin counts must be positive")
        if len(thresholds) != self.s_bins - 1:
            raise ValueError("need exactly s_bins - 1 size thresholds")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("size thresholds must be strictly increasing")
        if any(t <= 0 or not math.isfinite(t) for t in thresholds):
            raise ValueError("size thresholds must be positive and finite")

    @property
    def num_bins(self) -> int:
        return self.s_bins * self.u_bins

    def size_bin(self, area: float) -> int:
        t = self.size_thresholds
        if not t:
            return 0
        return sum(area >= x for x in t[:-1]) + (area > t[-1])

    def size_range(self, size_bin: int) -> tuple[float, float]:
        """Area interval ``(lo, hi)`` covered by ``size_bin``; hi is inf for the top bin."""
        edges = (0.0,) + self.size_thresholds + (math.inf,)
        return edges[size_bin], edges[size_bin + 1]

    def pos_bin(self, cx: float, width: float) -> int:
        return min(int(math.floor(self.u_bins * cx / width)), self.u_bins - 1)

    def to_dict(self) -> dict:
        return {
            "s_bins": self.s_bins,
            "size_thresholds": list(self.size_thresholds),
            "u_bins": self.u_bins,
        }

    @classmethod
    def from_dict(cls, d: dict) -> BinningConfig:
        return cls(
            s_bins=int(d.get("s_bins", 3)),
            size_thresholds=tuple(d.get("size_thresholds", (SMALL_AREA, LARGE_AREA))),
            u_bins=int(d.get("u_bins", 3)),
        )


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...]
    classes: tuple[str, ...]
    category_ids: tuple[int, ...] = ()
    dropped_boxes: int = 0
    _digest: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise StructuralError("class names must be unique")

    @property
    def total_instances(self) -> int:
        return sum(len(img.instances) for img in self.images)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def instances(self) -> Iterable[tuple[Instance, ImageRecord]]:
        for img in self.images:
            for inst in img.instances:
                yield inst, img

    def image(self, image_id: int) -> ImageRecord:
        for img in self.images:
            if img.image_id == image_id:
                return img
        raise KeyError(image_id)

    def class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for inst, _ in self.instances():
            counts[inst.class_id] += 1
        return counts

    def digest(self) -> str:
        """SHA-256 over a canonical serialization of classes and geometry."""
        if self._digest is None:
            payload = {
                "classes": list(self.classes),
                "images": [
                    [
                        img.image_id,
                        img.width,
                        img.height,
                        [
                            [i.instance_id, i.class_id, *i.bbox.as_list()]
                            for i in img.instances
                        ],
                    ]
                    for img in self.images
                ],
            }
            blob = json.dumps(payload, separators=(",", ":"), sort_keys=True)
            object.__setattr__(self, "_digest", hashlib.sha256(blob.encode()).hexdigest())
        return self._digest


def _parse_json(path: Path):
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise AnnotationParseError(path, exc.start, "not UTF-8") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise AnnotationParseError(path, offset, exc.msg) from exc


def dataset_from_coco(data: dict, source: str = "<memory>") -> Dataset:
    """Build a normalized :class:`Dataset` from a parsed COCO dictionary."""
    if not isinstance(data, dict):
        raise StructuralError(f"{source}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise StructuralError(f"{source}: missing list field {key!r}")

    categories = sorted(data["categories"], key=lambda c: c["id"])
    cat_ids = [int(c["id"]) for c in categories]
    if len(set(cat_ids)) != len(cat_ids):
        raise StructuralError("duplicate category ids", sorted(cat_ids))
    cat_index = {cid: k for k, cid in enumerate(cat_ids)}
    names = [str(c.get("name", c["id"])) for c in categories]

    image_meta = {}
    bad_images = []
    for im in data["images"]:
        iid = int(im["id"])
        w, h = im.get("width"), im.get("height")
        if iid in image_meta or not w or not h or w <= 0 or h <= 0:
            bad_images.append(iid)
            continue
        image_meta[iid] = (int(w), int(h), im.get("file_name"))
    if bad_images:
        raise StructuralError("images with duplicate ids or invalid size", bad_images)

    unknown_images, unknown_cats, bad_boxes, seen = [], [], [], set()
    per_image: dict[int, list[Instance]] = {iid: [] for iid in image_meta}
    dropped = 0
    for ann in data["annotations"]:
        aid = int(ann["id"])
        if aid in seen:
            bad_boxes.append(aid)
            continue
        seen.add(aid)
        iid, cid = int(ann["image_id"]), int(ann["category_id"])
        if iid not in image_meta:
            unknown_images.append(iid)
            continue
        if cid not in cat_index:
            unknown_cats.append(cid)
            continue
        bbox = ann.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4:
            bad_boxes.append(aid)
            continue
        vals = [float(v) for v in bbox]
        if not all(math.isfinite(v) for v in vals):
            bad_boxes.append(aid)
            continue
        w, h, _ = image_meta[iid]
        box = BBox.from_xywh(*vals).clamp(w, h)
        if box.x2 <= box.x1 or box.y2 <= box.y1:
            dropped += 1
            continue
        per_image[iid].append(Instance(aid, iid, cat_index[cid], box))

    if unknown_images:
        raise StructuralError("annotations reference unknown image ids", sorted(set(unknown_images)))
    if unknown_cats:
        raise StructuralError("annotations reference unknown category ids", sorted(set(unknown_cats)))
    if bad_boxes:
        raise StructuralError("annotations with duplicate ids or malformed bbox", bad_boxes)
    if dropped:
        logger.warning("%s: dropped %d zero-area boxes after clamping", source, dropped)

    images = tuple(
        ImageRecord(iid, w, h, tuple(per_image[iid]), fname)
        for iid, (w, h, fname) in sorted(image_meta.items())
    )
    return Dataset(images, tuple(names), tuple(cat_ids), dropped)


def load_annotations(path, config: BinningConfig | None = None) -> Dataset:
    """Load a COCO-style annotation file.

    Boxes are converted from ``[x, y, w, h]`` to corner form and clamped to
    the image; boxes that end up with zero area are dropped and counted in
    ``Dataset.dropped_boxes``. ``config`` is accepted for symmetry with the
    other loaders; binning is applied lazily by :func:`assign_group`.
    """
    path = Path(path)
    return dataset_from_coco(_parse_json(path), str(path))


def assign_group(inst: Instance, img: ImageRecord, config: BinningConfig) -> GroupKey:
    cx, _ = inst.bbox.center
    return GroupKey(
        inst.class_id,
        config.size_bin(inst.bbox.area),
        config.pos_bin(cx, img.width),
    )


INNER_SCALE = math.sqrt(1 / 3)
OUTER_SCALE = math.sqrt(2 / 3)


def _inside_centered(x, y, width, height, scale) -> bool:
    half_w = width * scale / 2
    half_h = height * scale / 2
    return abs(x - width / 2) <= half_w and abs(y - height / 2) <= half_h


def region_of_point(x: float, y: float, width: float, height: float) -> str:
    if _inside_centered(x, y, width, height, INNER_SCALE):
        return REGION_CENTER
    if _inside_centered(x, y, width, height, OUTER_SCALE):
        return REGION_MIDDLE
    return REGION_OUTER


def partition_position(inst: Instance, img: ImageRecord) -> str:
    """Center/middle/outer region of the box center.

    Regions are nested centered rectangles holding 1/3 and 2/3 of the image
    area; points on a boundary go to the inner region.
    """
    return region_of_point(*inst.bbox.center, img.width, img.height)


def partition_frequency(ds: Dataset) -> dict[int, str]:
    if ds.total_instances == 0 or ds.num_classes == 0:
        raise EmptyDatasetError("frequency partition needs a nonempty dataset")
    counts = ds.class_counts()
    n = len(counts)
    k = (3 * n + 9) // 10  # ceil(0.3 n) without float error
    ranked = sorted(range(n), key=lambda c: (-counts[c], c))
    out = {c: COMMON for c in range(n)}
    for c in ranked[-k:]:
        out[c] = RARE
    for c in ranked[:k]:
        out[c] = FREQUENT
    return out


def group_records(ds: Dataset, config: BinningConfig) -> list[dict]:
    """One assignment record per instance, in dataset order."""
    rows = []
    for inst, img in ds.instances():
        key = assign_group(inst, img, config)
        rows.append(
            {
                "instance_id": inst.instance_id,
                "image_id": inst.image_id,
                "class_id": key.class_id,
                "size_bin": key.size_bin,
                "pos_bin": key.pos_bin,
                "region": partition_position(inst, img),
            }
        )
    return rows


def write_group_report(ds: Dataset, config: BinningConfig, path) -> int:
    rows = group_records(ds, config)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return len(rows)
