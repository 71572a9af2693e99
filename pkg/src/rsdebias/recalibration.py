"""Inverse-RS layout recalibration.

Seed objects are moved to new (size, position) bins drawn with probability
proportional to ``(rs + eps) ** -tau``, their vertical centers are jittered,
and new objects of under-represented classes are injected.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import BBox, BinningConfig, Dataset, ImageRecord
from .errors import DataError, DegenerateLayoutError, PlacementError
from .scoring import RsTable

SEED = "seed"
MOVED = "moved"
INJECTED = "injected"
PROVENANCES = (SEED, MOVED, INJECTED)

MIN_AREA = 1.0
TOP_BIN_CAP = 0.9
MAX_PLACEMENT_ATTEMPTS = 8
DEFAULT_SIGMA_FRACTION = 0.05


@dataclass(frozen=True)
class RecalibConfig:
    tau: float = 1.0
    epsilon: float = 0.01
    kappa: float = 2.0
    sigma_y: float | None = None  # pixels; None means 5% of the canvas height
    max_new_instances: int = 2
    recalib_fraction: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError("tau must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.kappa >= 1:
            raise ValueError("kappa must be >= 1")
        if self.sigma_y is not None and not self.sigma_y >= 0:
            raise ValueError("sigma_y must be >= 0")
        if self.max_new_instances < 0:
            raise ValueError("max_new_instances must be >= 0")
        if not 0 <= self.recalib_fraction <= 1:
            raise ValueError("recalib_fraction must lie in [0, 1]")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be an unsigned 64-bit integer")

    def sigma_for(self, height: float) -> float:
        if self.sigma_y is None:
            return DEFAULT_SIGMA_FRACTION * height
        return self.sigma_y

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RecalibConfig:
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class LayoutEntry:
    class_id: int
    bbox: BBox
    provenance: str = SEED
    source_instance_id: int | None = None

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "bbox": self.bbox.as_list(),
            "provenance": self.provenance,
            "source_instance_id": self.source_instance_id,
        }


@dataclass
class Layout:
    image_id: int
    width: int
    height: int
    entries: list[LayoutEntry] = field(default_factory=list)
    placement_failures: int = 0

    @classmethod
    def from_image(cls, img: ImageRecord) -> Layout:
        entries = [
            LayoutEntry(inst.class_id, inst.bbox, SEED, inst.instance_id)
            for inst in img.instances
        ]
        return cls(img.image_id, img.width, img.height, entries)

    def validate(self, num_classes: int | None = None) -> None:
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"layout {self.image_id}: non-positive canvas size")
        for e in self.entries:
            if not e.bbox.is_valid(self.width, self.height):
                raise DataError(f"layout {self.image_id}: box {e.bbox.as_list()} outside canvas")
            if num_classes is not None and not 0 <= e.class_id < num_classes:
                raise DataError(f"layout {self.image_id}: class {e.class_id} out of range")
            if e.provenance not in PROVENANCES:
                raise DataError(f"layout {self.image_id}: bad provenance {e.provenance!r}")

    def class_ids(self) -> set[int]:
        return {e.class_id for e in self.entries}

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "entries": [e.to_dict() for e in self.entries],
            "placement_failures": self.placement_failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> Layout:
        try:
            entries = [
                LayoutEntry(
                    int(e["class_id"]),
                    BBox(*(float(v) for v in e["bbox"])),
                    e.get("provenance", SEED),
                    e.get("source_instance_id"),
                )
                for e in d["entries"]
            ]
            return cls(
                int(d["image_id"]), int(d["width"]), int(d["height"]), entries,
                int(d.get("placement_failures", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed layout record: {exc}") from exc


def read_layouts(path) -> list[Layout]:
    layouts = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            layouts.append(Layout.from_dict(d))
    return layouts


def write_layouts(layouts: Iterable[Layout], path, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for layout in layouts:
            d = layout.to_dict()
            if extra:
                d.update(extra)
            f.write(json.dumps(d, sort_keys=True) + "\n")


class LayoutPriors:
    """Per-class empirical aspect ratios (w/h) and normalized vertical centers."""

    def __init__(self, aspect: dict[int, np.ndarray] | None = None,
                 vcenter: dict[int, np.ndarray] | None = None):
        self.aspect = aspect or {}
        self.vcenter = vcenter or {}

    @classmethod
    def from_dataset(cls, ds: Dataset) -> LayoutPriors:
        aspect: dict[int, list[float]] = {}
        vcenter: dict[int, list[float]] = {}
        for inst, img in ds.instances():
            aspect.setdefault(inst.class_id, []).append(inst.bbox.width / inst.bbox.height)
            vcenter.setdefault(inst.class_id, []).append(inst.bbox.center[1] / img.height)
        return cls(
            {c: np.array(v) for c, v in aspect.items()},
            {c: np.array(v) for c, v in vcenter.items()},
        )

    def draw_aspect(self, class_id: int, rng: np.random.Generator) -> float:
        vals = self.aspect.get(class_id)
        if vals is None or len(vals) == 0:
            return 1.0
        return float(vals[rng.integers(len(vals))])

    def draw_vcenter(self, class_id: int, height: float, rng: np.random.Generator) -> float:
        vals = self.vcenter.get(class_id)
        if vals is None or len(vals) == 0:
            return float(rng.uniform(0.25 * height, 0.75 * height))
        return float(vals[rng.integers(len(vals))]) * height


def rng_for(rng_seed: int, image_id: int) -> np.random.Generator:
    """Per-layout generator; the same (seed, image) pair always yields the same stream."""
    h = hashlib.blake2b(f"{rng_seed}:{image_id}".encode(), digest_size=16).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(h, "big")))


def _draw_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def inverse_rs_probabilities(rs: np.ndarray, tau: float, epsilon: float) -> np.ndarray:
    w = np.power(np.asarray(rs, dtype=np.float64) + epsilon, -tau)
    return w / w.sum()


def size_position_probabilities(class_id: int, table: RsTable, cfg: RecalibConfig) -> np.ndarray:
    """Probabilities over the (size bin, position bin) grid of ``class_id``."""
    return inverse_rs_probabilities(table.class_rs(class_id), cfg.tau, cfg.epsilon)


def sample_size_position(class_id: int, table: RsTable, cfg: RecalibConfig,
                         rng: np.random.Generator) -> tuple[int, int]:
    probs = size_position_probabilities(class_id, table, cfg)
    s, u = divmod(_draw_index(probs.ravel(), rng), probs.shape[1])
    return s, u


def jitter_vertical(v: float, cfg: RecalibConfig, rng: np.random.Generator, height: float,
                    half_extent: float = 0.0) -> float:
    """Gaussian jitter of a vertical center, clamped so a box of the given half height fits."""
    sigma = cfg.sigma_for(height)
    v_new = v + rng.normal(0.0, sigma) if sigma > 0 else v
    lo, hi = half_extent, height - half_extent
    if lo > hi:
        return height / 2
    return float(min(max(v_new, lo), hi))


def new_class_probabilities(mean_rs: Sequence[float], present: Iterable[int], kappa: float,
                            tau: float, epsilon: float) -> np.ndarray:
    mean_rs = np.asarray(mean_rs, dtype=np.float64)
    context = np.ones_like(mean_rs)
    for c in present:
        context[c] = kappa
    w = context * np.power(mean_rs + epsilon, -tau)
    return w / w.sum()


def sample_new_class(present: Iterable[int], table: RsTable, cfg: RecalibConfig,
                     rng: np.random.Generator) -> int:
    mean_rs = [table.class_mean_rs[c] for c in range(table.num_classes)]
    probs = new_class_probabilities(mean_rs, present, cfg.kappa, cfg.tau, cfg.epsilon)
    return _draw_index(probs, rng)


def materialize_bbox(class_id: int, size_bin: int, pos_bin: int, v_center: float,
                     priors: LayoutPriors, binning: BinningConfig, rng: np.random.Generator,
                     width: float, height: float) -> BBox:
    """Realize a (size bin, position bin) pair as a concrete box on a width×height canvas.

    Area is log-uniform inside the bin (capped at 90% of the canvas), the
    aspect ratio comes from the class's empirical distribution and the
    horizontal center is uniform in the position band. The vertical center is
    ``v_center`` pulled inward just enough for the box to fit; boxes that
    overhang horizontally are shrunk about their center. A draw whose final
    box leaves either bin is retried, up to 8 times.
    """
    lo, hi = binning.size_range(size_bin)
    lo, hi = max(lo, MIN_AREA), min(hi, TOP_BIN_CAP * width * height)
    if lo >= hi:
        raise PlacementError(
            f"size bin {size_bin} cannot fit on a {width}x{height} canvas"
        )
    band_lo = width * pos_bin / binning.u_bins
    band_hi = width * (pos_bin + 1) / binning.u_bins
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        area = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        aspect = priors.draw_aspect(class_id, rng)
        w, h = math.sqrt(area * aspect), math.sqrt(area / aspect)
        scale = min(1.0, width / w, height / h)
        w, h = w * scale, h * scale
        cx = float(rng.uniform(band_lo, band_hi))
        cy = min(max(v_center, h / 2), height - h / 2)
        hw = min(w / 2, cx, width - cx)
        box = BBox(cx - hw, cy - h / 2, cx + hw, cy + h / 2).clamp(width, height)
        if (
            box.is_valid(width, height)
            and binning.size_bin(box.area) == size_bin
            and binning.pos_bin(box.center[0], width) == pos_bin
        ):
            return box
    raise PlacementError(
        f"no box for class {class_id} in bins ({size_bin}, {pos_bin}) "
        f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def recalibrate_layout(seed: Layout, priors: LayoutPriors, table: RsTable, cfg: RecalibConfig,
                       rng: np.random.Generator | None = None) -> Layout:
    """Produce a debiased copy of ``seed``.

    A ``ceil(recalib_fraction * N)`` subset of seed objects is moved to new
    bins (class kept), then between 0 and ``max_new_instances`` new objects
    are injected. Entries whose placement fails are dropped and counted in
    ``placement_failures``.
    """
    if rng is None:
        rng = rng_for(cfg.rng_seed, seed.image_id)
    W, H = seed.width, seed.height
    binning = table.binning
    n = len(seed.entries)
    n_move = math.ceil(cfg.recalib_fraction * n)
    chosen = set(rng.choice(n, size=n_move, replace=False).tolist()) if n_move else set()

    failures = 0
    entries: list[LayoutEntry] = []
    for idx, entry in enumerate(seed.entries):
        if idx not in chosen:
            entries.append(entry)
            continue
        s, u = sample_size_position(entry.class_id, table, cfg, rng)
        v = jitter_vertical(entry.bbox.center[1], cfg, rng, H)
        try:
            box = materialize_bbox(entry.class_id, s, u, v, priors, binning, rng, W, H)
        except PlacementError:
            failures += 1
            continue
        source = entry.source_instance_id
        entries.append(LayoutEntry(entry.class_id, box, MOVED, source))

    n_new = int(rng.integers(0, cfg.max_new_instances + 1))
    for _ in range(n_new):
        present = {e.class_id for e in entries}
        c = sample_new_class(present, table, cfg, rng)
        s, u = sample_size_position(c, table, cfg, rng)
        v = priors.draw_vcenter(c, H, rng)
        try:
            box = materialize_bbox(c, s, u, v, priors, binning, rng, W, H)
        except PlacementError:
            failures += 1
            continue
        entries.append(LayoutEntry(c, box, INJECTED, None))

    if n and not entries:
        raise DegenerateLayoutError(
            f"layout {seed.image_id} lost all {n} entries ({failures} placement failures)"
        )
    return Layout(seed.image_id, W, H, entries, failures)
