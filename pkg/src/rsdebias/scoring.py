"""Representation scores per (class, size bin, position bin) data group."""

from __future__ import annotations

import copy
import functools
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataset import BBox, BinningConfig, Dataset, GroupKey, Instance, assign_group
from .errors import CompatibilityError, DataError, EmptyDatasetError, MissingFeatureError

DEFAULT_BETA = 0.5
DESCRIPTOR_SIDE = 8


def _unit(vec, what) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(v))
    if not np.isfinite(norm) or norm == 0.0:
        raise DataError(f"cannot normalize feature vector for {what}")
    return v / norm


class EmbeddingStore:
    """Unit-normalized per-instance feature vectors.

    ``fallback`` optionally computes a vector for instances missing from the
    store (see :class:`ImageDescriptorFallback`).
    """

    def __init__(self, vectors=None, fallback: Callable[[Instance], np.ndarray] | None = None):
        self._vectors: dict[int, np.ndarray] = {}
        self.dim: int | None = None
        self.fallback = fallback
        for iid, vec in (vectors or {}).items():
            self.add(iid, vec)

    def add(self, instance_id: int, vec) -> None:
        v = _unit(vec, f"instance {instance_id}")
        if self.dim is None:
            self.dim = v.size
        elif v.size != self.dim:
            raise DataError(
                f"embedding for instance {instance_id} has dimension {v.size}, expected {self.dim}"
            )
        self._vectors[int(instance_id)] = v

    def __contains__(self, instance_id) -> bool:
        return int(instance_id) in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def vector(self, inst: Instance) -> np.ndarray:
        key = inst.embedding_id if inst.embedding_id is not None else inst.instance_id
        v = self._vectors.get(key)
        if v is not None:
            return v
        if self.fallback is None:
            raise MissingFeatureError(inst.instance_id)
        self.add(key, self.fallback(inst))
        return self._vectors[key]

    @classmethod
    def load_jsonl(cls, path, fallback=None) -> EmbeddingStore:
        store = cls(fallback=fallback)
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    store.add(rec["instance_id"], rec["embedding"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: bad embedding record ({exc})") from exc
        return store


def fallback_descriptor(pixels: np.ndarray, bbox: BBox) -> np.ndarray:
    """Deterministic 192-d appearance descriptor for a box crop.

    The crop is box-filtered to 8×8 per channel, centered to [-0.5, 0.5],
    flattened channel by channel and L2-normalized. Centering keeps every
    8-bit crop away from the zero vector.
    """
    from PIL import Image

    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    arr = arr[:, :, :3].astype(np.uint8)
    h, w = arr.shape[:2]
    x1 = min(max(int(np.floor(bbox.x1)), 0), w - 1)
    y1 = min(max(int(np.floor(bbox.y1)), 0), h - 1)
    x2 = max(min(int(np.ceil(bbox.x2)), w), x1 + 1)
    y2 = max(min(int(np.ceil(bbox.y2)), h), y1 + 1)
    crop = Image.fromarray(np.ascontiguousarray(arr[y1:y2, x1:x2]))
    small = np.asarray(crop.resize((DESCRIPTOR_SIDE, DESCRIPTOR_SIDE), Image.Resampling.BOX))
    feat = small.astype(np.float64) / 255.0 - 0.5
    return _unit(feat.transpose(2, 0, 1).ravel(), "crop")


class ImageDescriptorFallback:
    """Computes :func:`fallback_descriptor` from image files on disk."""

    def __init__(self, ds: Dataset, image_dir):
        self.image_dir = Path(image_dir)
        self._images = {img.image_id: img for img in ds.images}
        self._cache: dict[int, np.ndarray] = {}

    def _pixels(self, image_id: int) -> np.ndarray:
        if image_id not in self._cache:
            from PIL import Image

            img = self._images[image_id]
            path = self.image_dir / (img.file_name or f"{image_id}.png")
            try:
                with Image.open(path) as im:
                    # one decoded image at a time; instances arrive grouped by image
                    self._cache = {image_id: np.asarray(im.convert("RGB"))}
            except OSError as exc:
                raise OSError(f"cannot read image {path}: {exc}") from exc
        return self._cache[image_id]

    def __call__(self, inst: Instance) -> np.ndarray:
        return fallback_descriptor(self._pixels(inst.image_id), inst.bbox)


def compute_freq(ds: Dataset, key: GroupKey, config: BinningConfig | None = None) -> float:
    config = config or BinningConfig()
    n_all = ds.total_instances
    if n_all == 0:
        raise EmptyDatasetError("sample frequency is undefined for an empty dataset")
    n = sum(1 for inst, img in ds.instances() if assign_group(inst, img, config) == key)
    return n / n_all


def compute_vis(instances: Sequence[Instance], store: EmbeddingStore) -> float:
    """Mean squared feature distance over all ordered pairs (diagonal included), scaled to [0, 1].

    Uses sum_ij |o_i - o_j|^2 = 2 n sum_i |o_i|^2 - 2 |sum_i o_i|^2; the
    division by 4 is the largest squared distance between unit vectors.
    """
    n = len(instances)
    if n <= 1:
        return 0.0
    feats = np.stack([store.vector(inst) for inst in instances])
    total = feats.sum(axis=0)
    pair_sum = 2.0 * n * float(np.einsum("ij,ij->", feats, feats)) - 2.0 * float(total @ total)
    return min(max(pair_sum / (n * n) / 4.0, 0.0), 1.0)


def context_counts(ds: Dataset) -> dict[int, tuple[int, int]]:
    """class_id -> (images containing the class, sum of class-set sizes over those images)."""
    acc = {c: [0, 0] for c in range(ds.num_classes)}
    for img in ds.images:
        present = img.class_set
        for c in present:
            acc[c][0] += 1
            acc[c][1] += len(present)
    return {c: (a, b) for c, (a, b) in acc.items()}


def compute_ctx(ds: Dataset, class_id: int) -> float:
    return compute_ctx_from(context_counts(ds).get(class_id, (0, 0)), ds.num_classes)


@dataclass
class GroupStats:
    key: GroupKey
    count: int
    d_freq: float
    d_vis: float
    d_ctx: float
    rs: float

    def to_dict(self) -> dict:
        return {
            "class_id": self.key.class_id,
            "size_bin": self.key.size_bin,
            "pos_bin": self.key.pos_bin,
            "count": self.count,
            "d_freq": self.d_freq,
            "d_vis": self.d_vis,
            "d_ctx": self.d_ctx,
            "rs": self.rs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GroupStats:
        key = GroupKey(int(d["class_id"]), int(d["size_bin"]), int(d["pos_bin"]))
        return cls(key, int(d["count"]), float(d["d_freq"]), float(d["d_vis"]),
                   float(d["d_ctx"]), float(d["rs"]))


def representation_score(d_freq: float, d_vis: float, d_ctx: float, beta: float) -> float:
    return d_freq * (d_vis + beta * d_ctx)


@functools.lru_cache(maxsize=4096)
def _grid_keys(class_id: int, s_bins: int, u_bins: int) -> tuple[GroupKey, ...]:
    return tuple(GroupKey(class_id, s, u) for s in range(s_bins) for u in range(u_bins))


@dataclass
class RsTable:
    groups: dict[GroupKey, GroupStats]
    beta: float
    dataset_digest: str
    num_classes: int
    binning: BinningConfig = field(default_factory=BinningConfig)
    class_mean_rs: dict[int, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def rs(self, key: GroupKey) -> float:
        return self.groups[key].rs

    def class_keys(self, class_id: int) -> tuple[GroupKey, ...]:
        return _grid_keys(class_id, self.binning.s_bins, self.binning.u_bins)

    def class_rs(self, class_id: int) -> np.ndarray:
        """RS values of the class's bin grid, shape (s_bins, u_bins)."""
        vals = [self.groups[k].rs for k in self.class_keys(class_id)]
        return np.array(vals, dtype=np.float64).reshape(self.binning.s_bins, self.binning.u_bins)

    def recompute_class_means(self) -> None:
        nb = self.binning.num_bins
        self.class_mean_rs = {
            c: sum(self.groups[k].rs for k in self.class_keys(c)) / nb
            for c in range(self.num_classes)
        }

    def copy(self) -> RsTable:
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "dataset_digest": self.dataset_digest,
            "num_classes": self.num_classes,
            "binning": self.binning.to_dict(),
            "groups": [self.groups[k].to_dict() for k in sorted(self.groups, key=GroupKey.as_tuple)],
            "class_mean_rs": {str(c): self.class_mean_rs[c] for c in sorted(self.class_mean_rs)},
            **self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> RsTable:
        known = {"beta", "dataset_digest", "num_classes", "binning", "groups", "class_mean_rs"}
        try:
            groups = {}
            for g in d["groups"]:
                stats = GroupStats.from_dict(g)
                groups[stats.key] = stats
            table = cls(
                groups=groups,
                beta=float(d["beta"]),
                dataset_digest=str(d["dataset_digest"]),
                num_classes=int(d["num_classes"]),
                binning=BinningConfig.from_dict(d.get("binning", {})),
                class_mean_rs={int(c): float(v) for c, v in d["class_mean_rs"].items()},
                meta={k: v for k, v in d.items() if k not in known},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed RS table: {exc}") from exc
        missing = [
            k.as_tuple() for c in range(table.num_classes) for k in table.class_keys(c)
            if k not in table.groups
        ]
        if missing:
            raise DataError(f"RS table lacks groups {missing[:5]}")
        return table

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path, dataset_digest: str | None = None) -> RsTable:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON at char {exc.pos}: {exc.msg}") from exc
        table = cls.from_dict(d)
        if dataset_digest is not None and table.dataset_digest != dataset_digest:
            raise CompatibilityError(
                f"{path} was computed from dataset {table.dataset_digest[:12]}, "
                f"not {dataset_digest[:12]}"
            )
        return table


def group_members(ds: Dataset, config: BinningConfig) -> dict[GroupKey, list[Instance]]:
    members: dict[GroupKey, list[Instance]] = {}
    for inst, img in ds.instances():
        members.setdefault(assign_group(inst, img, config), []).append(inst)
    return members


def compute_rs_table(
    ds: Dataset,
    store: EmbeddingStore | None,
    beta: float = DEFAULT_BETA,
    config: BinningConfig | None = None,
) -> RsTable:
    """Score every (class, size bin, position bin) group.

    Empty groups get explicit zero entries so inverse-RS sampling can reach
    them.
    """
    config = config or BinningConfig()
    if beta < 0:
        raise ValueError("beta must be non-negative")
    n_all = ds.total_instances
    if n_all == 0:
        raise EmptyDatasetError("cannot score an empty dataset")
    store = store if store is not None else EmbeddingStore()
    members = group_members(ds, config)
    ctx = {c: compute_ctx_from(counts, ds.num_classes) for c, counts in context_counts(ds).items()}

    groups = {}
    for c in range(ds.num_classes):
        for s in range(config.s_bins):
            for u in range(config.u_bins):
                key = GroupKey(c, s, u)
                insts = members.get(key, [])
                if not insts:
                    groups[key] = GroupStats(key, 0, 0.0, 0.0, ctx[c], 0.0)
                    continue
                d_freq = len(insts) / n_all
                d_vis = compute_vis(insts, store)
                rs = representation_score(d_freq, d_vis, ctx[c], beta)
                groups[key] = GroupStats(key, len(insts), d_freq, d_vis, ctx[c], rs)

    table = RsTable(groups, float(beta), ds.digest(), ds.num_classes, config)
    table.recompute_class_means()
    return table


def compute_ctx_from(counts: tuple[int, int], num_classes: int) -> float:
    n_img, set_sizes = counts
    if n_img == 0 or num_classes == 0:
        return 0.0
    return set_sizes / (n_img * num_classes)


def lowest_groups(table: RsTable, n: int, occupied_only: bool = False) -> list[GroupStats]:
    stats: Iterable[GroupStats] = table.groups.values()
    if occupied_only:
        stats = [g for g in stats if g.count > 0]
    return sorted(stats, key=lambda g: (g.rs, g.key.as_tuple()))[:n]
