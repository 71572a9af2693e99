"""Visual-blueprint rendering of layouts.

Each class gets an evenly spaced hue at full saturation and value; further
instances of the same class step the value down. Boxes are painted largest
first with uniform alpha compositing over a black canvas. All color math is
done in exact rationals with round-half-up so canvases are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .dataset import BBox
from .errors import UnsupportedInputError
from .png import read_png, write_png  # noqa: F401  re-exported
from .recalibration import Layout, LayoutEntry

DEFAULT_FILL_ALPHA = 0.8
DEFAULT_VALUE_STEP = 0.1
DEFAULT_V_MIN = 0.5


def _exact(x) -> Fraction:
    # decimal literal semantics: 0.1 means 1/10, not the nearest double
    return x if isinstance(x, Fraction) else Fraction(repr(float(x)))


def _round_half_up(x: Fraction) -> int:
    return (x.numerator * 2 + x.denominator) // (2 * x.denominator)


def hsv_to_rgb8(hue, s, v) -> tuple[int, int, int]:
    """Standard HSV -> RGB (hue in degrees), quantized with round-half-up."""
    hue, s, v = _exact(hue) % 360, _exact(s), _exact(v)
    c = v * s
    hp = hue / 60
    sector = int(hp)
    frac = hp - sector
    x = c * (1 - abs(sector % 2 + frac - 1))
    rgb = [
        (c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x),
    ][sector]
    m = v - c
    return tuple(_round_half_up((ch + m) * 255) for ch in rgb)


@dataclass(frozen=True)
class Palette:
    num_classes: int
    value_step: float = DEFAULT_VALUE_STEP
    v_min: float = DEFAULT_V_MIN
    s0: float = 1.0
    v0: float = 1.0

    @property
    def hue_step(self) -> Fraction:
        return Fraction(360, self.num_classes)

    def hue(self, class_id: int) -> Fraction:
        return (class_id * self.hue_step) % 360

    def color(self, class_id: int) -> tuple[int, int, int]:
        return instance_color(self, class_id, 0)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "value_step": self.value_step,
            "v_min": self.v_min,
            "s0": self.s0,
            "v0": self.v0,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def build_palette(num_classes: int, value_step: float = DEFAULT_VALUE_STEP,
                  v_min: float = DEFAULT_V_MIN) -> Palette:
    if num_classes < 1:
        raise ValueError("palette needs at least one class")
    if not 0 <= v_min <= 1 or value_step < 0:
        raise ValueError("need 0 <= v_min <= 1 and value_step >= 0")
    return Palette(num_classes, value_step, v_min)


@lru_cache(maxsize=65536)
def _instance_color(palette: Palette, class_id: int, k: int) -> tuple[int, int, int]:
    v = max(_exact(palette.v0) - k * _exact(palette.value_step), _exact(palette.v_min))
    return hsv_to_rgb8(palette.hue(class_id), palette.s0, v)


def instance_color(palette: Palette, class_id: int, k: int) -> tuple[int, int, int]:
    """Color of the k-th (0-based) instance of ``class_id`` in a layout."""
    if not 0 <= class_id < palette.num_classes:
        raise ValueError(f"class {class_id} outside palette of {palette.num_classes}")
    return _instance_color(palette, class_id, max(int(k), 0))


def pixel_span(lo: float, hi: float, limit: int) -> tuple[int, int]:
    """Half-open pixel index range whose pixel centers fall in [lo, hi)."""
    a = int(np.ceil(lo - 0.5))
    b = int(np.ceil(hi - 0.5))
    return max(a, 0), min(b, limit)


def paint_order(layout: Layout) -> list[int]:
    """Entry indices sorted by box area, largest first; ties keep entry order."""
    return sorted(range(len(layout.entries)), key=lambda i: (-layout.entries[i].bbox.area, i))


def instance_indices(layout: Layout) -> list[int]:
    seen: dict[int, int] = {}
    ks = []
    for e in layout.entries:
        ks.append(seen.get(e.class_id, 0))
        seen[e.class_id] = ks[-1] + 1
    return ks


def render_blueprint(layout: Layout, palette: Palette,
                     fill_alpha: float = DEFAULT_FILL_ALPHA,
                     canvas_size: tuple[int, int] | None = None) -> np.ndarray:
    """Render ``layout`` to an H x W x 3 uint8 canvas.

    Every covered pixel becomes ``round(a * color + (1 - a) * pixel)``
    (round-half-up, exact integer arithmetic).
    """
    W, H = layout.width, layout.height
    if canvas_size is not None and tuple(canvas_size) != (W, H):
        raise ValueError(f"canvas {canvas_size} does not match layout size {(W, H)}")
    if W <= 0 or H <= 0:
        raise ValueError("layout has an empty canvas")
    alpha = _exact(fill_alpha)
    if not 0 < alpha <= 1:
        raise ValueError("fill_alpha must lie in (0, 1]")
    p, q = alpha.numerator, alpha.denominator
    canvas = np.zeros((H, W, 3), dtype=np.int64)
    ks = instance_indices(layout)
    for i in paint_order(layout):
        e = layout.entries[i]
        x0, x1 = pixel_span(e.bbox.x1, e.bbox.x2, W)
        y0, y1 = pixel_span(e.bbox.y1, e.bbox.y2, H)
        if x0 >= x1 or y0 >= y1:
            continue
        color = np.array(instance_color(palette, e.class_id, ks[i]), dtype=np.int64)
        region = canvas[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1] = (2 * (p * color + (q - p) * region) + q) // (2 * q)
    return canvas.astype(np.uint8)


def decode_blueprint(canvas: np.ndarray, palette: Palette,
                     max_instances_per_class: int = 16) -> Layout:
    """Recover classes and boxes from an opaque render of disjoint boxes.

    Every non-black pixel must match an instance color for some class and
    ``k < max_instances_per_class``; each color component must be a solid
    rectangle. Anything else is rejected as unsupported input.
    """
    arr = np.asarray(canvas)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected an H x W x 3 canvas")
    H, W = arr.shape[:2]
    lookup: dict[tuple[int, int, int], tuple[int, int]] = {}
    for k in range(max_instances_per_class):
        for c in range(palette.num_classes):
            lookup.setdefault(instance_color(palette, c, k), (c, k))

    packed = (arr[:, :, 0].astype(np.int64) << 16) | (arr[:, :, 1].astype(np.int64) << 8) | arr[:, :, 2]
    found = []
    for code in np.unique(packed):
        if code == 0:
            continue
        rgb = (int(code >> 16), int((code >> 8) & 0xFF), int(code & 0xFF))
        if rgb not in lookup:
            raise UnsupportedInputError(f"off-palette color {rgb}")
        c, k = lookup[rgb]
        labels, n = ndimage.label(packed == code)
        for sl_idx, sl in enumerate(ndimage.find_objects(labels), 1):
            ys, xs = sl
            block = labels[ys, xs] == sl_idx
            if not block.all():
                raise UnsupportedInputError(
                    f"color {rgb} region is not a rectangle (overlapping boxes?)"
                )
            box = BBox(float(xs.start), float(ys.start), float(xs.stop), float(ys.stop))
            found.append((c, k, ys.start, xs.start, box))
    found.sort(key=lambda t: (t[0], t[1], t[2], t[3]))
    entries = [LayoutEntry(c, box) for c, _, _, _, box in found]
    return Layout(-1, W, H, entries)
