"""HU slice -> normalized multi-window model inputs.

Pipeline per slice: center crop (400×400) -> dynamic lung crop on HU ->
per-window linear normalization to [-1, 1] -> bilinear resize to the model
input size. Every window of a slice shares one crop box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dicom import HU_MAX, HU_MIN, HuSlice

AIR_HU = -1024.0
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class NoComponents(ValueError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    name: str
    hu_low: float
    hu_high: float

    def __post_init__(self):
        if not self.hu_low < self.hu_high:
            raise ValueError(f"window {self.name}: hu_low must be below hu_high")

    @property
    def center(self) -> float:
        return (self.hu_low + self.hu_high) / 2.0

    @property
    def half_width(self) -> float:
        return (self.hu_high - self.hu_low) / 2.0


VASCULAR = WindowSpec("vascular", 0.0, 650.0)
MEDIASTINUM = WindowSpec("mediastinum", 40.0, 400.0)
LUNG = WindowSpec("lung", -400.0, 1500.0)
DEFAULT_WINDOWS = {w.name: w for w in (VASCULAR, MEDIASTINUM, LUNG)}
WINDOW_ORDER = ("vascular", "mediastinum", "lung")


@dataclass(frozen=True)
class CropBox:
    """Pixel box, inclusive start / exclusive end."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"empty crop box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def within(self, width: int, height: int) -> bool:
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height

    def contains_mask(self, mask: np.ndarray) -> bool:
        ys, xs = np.nonzero(mask)
        return bool(
            np.all((xs >= self.x0) & (xs < self.x1) & (ys >= self.y0) & (ys < self.y1))
        )

    def coverage(self, mask: np.ndarray) -> float:
        """Fraction of set pixels of ``mask`` that fall inside the box."""
        total = int(mask.sum())
        if total == 0:
            return 1.0
        return float(mask[self.y0 : self.y1, self.x0 : self.x1].sum()) / total


@dataclass(frozen=True)
class Component:
    mask: np.ndarray
    box: CropBox
    area: int


@dataclass
class PreprocessConfig:
    center_crop_size: tuple[int, int] = (400, 400)  # (w, h)
    fixed_crop_size: tuple[int, int] = (300, 180)
    lung_threshold_hu: float = -400.0
    bbox_margin_px: int = 10
    min_box_fraction: float = 0.05
    model_input_size: tuple[int, int] = (224, 224)
    windows: dict[str, WindowSpec] = field(default_factory=lambda: dict(DEFAULT_WINDOWS))

    def __post_init__(self):
        for name in ("center_crop_size", "fixed_crop_size", "model_input_size"):
            size = tuple(int(v) for v in getattr(self, name))
            if len(size) != 2 or min(size) <= 0:
                raise ValueError(f"{name} must be two positive integers")
            setattr(self, name, size)
        if not HU_MIN <= self.lung_threshold_hu <= HU_MAX:
            raise ValueError("lung_threshold_hu outside the HU range")
        if self.bbox_margin_px < 0:
            raise ValueError("bbox_margin_px must be >= 0")


@dataclass(frozen=True)
class WindowedImage:
    window_name: str
    values: np.ndarray  # float32, H×W, in [-1, 1]
    crop_box: CropBox | None = None
    used_fallback: bool = False

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _as_array(img) -> np.ndarray:
    return img.hu if isinstance(img, HuSlice) else np.asarray(img)


def _centered(img: np.ndarray, w: int, h: int, fill: float) -> np.ndarray:
    out = img
    H, W = img.shape
    if H > h:
        top = (H - h) // 2
        out = out[top : top + h]
    if W > w:
        left = (W - w) // 2
        out = out[:, left : left + w]
    ph, pw = max(h - H, 0), max(w - W, 0)
    if ph or pw:
        out = np.pad(
            out,
            ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)),
            constant_values=fill,
        )
    return np.ascontiguousarray(out)


def center_crop(img: HuSlice, w: int, h: int) -> HuSlice:
    """Central w×h region; smaller inputs are padded with air on both sides."""
    if w <= 0 or h <= 0:
        raise ValueError("crop size must be positive")
    return HuSlice(_centered(_as_array(img), w, h, AIR_HU).astype(np.float32, copy=False))


def fixed_crop(img: HuSlice, cfg: PreprocessConfig | None = None) -> HuSlice:
    w, h = (cfg or PreprocessConfig()).fixed_crop_size
    return center_crop(img, w, h)


def _centered_box(W: int, H: int, w: int, h: int) -> CropBox:
    x0 = max((W - w) // 2, 0)
    y0 = max((H - h) // 2, 0)
    return CropBox(x0, y0, min(x0 + w, W), min(y0 + h, H))


def apply_window(img: HuSlice, spec: WindowSpec) -> WindowedImage:
    hu = _as_array(img).astype(np.float64)
    v = np.clip((hu - spec.center) / spec.half_width, -1.0, 1.0)
    return WindowedImage(spec.name, v.astype(np.float32))


def binarize_lung_mask(img: HuSlice, threshold_hu: float = -400.0) -> np.ndarray:
    return _as_array(img) < threshold_hu


def extract_lung_components(mask: np.ndarray, keep: int = 2) -> list[Component]:
    """The ``keep`` largest 4-connected interior components, largest first.

    Components touching the image edge (air outside the body) are dropped.
    Equal areas keep raster-scan order of first pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        return []
    edge = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    areas[0] = 0
    areas[edge] = 0
    order = [int(i) for i in np.argsort(-areas, kind="stable") if areas[i] > 0][:keep]
    slices = ndimage.find_objects(labels)
    out = []
    for lab in order:
        sy, sx = slices[lab - 1]
        out.append(
            Component(
                mask=labels == lab,
                box=CropBox(sx.start, sy.start, sx.stop, sy.stop),
                area=int(areas[lab]),
            )
        )
    return out


def lung_bounding_box(components: Sequence[Component], margin: int, bounds: tuple[int, int]) -> CropBox:
    """Union of component boxes grown by ``margin`` and clipped to ``bounds`` = (width, height)."""
    if not components:
        raise NoComponents("no lung components to bound")
    width, height = bounds
    boxes = [c.box if isinstance(c, Component) else c for c in components]
    return CropBox(
        max(min(b.x0 for b in boxes) - margin, 0),
        max(min(b.y0 for b in boxes) - margin, 0),
        min(max(b.x1 for b in boxes) + margin, width),
        min(max(b.y1 for b in boxes) + margin, height),
    )


def dynamic_crop(img: HuSlice, cfg: PreprocessConfig | None = None) -> tuple[HuSlice, CropBox, bool]:
    """Crop to the two lung fields; falls back to the fixed central crop.

    Returns ``(cropped, box, used_fallback)``. The crop carries the original
    HU values inside the box.
    """
    cfg = cfg or PreprocessConfig()
    hu = _as_array(img)
    H, W = hu.shape
    comps = extract_lung_components(binarize_lung_mask(hu, cfg.lung_threshold_hu))
    if len(comps) >= 2:
        box = lung_bounding_box(comps, cfg.bbox_margin_px, (W, H))
        if box.area >= cfg.min_box_fraction * W * H:
            return HuSlice(hu[box.y0 : box.y1, box.x0 : box.x1].copy()), box, False
    fw, fh = cfg.fixed_crop_size
    return fixed_crop(hu, cfg), _centered_box(W, H, fw, fh), True


def resize_bilinear(img, w: int, h: int):
    """Corner-aligned bilinear resize of a WindowedImage or 2-D array."""
    values = img.values if isinstance(img, WindowedImage) else np.asarray(img)
    H, W = values.shape
    if (H, W) == (h, w):
        out = values.copy()
    else:
        src = values.astype(np.float64)
        ys = np.linspace(0.0, H - 1, h) if h > 1 else np.zeros(1)
        xs = np.linspace(0.0, W - 1, w) if w > 1 else np.zeros(1)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, H - 1)
        x1 = np.minimum(x0 + 1, W - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
        bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
        out = top * (1 - fy) + bot * fy
    out = out.astype(np.float32)
    if isinstance(img, WindowedImage):
        return WindowedImage(img.window_name, np.clip(out, -1.0, 1.0), img.crop_box, img.used_fallback)
    return out


def ordered_windows(windows: Sequence[str]) -> list[str]:
    unknown = set(windows) - set(WINDOW_ORDER)
    if unknown:
        raise ValueError(f"unknown windows {sorted(unknown)}")
    return [w for w in WINDOW_ORDER if w in set(windows)]


def preprocess_slice(
    hu: HuSlice, cfg: PreprocessConfig | None = None, windows: Sequence[str] = ("vascular", "lung")
) -> list[WindowedImage]:
    """Center crop, dynamic crop, window and resize; one image per window in fixed order."""
    cfg = cfg or PreprocessConfig()
    cw, ch = cfg.center_crop_size
    centered = center_crop(hu, cw, ch)
    cropped, box, fallback = dynamic_crop(centered, cfg)
    mw, mh = cfg.model_input_size
    out = []
    for name in ordered_windows(windows):
        win = apply_window(cropped, cfg.windows[name])
        win = WindowedImage(name, win.values, box, fallback)
        out.append(resize_bilinear(win, mw, mh))
    return out


def stack_windows(images: Sequence[WindowedImage]) -> np.ndarray:
    """W×1×H×W array of one slice's window images."""
    return np.stack([im.values[None] for im in images]).astype(np.float32)
