"""Deterministic synthetic chest-CT slices with ground-truth masks.

Geometry: an elliptical soft-tissue body in air, two elliptical lung fields,
a thick arterial trunk plus a fan of thinner vessel strokes per lung, all
radiating from the hilum. PE slices carry a low-attenuation filling defect
that interrupts one trunk, and with probability ``infarct_prob`` also an
infarct-like consolidation patch; other disease slices carry a diffuse
consolidation-like patch in parenchyma away from the vessels. A consolidation
is therefore no evidence against PE, only the defect separates the two. Values are integer HU so DICOM round trips are exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dicom
from .dicom import HuSlice
from .labels import SliceLabel

AIR = -1000.0
SOFT_TISSUE = 40.0
LUNG = -800.0
VESSEL = 200.0
PE_DEFECT = -50.0
DISEASE_LOW, DISEASE_HIGH = -100.0, 0.0
NOISE_SIGMA = 20.0


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    label: SliceLabel = SliceLabel.WNL
    size: tuple[int, int] = (512, 512)  # (w, h)
    pe_radius: tuple[float, float] = (12.0, 16.0)
    disease_radius: tuple[float, float] = (26.0, 34.0)
    vessel_halfwidth: tuple[float, float] = (2.5, 3.0)
    trunk_halfwidth: tuple[float, float] = (8.0, 10.0)
    infarct_prob: float = 0.5


@dataclass(frozen=True)
class GroundTruth:
    lung_mask: np.ndarray
    lesion_mask: np.ndarray
    label: SliceLabel
    body_mask: np.ndarray | None = field(default=None, repr=False)
    vessel_mask: np.ndarray | None = field(default=None, repr=False)
    infarct_mask: np.ndarray | None = field(default=None, repr=False)

    def lesion_box(self):
        """(x0, y0, x1, y1) of the lesion mask, or None for WNL."""
        ys, xs = np.nonzero(self.lesion_mask)
        if ys.size == 0:
            return None
        return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _ellipse(shape, cx, cy, ax, ay, angle=0.0) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(angle), np.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _capsule(shape, p0, p1, radius) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.subtract(p1, p0, dtype=np.float64)
    t = ((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / max(d @ d, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    px = p0[0] + t * d[0]
    py = p0[1] + t * d[1]
    return (xx - px) ** 2 + (yy - py) ** 2 <= radius**2


def _ray_extent(mask: np.ndarray, start, direction, limit=400) -> float:
    """Distance along ``direction`` from ``start`` until leaving ``mask``."""
    h, w = mask.shape
    for step in range(1, limit):
        x = int(round(start[0] + direction[0] * step))
        y = int(round(start[1] + direction[1] * step))
        if not (0 <= x < w and 0 <= y < h) or not mask[y, x]:
            return float(step)
    return float(limit)


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def generate_phantom_slice(spec: PhantomSpec) -> tuple[HuSlice, GroundTruth]:
    rng = np.random.default_rng(spec.seed)
    w, h = spec.size
    shape = (h, w)
    sx, sy = w / 512.0, h / 512.0

    bcx = w / 2 + rng.uniform(-6, 6) * sx
    bcy = h / 2 + rng.uniform(-6, 6) * sy
    body = _ellipse(shape, bcx, bcy, rng.uniform(200, 215) * sx, rng.uniform(150, 165) * sy)

    lungs = []
    for side in (-1, 1):
        offset = rng.uniform(80, 92) * sx
        lcx = bcx + side * offset
        lcy = bcy + rng.uniform(-8, 8) * sy
        ax = rng.uniform(60, 70) * sx
        ay = rng.uniform(100, 112) * sy
        lungs.append((side, lcx, lcy, ax, ay, _ellipse(shape, lcx, lcy, ax, ay, rng.uniform(-0.12, 0.12))))
    lung_mask = lungs[0][5] | lungs[1][5]
    lung_mask &= ndimage.binary_erosion(body, iterations=4)

    vessels = np.zeros(shape, dtype=bool)
    trunks = []  # (p0, p1, radius, mask)
    for side, lcx, lcy, ax, ay, lmask in lungs:
        lmask = lmask & lung_mask
        hilum = (lcx - side * 0.92 * ax, lcy + rng.uniform(-0.15, 0.15) * ay)
        a = rng.uniform(-0.25, 0.25)
        direction = np.array([side * np.cos(a), np.sin(a)])
        length = rng.uniform(0.55, 0.7) * _ray_extent(lmask, hilum, direction)
        p1 = (hilum[0] + direction[0] * length, hilum[1] + direction[1] * length)
        radius = rng.uniform(*spec.trunk_halfwidth) * sx
        m = _capsule(shape, hilum, p1, radius) & lmask
        trunks.append((hilum, p1, radius, m))
        vessels |= m
        n = int(rng.integers(2, 4))
        spread = np.linspace(-0.9, 0.9, n) + rng.uniform(-0.12, 0.12, n)
        for a in spread:
            direction = np.array([side * np.cos(a), np.sin(a)])
            extent = _ray_extent(lmask, hilum, direction)
            length = rng.uniform(0.6, 0.85) * extent
            p1 = (hilum[0] + direction[0] * length, hilum[1] + direction[1] * length)
            radius = rng.uniform(*spec.vessel_halfwidth) * sx
            vessels |= _capsule(shape, hilum, p1, radius) & lmask

    hu = np.full(shape, AIR)
    hu[body] = SOFT_TISSUE
    hu[lung_mask] = LUNG
    hu[vessels] = VESSEL

    lesion = np.zeros(shape, dtype=bool)
    infarct = None
    if spec.label is SliceLabel.PE:
        # defect plugs one trunk part-way along
        p0, p1, radius, vmask = trunks[int(rng.integers(2))]
        t = rng.uniform(0.5, 0.75)
        cx = p0[0] + t * (p1[0] - p0[0])
        cy = p0[1] + t * (p1[1] - p0[1])
        r = rng.uniform(*spec.pe_radius) * sx
        lesion = _ellipse(shape, cx, cy, r, r) & vmask
        hu[lesion] = PE_DEFECT
        if rng.random() < spec.infarct_prob:
            keep_out = ndimage.binary_dilation(vessels, iterations=6)
            infarct = _disease_patch(rng, spec, shape, lungs, lung_mask, keep_out, sx)
            texture = _smooth_field(rng, shape, 3.0)
            hu[infarct] = DISEASE_LOW + (DISEASE_HIGH - DISEASE_LOW) * texture[infarct]
    elif spec.label is SliceLabel.OTHER:
        keep_out = ndimage.binary_dilation(vessels, iterations=6)
        lesion = _disease_patch(rng, spec, shape, lungs, lung_mask, keep_out, sx)
        texture = _smooth_field(rng, shape, 3.0)
        hu[lesion] = DISEASE_LOW + (DISEASE_HIGH - DISEASE_LOW) * texture[lesion]

    hu[body] += rng.normal(0.0, NOISE_SIGMA, size=int(body.sum()))
    hu = np.clip(np.rint(hu), dicom.HU_MIN, dicom.HU_MAX).astype(np.float32)
    truth = GroundTruth(lung_mask, lesion, spec.label, body_mask=body, vessel_mask=vessels, infarct_mask=infarct)
    return HuSlice(hu), truth


def _disease_patch(rng, spec, shape, lungs, lung_mask, keep_out, sx) -> np.ndarray:
    inner = ndimage.distance_transform_edt(lung_mask & ~keep_out)
    for _ in range(64):
        r = rng.uniform(*spec.disease_radius) * sx
        ok = np.argwhere(inner > r + 6)
        if len(ok) == 0:
            continue
        cy, cx = ok[rng.integers(len(ok))]
        ar = rng.uniform(0.75, 1.0)
        patch = _ellipse(shape, cx, cy, r, r * ar, rng.uniform(0, np.pi)) & lung_mask & ~keep_out
        if patch.any():
            return patch
    # tiny lungs: a small blob at the deepest point
    cy, cx = np.unravel_index(np.argmax(inner), shape)
    r = max(float(inner[cy, cx]) - 2, 2.0)
    return _ellipse(shape, cx, cy, r, r) & lung_mask & ~keep_out


def slice_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index]).generate_state(1, np.uint64)[0])


def patient_slice_labels(seed: int, label: SliceLabel, n_slices: int) -> list[SliceLabel]:
    """Per-slice labels: a contiguous 30-60 % run of lesion slices for diseased patients."""
    if n_slices <= 0:
        raise ValueError("n_slices must be positive")
    if label is SliceLabel.WNL:
        return [SliceLabel.WNL] * n_slices
    rng = np.random.default_rng(slice_seed(seed, -1 & 0xFFFF))
    lo = max(int(np.ceil(0.3 * n_slices)), 1)
    hi = max(int(np.floor(0.6 * n_slices)), lo)
    k = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, n_slices - k + 1))
    return [label if start <= i < start + k else SliceLabel.WNL for i in range(n_slices)]


def generate_patient(
    seed: int, label: SliceLabel, n_slices: int, size: tuple[int, int] = (512, 512)
) -> list[tuple[HuSlice, GroundTruth]]:
    labels = patient_slice_labels(seed, label, n_slices)
    return [
        generate_phantom_slice(PhantomSpec(seed=slice_seed(seed, i), label=lab, size=size))
        for i, lab in enumerate(labels)
    ]


def write_dicom(
    slice_: HuSlice, patient_id: str, series_id: str, instance: int, path: str | os.PathLike
) -> Path:
    """Write with slope 1 / intercept -1024, i.e. stored = HU + 1024."""
    stored = np.rint(np.asarray(slice_.hu, dtype=np.float64) + 1024.0)
    if stored.min() < 0 or stored.max() > 0xFFFF:
        raise ValueError("HU values outside the writable range")
    path = Path(path)
    path.write_bytes(
        dicom.encode_dicom(stored.astype(np.uint16), patient_id, series_id, instance, 1.0, -1024.0)
    )
    return path


# --------------------------------------------------------------------------
# ground-truth sidecar: "key<TAB>value" lines, masks run-length encoded


def rle_encode(mask: np.ndarray) -> str:
    """Row-major run lengths, alternating false/true, starting with false."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return " ".join(str(r) for r in runs)


def rle_decode(text: str, shape: tuple[int, int]) -> np.ndarray:
    runs = [int(t) for t in text.split()] if text.strip() else []
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    pos, value = 0, False
    for r in runs:
        if r < 0 or pos + r > flat.size:
            raise ValueError("run lengths exceed mask size")
        flat[pos : pos + r] = value
        pos += r
        value = not value
    if pos != flat.size:
        raise ValueError("run lengths do not cover the mask")
    return flat.reshape(shape)


def write_sidecar(truth: GroundTruth, path: str | os.PathLike) -> None:
    h, w = truth.lung_mask.shape
    lines = [
        f"label\t{truth.label.value}",
        f"size\t{w}\t{h}",
        f"lung\t{rle_encode(truth.lung_mask)}",
        f"lesion\t{rle_encode(truth.lesion_mask)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sidecar(path: str | os.PathLike) -> GroundTruth:
    fields = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition("\t")
        fields[key] = value
    w, h = (int(v) for v in fields["size"].split("\t"))
    return GroundTruth(
        lung_mask=rle_decode(fields["lung"], (h, w)),
        lesion_mask=rle_decode(fields["lesion"], (h, w)),
        label=SliceLabel.parse(fields["label"]),
    )
