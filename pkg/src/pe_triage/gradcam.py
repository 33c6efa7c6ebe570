"""Gradient-weighted class activation maps and heat-map overlays."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import CbamdrnModel, UnknownLayer
from .nn import Tensor
from .preprocess import WindowedImage, resize_bilinear


@dataclass(frozen=True)
class GradCamMap:
    window_name: str
    layer: str
    values: np.ndarray  # H×W in [0, 1]

    @property
    def center_of_mass(self) -> tuple[float, float] | None:
        """(x, y) weighted by map value, or None for an all-zero map."""
        total = float(self.values.sum(dtype=np.float64))
        if total <= 0:
            return None
        ys, xs = np.indices(self.values.shape)
        return float((xs * self.values).sum() / total), float((ys * self.values).sum() / total)


def layer_names(model: CbamdrnModel) -> tuple[str, ...]:
    return ("stem",) + tuple(f"stage{i + 1}" for i in range(len(model.config.stage_channels)))


def default_layer(model: CbamdrnModel) -> str:
    return layer_names(model)[-1]


def cam_from(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """relu(Σ_k α_k A^k) with α_k the spatial mean gradient, max-normalized.

    ``activations`` and ``gradients`` are K×h×w for one sample.
    """
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    alpha = g.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    peak = raw.max()
    return raw / peak if peak > 0 else np.zeros_like(raw)


def grad_cam(
    model: CbamdrnModel,
    windows: Sequence,
    class_idx: int,
    layer: str | None = None,
) -> list[GradCamMap]:
    """One map per window for a single slice.

    ``windows`` holds one H×W image (array or WindowedImage) per backbone in
    the model's window order. The model's parameters are only read: the
    pass runs on a private graph whose sole leaves are the inputs.
    """
    layer = layer or default_layer(model)
    if layer not in layer_names(model):
        raise UnknownLayer(f"unknown layer {layer!r}; expected one of {layer_names(model)}")
    if not 0 <= class_idx < model.config.num_classes:
        raise ValueError(f"class_idx {class_idx} out of range")
    model.check_windows(windows)

    frozen = {k: Tensor(v.data) for k, v in model.params.items()}
    private = CbamdrnModel(model.config, model.mode, model.seed, model.dtype, frozen, training=False)
    inputs = []
    for w in windows:
        arr = np.asarray(getattr(w, "values", w), dtype=model.dtype)
        inputs.append(Tensor(arr.reshape(1, 1, *arr.shape[-2:]), requires_grad=True))
    captures: dict[str, dict[str, Tensor]] = {}
    logits = private.forward(inputs, captures)
    for name in private.windows:
        captures[name][layer].retain_grad()
    seed = np.zeros(logits.shape, dtype=logits.dtype)
    seed[0, class_idx] = 1.0
    logits.backward(seed)

    maps = []
    for name, x in zip(private.windows, inputs):
        act = captures[name][layer]
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
        cam = cam_from(act.data[0], grad[0])
        h, w = x.shape[-2:]
        up = np.clip(resize_bilinear(cam, w, h), 0.0, 1.0)
        peak = up.max()
        up = up / peak if peak > 0 else up
        maps.append(GradCamMap(name, layer, up.astype(np.float32)))
    return maps


def overlay(cam: GradCamMap, base) -> np.ndarray:
    """H×W×3 float RGB in [0, 1]: grayscale base plus the map added to red."""
    values = base.values if isinstance(base, WindowedImage) else np.asarray(base)
    if values.shape != cam.values.shape:
        raise ValueError(f"map {cam.values.shape} and base {values.shape} differ in size")
    gray = (values.astype(np.float64) + 1.0) / 2.0
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[..., 0] += cam.values
    return np.clip(rgb, 0.0, 1.0)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(rgb: np.ndarray, path: str | os.PathLike) -> Path:
    from PIL import Image

    path = Path(path)
    arr = rgb if rgb.dtype == np.uint8 else to_uint8(rgb)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def dump_map(cam: GradCamMap, path: str | os.PathLike) -> Path:
    """Text header "width height" then the row-major little-endian float32 grid."""
    h, w = cam.values.shape
    path = Path(path)
    path.write_bytes(f"{w} {h}\n".encode() + cam.values.astype("<f4").tobytes())
    return path


def read_map(path: str | os.PathLike, window_name: str = "", layer: str = "") -> GradCamMap:
    raw = Path(path).read_bytes()
    header, _, body = raw.partition(b"\n")
    w, h = (int(v) for v in header.split())
    if len(body) != 4 * w * h:
        raise ValueError(f"map payload is {len(body)} bytes, expected {4 * w * h}")
    return GradCamMap(window_name, layer, np.frombuffer(body, dtype="<f4").reshape(h, w).copy())

