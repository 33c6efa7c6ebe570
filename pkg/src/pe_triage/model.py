"""CBAMDRN: dilated residual backbone with block attention, plus window fusion.

Each window (vascular / mediastinum / lung) gets its own backbone. The
backbone is a 7×7 stride-2 stem and a 3×3 stride-2 max-pool followed by
bottleneck stages. Stages with dilation 1 (other than the first) downsample
by 2; dilated stages keep resolution, so the final map is input/8 per side.
Channel-then-spatial attention runs on every stage output. Pooled features
of all windows are concatenated and mapped to two logits by one linear layer.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .nn import BatchNormState, Tensor
from .nn import ops

WINDOW_ORDER = ("vascular", "mediastinum", "lung")

WINDOW_SETS: dict[str, tuple[str, ...]] = {
    "VWL": ("vascular",),
    "DWL": ("vascular", "lung"),
    "TWL": ("vascular", "mediastinum", "lung"),
    "MWL": ("vascular", "mediastinum", "lung"),
}


class WindowSetMismatch(ValueError):
    pass


class UnknownLayer(KeyError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    stage_dilations: tuple[int, ...] = (1, 1, 2, 4)
    cbam_reduction: int = 8
    spatial_kernel: int = 7
    num_classes: int = 2
    input_channels: int = 1
    input_size: int = 224
    stem_channels: int = 0  # 0 -> stage_channels[0]
    expansion: int = 4
    use_cbam: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "stage_dilations", tuple(int(d) for d in self.stage_dilations))
        n = len(self.stage_channels)
        if not (len(self.blocks_per_stage) == n == len(self.stage_dilations)) or n == 0:
            raise ValueError("stage_channels, blocks_per_stage and stage_dilations must share length")
        if any(d < 1 for d in self.stage_dilations):
            raise ValueError("dilations must be >= 1")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("each stage needs at least one block")
        for c in self.stage_channels:
            if c % self.expansion:
                raise ValueError(f"stage width {c} not divisible by expansion {self.expansion}")
            if self.use_cbam and c % self.cbam_reduction:
                raise ValueError(f"cbam_reduction {self.cbam_reduction} does not divide stage width {c}")
        if self.spatial_kernel % 2 == 0:
            raise ValueError("spatial_kernel must be odd")
        if self.num_classes != 2:
            raise ValueError("only binary heads are supported")

    @property
    def stem_width(self) -> int:
        return self.stem_channels or self.stage_channels[0]

    def stage_strides(self) -> tuple[int, ...]:
        return tuple(2 if i > 0 and d == 1 else 1 for i, d in enumerate(self.stage_dilations))

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """DRN-d-50-shaped widths and depths."""
        return cls(
            stage_channels=(256, 512, 1024, 2048),
            blocks_per_stage=(3, 4, 6, 3),
            stage_dilations=(1, 1, 2, 4),
            cbam_reduction=16,
            stem_channels=64,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# parameter construction


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)


def _small(rng: np.random.Generator, shape, dtype, std: float = 0.01) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype, grad=True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=grad)


def _ones(shape, dtype, grad=True) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=grad)


def _add_conv(store, name, rng, o, i, k, dtype, bias=False):
    store[f"{name}.weight"] = _he(rng, (o, i, k, k), i * k * k, dtype)
    if bias:
        store[f"{name}.bias"] = _zeros((o,), dtype)


def _add_bn(store, name, c, dtype):
    store[f"{name}.weight"] = _ones((c,), dtype)
    store[f"{name}.bias"] = _zeros((c,), dtype)
    store[f"{name}.running_mean"] = _zeros((c,), dtype, grad=False)
    store[f"{name}.running_var"] = _ones((c,), dtype, grad=False)
    store[f"{name}.num_batches"] = _zeros((1,), dtype, grad=False)


def _block_layout(cfg: ModelConfig):
    """Yield (stage_idx, block_idx, in_ch, out_ch, stride, dilation)."""
    in_ch = cfg.stem_width
    for s, (out_ch, nblocks, dil, stride) in enumerate(
        zip(cfg.stage_channels, cfg.blocks_per_stage, cfg.stage_dilations, cfg.stage_strides())
    ):
        for b in range(nblocks):
            yield s, b, in_ch, out_ch, (stride if b == 0 else 1), dil
            in_ch = out_ch


def init_backbone(cfg: ModelConfig, prefix: str, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    store: dict[str, Tensor] = {}
    _add_conv(store, f"{prefix}.stem.conv", rng, cfg.stem_width, cfg.input_channels, 7, dtype)
    _add_bn(store, f"{prefix}.stem.bn", cfg.stem_width, dtype)
    for s, b, cin, cout, stride, _ in _block_layout(cfg):
        p = f"{prefix}.stage{s + 1}.block{b}"
        mid = cout // cfg.expansion
        _add_conv(store, f"{p}.conv1", rng, mid, cin, 1, dtype)
        _add_bn(store, f"{p}.bn1", mid, dtype)
        _add_conv(store, f"{p}.conv2", rng, mid, mid, 3, dtype)
        _add_bn(store, f"{p}.bn2", mid, dtype)
        _add_conv(store, f"{p}.conv3", rng, cout, mid, 1, dtype)
        _add_bn(store, f"{p}.bn3", cout, dtype)
        if cin != cout or stride != 1:
            _add_conv(store, f"{p}.shortcut.conv", rng, cout, cin, 1, dtype)
            _add_bn(store, f"{p}.shortcut.bn", cout, dtype)
    if cfg.use_cbam:
        for s, c in enumerate(cfg.stage_channels):
            p = f"{prefix}.stage{s + 1}.cbam"
            hidden = c // cfg.cbam_reduction
            store[f"{p}.mlp1.weight"] = _he(rng, (c, hidden), c, dtype)
            store[f"{p}.mlp1.bias"] = _zeros((hidden,), dtype)
            # gate logits start near zero so both sigmoids open at ~0.5 instead of saturating
            store[f"{p}.mlp2.weight"] = _small(rng, (hidden, c), dtype)
            store[f"{p}.mlp2.bias"] = _zeros((c,), dtype)
            k = cfg.spatial_kernel
            store[f"{p}.spatial.weight"] = _small(rng, (1, 2, k, k), dtype)
            store[f"{p}.spatial.bias"] = _zeros((1,), dtype)
    return store


# --------------------------------------------------------------------------
# building blocks


def channel_attention(f: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Sigmoid of a shared two-layer MLP applied to avg- and max-pooled channels. Returns N×C."""
    c = f.shape[1]
    if w1.shape[0] != c or w2.shape[1] != c:
        raise nn.ShapeMismatch(f"attention MLP {w1.shape}/{w2.shape} does not match {c} channels")

    def mlp(v):
        return ops.linear(ops.relu(ops.linear(v, w1, b1)), w2, b2)

    return ops.sigmoid(mlp(ops.global_pool(f, "avg")) + mlp(ops.global_pool(f, "max")))


def spatial_attention(f: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """N×1×H×W gate from a k×k conv over [channel mean; channel max]."""
    k = weight.shape[-1]
    stacked = nn.concat([ops.channel_reduce(f, "mean"), ops.channel_reduce(f, "max")], axis=1)
    return ops.sigmoid(ops.conv2d(stacked, weight, bias, padding=k // 2))


def cbam_apply(f: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    mc = channel_attention(
        f,
        params[f"{prefix}.mlp1.weight"],
        params[f"{prefix}.mlp1.bias"],
        params[f"{prefix}.mlp2.weight"],
        params[f"{prefix}.mlp2.bias"],
    )
    n, c = mc.shape
    f1 = f * mc.reshape(n, c, 1, 1)
    ms = spatial_attention(f1, params[f"{prefix}.spatial.weight"], params[f"{prefix}.spatial.bias"])
    return f1 * ms


def _bn(x: Tensor, params: Mapping[str, Tensor], name: str, training: bool) -> Tensor:
    state = BatchNormState(
        params[f"{name}.running_mean"], params[f"{name}.running_var"], num_batches=params[f"{name}.num_batches"]
    )
    return ops.batch_norm(x, params[f"{name}.weight"], params[f"{name}.bias"], state, training)


def residual_block(
    x: Tensor, params: Mapping[str, Tensor], prefix: str, dilation: int, stride: int, training: bool
) -> Tensor:
    h = ops.conv2d(x, params[f"{prefix}.conv1.weight"])
    h = ops.relu(_bn(h, params, f"{prefix}.bn1", training))
    h = ops.conv2d(h, params[f"{prefix}.conv2.weight"], stride=stride, padding=dilation, dilation=dilation)
    h = ops.relu(_bn(h, params, f"{prefix}.bn2", training))
    h = ops.conv2d(h, params[f"{prefix}.conv3.weight"])
    h = _bn(h, params, f"{prefix}.bn3", training)
    if f"{prefix}.shortcut.conv.weight" in params:
        sc = ops.conv2d(x, params[f"{prefix}.shortcut.conv.weight"], stride=stride)
        sc = _bn(sc, params, f"{prefix}.shortcut.bn", training)
    else:
        if h.shape != x.shape:
            raise nn.ShapeMismatch(f"identity shortcut {x.shape} cannot add to {h.shape}")
        sc = x
    return ops.relu(h + sc)


def backbone_forward(
    x: Tensor,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    prefix: str,
    training: bool = False,
    captures: dict[str, Tensor] | None = None,
) -> tuple[Tensor, Tensor]:
    """Run one window's backbone. Returns (final feature map, pooled N×C_last).

    ``captures`` receives every stage output (post-attention) keyed
    ``stage1``..``stageK``, plus ``stem``.
    """
    if x.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise nn.ShapeMismatch(f"backbone expects N×{cfg.input_channels}×H×W, got {x.shape}")
    h = ops.conv2d(x, params[f"{prefix}.stem.conv.weight"], stride=2, padding=3)
    h = ops.relu(_bn(h, params, f"{prefix}.stem.bn", training))
    h = ops.max_pool2d(h, 3, 2, 1)
    if captures is not None:
        captures["stem"] = h
    nstages = len(cfg.stage_channels)
    layout = list(_block_layout(cfg))
    for s in range(nstages):
        for stage, b, _, _, stride, dil in layout:
            if stage == s:
                h = residual_block(h, params, f"{prefix}.stage{s + 1}.block{b}", dil, stride, training)
        if cfg.use_cbam:
            h = cbam_apply(h, params, f"{prefix}.stage{s + 1}.cbam")
        if captures is not None:
            captures[f"stage{s + 1}"] = h
    return h, ops.global_pool(h, "avg")


def predict(logits) -> int:
    """Argmax over two logits; an exact tie goes to the positive class (1)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits).reshape(-1)
    return 1 if z[1] >= z[0] else 0


def predict_batch(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    return (z[:, 1] >= z[:, 0]).astype(np.int64)


# --------------------------------------------------------------------------
# the model


@dataclass
class CbamdrnModel:
    config: ModelConfig = field(default_factory=ModelConfig)
    mode: str = "DWL"
    seed: int = 0
    dtype: type = np.float32
    params: dict[str, Tensor] = field(default_factory=dict)
    training: bool = False

    def __post_init__(self):
        mode = self.mode.upper()
        if mode not in WINDOW_SETS:
            raise ValueError(f"unknown window mode {self.mode!r}; expected one of {sorted(WINDOW_SETS)}")
        self.mode = mode
        if not self.params:
            rng = np.random.default_rng(self.seed)
            for w in self.windows:
                self.params.update(init_backbone(self.config, w, rng, self.dtype))
            width = len(self.windows) * self.config.stage_channels[-1]
            self.params["fusion.weight"] = _he(rng, (width, self.config.num_classes), width, self.dtype)
            self.params["fusion.bias"] = _zeros((self.config.num_classes,), self.dtype)

    @property
    def windows(self) -> tuple[str, ...]:
        return WINDOW_SETS[self.mode]

    @property
    def fusion_width(self) -> int:
        return self.params["fusion.weight"].shape[0]

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def num_parameters(self) -> int:
        return sum(v.data.size for v in self.trainable().values())

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def train_mode(self, on: bool = True) -> "CbamdrnModel":
        self.training = on
        return self

    def check_windows(self, inputs: Sequence) -> None:
        if len(inputs) != len(self.windows):
            raise WindowSetMismatch(
                f"{self.mode} model takes {len(self.windows)} windows, got {len(inputs)}"
            )
        names = [getattr(x, "window_name", None) for x in inputs]
        if all(n is not None for n in names) and set(names) != set(self.windows):
            raise WindowSetMismatch(f"{self.mode} expects windows {self.windows}, got {tuple(names)}")

    def features(self, inputs: Sequence, captures: dict[str, dict[str, Tensor]] | None = None) -> Tensor:
        """Concatenated pooled features, N×(windows·C_last).

        ``inputs`` holds one N×1×H×W array (or Tensor) per window, in the
        model's window order; images are routed positionally.
        """
        self.check_windows(inputs)
        pooled = []
        for name, x in zip(self.windows, inputs):
            t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
            cap = None
            if captures is not None:
                cap = captures.setdefault(name, {})
            _, p = backbone_forward(t, self.params, self.config, name, self.training, cap)
            pooled.append(p)
        return nn.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]

    def forward(self, inputs: Sequence, captures: dict[str, dict[str, Tensor]] | None = None) -> Tensor:
        feats = self.features(inputs, captures)
        return ops.linear(feats, self.params["fusion.weight"], self.params["fusion.bias"])

    __call__ = forward

    def load_state(self, store: Mapping[str, Tensor]) -> None:
        """Copy values from ``store`` into this model's tensors (shapes must match)."""
        expected = self.expected_shapes()
        if set(store) != set(expected):
            raise nn.IncompatibleWeights("weight names do not match this model")
        for k, t in store.items():
            if t.shape != expected[k]:
                raise nn.IncompatibleWeights(f"{k}: shape {t.shape} != {expected[k]}")
            self.params[k].data[...] = t.data

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].data[...] = arr

    def save(self, path) -> None:
        nn.save_weights(self.params, path)

    @classmethod
    def load(cls, path, config: ModelConfig, mode: str) -> "CbamdrnModel":
        model = cls(config=config, mode=mode)
        store = nn.load_weights(path, expected=model.expected_shapes())
        model.load_state(store)
        return model


def classify(windows: Sequence, model: CbamdrnModel) -> np.ndarray:
    """Logits (length 2) for one slice given its ordered window images."""
    arrays = []
    for w in windows:
        values = getattr(w, "values", w)
        arr = np.asarray(values, dtype=model.dtype)
        arrays.append(arr.reshape(1, 1, *arr.shape[-2:]))
    model.check_windows(windows)
    with nn.no_grad():
        return model.forward(arrays).data[0]
