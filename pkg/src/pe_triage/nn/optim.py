"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Adam:
    """Adaptive moment optimizer over a name -> Tensor parameter store.

    Only tensors with ``requires_grad`` are updated; a parameter whose grad is
    ``None`` is treated as having a zero gradient.
    """

    params: dict[str, Tensor]
    config: AdamConfig = field(default_factory=AdamConfig)
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def optimizer_step(store: dict[str, Tensor], optimizer: Adam | None = None, **cfg) -> Adam:
    """One Adam step over ``store``; returns the optimizer so state carries over."""
    if optimizer is None:
        optimizer = Adam(store, AdamConfig(**cfg))
    optimizer.step()
    return optimizer
