from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class Adam:
    """Bias-corrected Adam over a name->Tensor parameter mapping.

    Moments are created lazily the first time a parameter name is seen, so a
    single optimizer can own any subset of a store.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    check_finite: bool = True
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if self.check_finite:
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError(f"non-finite gradient for '{k}'")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"adam: gradient shape {g.shape} does not match parameter '{k}' {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state_arrays(self, prefix: str = "opt/") -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.array([self.step_count], dtype=np.float64)}
        for k in sorted(self.m):
            out[f"{prefix}m/{k}"] = self.m[k]
            out[f"{prefix}v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "opt/") -> None:
        self.m.clear()
        self.v.clear()
        self.step_count = int(arrays[f"{prefix}step"][0]) if f"{prefix}step" in arrays else 0
        for name, arr in arrays.items():
            if name.startswith(f"{prefix}m/"):
                self.m[name[len(prefix) + 2 :]] = np.array(arr)
            elif name.startswith(f"{prefix}v/"):
                self.v[name[len(prefix) + 2 :]] = np.array(arr)


def adam_step(state: Adam, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float | None = None) -> Adam:
    state.step(params, grads, lr)
    return state
