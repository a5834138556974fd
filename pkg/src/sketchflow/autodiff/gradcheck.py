from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


def gradient_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` maps a dict of parameter Tensors to a scalar loss Tensor and must be
    deterministic (no fresh randomness between calls).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in base.items()}
    analytic = backward(f(leaves), leaves)

    def evaluate(arrays):
        val = float(f({k: Tensor(v) for k, v in arrays.items()}).data)
        if not np.isfinite(val):
            raise FloatingPointError("non-finite loss at a perturbed point")
        return val

    worst = 0.0
    for k, arr in base.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate(base)
            flat[i] = orig - h
            fm = evaluate(base)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[k].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
