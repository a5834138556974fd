"""Parameter stores: flat ``name -> Tensor`` dicts with prefixed names."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Mapping

import numpy as np

from ..autodiff import Tensor


def he_normal(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)).astype(dtype)


def leaf(arr, name: str) -> Tensor:
    return Tensor(np.array(arr), requires_grad=True, name=name)


def to_arrays(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in params.items()}


def from_arrays(arrays: Mapping[str, np.ndarray], prefix: str = "", dtype=None) -> dict[str, Tensor]:
    return {
        k: leaf(v if dtype is None else np.asarray(v, dtype=dtype), k)
        for k, v in sorted(arrays.items())
        if k.startswith(prefix)
    }


def checksum(params: Mapping[str, Tensor] | Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        v = params[k]
        arr = v.data if isinstance(v, Tensor) else np.asarray(v)
        h.update(k.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def cast(params: Mapping[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: leaf(t.data.astype(dtype), k) for k, t in params.items()}


@contextmanager
def frozen(*stores: Mapping[str, Tensor]):
    """Temporarily mark every parameter in ``stores`` as not requiring gradients."""
    tensors = [t for store in stores for t in store.values()]
    before = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, before):
            t.requires_grad = flag
