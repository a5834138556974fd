from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .config import FlowConfig
from .params import he_normal, leaf


class ConditionalFlow:
    """Conditional RealNVP over latent codes.

    Layer ``l`` keeps ``d`` coordinates fixed and affinely maps the rest:
    ``y = x * exp(s) + t`` with ``(s, t) = net_l([cond; x_fixed])``.  Even
    layers keep the leading ``d`` coordinates, odd layers the trailing ``d``.
    ``s = bound_l * tanh(raw_s)`` with a learnable per-layer bound.

    The forward direction maps shape codes to the Gaussian base space.
    """

    prefix = "flow/"

    def __init__(self, config: FlowConfig, params: dict[str, Tensor] | None = None, seed=0, dtype=np.float32,
                 zero_init: bool = True):
        self.config = config
        self.params = params if params is not None else self.init_params(config, seed, dtype, zero_init)

    @staticmethod
    def init_params(config: FlowConfig, seed=0, dtype=np.float32, zero_init: bool = True) -> dict[str, Tensor]:
        """``zero_init`` zeroes each conditioner's output layer, so the flow starts as the identity."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        D, d = config.latent_dim, config.split
        params = {}
        for layer in range(config.n_layers):
            n_fixed = d
            n_moved = D - d
            dims = [D + n_fixed, *config.hidden, 2 * n_moved]
            for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
                w = he_normal(rng, fo, fi, dtype)
                if i == len(dims) - 2:
                    w = np.zeros_like(w) if zero_init else w * 0.1
                params[f"flow/c{layer}/{i}/w"] = leaf(w, f"flow/c{layer}/{i}/w")
                params[f"flow/c{layer}/{i}/b"] = leaf(np.zeros(fo, dtype=dtype), f"flow/c{layer}/{i}/b")
            params[f"flow/c{layer}/bound"] = leaf(np.full(1, config.scale_bound_init, dtype=dtype), f"flow/c{layer}/bound")
        return params

    @property
    def dtype(self):
        return self.params["flow/c0/bound"].dtype

    def _split(self, layer: int) -> tuple[slice, slice]:
        D, d = self.config.latent_dim, self.config.split
        if layer % 2 == 0:
            return slice(0, d), slice(d, D)
        return slice(D - d, D), slice(0, D - d)

    def _conditioner(self, layer: int, cond: Tensor, fixed: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        h = ad.concat([cond, fixed], axis=-1)
        n = len(self.config.hidden) + 1
        for i in range(n):
            h = ad.linear(h, p[f"flow/c{layer}/{i}/w"], p[f"flow/c{layer}/{i}/b"])
            if i < n - 1:
                h = ad.relu(h)
        n_moved = self.config.latent_dim - self.config.split
        s = p[f"flow/c{layer}/bound"] * ad.tanh(h[:, :n_moved])
        return s, h[:, n_moved:]

    def _prep(self, x, cond) -> tuple[Tensor, Tensor, bool]:
        x = ad.as_tensor(x, self.dtype)
        cond = ad.as_tensor(cond, self.dtype)
        single = x.ndim == 1
        if single:
            x = ad.reshape(x, (1, -1))
        if cond.ndim == 1:
            cond = ad.broadcast_to(ad.reshape(cond, (1, -1)), (x.shape[0], cond.shape[0]))
        D = self.config.latent_dim
        if x.shape[-1] != D or cond.shape != (x.shape[0], D):
            raise ad.ShapeError(f"flow: expected codes (n, {D}) and condition (n, {D}), got {x.shape} and {cond.shape}")
        return x, cond, single

    def _assemble(self, layer: int, fixed: Tensor, moved: Tensor) -> Tensor:
        return ad.concat([fixed, moved] if layer % 2 == 0 else [moved, fixed], axis=-1)

    def forward(self, e, cond) -> tuple[Tensor, Tensor]:
        """``(z, log_det)`` for shape codes ``e`` under condition ``cond``."""
        x, cond, single = self._prep(e, cond)
        log_det = None
        for layer in range(self.config.n_layers):
            keep, move = self._split(layer)
            fixed, moved = x[:, keep], x[:, move]
            s, t = self._conditioner(layer, cond, fixed)
            x = self._assemble(layer, fixed, moved * ad.exp(s) + t)
            ld = ad.sum_(s, axis=1)
            log_det = ld if log_det is None else log_det + ld
        if single:
            return ad.reshape(x, (-1,)), ad.reshape(log_det, ())
        return x, log_det

    def inverse(self, z, cond) -> Tensor:
        """Exact inverse of :meth:`forward`: base samples back to shape codes."""
        x, cond, single = self._prep(z, cond)
        for layer in reversed(range(self.config.n_layers)):
            keep, move = self._split(layer)
            fixed, moved = x[:, keep], x[:, move]
            s, t = self._conditioner(layer, cond, fixed)
            x = self._assemble(layer, fixed, (moved - t) * ad.exp(-s))
        return ad.reshape(x, (-1,)) if single else x
