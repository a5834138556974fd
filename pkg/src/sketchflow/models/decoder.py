from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .config import DecoderConfig
from .params import he_normal, leaf


class Decoder:
    """SDF decoder: ``[code, point] -> clamp * tanh(MLP(.))``.

    Hidden layers are weight-normalised linear maps with ReLU and (train mode
    only) inverted dropout.  Parameter names are ``dec/l{i}/{v,g,b}``.
    """

    prefix = "dec/"

    def __init__(self, config: DecoderConfig, params: dict[str, Tensor] | None = None, seed=0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else self.init_params(config, seed, dtype)

    @staticmethod
    def init_params(config: DecoderConfig, seed=0, dtype=np.float32) -> dict[str, Tensor]:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dims = [config.latent_dim + 3] + [config.hidden] * (config.n_layers - 1) + [1]
        params = {}
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            v = he_normal(rng, fo, fi, dtype)
            if i == len(dims) - 2:
                v *= 0.1
            params[f"dec/l{i}/v"] = leaf(v, f"dec/l{i}/v")
            params[f"dec/l{i}/g"] = leaf(np.linalg.norm(v, axis=1).astype(dtype), f"dec/l{i}/g")
            params[f"dec/l{i}/b"] = leaf(np.zeros(fo, dtype=dtype), f"dec/l{i}/b")
        return params

    @property
    def dtype(self):
        return self.params["dec/l0/v"].dtype

    def __call__(self, codes, points, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Predicted SDF per point.

        ``codes`` is a single (D,) code shared by all points or one (n, D)
        row per point; ``points`` is (n, 3).
        """
        cfg = self.config
        codes = ad.as_tensor(codes, self.dtype)
        points = ad.as_tensor(points, self.dtype)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ad.ShapeError(f"decoder: points must be (n, 3), got {points.shape}")
        if codes.shape[-1] != cfg.latent_dim:
            raise ad.ShapeError(f"decoder: code dim {codes.shape[-1]} != latent_dim {cfg.latent_dim}")
        n = points.shape[0]
        if codes.ndim == 1:
            codes = ad.broadcast_to(ad.reshape(codes, (1, -1)), (n, cfg.latent_dim))
        elif codes.shape[0] != n:
            raise ad.ShapeError(f"decoder: {codes.shape[0]} codes for {n} points")
        h = ad.concat([codes, points], axis=-1)
        last = cfg.n_layers - 1
        for i in range(cfg.n_layers):
            p = self.params
            h = ad.weight_norm_linear(h, p[f"dec/l{i}/v"], p[f"dec/l{i}/g"], p[f"dec/l{i}/b"])
            if i < last:
                h = ad.dropout(ad.relu(h), cfg.keep_prob, rng, train)
        return ad.reshape(ad.tanh(h), (n,)) * cfg.clamp

    def predict(self, code: np.ndarray, points: np.ndarray, chunk: int = 32768) -> np.ndarray:
        """Eval-mode SDF without recording a graph; chunked for dense grids."""
        pts = np.asarray(points).reshape(-1, 3)
        out = np.empty(len(pts), dtype=np.float64)
        with ad.no_grad():
            for s in range(0, len(pts), chunk):
                out[s : s + chunk] = self(code, pts[s : s + chunk]).data
        return out
