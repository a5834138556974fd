"""Hierarchical point-set encoder (PointNet++-style, single-scale grouping).

Grouping depends only on point coordinates, never on parameters, so it is
precomputed once per cloud by :func:`prepare_cloud`.  The cloud is sorted
lexicographically first, which makes FPS, ball queries and therefore the
whole encoder exactly invariant to the input ordering.

Ball queries keep at most ``max_group`` neighbours within the radius, nearest
first.  The usual padding-by-repetition is skipped: repeated members cannot
change a max-pool, so groups are stored ragged and pooled by segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..sampling import fps_indices
from .config import EncoderConfig
from .params import he_normal, leaf


@dataclass
class Level:
    centers: np.ndarray  # (M, 3)
    members: np.ndarray  # (P,) indices into the previous level's points, grouped by centre
    rel: np.ndarray  # (P, 3) member offset from its centre, divided by the radius
    starts: np.ndarray  # (M,) first row of each centre's group


@dataclass
class PreparedCloud:
    levels: list[Level]


def _ball_query(points: np.ndarray, centers: np.ndarray, radius: float, k: int) -> list[np.ndarray]:
    d2 = np.sum((centers[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    inside = np.take_along_axis(d2, order, axis=1) <= radius * radius
    # the centre is one of the points, so every group has at least one member
    return [row[ok] if ok.any() else row[:1] for row, ok in zip(order, inside)]


def prepare_cloud(cloud: np.ndarray, config: EncoderConfig, dtype=np.float32) -> PreparedCloud:
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.shape != (config.n_points, 3):
        raise ValueError(f"encoder expects ({config.n_points}, 3) points, got {pts.shape}")
    pts = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]
    levels = []
    for lv in config.levels:
        m = max(1, int(round(lv.fraction * len(pts))))
        centers = pts[fps_indices(pts, m, 0)]
        groups = _ball_query(pts, centers, lv.radius, lv.max_group)
        members = np.concatenate(groups)
        owner = np.repeat(np.arange(m), [len(g) for g in groups])
        rel = ((pts[members] - centers[owner]) / lv.radius).astype(dtype)
        starts = np.concatenate([[0], np.cumsum([len(g) for g in groups])[:-1]]).astype(np.intp)
        levels.append(Level(centers, members, rel, starts))
        pts = centers
    return PreparedCloud(levels)


class Encoder:
    """Point cloud (N_s, 3) -> latent code (D,).  Parameter prefix ``enc/``."""

    prefix = "enc/"

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor] | None = None, seed=0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else self.init_params(config, seed, dtype)

    @staticmethod
    def _layout(config: EncoderConfig) -> list[tuple[str, int, int]]:
        out = []
        feat = 0
        for li, lv in enumerate(config.levels):
            fi = feat + 3
            for wi, w in enumerate(lv.widths):
                out.append((f"enc/sa{li}/{wi}", fi, w))
                fi = w
            feat = fi
        fi = feat + 3
        for wi, w in enumerate(config.global_widths):
            out.append((f"enc/glob/{wi}", fi, w))
            fi = w
        for wi, w in enumerate(config.head_widths):
            out.append((f"enc/head/{wi}", fi, w))
            fi = w
        out.append(("enc/out", fi, config.latent_dim))
        return out

    @classmethod
    def init_params(cls, config: EncoderConfig, seed=0, dtype=np.float32) -> dict[str, Tensor]:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = {}
        for name, fi, fo in cls._layout(config):
            w = he_normal(rng, fo, fi, dtype)
            if name == "enc/out":
                w *= 0.1
            params[f"{name}/w"] = leaf(w, f"{name}/w")
            params[f"{name}/b"] = leaf(np.zeros(fo, dtype=dtype), f"{name}/b")
        return params

    @property
    def dtype(self):
        return self.params["enc/out/w"].dtype

    def _mlp(self, h: Tensor, prefix: str, n: int) -> Tensor:
        for i in range(n):
            h = ad.relu(ad.linear(h, self.params[f"{prefix}/{i}/w"], self.params[f"{prefix}/{i}/b"]))
        return h

    def prepare(self, cloud: np.ndarray) -> PreparedCloud:
        return prepare_cloud(cloud, self.config, self.dtype)

    def encode(self, batch: list[PreparedCloud]) -> Tensor:
        """Codes (B, D) for a batch of prepared clouds."""
        cfg = self.config
        dt = self.dtype
        feats = None  # (sum of previous-level point counts, C)
        for li, lv in enumerate(cfg.levels):
            levels = [c.levels[li] for c in batch]
            rel = Tensor(np.concatenate([lvl.rel for lvl in levels]).astype(dt, copy=False))
            sizes = np.array([len(lvl.rel) for lvl in levels])
            row_off = np.concatenate([[0], np.cumsum(sizes)[:-1]])
            starts = np.concatenate([lvl.starts + off for lvl, off in zip(levels, row_off)])
            if feats is None:
                h = rel
            else:
                prev = np.array([len(c.levels[li - 1].centers) for c in batch])
                pt_off = np.concatenate([[0], np.cumsum(prev)[:-1]])
                idx = np.concatenate([lvl.members + off for lvl, off in zip(levels, pt_off)])
                h = ad.concat([ad.take(feats, idx), rel], axis=-1)
            feats = ad.segment_max(self._mlp(h, f"enc/sa{li}", len(lv.widths)), starts)
        counts = [len(c.levels[-1].centers) for c in batch]
        centers = Tensor(np.concatenate([c.levels[-1].centers for c in batch]).astype(dt))
        h = self._mlp(ad.concat([feats, centers], axis=-1), "enc/glob", len(cfg.global_widths))
        h = ad.segment_max(h, np.concatenate([[0], np.cumsum(counts)[:-1]]))  # (B, C)
        h = self._mlp(h, "enc/head", len(cfg.head_widths))
        return ad.linear(h, self.params["enc/out/w"], self.params["enc/out/b"])

    def __call__(self, cloud) -> Tensor:
        prepared = cloud if isinstance(cloud, PreparedCloud) else self.prepare(cloud)
        return ad.reshape(self.encode([prepared]), (self.config.latent_dim,))
