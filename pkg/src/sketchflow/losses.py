"""Training objectives for the encoder and flow stages."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ConditionalFlow, Decoder, Encoder, PreparedCloud

TERM_NAMES = ("sdf", "f_l1", "f_nce", "sketch", "g_l1", "g_nce")


def _rows(codes: Tensor, n_per: int) -> Tensor:
    """Repeat each row of a (B, D) code tensor ``n_per`` times."""
    return ad.take(codes, np.repeat(np.arange(codes.shape[0]), n_per))


def loss_sdf(decoder: Decoder, codes, points, targets) -> Tensor:
    """Mean |D([code, p]) - clamp(s(p))| over all points.

    ``codes`` (D,) with points (m, 3), or (B, D) with points (B, m, 3) and
    targets (B, m).
    """
    pts = np.asarray(points)
    tgt = np.asarray(targets)
    if tgt.size == 0:
        raise ValueError("empty SDF sample subset")
    delta = decoder.config.clamp
    tgt = np.clip(tgt, -delta, delta).astype(decoder.dtype)
    codes = ad.as_tensor(codes, decoder.dtype)
    if codes.ndim == 2:
        b, m = pts.shape[:2]
        pred = decoder(_rows(codes, m), pts.reshape(b * m, 3))
    else:
        pred = decoder(codes, pts.reshape(-1, 3))
    return ad.mean(ad.abs_(pred - tgt.reshape(-1)))


def loss_code_l1(pred, target) -> Tensor:
    """L1 norm of the code difference; for (B, D) inputs, the mean over rows."""
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"code L1: shapes {pred.shape} and {target.shape} differ")
    per = ad.sum_(ad.abs_(pred - target), axis=-1)
    return per if pred.ndim == 1 else ad.mean(per)


def loss_nce(queries, targets, pairing=None, temperature: float = 1.0) -> Tensor:
    """Contrastive loss with exp(-L1) logits, summed over queries.

    ``queries`` (Q, D), ``targets`` (N, D); ``pairing[i]`` is the target index
    matching query ``i`` (defaults to ``i``).  Uses a stable log-sum-exp.
    """
    q = ad.as_tensor(queries)
    t = ad.as_tensor(targets, q.dtype)
    n_q, n_t = q.shape[0], t.shape[0]
    if n_t < 1:
        raise ValueError("need at least one target code")
    pairing = np.arange(n_q) if pairing is None else np.asarray(pairing, dtype=np.intp)
    if len(pairing) != n_q or (n_q and (pairing.min() < 0 or pairing.max() >= n_t)):
        raise ValueError("every query needs a valid matching target index")
    d = q.shape[1]
    diff = ad.reshape(q, (n_q, 1, d)) - ad.reshape(t, (1, n_t, d))
    logits = ad.sum_(ad.abs_(diff), axis=-1) * (-1.0 / temperature)  # (Q, N)
    onehot = np.zeros((n_q, n_t), dtype=q.dtype)
    onehot[np.arange(n_q), pairing] = 1.0
    matched = ad.sum_(logits * onehot, axis=1)
    return ad.sum_(ad.logsumexp(logits, axis=1) - matched)


def loss_sketch(decoder: Decoder, codes, sketch_points) -> Tensor:
    """Mean |D([code, g_i])| over the sketch's own points (batched like :func:`loss_sdf`)."""
    pts = np.asarray(sketch_points)
    codes = ad.as_tensor(codes, decoder.dtype)
    if codes.ndim == 2:
        b, n = pts.shape[:2]
        pred = decoder(_rows(codes, n), pts.reshape(b * n, 3))
    else:
        pred = decoder(codes, pts.reshape(-1, 3))
    return ad.mean(ad.abs_(pred))


# ----------------------------------------------------------------------------
# encoder objective


@dataclass
class ShapeItem:
    cloud: PreparedCloud
    code: np.ndarray  # inverted e_f
    sdf_points: np.ndarray  # (m, 3)
    sdf_values: np.ndarray  # (m,)


@dataclass
class PairItem:
    sketch: PreparedCloud
    sketch_points: np.ndarray  # (N_s, 3) points used by the sketch loss
    shape: ShapeItem


@dataclass
class BatchSpec:
    pairs: list[PairItem] = field(default_factory=list)
    extra: list[ShapeItem] = field(default_factory=list)

    @property
    def shapes(self) -> list[ShapeItem]:
        return [p.shape for p in self.pairs] + list(self.extra)


@dataclass
class LossReport:
    terms: dict[str, float]
    total: float

    def to_json_line(self, step: int) -> str:
        return json.dumps({"step": step, **{k: round(v, 8) for k, v in self.terms.items()}, "total": round(self.total, 8)})


def loss_encoder_total(
    batch: BatchSpec,
    decoder: Decoder,
    encoder: Encoder,
    shape_only: bool = False,
    weights: dict[str, float] | None = None,
    temperature: float = 1.0,
) -> tuple[Tensor, LossReport]:
    """L_shape (+ L_sketch + L_align unless ``shape_only``), unweighted by default."""
    weights = {k: 1.0 for k in TERM_NAMES} | (weights or {})
    shapes = batch.shapes
    if not shapes:
        raise ValueError("batch has no shapes")
    if not shape_only and not batch.pairs:
        raise ValueError("sketch terms need at least one sketch-shape pair")
    dt = encoder.dtype
    targets = np.stack([s.code for s in shapes]).astype(dt)

    clouds = [s.cloud for s in shapes]
    if not shape_only:
        clouds += [p.sketch for p in batch.pairs]
    codes = encoder.encode(clouds)
    n_shapes = len(shapes)
    shape_codes = codes[:n_shapes]

    terms: dict[str, Tensor] = {
        "sdf": loss_sdf(decoder, shape_codes, np.stack([s.sdf_points for s in shapes]), np.stack([s.sdf_values for s in shapes])),
        "f_l1": loss_code_l1(shape_codes, targets),
        "f_nce": loss_nce(shape_codes, targets, temperature=temperature),
    }
    if not shape_only:
        sketch_codes = codes[n_shapes:]
        n_pairs = len(batch.pairs)
        terms["sketch"] = loss_sketch(decoder, sketch_codes, np.stack([p.sketch_points for p in batch.pairs]))
        terms["g_l1"] = loss_code_l1(sketch_codes, targets[:n_pairs])
        terms["g_nce"] = loss_nce(sketch_codes, targets, np.arange(n_pairs), temperature=temperature)
    total = None
    for k, v in terms.items():
        total = v * weights[k] if total is None else total + v * weights[k]
    report = LossReport({k: float(v.data) for k, v in terms.items()}, float(total.data))
    return total, report


# ----------------------------------------------------------------------------
# flow objectives


def gaussian_log_prob(z: Tensor) -> Tensor:
    d = z.shape[-1]
    return ad.sum_(ad.square(z), axis=-1) * -0.5 - 0.5 * d * math.log(2 * math.pi)


def loss_cnf_nll(flow: ConditionalFlow, e_f, condition) -> Tensor:
    """-[log N(z; 0, I) + log_det]; averaged over rows for batched input."""
    z, log_det = flow.forward(e_f, condition)
    if not np.all(np.isfinite(log_det.data)):
        raise FloatingPointError("non-finite log-determinant")
    nll = -(gaussian_log_prob(z) + log_det)
    return nll if nll.ndim == 0 else ad.mean(nll)


def loss_sketch_cnf(
    flow: ConditionalFlow,
    decoder: Decoder,
    condition,
    sketch_points,
    k: int = 8,
    lam: float = 100.0,
    rng_seed=0,
    n_points: int | None = None,
) -> Tensor:
    """λ/(N_s K) Σ_i Σ_k |D([F⁻¹(z_k; c), g_i])| with z_k ~ N(0, I), averaged over sketches.

    ``condition`` (D,) with points (N, 3), or (B, D) with (B, N, 3).  When
    ``n_points`` is set, a random subset of that many sketch points is used
    per sketch (an unbiased estimate of the same mean).
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    cond = ad.as_tensor(condition, flow.dtype)
    pts = np.asarray(sketch_points)
    if cond.ndim == 1:
        cond = ad.reshape(cond, (1, -1))
        pts = pts[None]
    b, d = cond.shape
    z = rng.standard_normal((b * k, d)).astype(flow.dtype)
    if n_points is not None and n_points < pts.shape[1]:
        pts = np.stack([p[rng.choice(len(p), n_points, replace=False)] for p in pts])
    n = pts.shape[1]
    codes = flow.inverse(z, _rows(cond, k))  # (B*K, D), sketch-major
    rows = _rows(ad.as_tensor(codes, decoder.dtype), n)
    pred = decoder(rows, np.repeat(pts, k, axis=0).reshape(-1, 3))
    return ad.mean(ad.abs_(pred)) * lam
