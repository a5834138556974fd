"""Finite-difference gradient checks for every differentiable op and loss term.

Each check builds a small random float64 instance per seed and compares the
analytic gradient with central differences.  Non-smooth ops (abs, relu, max)
get inputs kept away from their kinks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import gradient_check
from .models import (
    ConditionalFlow,
    Decoder,
    DecoderConfig,
    Encoder,
    EncoderConfig,
    FlowConfig,
    PreparedCloud,
    SetAbstraction,
    prepare_cloud,
)

TOL = 1e-4
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    seeds: int
    worst: float
    passed: bool
    seconds: float


def _away(rng, shape, gap=0.1):
    """Random values with |x| >= gap."""
    u = rng.standard_normal(shape)
    return np.sign(u) * (gap + np.abs(u))


def _project(out: ad.Tensor, rng) -> ad.Tensor:
    """Scalar <out, R> with a fixed random R, so every output entry matters."""
    r = rng.standard_normal(out.shape)
    return ad.sum_(out * r)


# ----------------------------------------------------------------------------
# op checks: each returns (f, params) for one seed


def _unary(op, make=lambda rng, s: rng.standard_normal(s)):
    def build(rng):
        x = make(rng, (3, 4))
        r = rng.standard_normal((3, 4))
        return (lambda p: ad.sum_(op(p["x"]) * r)), {"x": x}
    return build


def _binary(op, bmake=lambda rng, s: rng.standard_normal(s)):
    def build(rng):
        a, b = rng.standard_normal((3, 4)), bmake(rng, (4,))  # broadcasting second operand
        r = rng.standard_normal((3, 4))
        return (lambda p: ad.sum_(op(p["a"], p["b"]) * r)), {"a": a, "b": b}
    return build


def _matmul(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
    r = rng.standard_normal((2, 3, 5))
    return (lambda p: ad.sum_(ad.matmul(p["a"], p["b"]) * r)), {"a": a, "b": b}


def _reduce(op):
    def build(rng):
        x = rng.standard_normal((3, 4, 2))
        r = rng.standard_normal((3, 2))
        return (lambda p: ad.sum_(op(p["x"]) * r)), {"x": x}
    return build


def _sum_all(rng):
    x = rng.standard_normal((3, 4))
    return (lambda p: ad.sum_(p["x"]) * 1.7), {"x": x}


def _mean_all(rng):
    x = rng.standard_normal((3, 4))
    return (lambda p: ad.mean(ad.square(p["x"]))), {"x": x}


def _max(rng):
    # distinct values with gaps so no tie sits within h
    x = rng.permutation(24).reshape(4, 6) * 0.1 + rng.uniform(0, 0.01, (4, 6))
    r = rng.standard_normal(4)
    return (lambda p: ad.sum_(ad.max_(p["x"], axis=1) * r)), {"x": x}


def _segment_max(rng):
    x = rng.permutation(30).reshape(10, 3) * 0.1 + rng.uniform(0, 0.01, (10, 3))
    starts = np.array([0, 3, 4, 8])
    r = rng.standard_normal((4, 3))
    return (lambda p: ad.sum_(ad.segment_max(p["x"], starts) * r)), {"x": x}


def _broadcast(rng):
    x = rng.standard_normal((1, 4))
    r = rng.standard_normal((3, 4))
    return (lambda p: ad.sum_(ad.broadcast_to(p["x"], (3, 4)) * r)), {"x": x}


def _reshape(rng):
    x = rng.standard_normal((3, 4))
    r = rng.standard_normal((2, 6))
    return (lambda p: ad.sum_(ad.reshape(p["x"], (2, 6)) * r)), {"x": x}


def _concat(rng):
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    r = rng.standard_normal((3, 6))
    return (lambda p: ad.sum_(ad.concat([p["a"], p["b"]], axis=-1) * r)), {"a": a, "b": b}


def _slice(rng):
    x = rng.standard_normal((4, 5))
    r = rng.standard_normal((2, 3))
    return (lambda p: ad.sum_(ad.slice_(p["x"], (slice(1, 3), slice(0, 3))) * r)), {"x": x}


def _take(rng):
    x = rng.standard_normal((5, 3))
    idx = rng.integers(0, 5, 8)  # repeats exercise gradient accumulation
    r = rng.standard_normal((8, 3))
    return (lambda p: ad.sum_(ad.take(p["x"], idx) * r)), {"x": x}


def _dropout(rng):
    x = rng.standard_normal((6, 5))
    r = rng.standard_normal((6, 5))
    mask_seed = int(rng.integers(1 << 30))
    return (lambda p: ad.sum_(ad.dropout(p["x"], 0.8, np.random.default_rng(mask_seed), True) * r)), {"x": x}


def _linear(rng):
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    r = rng.standard_normal((2, 3, 5))
    return (lambda p: ad.sum_(ad.linear(p["x"], p["w"], p["b"]) * r)), {"x": x, "w": w, "b": b}


def _wn_linear(rng):
    x, v = rng.standard_normal((6, 4)), rng.standard_normal((5, 4))
    g, b = rng.uniform(0.5, 1.5, 5), rng.standard_normal(5)
    r = rng.standard_normal((6, 5))
    return (lambda p: ad.sum_(ad.weight_norm_linear(p["x"], p["v"], p["g"], p["b"]) * r)), {"x": x, "v": v, "g": g, "b": b}


OP_CHECKS: dict[str, Callable] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, lambda rng, s: _away(rng, s, 0.5)),
    "neg": _unary(ad.neg),
    "matmul": _matmul,
    "relu": _unary(ad.relu, lambda rng, s: _away(rng, s)),
    "tanh": _unary(ad.tanh),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, lambda rng, s: rng.uniform(0.2, 3.0, s)),
    "sqrt": _unary(ad.sqrt, lambda rng, s: rng.uniform(0.2, 3.0, s)),
    "abs": _unary(ad.abs_, lambda rng, s: _away(rng, s)),
    "square": _unary(ad.square),
    "sum": _sum_all,
    "sum_axis": _reduce(lambda x: ad.sum_(x, axis=1)),
    "mean": _mean_all,
    "mean_axis": _reduce(lambda x: ad.mean(x, axis=1)),
    "max": _max,
    "segment_max": _segment_max,
    "logsumexp": _reduce(lambda x: ad.logsumexp(x, axis=1)),
    "broadcast": _broadcast,
    "reshape": _reshape,
    "concat": _concat,
    "slice": _slice,
    "take": _take,
    "dropout": _dropout,
    "linear": _linear,
    "weight_norm_linear": _wn_linear,
}


# ----------------------------------------------------------------------------
# loss-term checks


D = 4
_DEC = DecoderConfig(latent_dim=D, hidden=8, n_layers=3, keep_prob=1.0, clamp=0.1)
_FLOW = FlowConfig(latent_dim=D, n_layers=3, hidden=(8,))
_ENC = EncoderConfig(
    n_points=32,
    levels=(SetAbstraction(0.25, 0.4, 8, (6,)), SetAbstraction(0.5, 0.8, 4, (6,))),
    global_widths=(8,), head_widths=(8,), latent_dim=D,
)


def _decoder(rng) -> Decoder:
    dec = Decoder(_DEC, seed=rng, dtype=F64)
    # a larger output layer keeps predictions inside the tanh's responsive range
    dec.params["dec/l2/v"].data *= 10.0
    return dec


def _with(model, leaves):
    """A copy of ``model`` whose named params are replaced by ``leaves``."""
    clone = object.__new__(type(model))
    clone.__dict__.update(model.__dict__)
    clone.params = model.params | leaves
    return clone


def _loss_sdf(rng):
    dec = _decoder(rng)
    codes = rng.standard_normal((3, D)) * 0.3
    pts = rng.uniform(-0.5, 0.5, (3, 5, 3))
    tgt = rng.uniform(-0.15, 0.15, (3, 5))
    v0 = dec.params["dec/l0/v"].data.copy()

    def f(p):
        return losses.loss_sdf(_with(dec, {"dec/l0/v": p["v0"]}), p["codes"], pts, tgt)
    return f, {"codes": codes, "v0": v0}


def _loss_l1(rng):
    a, b = rng.standard_normal((5, D)), rng.standard_normal((5, D))
    return (lambda p: losses.loss_code_l1(p["a"], b)), {"a": a}


def _loss_nce(pairing: bool):
    def build(rng):
        q, t = rng.standard_normal((4, D)), rng.standard_normal((6, D))
        pair = rng.permutation(6)[:4] if pairing else None
        return (lambda p: losses.loss_nce(p["q"], p["t"], pair)), {"q": q, "t": t}
    return build


def _loss_sketch(rng):
    dec = _decoder(rng)
    codes = rng.standard_normal((2, D)) * 0.3
    pts = rng.uniform(-0.5, 0.5, (2, 6, 3))
    return (lambda p: losses.loss_sketch(dec, p["codes"], pts)), {"codes": codes}


def _flow(rng) -> ConditionalFlow:
    return ConditionalFlow(_FLOW, seed=rng, dtype=F64, zero_init=False)


def _loss_nll(rng):
    flow = _flow(rng)
    e, c = rng.standard_normal((3, D)), rng.standard_normal((3, D))
    names = ["flow/c0/0/w", "flow/c1/1/b", "flow/c2/bound"]
    init = {k: flow.params[k].data.copy() for k in names}
    return (lambda p: losses.loss_cnf_nll(_with(flow, {k: p[k] for k in names}), p["e"], c)), init | {"e": e}


def _loss_sketch_cnf(rng):
    flow, dec = _flow(rng), _decoder(rng)
    c = rng.standard_normal((2, D))
    pts = rng.uniform(-0.5, 0.5, (2, 5, 3))
    seed = int(rng.integers(1 << 30))
    names = ["flow/c0/1/w", "flow/c1/0/b", "flow/c0/bound"]
    init = {k: flow.params[k].data.copy() for k in names}

    def f(p):
        return losses.loss_sketch_cnf(_with(flow, {k: p[k] for k in names}), dec, c, pts, k=3, lam=100.0, rng_seed=seed)
    return f, init


def _prepared(rng, n) -> list[PreparedCloud]:
    return [prepare_cloud(rng.uniform(-0.5, 0.5, (_ENC.n_points, 3)), _ENC, F64) for _ in range(n)]


def _loss_encoder_total(rng):
    dec = _decoder(rng)
    enc = Encoder(_ENC, seed=rng, dtype=F64)
    enc.params["enc/out/w"].data *= 10.0
    clouds = _prepared(rng, 5)
    shapes = [
        losses.ShapeItem(clouds[i], rng.standard_normal(D) * 0.3, rng.uniform(-0.5, 0.5, (4, 3)), rng.uniform(-0.1, 0.1, 4))
        for i in range(3)
    ]
    pairs = [losses.PairItem(clouds[3 + i], rng.uniform(-0.5, 0.5, (4, 3)), shapes[i]) for i in range(2)]
    batch = losses.BatchSpec(pairs, [shapes[2]])
    names = ["enc/out/w", "enc/head/0/b", "enc/sa1/0/w"]
    init = {k: enc.params[k].data.copy() for k in names}
    return (lambda p: losses.loss_encoder_total(batch, dec, _with(enc, {k: p[k] for k in names}))[0]), init


LOSS_CHECKS: dict[str, Callable] = {
    "loss/sdf": _loss_sdf,
    "loss/f_l1": _loss_l1,
    "loss/f_nce": _loss_nce(False),
    "loss/sketch": _loss_sketch,
    "loss/g_l1": _loss_l1,
    "loss/g_nce": _loss_nce(True),
    "loss/cnf_nll": _loss_nll,
    "loss/sketch_cnf": _loss_sketch_cnf,
    "loss/encoder_total": _loss_encoder_total,
}

ALL_CHECKS = OP_CHECKS | LOSS_CHECKS


def run_check(name: str, n_seeds: int = 20, tol: float = TOL) -> CheckResult:
    build = ALL_CHECKS[name]
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        f, params = build(rng)
        worst = max(worst, gradient_check(f, params, h=1e-6))
    return CheckResult(name, n_seeds, worst, worst < tol, time.perf_counter() - t0)


def run_suite(n_seeds: int = 20, tol: float = TOL, emit=None, names=None) -> list[CheckResult]:
    out = []
    for name in names or ALL_CHECKS:
        res = run_check(name, n_seeds, tol)
        out.append(res)
        if emit is not None:
            emit({"check": name, "seeds": n_seeds, "worst_rel_err": res.worst, "passed": res.passed})
    return out
