"""Three-stage training: auto-decoder, latent inversion, encoder, conditional flow.

Every stage runs through :func:`_loop`, which owns checkpointing, resume and
the non-finite abort.  All randomness inside a step is drawn from a substream
keyed by ``(seed, stage, ..., step)``, so resuming from a checkpoint replays
exactly the same batches as an uninterrupted run.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, checkpoint
from .config import TrainConfig
from .losses import BatchSpec, PairItem, ShapeItem, loss_cnf_nll, loss_encoder_total, loss_sketch_cnf
from .models import (
    ConditionalFlow,
    Decoder,
    DecoderConfig,
    Encoder,
    EncoderConfig,
    FlowConfig,
    PreparedCloud,
    frozen,
    from_arrays,
    to_arrays,
)
from .models.params import leaf
from .rng import substream
from .sampling import SdfSampleSet

LogFn = Callable[[dict], None]


class NumericalError(RuntimeError):
    """NaN/Inf loss or gradient, or a diverging inversion."""

    def __init__(self, msg: str, checkpoint_path: str | None = None):
        super().__init__(msg if checkpoint_path is None else f"{msg} (last good state: {checkpoint_path})")
        self.checkpoint_path = checkpoint_path


class DivergenceError(NumericalError):
    pass


# ----------------------------------------------------------------------------
# code table


_SFL_MAGIC = b"SFL1"


@dataclass
class CodeTable:
    """Shape id -> latent code.

    File layout (little endian): ``SFL1``, u32 count, u32 dim, then per entry
    u32 id length, utf-8 id, ``dim`` f32 values.
    """

    codes: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        dims = {np.shape(c) for c in self.codes.values()}
        if len(dims) > 1:
            raise ValueError(f"code table mixes shapes {sorted(dims)}")
        for k, c in self.codes.items():
            if not np.all(np.isfinite(c)):
                raise ValueError(f"non-finite code for '{k}'")

    @property
    def dim(self) -> int:
        return len(next(iter(self.codes.values()))) if self.codes else 0

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, key: str) -> bool:
        return key in self.codes

    def __getitem__(self, key: str) -> np.ndarray:
        try:
            return self.codes[key]
        except KeyError:
            raise KeyError(f"missing code for shape '{key}'") from None

    def stack(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self[i] for i in ids])

    def dumps(self) -> bytes:
        out = [_SFL_MAGIC, struct.pack("<II", len(self.codes), self.dim)]
        for k in sorted(self.codes):
            name = k.encode("utf-8")
            out.append(struct.pack("<I", len(name)) + name)
            out.append(np.asarray(self.codes[k], dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def loads(cls, buf: bytes) -> "CodeTable":
        if buf[:4] != _SFL_MAGIC:
            raise ValueError("not an SFL1 code table")
        count, dim = struct.unpack_from("<II", buf, 4)
        pos = 12
        codes = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            codes[name] = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float32)
            pos += 4 * dim
        if pos != len(buf):
            raise ValueError("trailing bytes in code table")
        return cls(codes)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "CodeTable":
        return cls.loads(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# shared loop


@dataclass
class _Stage:
    name: str
    params: dict[str, Tensor]
    opts: dict[str, Adam]

    def state_arrays(self, step: int) -> dict[str, np.ndarray]:
        arrays = dict(to_arrays(self.params))
        for key, opt in self.opts.items():
            arrays |= opt.state_arrays(f"opt/{key}/")
        arrays["meta/step"] = np.array([step], dtype=np.int64)
        return arrays

    def restore(self, arrays: Mapping[str, np.ndarray]) -> int:
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks parameter '{k}'")
            t.data = np.array(arrays[k], dtype=t.dtype)
        for key, opt in self.opts.items():
            opt.load_state_arrays(arrays, f"opt/{key}/")
        return int(arrays["meta/step"][0])


def _update(opt: Adam, params: Mapping[str, Tensor], loss: Tensor, lr: float) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError("non-finite loss")
    opt.step(params, ad.backward(loss, params), lr)
    return value


def _loop(
    stage: _Stage,
    total: int,
    step_fn: Callable[[int], dict[str, float]],
    ckpt_path: str | Path | None,
    every: int,
    resume: str | Path | None,
    log: LogFn | None,
    log_every: int,
    stop_at: int | None,
) -> list[dict]:
    start = stage.restore(checkpoint.load(resume)) if resume is not None else 0
    history = []
    end = total if stop_at is None else min(total, stop_at)
    for step in range(start, end):
        try:
            report = step_fn(step)
        except FloatingPointError as exc:
            saved = None
            if ckpt_path is not None:
                saved = f"{ckpt_path}.lastgood"
                checkpoint.save(saved, stage.state_arrays(step))
            raise NumericalError(f"{stage.name} step {step}: {exc}", saved) from exc
        history.append({"step": step, **report})
        if log is not None and (step % log_every == 0 or step == total - 1):
            log({"stage": stage.name, "step": step, **{k: round(v, 7) for k, v in report.items()}})
        done = step + 1
        if ckpt_path is not None and (done % every == 0 or done == end):
            checkpoint.save(ckpt_path, stage.state_arrays(done))
    return history


def _lr(base: float, step: int, total: int) -> float:
    """Step decay: full rate for the first half, 0.3x to 3/4, then 0.1x."""
    frac = step / max(total, 1)
    return base * (1.0 if frac < 0.5 else 0.3 if frac < 0.75 else 0.1)


def _epoch_slice(seed, tag: tuple, step: int, pool: int, size: int) -> np.ndarray:
    """Indices for ``step`` when each epoch walks a seeded permutation of ``pool`` items."""
    size = min(size, pool)
    per_epoch = math.ceil(pool / size)
    epoch, k = divmod(step, per_epoch)
    perm = substream(seed, *tag, "epoch", epoch).permutation(pool)
    return np.resize(perm, per_epoch * size)[k * size : (k + 1) * size]


def _subset(samples: SdfSampleSet, m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.choice(len(samples), size=min(m, len(samples)), replace=False)
    return samples.positions[idx], samples.values[idx]


# ----------------------------------------------------------------------------
# stage A: auto-decoder


@dataclass
class AutoDecoderResult:
    decoder: Decoder
    codes: CodeTable
    history: list[dict]
    initial_loss: float
    final_loss: float


def sdf_loss_eval(decoder: Decoder, codes: np.ndarray, samples: Sequence[SdfSampleSet], m: int = 2048, seed=0) -> float:
    """Eval-mode mean clamped-L1 SDF loss on a fixed subset of each shape."""
    delta = decoder.config.clamp
    total = 0.0
    for i, s in enumerate(samples):
        pts, vals = _subset(s, m, substream(seed, "eval-subset", i))
        pred = decoder.predict(codes[i], pts)
        total += float(np.mean(np.abs(pred - np.clip(vals, -delta, delta))))
    return total / len(samples)


def train_auto_decoder(
    samples: Sequence[SdfSampleSet],
    decoder_config: DecoderConfig,
    cfg: TrainConfig,
    seed: int,
    ids: Sequence[str] | None = None,
    ckpt_path: str | Path | None = None,
    resume: str | Path | None = None,
    log: LogFn | None = None,
    stop_at: int | None = None,
    dtype=np.float32,
) -> AutoDecoderResult:
    """Jointly fit decoder weights and one free code per shape."""
    if not samples:
        raise ValueError("auto-decoder training needs at least one shape")
    ids = list(ids) if ids is not None else [s.shape_id or f"shape_{i}" for i, s in enumerate(samples)]
    n_shapes, dim = len(samples), decoder_config.latent_dim
    decoder = Decoder(decoder_config, seed=substream(seed, "train", "decoder", "init"), dtype=dtype)
    init = substream(seed, "train", "codes", "init").normal(0.0, cfg.code_init_std, (n_shapes, dim))
    codes = leaf(init.astype(dtype), "codes")
    stage = _Stage("decoder", decoder.params | {"codes": codes}, {"dec": Adam(), "codes": Adam()})
    batch = min(cfg.decoder_shapes_per_step, n_shapes)
    m = min(cfg.decoder_subset, min(len(s) for s in samples))
    delta = decoder_config.clamp
    initial = sdf_loss_eval(decoder, codes.data, samples, seed=seed)

    def step_fn(step: int) -> dict[str, float]:
        sel = _epoch_slice(seed, ("train", "decoder"), step, n_shapes, batch)
        rng = substream(seed, "train", "decoder", "step", step)
        parts = [_subset(samples[i], m, rng) for i in sel]
        pts = np.concatenate([p for p, _ in parts])
        tgt = np.clip(np.concatenate([v for _, v in parts]), -delta, delta).astype(dtype)
        rows = ad.take(codes, np.repeat(sel, m))
        pred = decoder(rows, pts, train=True, rng=rng)
        sdf = ad.mean(ad.abs_(pred - tgt))
        reg = ad.mean(ad.sum_(ad.square(ad.take(codes, sel)), axis=1)) * cfg.code_reg
        loss = sdf + reg
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError("non-finite loss")
        grads = ad.backward(loss, stage.params)
        dec_lr = _lr(cfg.decoder_lr, step, cfg.decoder_steps)
        code_lr = _lr(cfg.code_lr, step, cfg.decoder_steps)
        stage.opts["dec"].step(decoder.params, grads, dec_lr)
        stage.opts["codes"].step({"codes": codes}, grads, code_lr)
        return {"sdf": float(sdf.data), "reg": float(reg.data), "total": value}

    history = _loop(stage, cfg.decoder_steps, step_fn, ckpt_path, cfg.checkpoint_every, resume, log, cfg.log_every, stop_at)
    final = sdf_loss_eval(decoder, codes.data, samples, seed=seed)
    table = CodeTable({k: codes.data[i].copy() for i, k in enumerate(ids)})
    return AutoDecoderResult(decoder, table, history, initial, final)


# ----------------------------------------------------------------------------
# latent inversion


@dataclass
class InversionResult:
    codes: CodeTable
    initial_loss: np.ndarray  # per shape
    final_loss: np.ndarray
    history: list[dict]


def invert_latent(
    decoder: Decoder,
    samples: SdfSampleSet | Sequence[SdfSampleSet],
    cfg: TrainConfig,
    seed: int,
    ids: Sequence[str] | None = None,
    sigma: float | None = None,
    log: LogFn | None = None,
) -> InversionResult:
    """MAP codes for frozen decoder weights: argmin Σ_j |D(e, x_j) - s_j| + ‖e‖²/σ².

    Shapes are optimized together in one batch; the objective is a sum of
    independent per-shape terms and Adam is elementwise, so each code follows
    exactly the trajectory it would have alone.  ``Σ_j`` runs over the
    per-step subset of ``cfg.invert_subset`` samples.
    """
    if isinstance(samples, SdfSampleSet):
        samples = [samples]
    sigma = cfg.effective_sigma() if sigma is None else sigma
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ids = list(ids) if ids is not None else [s.shape_id or f"shape_{i}" for i, s in enumerate(samples)]
    n, dim, dt = len(samples), decoder.config.latent_dim, decoder.dtype
    delta = decoder.config.clamp
    m = min(cfg.invert_subset, min(len(s) for s in samples))
    init = np.stack([substream(seed, "invert", k, "init").normal(0.0, 0.01, dim) for k in ids]).astype(dt)
    codes = leaf(init, "codes")
    opt = Adam(lr=cfg.invert_lr)
    inv_sigma2 = 1.0 / (sigma * sigma)
    first = None
    history = []

    with frozen(decoder.params):
        for step in range(cfg.invert_steps):
            parts = [_subset(s, m, substream(seed, "invert", k, step)) for s, k in zip(samples, ids)]
            pts = np.concatenate([p for p, _ in parts])
            tgt = np.clip(np.concatenate([v for _, v in parts]), -delta, delta).astype(dt)
            pred = decoder(ad.take(codes, np.repeat(np.arange(n), m)), pts)
            data = ad.sum_(ad.reshape(ad.abs_(pred - tgt), (n, m)), axis=1)
            prior = ad.sum_(ad.square(codes), axis=1) * inv_sigma2
            per_shape = data + prior
            values = per_shape.data.astype(np.float64)
            if not np.all(np.isfinite(values)):
                raise NumericalError(f"inversion step {step}: non-finite loss")
            if first is None:
                first = values.copy()
            bad = values > 10.0 * np.maximum(first, 1e-12)
            if step > 0 and bad.any():
                raise DivergenceError(f"inversion diverged for {[ids[i] for i in np.flatnonzero(bad)]}")
            loss = ad.sum_(per_shape)
            opt.step({"codes": codes}, ad.backward(loss, {"codes": codes}), _lr(cfg.invert_lr, step, cfg.invert_steps))
            history.append({"step": step, "total": float(loss.data)})
            if log is not None and (step % cfg.log_every == 0 or step == cfg.invert_steps - 1):
                log({"stage": "invert", "step": step, "total": round(float(loss.data), 7)})
    # loss of the returned codes (the loop above records pre-update values)
    pts_all = [_subset(s, m, substream(seed, "invert", k, "final")) for s, k in zip(samples, ids)]
    final = np.array([
        float(np.sum(np.abs(decoder.predict(codes.data[i], p) - np.clip(v, -delta, delta))))
        + float(np.sum(codes.data[i].astype(np.float64) ** 2)) * inv_sigma2
        for i, (p, v) in enumerate(pts_all)
    ])
    table = CodeTable({k: codes.data[i].copy() for i, k in enumerate(ids)})
    return InversionResult(table, first if first is not None else np.zeros(n), final, history)


# ----------------------------------------------------------------------------
# stage B: encoder


@dataclass
class EncoderData:
    """Everything the encoder and flow stages read, keyed by shape id."""

    shape_clouds: dict[str, PreparedCloud]
    samples: dict[str, SdfSampleSet]
    sketch_clouds: dict[str, PreparedCloud]
    sketch_points: dict[str, np.ndarray]
    pair_ids: list[str]  # training pairs (sketch id == shape id)
    extra_ids: list[str]  # unpaired shapes


@dataclass
class EncoderResult:
    encoder: Encoder
    history: list[dict]


def train_encoder(
    data: EncoderData,
    decoder: Decoder,
    codes: CodeTable,
    encoder_config: EncoderConfig,
    cfg: TrainConfig,
    seed: int,
    phase: str,
    steps: int,
    encoder: Encoder | None = None,
    ckpt_path: str | Path | None = None,
    resume: str | Path | None = None,
    log: LogFn | None = None,
    stop_at: int | None = None,
) -> EncoderResult:
    """``phase="pretrain"``: L_shape on shapes only; ``phase="finetune"``: the full loss on 12 pairs + 24 extras."""
    if phase not in ("pretrain", "finetune"):
        raise ValueError(f"unknown encoder phase '{phase}'")
    for k in list(data.pair_ids) + list(data.extra_ids):
        codes[k]  # raises on a missing code
    if encoder is None:
        encoder = Encoder(encoder_config, seed=substream(seed, "train", "encoder", "init"), dtype=decoder.dtype)
    stage = _Stage(f"encoder-{phase}", encoder.params, {"enc": Adam()})
    pairs, extras = list(data.pair_ids), list(data.extra_ids)
    pool = pairs + extras
    n_pairs = min(cfg.pairs_per_batch, len(pairs))
    n_extra = min(cfg.extra_per_batch, len(extras))
    m_sdf = cfg.encoder_subset
    shape_only = phase == "pretrain"
    tag = ("train", "encoder", phase)

    def shape_item(k: str, rng) -> ShapeItem:
        pts, vals = _subset(data.samples[k], m_sdf, rng)
        return ShapeItem(data.shape_clouds[k], codes[k], pts, vals)

    def step_fn(step: int) -> dict[str, float]:
        rng = substream(seed, *tag, "step", step)
        if shape_only:
            sel = _epoch_slice(seed, tag, step, len(pool), n_pairs + n_extra)
            batch = BatchSpec([], [shape_item(pool[i], rng) for i in sel])
        else:
            psel = _epoch_slice(seed, tag + ("pairs",), step, len(pairs), n_pairs)
            # extras: sampled without replacement within the pair epoch
            per_epoch = math.ceil(len(pairs) / n_pairs)
            epoch, k = divmod(step, per_epoch)
            eperm = substream(seed, *tag, "extras", epoch).permutation(len(extras)) if extras else np.zeros(0, int)
            esel = np.resize(eperm, per_epoch * n_extra)[k * n_extra : (k + 1) * n_extra] if n_extra else eperm
            items = []
            for i in psel:
                key = pairs[i]
                sk = data.sketch_points[key]
                n_sk = len(sk) if cfg.encoder_sketch_points is None else min(cfg.encoder_sketch_points, len(sk))
                sk_pts = sk[rng.choice(len(sk), n_sk, replace=False)]
                items.append(PairItem(data.sketch_clouds[key], sk_pts, shape_item(key, rng)))
            batch = BatchSpec(items, [shape_item(extras[i], rng) for i in esel])
        with frozen(decoder.params):
            loss, report = loss_encoder_total(batch, decoder, encoder, shape_only, cfg.loss_weights, cfg.nce_temperature)
        _update(stage.opts["enc"], encoder.params, loss, cfg.encoder_lr)
        return report.terms | {"total": report.total}

    history = _loop(stage, steps, step_fn, ckpt_path, cfg.checkpoint_every, resume, log, cfg.log_every, stop_at)
    return EncoderResult(encoder, history)


def encode_all(encoder: Encoder, clouds: Mapping[str, PreparedCloud], batch: int = 32) -> CodeTable:
    keys = sorted(clouds)
    out = {}
    with ad.no_grad():
        for s in range(0, len(keys), batch):
            chunk = keys[s : s + batch]
            codes = encoder.encode([clouds[k] for k in chunk]).data
            out |= {k: codes[i].copy() for i, k in enumerate(chunk)}
    return CodeTable(out)


# ----------------------------------------------------------------------------
# stage C: conditional flow


@dataclass
class FlowResult:
    flow: ConditionalFlow
    history: list[dict]


def train_cnf(
    pair_ids: Sequence[str],
    conditions: CodeTable,
    targets: CodeTable,
    sketch_points: Mapping[str, np.ndarray],
    decoder: Decoder,
    flow_config: FlowConfig,
    cfg: TrainConfig,
    seed: int,
    steps: int,
    sketch_loss: bool | None = None,
    ckpt_path: str | Path | None = None,
    resume: str | Path | None = None,
    log: LogFn | None = None,
    stop_at: int | None = None,
) -> FlowResult:
    """Per batch: one Adam update on the NLL, then one on the sketch-fidelity loss.

    ``conditions`` are sketch codes from the frozen encoder; ``targets`` the
    inverted shape codes.  ``sketch_loss=False`` drops the second update.
    """
    sketch_loss = cfg.flow_sketch_loss if sketch_loss is None else sketch_loss
    pairs = list(pair_ids)
    if not pairs:
        raise ValueError("flow training needs at least one pair")
    flow = ConditionalFlow(flow_config, seed=substream(seed, "train", "flow", "init"), dtype=decoder.dtype)
    stage = _Stage("flow", flow.params, {"flow": Adam()})
    cond_all = conditions.stack(pairs).astype(flow.dtype)
    tgt_all = targets.stack(pairs).astype(flow.dtype)
    n_batch = min(cfg.pairs_per_batch, len(pairs))
    n_pts = cfg.flow_sketch_points

    def step_fn(step: int) -> dict[str, float]:
        sel = _epoch_slice(seed, ("train", "flow"), step, len(pairs), n_batch)
        opt = stage.opts["flow"]
        nll = _update(opt, flow.params, loss_cnf_nll(flow, tgt_all[sel], cond_all[sel]), cfg.flow_lr)
        report = {"nll": nll}
        if sketch_loss:
            rng = substream(seed, "train", "flow", "step", step)
            pts = [sketch_points[pairs[i]] for i in sel]
            n = min(len(p) for p in pts) if n_pts is None else min(n_pts, *(len(p) for p in pts))
            pts = np.stack([p[rng.choice(len(p), n, replace=False)] for p in pts])
            with frozen(decoder.params):
                loss = loss_sketch_cnf(flow, decoder, cond_all[sel], pts, cfg.k_samples, cfg.sketch_weight, rng)
            report["sketch"] = _update(opt, flow.params, loss, cfg.flow_lr)
        return report

    history = _loop(stage, steps, step_fn, ckpt_path, cfg.checkpoint_every, resume, log, cfg.log_every, stop_at)
    return FlowResult(flow, history)


# ----------------------------------------------------------------------------
# checkpoint helpers


def save_model(path: str | Path, params: Mapping[str, Tensor], meta: dict | None = None) -> None:
    arrays = dict(to_arrays(params))
    if meta:
        arrays["meta/json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).astype(np.int64)
    checkpoint.save(path, arrays)


def load_params(path: str | Path, prefix: str, dtype=np.float32) -> dict[str, Tensor]:
    arrays = checkpoint.load(path)
    params = from_arrays(arrays, prefix, dtype)
    if not params:
        raise KeyError(f"{path} holds no '{prefix}' parameters")
    return params


def steps_for(epochs: int, n_items: int, per_batch: int) -> int:
    """Step count for ``epochs`` passes over ``n_items`` in batches of ``per_batch``."""
    return epochs * math.ceil(n_items / max(1, min(per_batch, n_items)))
