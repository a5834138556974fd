"""Stage functions behind the CLI commands.

Each stage reads and writes fixed artifact paths under ``RunConfig.out``:

    corpus/                     manifest.json, shapes/, sketches/
    models/decoder.sfc          decoder weights
    models/encoder_pretrain.sfc phase-1 encoder
    models/encoder.sfc          phase-2 encoder
    models/flow.sfc             flow (flow_nosketch.sfc without the sketch loss)
    codes/train.sfl             stage-A training codes
    codes/inverted.sfl          inverted codes, used by every later stage
    checkpoints/                resumable training state per stage
    eval/                       meshes, generation manifest, metrics
    logs/                       JSON-lines training logs
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .corpus import SketchParams, build_dataset
from .geometry import read_obj, write_obj
from .infer_eval import (
    MetricReport,
    decode_mesh,
    diversity,
    fidelity_shape,
    fidelity_sketch,
    generate,
    interpolate,
    noise,
    sketch_code,
)
from .models import ConditionalFlow, Decoder, Encoder, checksum
from .rng import derive_seed
from .sampling import load_cloud, load_samples
from .training import (
    CodeTable,
    EncoderData,
    encode_all,
    invert_latent,
    load_params,
    save_model,
    steps_for,
    train_auto_decoder,
    train_cnf,
    train_encoder,
)

Emit = Callable[[dict], None]


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, needed_by: str):
        super().__init__(f"{needed_by}: missing artifact {path}")
        self.path = path


def _quiet(_: dict) -> None:
    pass


class Run:
    """Artifact paths and loaders for one run directory."""

    def __init__(self, cfg: RunConfig, emit: Emit | None = None):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.emit = emit or _quiet

    # paths ------------------------------------------------------------------
    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def manifest_path(self) -> Path:
        return self.corpus_dir / "manifest.json"

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.sfc"

    def codes(self, name: str) -> Path:
        return self.root / "codes" / f"{name}.sfl"

    def ckpt(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.sfc"

    def log_path(self, name: str) -> Path:
        return self.root / "logs" / f"{name}.jsonl"

    def require(self, path: Path, needed_by: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, needed_by)
        return path

    def ensure_dirs(self) -> None:
        for d in ("models", "codes", "checkpoints", "eval", "logs"):
            (self.root / d).mkdir(parents=True, exist_ok=True)

    # corpus -----------------------------------------------------------------
    @cached_property
    def manifest(self) -> dict:
        return json.loads(self.require(self.manifest_path, "corpus").read_text())

    def ids(self, split: str | None = None) -> list[str]:
        return [e["id"] for e in self.manifest["entries"] if split is None or e["split"] == split]

    def entry(self, sid: str) -> dict:
        return next(e for e in self.manifest["entries"] if e["id"] == sid)

    def file(self, sid: str, key: str) -> Path:
        return self.corpus_dir / self.entry(sid)[key]

    @cached_property
    def samples(self) -> dict:
        return {sid: load_samples(self.file(sid, "samples"), sid) for sid in self.ids()}

    def shape_cloud(self, sid: str) -> np.ndarray:
        return load_cloud(self.file(sid, "cloud"))

    def sketch_cloud(self, sid: str) -> np.ndarray:
        return load_cloud(self.file(sid, "sketch"))

    def mesh(self, sid: str):
        return read_obj(self.file(sid, "mesh"))

    # models -----------------------------------------------------------------
    def decoder(self, needed_by: str) -> Decoder:
        return Decoder(self.cfg.decoder, load_params(self.require(self.model("decoder"), needed_by), "dec/"))

    def encoder(self, needed_by: str, name: str = "encoder") -> Encoder:
        return Encoder(self.cfg.encoder, load_params(self.require(self.model(name), needed_by), "enc/"))

    def flow(self, needed_by: str, name: str = "flow") -> ConditionalFlow:
        return ConditionalFlow(self.cfg.flow, load_params(self.require(self.model(name), needed_by), "flow/"))

    def code_table(self, name: str, needed_by: str) -> CodeTable:
        return CodeTable.load(self.require(self.codes(name), needed_by))

    def logger(self, name: str) -> Emit:
        path = self.log_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        fh = path.open("w")

        def log(rec: dict) -> None:
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            self.emit(rec)

        return log


def _timed(run: Run, name: str, fn):
    t0 = time.perf_counter()
    run.emit({"event": "start", "stage": name})
    out = fn()
    run.emit({"event": "done", "stage": name, "seconds": round(time.perf_counter() - t0, 2)})
    return out


# ----------------------------------------------------------------------------
# stages


def gen_corpus(run: Run) -> dict:
    c = run.cfg.corpus
    return _timed(run, "gen-corpus", lambda: build_dataset(
        run.corpus_dir, c.n_pairs, c.n_unpaired, tuple(c.split), run.cfg.seed,
        SketchParams(c.abstraction, c.jitter_std, c.offset_std, c.scale_std),
        c.n_surface, c.n_uniform, tuple(c.sigmas), c.sigma_is_variance, c.n_raw, c.n_points,
        log=None,
    ))


def train_decoder_stage(run: Run, resume: bool = False) -> None:
    """Stage A on every corpus shape (the decoder is a shape prior; no sketches are seen)."""
    ids = run.ids()
    run.ensure_dirs()
    tc = run.cfg.train
    ckpt = run.ckpt("decoder")
    res = _timed(run, "train-decoder", lambda: train_auto_decoder(
        [run.samples[i] for i in ids], run.cfg.decoder, tc, run.cfg.seed, ids,
        ckpt_path=ckpt, resume=ckpt if resume and ckpt.exists() else None, log=run.logger("decoder"),
    ))
    save_model(run.model("decoder"), res.decoder.params)
    res.codes.save(run.codes("train"))
    run.emit({"stage": "train-decoder", "initial_loss": res.initial_loss, "final_loss": res.final_loss,
              "decoder_checksum": checksum(res.decoder.params)})


def invert_stage(run: Run) -> None:
    decoder = run.decoder("invert")
    ids = run.ids()
    run.ensure_dirs()
    res = _timed(run, "invert", lambda: invert_latent(
        decoder, [run.samples[i] for i in ids], run.cfg.train, run.cfg.seed, ids, log=run.logger("invert"),
    ))
    res.codes.save(run.codes("inverted"))
    run.emit({"stage": "invert", "sigma": run.cfg.train.effective_sigma(),
              "mean_final_loss": float(np.mean(res.final_loss)), "decoder_checksum": checksum(decoder.params)})


def encoder_data(run: Run, encoder_config) -> EncoderData:
    from .models import prepare_cloud

    pair_ids = run.ids("train")
    extra_ids = run.ids("unpaired")
    shape_ids = pair_ids + extra_ids
    return EncoderData(
        shape_clouds={k: prepare_cloud(run.shape_cloud(k), encoder_config) for k in shape_ids},
        samples={k: run.samples[k] for k in shape_ids},
        sketch_clouds={k: prepare_cloud(run.sketch_cloud(k), encoder_config) for k in pair_ids},
        sketch_points={k: run.sketch_cloud(k) for k in pair_ids},
        pair_ids=pair_ids,
        extra_ids=extra_ids,
    )


def train_encoder_stage(run: Run, resume: bool = False) -> None:
    cfg, tc = run.cfg, run.cfg.train
    decoder = run.decoder("train-encoder")
    codes = run.code_table("inverted", "train-encoder")
    run.ensure_dirs()
    data = encoder_data(run, cfg.encoder)
    dec_sum = checksum(decoder.params)
    n_pool = len(data.pair_ids) + len(data.extra_ids)
    pre_steps = tc.encoder_pretrain_steps
    if pre_steps is None:
        pre_steps = steps_for(tc.encoder_epochs, n_pool, tc.pairs_per_batch + tc.extra_per_batch)
    fine_steps = tc.encoder_finetune_steps
    if fine_steps is None:
        fine_steps = steps_for(tc.encoder_epochs, len(data.pair_ids), tc.pairs_per_batch)

    def pick_resume(name):
        path = run.ckpt(name)
        return path if resume and path.exists() else None

    pre = _timed(run, "train-encoder/pretrain", lambda: train_encoder(
        data, decoder, codes, cfg.encoder, tc, cfg.seed, "pretrain", pre_steps,
        ckpt_path=run.ckpt("encoder_pretrain"), resume=pick_resume("encoder_pretrain"), log=run.logger("encoder_pretrain"),
    ))
    save_model(run.model("encoder_pretrain"), pre.encoder.params)
    fine = _timed(run, "train-encoder/finetune", lambda: train_encoder(
        data, decoder, codes, cfg.encoder, tc, cfg.seed, "finetune", fine_steps, encoder=pre.encoder,
        ckpt_path=run.ckpt("encoder"), resume=pick_resume("encoder"), log=run.logger("encoder"),
    ))
    save_model(run.model("encoder"), fine.encoder.params)
    if checksum(decoder.params) != dec_sum:
        raise RuntimeError("decoder weights changed during encoder training")
    run.emit({"stage": "train-encoder", "decoder_checksum": dec_sum, "encoder_checksum": checksum(fine.encoder.params)})


def flow_name(sketch_loss: bool) -> str:
    return "flow" if sketch_loss else "flow_nosketch"


def train_cnf_stage(run: Run, resume: bool = False) -> None:
    cfg, tc = run.cfg, run.cfg.train
    decoder = run.decoder("train-cnf")
    encoder = run.encoder("train-cnf")
    codes = run.code_table("inverted", "train-cnf")
    run.ensure_dirs()
    pair_ids = run.ids("train")
    from .models import prepare_cloud

    conditions = encode_all(encoder, {k: prepare_cloud(run.sketch_cloud(k), cfg.encoder) for k in pair_ids})
    enc_sum, dec_sum = checksum(encoder.params), checksum(decoder.params)
    steps = tc.flow_steps if tc.flow_steps is not None else steps_for(tc.flow_epochs, len(pair_ids), tc.pairs_per_batch)
    name = flow_name(tc.flow_sketch_loss)
    ckpt = run.ckpt(name)
    res = _timed(run, f"train-cnf/{name}", lambda: train_cnf(
        pair_ids, conditions, codes, {k: run.sketch_cloud(k) for k in pair_ids}, decoder, cfg.flow, tc, cfg.seed, steps,
        ckpt_path=ckpt, resume=ckpt if resume and ckpt.exists() else None, log=run.logger(name),
    ))
    save_model(run.model(name), res.flow.params)
    if checksum(encoder.params) != enc_sum or checksum(decoder.params) != dec_sum:
        raise RuntimeError("frozen weights changed during flow training")
    run.emit({"stage": "train-cnf", "flow": name, "encoder_checksum": enc_sum, "flow_checksum": checksum(res.flow.params)})


# ----------------------------------------------------------------------------
# inference and evaluation


def _infer_seed(run: Run) -> int:
    return derive_seed(run.cfg.seed, "inference")


def _flow_dir(run: Run, kind: str, flow: str) -> Path:
    return run.root / "eval" / (kind if flow == "flow" else f"{kind}_{flow}")


def generate_stage(run: Run, sketch_ids: list[str] | None = None, flow: str = "flow") -> dict[str, list]:
    """Generate and export meshes for each sketch; returns the results keyed by sketch id."""
    decoder = run.decoder("generate")
    encoder = run.encoder("generate")
    fl = run.flow("generate", flow)
    ids = sketch_ids or run.ids("test")
    out_dir = _flow_dir(run, "generate", flow)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, by_sketch = [], {}
    for sid in ids:
        results = generate(decoder, encoder, fl, run.sketch_cloud(sid), run.cfg.eval.n_samples,
                           run.cfg.eval.grid_res, _infer_seed(run), sid)
        for r in results:
            tag = r.mode if r.noise_seed is None else f"{r.mode}{r.noise_seed}"
            path = out_dir / f"{sid}_{tag}.obj"
            write_obj(r.mesh, path)
            records.append({"sketch": sid, "mode": r.mode, "noise_seed": r.noise_seed, "mesh": path.name, "empty": r.empty})
        by_sketch[sid] = results
        run.emit({"stage": "generate", "sketch": sid, "results": len(results)})
    (out_dir / "generation.json").write_text(json.dumps(records, indent=1))
    return by_sketch


def interpolate_stage(run: Run, sketch_ids: list[str] | None = None, flow: str = "flow") -> dict:
    """Interpolate between the first two noise draws used by ``generate`` for each sketch."""
    decoder = run.decoder("interpolate")
    encoder = run.encoder("interpolate")
    fl = run.flow("interpolate", flow)
    ids = sketch_ids or run.ids("test")
    out_dir = _flow_dir(run, "interpolate", flow)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = _infer_seed(run)
    summary = {}
    for sid in ids:
        cond = sketch_code(encoder, run.sketch_cloud(sid))
        dim = len(cond)
        results = interpolate(fl, decoder, cond, noise(seed, sid, 0, dim), noise(seed, sid, 1, dim),
                              run.cfg.eval.interp_steps, run.cfg.eval.grid_res, sid)
        pts = run.sketch_cloud(sid)
        fs = []
        for i, r in enumerate(results):
            write_obj(r.mesh, out_dir / f"{sid}_t{i}.obj")
            fs.append(fidelity_sketch(lambda p, c=r.code: decoder.predict(c, p), pts))
        summary[sid] = {"t": [r.t for r in results], "F_sketch": fs}
        run.emit({"stage": "interpolate", "sketch": sid, "F_sketch": [round(v, 6) for v in fs]})
    (out_dir / "interpolation.json").write_text(json.dumps(summary, indent=1))
    return summary


def evaluate_stage(run: Run, flow: str = "flow", sketch_ids: list[str] | None = None,
                   generated: dict[str, list] | None = None) -> MetricReport:
    """Metric table for ``flow``; ``generated`` reuses results from :func:`generate_stage`."""
    decoder = run.decoder("evaluate")
    encoder = run.encoder("evaluate")
    fl = run.flow("evaluate", flow)
    ev = run.cfg.eval
    seed = _infer_seed(run)
    report = MetricReport()
    for sid in sketch_ids or run.ids("test"):
        pts = run.sketch_cloud(sid)
        ref = run.mesh(sid)
        if generated is not None and sid in generated:
            results = generated[sid]
        else:
            results = generate(decoder, encoder, fl, pts, ev.n_samples, ev.grid_res, seed, sid)
        ae, mean, samples = results[0], results[1], results[2:]
        fsk = lambda r: fidelity_sketch(lambda p: decoder.predict(r.code, p), pts)
        f_samples = [fsk(r) for r in samples]
        div, skipped = diversity([r.mesh for r in samples], ev.n_eval_points, seed) if len(samples) >= 2 else (math.nan, 0)
        shape_cds = [fidelity_shape(r.mesh, ref, ev.n_eval_points, seed) for r in samples]
        finite = [v for v in shape_cds if math.isfinite(v)]
        report.add(
            sid,
            F_shape_ae=fidelity_shape(ae.mesh, ref, ev.n_eval_points, seed),
            F_shape_mean=fidelity_shape(mean.mesh, ref, ev.n_eval_points, seed),
            F_avg_shape=float(np.mean(finite)) if finite else math.inf,
            F_sketch_ae=fsk(ae),
            F_sketch_mean=fsk(mean),
            F_avg_sketch=float(np.mean(f_samples)),
            F_avg_sketch_std=float(np.std(f_samples)),
            D_gnrtns=div,
            empty_samples=float(sum(r.empty for r in samples)),
            diversity_skipped=float(skipped),
        )
        run.emit({"stage": "evaluate", "flow": flow, **{k: (round(v, 6) if isinstance(v, float) else v) for k, v in report.rows[-1].items()}})
    out = run.root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{flow}.json").write_text(report.to_json())
    (out / f"metrics_{flow}.txt").write_text(report.to_table() + "\n")
    return report


def evaluate_encoder(run: Run, name: str, split: str = "test") -> dict:
    """Sketch fidelity of decoded sketch codes and shape CD of decoded shape codes."""
    decoder = run.decoder("evaluate-encoder")
    encoder = run.encoder("evaluate-encoder", name)
    ev = run.cfg.eval
    seed = _infer_seed(run)
    f_sketch, cds = [], []
    for sid in run.ids(split):
        pts = run.sketch_cloud(sid)
        g = sketch_code(encoder, pts)
        f_sketch.append(fidelity_sketch(lambda p: decoder.predict(g, p), pts))
        f = sketch_code(encoder, run.shape_cloud(sid))
        cds.append(fidelity_shape(decode_mesh(decoder, f, ev.grid_res), run.mesh(sid), ev.n_eval_points, seed))
    out = {"encoder": name, "split": split, "F_sketch": float(np.mean(f_sketch)), "shape_cd": float(np.mean(cds)),
           "F_sketch_per": f_sketch, "shape_cd_per": cds}
    (run.root / "eval").mkdir(parents=True, exist_ok=True)
    (run.root / "eval" / f"encoder_{name}_{split}.json").write_text(json.dumps(out, indent=1))
    run.emit({"stage": "evaluate-encoder", "encoder": name, "F_sketch": round(out["F_sketch"], 6), "shape_cd": round(out["shape_cd"], 6)})
    return out


# ----------------------------------------------------------------------------
# full run


def pipeline(run: Run) -> MetricReport:
    gen_corpus(run)
    train_decoder_stage(run)
    invert_stage(run)
    train_encoder_stage(run)
    train_cnf_stage(run)
    generated = _timed(run, "generate", lambda: generate_stage(run))
    _timed(run, "interpolate", lambda: interpolate_stage(run))
    report = _timed(run, "evaluate", lambda: evaluate_stage(run, generated=generated))
    write_hashes(run)
    return report


HASHED_DIRS = ("corpus", "models", "codes", "eval")


def artifact_hashes(root: str | Path) -> dict[str, str]:
    """sha256 of every artifact file (logs and resumable checkpoints excluded)."""
    root = Path(root)
    out = {}
    for d in HASHED_DIRS:
        for p in sorted((root / d).rglob("*")):
            if p.is_file() and p.name != "hashes.json":
                out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def write_hashes(run: Run) -> dict[str, str]:
    hashes = artifact_hashes(run.root)
    (run.root / "eval" / "hashes.json").write_text(json.dumps(hashes, indent=1, sort_keys=True))
    return hashes
