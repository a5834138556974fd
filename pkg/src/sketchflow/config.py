"""Run configuration: one schema, two built-in profiles (``paper`` and ``desk``)."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .losses import TERM_NAMES
from .models import DecoderConfig, EncoderConfig, FlowConfig


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class CorpusConfig:
    n_pairs: int = 40
    n_unpaired: int = 80
    split: tuple[float, float] = (0.75, 0.25)
    abstraction: float = 0.7
    jitter_std: float = 0.01
    offset_std: float = 0.03
    scale_std: float = 0.05
    n_surface: int = 4000
    n_uniform: int = 400
    sigmas: tuple[float, float] = (0.012, 0.035)
    sigma_is_variance: bool = True
    n_raw: int = 15000
    n_points: int = 1024


@dataclass
class TrainConfig:
    # stage A: auto-decoder
    decoder_steps: int = 2000
    decoder_shapes_per_step: int = 16
    decoder_subset: int = 512
    decoder_lr: float = 3e-3
    code_lr: float = 3e-3
    code_init_std: float = 0.01
    code_reg: float = 1e-4
    # latent inversion
    invert_steps: int = 800
    invert_lr: float = 5e-3
    invert_subset: int = 256
    # None: match the stage-A code prior, see effective_sigma()
    sigma: float | None = None
    # stage B: encoder
    encoder_epochs: int = 300
    encoder_pretrain_steps: int | None = 1000
    encoder_finetune_steps: int | None = 1000
    encoder_lr: float = 1e-3
    pairs_per_batch: int = 12
    extra_per_batch: int = 24
    encoder_subset: int = 256
    encoder_sketch_points: int | None = 256
    nce_temperature: float = 1.0
    # desk scale: L_sketch is a mean near 0.05 next to summed NCE terms near 30,
    # and the synthetic sketches sit off their shapes, so alignment is damped
    loss_weights: dict = field(default_factory=lambda: {"sketch": 1000.0, "g_l1": 0.1, "g_nce": 0.1})
    # stage C: flow
    flow_epochs: int = 300
    flow_steps: int | None = 2000
    flow_lr: float = 1e-3
    k_samples: int = 8
    sketch_weight: float = 100.0
    flow_sketch_points: int | None = 128
    flow_sketch_loss: bool = True
    # bookkeeping
    checkpoint_every: int = 500
    log_every: int = 50

    def effective_sigma(self) -> float:
        """σ for the inversion prior.

        Stage A penalises ``code_reg * ‖e‖²`` next to a *mean* L1 over
        ``m`` samples; the inversion objective sums the L1 over ``m`` samples,
        so the same prior reads ``‖e‖² / σ²`` with ``σ² = 1 / (code_reg * m)``.
        """
        if self.sigma is not None:
            return float(self.sigma)
        return float(1.0 / np.sqrt(self.code_reg * self.invert_subset))


@dataclass
class EvalConfig:
    grid_res: int = 64
    n_samples: int = 5
    n_eval_points: int = 4096
    interp_steps: int = 3


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 7
    out: str = "runs/desk"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(keep_prob=0.95))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _paper() -> RunConfig:
    return RunConfig(
        profile="paper",
        out="runs/paper",
        corpus=CorpusConfig(n_pairs=1005, n_unpaired=5571, split=(803 / 1005, 202 / 1005),
                            n_surface=250_000, n_uniform=25_000, n_points=4096),
        decoder=DecoderConfig.paper(),
        encoder=EncoderConfig.paper(),
        flow=FlowConfig.paper(),
        train=TrainConfig(
            decoder_steps=100_000, decoder_shapes_per_step=16, decoder_subset=8192,
            decoder_lr=5e-4, code_lr=1e-3,
            invert_subset=8192,
            encoder_pretrain_steps=None, encoder_finetune_steps=None, encoder_subset=8192,
            encoder_sketch_points=None, loss_weights={},
            flow_steps=None, flow_lr=1e-5, flow_sketch_points=None,
            checkpoint_every=5000,
        ),
        eval=EvalConfig(grid_res=256),
    )


PROFILES = {"desk": RunConfig, "paper": _paper}


def _set(obj, path: list[str], value, full_key: str):
    head = path[0]
    if isinstance(obj, dict):
        if len(path) == 1:
            obj[head] = value
            return
        _set(obj.setdefault(head, {}), path[1:], value, full_key)
        return
    names = {f.name for f in fields(obj)}
    if head not in names:
        raise ConfigError(full_key, "unknown key")
    if len(path) == 1:
        current = getattr(obj, head)
        if hasattr(current, "__dataclass_fields__") and isinstance(value, dict):
            for k, v in value.items():
                _set(current, [k], v, f"{full_key}.{k}")
        else:
            setattr(obj, head, value)
        return
    _set(getattr(obj, head), path[1:], value, full_key)


def _revalidate(cfg: RunConfig) -> RunConfig:
    # re-run dataclass validation on the nested model configs
    for name, cls in (("decoder", DecoderConfig), ("encoder", EncoderConfig), ("flow", FlowConfig)):
        sub = getattr(cfg, name)
        try:
            setattr(cfg, name, cls(**{f.name: getattr(sub, f.name) for f in fields(cls)}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(name, str(exc)) from None
    if cfg.encoder.latent_dim != cfg.decoder.latent_dim or cfg.flow.latent_dim != cfg.decoder.latent_dim:
        raise ConfigError("decoder.latent_dim", "encoder, decoder and flow latent dims must match")
    if abs(sum(cfg.corpus.split) - 1.0) > 1e-9:
        raise ConfigError("corpus.split", "ratios must sum to 1")
    if cfg.train.sigma is not None and cfg.train.sigma <= 0:
        raise ConfigError("train.sigma", "must be positive")
    for k in ("decoder_lr", "code_lr", "invert_lr", "encoder_lr", "flow_lr"):
        if getattr(cfg.train, k) <= 0:
            raise ConfigError(f"train.{k}", "must be positive")
    for k, v in cfg.train.loss_weights.items():
        if k not in TERM_NAMES:
            raise ConfigError(f"train.loss_weights.{k}", "unknown loss term")
        if not isinstance(v, (int, float)) or v < 0:
            raise ConfigError(f"train.loss_weights.{k}", "must be a non-negative number")
    if cfg.train.k_samples < 1:
        raise ConfigError("train.k_samples", "must be >= 1")
    return cfg


def parse_value(text: str):
    return yaml.safe_load(text)


def load_config(
    profile: str = "desk",
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    out: str | None = None,
) -> RunConfig:
    """Profile defaults, then the config document, then ``key=value`` overrides."""
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile '{profile}'")
    cfg = copy.deepcopy(PROFILES[profile]())
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config document must be a mapping")
        if doc.get("profile", profile) != profile:
            cfg = copy.deepcopy(PROFILES[doc["profile"]]())
        for key, value in doc.items():
            _set(cfg, [key], value, key)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        _set(cfg, key.strip().split("."), parse_value(text), key.strip())
    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.out = str(out)
    return _revalidate(cfg)
