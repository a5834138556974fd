from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass
class DecoderConfig:
    latent_dim: int = 32
    hidden: int = 128
    n_layers: int = 5  # linear layers including the scalar output layer
    keep_prob: float = 0.8
    clamp: float = 0.1  # SDF truncation bound; head is clamp * tanh(.)

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden < 1 or self.n_layers < 2:
            raise ValueError("decoder dims must be >= 1 and n_layers >= 2")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")

    @classmethod
    def paper(cls) -> "DecoderConfig":
        return cls(latent_dim=256, hidden=512)


@dataclass
class SetAbstraction:
    fraction: float  # centres kept by FPS, relative to the level's input count
    radius: float
    max_group: int
    widths: tuple[int, ...]

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("FPS fraction must be in (0, 1]")
        if self.radius <= 0 or self.max_group < 1 or not self.widths:
            raise ValueError("invalid set-abstraction level")


@dataclass
class EncoderConfig:
    n_points: int = 1024
    levels: tuple[SetAbstraction, ...] = field(
        default_factory=lambda: (
            SetAbstraction(0.25, 0.1, 32, (16, 32)),
            SetAbstraction(0.25, 0.25, 32, (64, 64)),
        )
    )
    global_widths: tuple[int, ...] = (128,)
    head_widths: tuple[int, ...] = (128,)
    latent_dim: int = 32

    def __post_init__(self):
        self.levels = tuple(lv if isinstance(lv, SetAbstraction) else SetAbstraction(**lv) for lv in self.levels)
        self.global_widths = tuple(self.global_widths)
        self.head_widths = tuple(self.head_widths)
        if self.n_points < 1 or self.latent_dim < 1 or not self.levels:
            raise ValueError("invalid encoder config")

    @classmethod
    def paper(cls) -> "EncoderConfig":
        return cls(
            n_points=4096,
            levels=(SetAbstraction(0.25, 0.1, 32, (64, 128)), SetAbstraction(0.25, 0.2, 32, (128, 256))),
            global_widths=(512,),
            head_widths=(512,),
            latent_dim=256,
        )


@dataclass
class FlowConfig:
    latent_dim: int = 32
    n_layers: int = 5
    split: int | None = None  # pass-through size d; defaults to latent_dim // 2
    hidden: tuple[int, ...] = (128, 128)
    scale_bound_init: float = 2.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.split is None:
            self.split = self.latent_dim // 2
        if not 1 <= self.split < self.latent_dim:
            raise ValueError("split must satisfy 1 <= d < D")
        if self.n_layers < 1:
            raise ValueError("need at least one coupling layer")

    @classmethod
    def paper(cls) -> "FlowConfig":
        return cls(latent_dim=256, hidden=(512, 512))


def config_dict(cfg) -> dict:
    return asdict(cfg)
