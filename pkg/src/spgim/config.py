"""Experiment configuration, training schedules and named profiles.

Configs round-trip through TOML; the text is echoed into every checkpoint so
that incompatible checkpoints can be detected when they are combined.
"""
import dataclasses
from dataclasses import dataclass, field

import tomli
import tomli_w

from .caption import PretrainSchedule, TextualDecoderConfig
from .data import SynthesisConfig
from .spd import AsppConfig, SpdConfig
from .spgm import DEFAULT_LOSS_WEIGHTS, SpgmConfig

BRANCHES = ("spd", "spgm", "caption")

# epochs at which the LR is divided by 10, per training set
PUBLISHED_MILESTONES = {
    "composition1k": {"spd": (20, 40), "spgm": (20, 30, 40)},
    "distinction646": {"spd": (30, 60), "spgm": (40, 60, 80)},
    "human2k": {"spd": (60, 80), "spgm": (80, 100, 120)},
    "multiobject1k": {"spd": (40, 60, 80), "spgm": (60, 80, 100)},
}
PROFILES = tuple(PUBLISHED_MILESTONES) + ("desk",)


@dataclass
class TrainConfig:
    branch: str = "spd"
    optimizer: str = "adam"
    initial_lr: float = 1e-2
    milestones: tuple = ()
    decay_factor: float = 0.1
    batch_size: int = 16
    input_size: int = 512
    loss_weights: tuple = ()
    seed: int = 0
    # length of training, counted in ``unit``
    duration: int = 50
    unit: str = "epoch"
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {self.branch!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if self.unit not in ("epoch", "step"):
            raise ValueError(f"unit must be epoch or step, got {self.unit!r}")


def lr_at(t, cfg: TrainConfig):
    """Piecewise-constant LR: ``initial_lr * decay_factor ** (#milestones <= t)``."""
    if t < 0:
        raise ValueError(f"negative {cfg.unit} {t}")
    passed = sum(1 for m in cfg.milestones if t >= m)
    return cfg.initial_lr * cfg.decay_factor ** passed


def spd_train_defaults(profile="composition1k"):
    milestones = PUBLISHED_MILESTONES[profile]["spd"]
    return TrainConfig(branch="spd", optimizer="adam", initial_lr=1e-2, milestones=milestones,
                       batch_size=16, input_size=512, duration=milestones[-1] + 10)


def spgm_train_defaults(profile="composition1k"):
    milestones = PUBLISHED_MILESTONES[profile]["spgm"]
    return TrainConfig(branch="spgm", optimizer="adam", initial_lr=5e-3, milestones=milestones,
                       batch_size=4, input_size=512, loss_weights=DEFAULT_LOSS_WEIGHTS,
                       duration=milestones[-1] + 10)


@dataclass
class CaptionTrainConfig:
    schedule: PretrainSchedule = field(default_factory=PretrainSchedule)
    decoder: TextualDecoderConfig = field(default_factory=TextualDecoderConfig)
    batch_size: int = 8
    input_size: int = 224
    min_freq: int = 1


@dataclass
class ExperimentConfig:
    profile: str = "composition1k"
    seed: int = 0
    data: SynthesisConfig = field(default_factory=SynthesisConfig)
    spd_model: SpdConfig = field(default_factory=lambda: SpdConfig(width_multiplier=1.0))
    spgm_model: SpgmConfig = field(default_factory=lambda: SpgmConfig(width_multiplier=1.0))
    caption: CaptionTrainConfig = field(default_factory=CaptionTrainConfig)
    spd: TrainConfig = field(default_factory=spd_train_defaults)
    spgm: TrainConfig = field(default_factory=spgm_train_defaults)

    def __post_init__(self):
        if self.spd_model.mask_stride != self.data.saliency_downsample:
            raise ValueError(
                f"spd_model.mask_stride ({self.spd_model.mask_stride}) must equal "
                f"data.saliency_downsample ({self.data.saliency_downsample})"
            )

    def to_dict(self):
        return _strip_none(dataclasses.asdict(self))

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        caption = d.pop("caption", {})
        spd_model = dict(d.pop("spd_model", {}))
        if "aspp" in spd_model:
            spd_model["aspp"] = AsppConfig(**spd_model["aspp"])
        return cls(
            profile=d.pop("profile", "composition1k"),
            seed=d.pop("seed", 0),
            data=SynthesisConfig(**_tuples(d.pop("data", {}))),
            spd_model=SpdConfig(**spd_model),
            spgm_model=SpgmConfig(**d.pop("spgm_model", {})),
            caption=CaptionTrainConfig(
                schedule=PretrainSchedule(**caption.get("schedule", {})),
                decoder=TextualDecoderConfig(**caption.get("decoder", {})),
                **{k: v for k, v in caption.items() if k not in ("schedule", "decoder")},
            ),
            spd=TrainConfig(**d.pop("spd", {})),
            spgm=TrainConfig(**d.pop("spgm", {})),
        )

    @classmethod
    def from_toml(cls, text):
        return cls.from_dict(tomli.loads(text))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_dict(tomli.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_toml())

    def with_seed(self, seed):
        cfg = ExperimentConfig.from_dict(self.to_dict())
        cfg.seed = cfg.spd.seed = cfg.spgm.seed = int(seed)
        return cfg


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_strip_none(v) for v in d]
    return d


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def desk_profile(seed=0):
    """Small CPU-sized setup: width 0.25, 64 px inputs, schedules counted in steps."""
    return ExperimentConfig(
        profile="desk",
        seed=seed,
        data=SynthesisConfig(size=64, radius_range=(1, 4)),
        spd_model=SpdConfig(width_multiplier=0.25),
        spgm_model=SpgmConfig(width_multiplier=0.25),
        caption=CaptionTrainConfig(
            schedule=PretrainSchedule(total_steps=200, warmup_steps=20),
            decoder=TextualDecoderConfig(layers=2, heads=4, model_width=128, max_len=30),
            batch_size=8, input_size=64,
        ),
        spd=TrainConfig(branch="spd", optimizer="adam", initial_lr=1e-3, milestones=(200,),
                        batch_size=4, input_size=64, duration=300, unit="step", seed=seed),
        spgm=TrainConfig(branch="spgm", optimizer="adam", initial_lr=5e-3, milestones=(250,),
                         batch_size=4, input_size=64, loss_weights=DEFAULT_LOSS_WEIGHTS,
                         duration=300, unit="step", seed=seed),
    )


def get_profile(name="composition1k", seed=0):
    if name == "desk":
        return desk_profile(seed)
    if name not in PUBLISHED_MILESTONES:
        raise ValueError(f"unknown profile {name!r}; choose from {PROFILES}")
    cfg = ExperimentConfig(profile=name, seed=seed,
                           spd=spd_train_defaults(name), spgm=spgm_train_defaults(name))
    cfg.spd.seed = cfg.spgm.seed = seed
    return cfg


def diff_sections(a: dict, b: dict, prefix=""):
    """Dotted keys whose values differ between two nested dicts."""
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        name = f"{prefix}{key}"
        if isinstance(va, dict) and isinstance(vb, dict):
            out += diff_sections(va, vb, name + ".")
        elif va != vb:
            out.append(name)
    return out
