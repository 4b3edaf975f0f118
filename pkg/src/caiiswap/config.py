"""Run configuration: one document with data / encoders / fusion / generator /
discriminator / loss / train / eval sections.

Files are YAML or JSON (JSON is valid YAML). Unknown keys are rejected so a
typo never silently falls back to a default.
"""

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .fusion import CaiiConfig
from .losses import ABLATIONS, GAN_OBJECTIVES, LossWeights
from .networks import DiscriminatorConfig, GeneratorConfig

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


@dataclass
class LossConfig:
    lambda_id: float = 10.0
    lambda_ap: float = 0.5
    lambda_adv: float = 1.0
    lambda_clip: float = 1.0
    ablation: str = "w_clips"
    gan_objective: str = "lsgan"

    @property
    def weights(self):
        return LossWeights(self.lambda_id, self.lambda_ap, self.lambda_adv, self.lambda_clip)

    def validate(self):
        self.weights.validate()
        if self.ablation not in ABLATIONS:
            raise ConfigError("loss.ablation", f"must be one of {ABLATIONS}")
        if self.gan_objective not in GAN_OBJECTIVES:
            raise ConfigError("loss.gan_objective", f"must be one of {GAN_OBJECTIVES}")
        return self


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 50
    steps_per_epoch: int = 0  # 0 -> len(manifest) // batch_size
    lr0: float = 0.01
    decay_factor: float = 0.9
    decay_every_epochs: int = 5
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    p_same: float = 0.2
    checkpoint_every: int = 0  # steps; 0 -> epoch boundaries only
    grad_clip: float = 0.0  # 0 disables

    def validate(self):
        if not self.lr0 > 0:
            raise ConfigError("train.lr0", f"must be > 0, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError("train.decay_factor", f"must be in (0, 1], got {self.decay_factor}")
        if self.decay_every_epochs < 1:
            raise ConfigError("train.decay_every_epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs", "must be >= 1")
        if self.steps_per_epoch < 0 or self.checkpoint_every < 0:
            raise ConfigError("train.steps_per_epoch", "must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("train.betas", "must be two values in [0, 1)")
        if not 0 <= self.p_same <= 1:
            raise ConfigError("train.p_same", "must be in [0, 1]")
        if self.grad_clip < 0:
            raise ConfigError("train.grad_clip", "must be >= 0")
        self.betas = tuple(float(b) for b in self.betas)
        return self


@dataclass
class EvalConfig:
    frames_per_video: int = 10
    n_sources: int = 1000
    seed: int = 0
    pairs: list = field(default_factory=list)  # explicit [source_label, target_label] pairs for ffpp_style
    batch_size: int = 8

    def validate(self):
        if self.frames_per_video < 1:
            raise ConfigError("eval.frames_per_video", "must be >= 1")
        if self.n_sources < 1:
            raise ConfigError("eval.n_sources", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("eval.batch_size", "must be >= 1")
        return self


_SECTIONS = {
    "fusion": CaiiConfig,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    encoders: dict = field(default_factory=dict)
    fusion: CaiiConfig = field(default_factory=CaiiConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc):
        doc = copy.deepcopy(doc or {})
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a mapping")
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown section")
        kwargs = {}
        for name, klass in _SECTIONS.items():
            section = doc.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(name, "section must be a mapping")
            allowed = {f.name for f in fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"{name}.{sorted(bad)[0]}", "unknown key")
            kwargs[name] = klass(**section)
        version = doc.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError("version", f"unsupported config version {version}")
        encoders = doc.get("encoders") or {}
        if not isinstance(encoders, dict):
            raise ConfigError("encoders", "section must be a mapping of role -> backend spec")
        return cls(version=version, encoders=encoders, **kwargs).validate()

    def validate(self):
        for name in _SECTIONS:
            if name != "fusion":
                getattr(self, name).validate()
        if self.fusion.num_blocks < 1:
            raise ConfigError("fusion.num_blocks", "must be >= 1")
        if self.fusion.channels and len(self.fusion.channels) != self.fusion.num_blocks:
            raise ConfigError("fusion.channels", "length must equal num_blocks")
        if self.fusion.channels and set(self.fusion.channels) != {self.generator.bottleneck_channels}:
            raise ConfigError("fusion.channels", f"must all equal {self.generator.bottleneck_channels}")
        if not self.fusion.channels:
            self.fusion.channels = [self.generator.bottleneck_channels] * self.fusion.num_blocks
        self.fusion.validate()
        from .encoders import ROLES

        for role, spec in self.encoders.items():
            if role not in ROLES:
                raise ConfigError(f"encoders.{role}", "unknown role")
            if not isinstance(spec, dict):
                raise ConfigError(f"encoders.{role}", "backend spec must be a mapping")
        return self

    def to_dict(self):
        d = asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        return d

    def hash(self, exclude=("train.epochs", "train.checkpoint_every")):
        d = self.to_dict()
        for key in exclude:
            sec, k = key.split(".")
            d[sec].pop(k, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
    return RunConfig.from_dict(doc or {})


def apply_overrides(doc, overrides):
    """Apply ``section.key=value`` overrides to a raw config dict; returns the diff."""
    doc = copy.deepcopy(doc)
    diff = []
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot override inside a non-mapping")
        value = yaml.safe_load(raw)
        old = node.get(parts[-1], "<default>")
        node[parts[-1]] = value
        diff.append((key, old, value))
        log.info("override %s: %r -> %r", key, old, value)
    return doc, diff


def tiny_config(**train_overrides):
    """Desk-scale preset used by the smoke runs and the acceptance suite."""
    cfg = RunConfig(
        encoders={},
        fusion=CaiiConfig(num_blocks=2, injection_mode="caii", phi_grid=4),
        generator=GeneratorConfig(downsample_stages=4, base_channels=4, max_channels=16),
        discriminator=DiscriminatorConfig(base_channels=4),
        loss=LossConfig(),
        train=TrainConfig(**{"batch_size": 8, "epochs": 1, **train_overrides}),
    )
    return cfg.validate()
