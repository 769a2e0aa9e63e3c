"""Run configuration: YAML document, defaults, validation and hashing.

Every key except the dataset paths has a default.  Unknown keys are
rejected.  Validation failures are collected as ``"dotted.path: reason"``
strings so the CLI can report all of them at once.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .coreset import DEFAULT_FLOOR, DEFAULT_TEMPERATURE
from .model import Arch, BitRanges, BNPolicy
from .quant import QuantSpec, Scheme as QuantScheme
from .scoring import DEFAULT_DECAY, DYNAMICS, Method
from .training import LRSchedule, Scheme, TrainConfig

DEFAULT_TRAINED = (1, 2, 4, 8, 32)
_JOIN = "\n"  # separates cross-field problems inside one validation error


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = list(errors)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class BlobsSection(_Section):
    n: int = Field(2000, ge=2)
    n_test: int = Field(500, ge=1)
    d: int = Field(8, ge=2)
    k: int = Field(4, ge=2)
    separation: float = Field(3.0, ge=0)
    seed: int = 0  # data seed, independent of the run seed


class DataSection(_Section):
    kind: Literal["mnist", "cifar10", "blobs"] = "mnist"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_files: List[str] = []
    test_files: List[str] = []
    blobs: BlobsSection = Field(default_factory=BlobsSection)
    normalize: bool = True
    augment: bool = False

    def missing_paths(self) -> list:
        if self.kind == "mnist":
            return [k for k in ("train_images", "train_labels", "test_images", "test_labels") if not getattr(self, k)]
        if self.kind == "cifar10":
            return [k for k in ("train_files", "test_files") if not getattr(self, k)]
        return []


class ModelSection(_Section):
    # arch/widths/strides default by data kind: mlp (32, 32) for blobs,
    # cnn (16, 16, 32, 32) with strides (2, 1, 2, 1) for images
    arch: Optional[Literal["cnn", "mlp"]] = None
    widths: Optional[List[int]] = None
    strides: Optional[List[int]] = None
    keep_first_last_fp: bool = True
    bn_policy: BNPolicy = BNPolicy.HYBRID_ONE_BIT_SEPARATE
    bias_correction: bool = True
    per_channel_correction: bool = False
    init_seed: Optional[int] = None  # defaults to the run seed


class QuantSection(_Section):
    scheme: QuantScheme = QuantScheme.DOREFA
    activation_bits: int = Field(4, ge=1, le=32)
    epsilon: float = Field(1e-8, gt=0)


class BitsSection(_Section):
    trained: List[int] = list(DEFAULT_TRAINED)
    switchable: Optional[List[int]] = None  # defaults to ``trained``

    @field_validator("trained", "switchable")
    @classmethod
    def _range(cls, v):
        if v is None:
            return v
        if not v:
            raise ValueError("must not be empty")
        bad = [b for b in v if not 1 <= b <= 32]
        if bad:
            raise ValueError(f"bit-widths {bad} outside [1, 32]")
        return sorted(set(v))

    @model_validator(mode="after")
    def _subset(self):
        if self.switchable is not None and not set(self.trained) <= set(self.switchable):
            extra = sorted(set(self.trained) - set(self.switchable))
            raise ValueError(f"trained bits {extra} missing from switchable")
        return self


class TrainSection(_Section):
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(50, ge=1)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    lr_schedule: LRSchedule = LRSchedule.COSINE
    milestones: List[int] = []
    gamma: float = Field(0.1, gt=0)
    use_plan: bool = True  # train on the coreset plan when one exists


class ScoringSection(_Section):
    method: str = DYNAMICS
    scheme: Scheme = Scheme.BIT_WISE
    epochs: int = Field(10, ge=2)
    window: int = Field(5, ge=1)
    decay: float = Field(DEFAULT_DECAY, gt=0, le=1)

    @field_validator("method")
    @classmethod
    def _method(cls, v):
        known = [DYNAMICS] + [m.value for m in Method]
        if v not in known:
            raise ValueError(f"unknown scoring method {v!r}; choose from {known}")
        return v

    @model_validator(mode="after")
    def _window(self):
        if self.window >= self.epochs:
            raise ValueError(f"window ({self.window}) must be smaller than epochs ({self.epochs})")
        return self


class CoresetSection(_Section):
    pruning_rate: float = Field(0.8, ge=0, lt=1)
    temperature: float = Field(DEFAULT_TEMPERATURE, gt=0)
    floor: float = Field(DEFAULT_FLOOR, gt=0, lt=1)
    keep_fraction: float = Field(1.0, gt=0, le=1)


class AdaptSection(_Section):
    passes: int = Field(1, ge=1)
    batch_size: int = Field(500, ge=1)
    samples: Optional[int] = Field(None, ge=1)  # prefix of the training split


class DiagnoseSection(_Section):
    pair: List[int] = [2, 8]
    batches: int = Field(20, ge=1)
    batch_size: int = Field(50, ge=2)

    @field_validator("pair")
    @classmethod
    def _pair(cls, v):
        if len(v) != 2:
            raise ValueError("pair needs exactly two bit-widths")
        return v


class RunConfig(_Section):
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    quant: QuantSection = Field(default_factory=QuantSection)
    bits: BitsSection = Field(default_factory=BitsSection)
    train: TrainSection = Field(default_factory=TrainSection)
    scoring: ScoringSection = Field(default_factory=ScoringSection)
    coreset: CoresetSection = Field(default_factory=CoresetSection)
    adapt: AdaptSection = Field(default_factory=AdaptSection)
    diagnose: DiagnoseSection = Field(default_factory=DiagnoseSection)

    @model_validator(mode="after")
    def _cross(self):
        m = self.model
        if m.arch is None:
            m.arch = "mlp" if self.data.kind == "blobs" else "cnn"
        if m.widths is None:
            m.widths = [32, 32] if m.arch == "mlp" else [16, 16, 32, 32]
        if m.strides is None:
            m.strides = [] if m.arch == "mlp" else ([2, 1, 2, 1] if len(m.widths) == 4 else [1] * len(m.widths))
        problems = [f"data.{k}: required for {self.data.kind} data" for k in self.data.missing_paths()]
        bad = [b for b in self.diagnose.pair if b not in self.bits.trained]
        if bad:
            problems.append(f"diagnose.pair: bits {bad} not in bits.trained")
        if m.arch == "mlp" and self.data.kind != "blobs":
            problems.append("model.arch: 'mlp' expects flat inputs (data.kind 'blobs')")
        if m.arch == "cnn" and self.data.kind == "blobs":
            problems.append("model.arch: 'cnn' expects image data")
        if m.arch == "cnn" and len(m.strides) != len(m.widths):
            problems.append("model.strides: needs one entry per model.widths entry")
        if problems:
            raise ValueError(_JOIN.join(problems))
        return self

    # -- derived objects ------------------------------------------------
    def ranges(self) -> BitRanges:
        return BitRanges(tuple(self.bits.trained), tuple(self.bits.switchable or self.bits.trained))

    def quant_spec(self) -> QuantSpec:
        return QuantSpec(scheme=self.quant.scheme, activation_bits=self.quant.activation_bits, epsilon=self.quant.epsilon)

    def arch(self, in_shape, num_classes) -> Arch:
        strides = tuple(self.model.strides) if self.model.arch == "cnn" else ()
        return Arch(self.model.arch, tuple(in_shape), num_classes, tuple(self.model.widths), strides, self.model.keep_first_last_fp)

    def train_config(self, **overrides) -> TrainConfig:
        t = self.train
        kw = dict(
            epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, momentum=t.momentum,
            weight_decay=t.weight_decay, lr_schedule=t.lr_schedule, milestones=tuple(t.milestones),
            gamma=t.gamma, seed=self.seed, augment=self.data.augment,
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def hash(self) -> str:
        return config_hash(self)


def _format_errors(exc: ValidationError) -> List[str]:
    out = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"])
        msg = err["msg"]
        if not path and err["type"] == "value_error":
            out += str(err["ctx"]["error"]).split(_JOIN)
            continue
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append(f"{path or '<root>'}: {msg}")
    return out


def validate_config(document: Optional[dict]) -> RunConfig:
    """Fill defaults and check constraints; raises :class:`ConfigError`."""
    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError([f"<root>: expected a mapping, got {type(document).__name__}"])
    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        child = node.setdefault(k, {})
        if not isinstance(child, dict):
            raise ConfigError([f"{dotted}: {k} is not a section"])
        node = child
    node[keys[-1]] = value


def parse_override(text: str) -> tuple:
    """``"train.lr=0.1"`` -> ``("train.lr", 0.1)`` (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError([f"{text}: override must look like key.path=value"])
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError([f"{text}: empty key"])
    return key, yaml.safe_load(raw) if raw.strip() else None


def load_config(path=None, overrides=(), seed: Optional[int] = None) -> RunConfig:
    """Read a YAML file (optional), apply ``key=value`` overrides, validate."""
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError([f"{path}: {exc.strerror or exc}"]) from None
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
        if not isinstance(doc, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
    for item in overrides:
        key, value = parse_override(item)
        _set_path(doc, key, value)
    if seed is not None:
        doc["seed"] = seed
    return validate_config(doc)


def canonical(cfg: RunConfig) -> dict:
    return cfg.model_dump(mode="json")


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical config, ignoring where outputs are written."""
    doc = canonical(cfg)
    doc.pop("out_dir", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(canonical(cfg), sort_keys=True)
