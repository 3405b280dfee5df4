"""Run configuration loaded from a TOML file; unknown keys are rejected."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import tomli

from .errors import ConfigError
from .objectives import TrainConfig

KINDS = ("toy-regression", "classification", "k-scan", "early-stop", "verify")
OBJECTIVES = ("naive", "star-full", "star-simple")
TYINGS = ("single", "per-group")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (50, 50)
    layer_norm: bool = True
    bias: bool = True
    ln_affine: bool = False
    activation: str = "leaky_relu"
    slope: float = 0.01
    output_bias: bool = True


@dataclass(frozen=True)
class LikelihoodConfig:
    kind: str = "gaussian"
    noise_std: float = 0.05


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 100
    n_test: int = 200
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    classes: tuple | None = None
    downsample: bool = False
    train_limit: int | None = None
    test_limit: int | None = None


@dataclass(frozen=True)
class EvidenceConfig:
    method: str = "newton"
    initial_precision: float = 1e-4
    max_jitter: float = 1e-6
    grad_mode: str = "exact"
    nn_init: bool = False
    mc_samples: int = 100


@dataclass(frozen=True)
class KScanConfig:
    k: tuple = (0.5, 1.0, 2.0, 4.0)
    tyings: tuple = TYINGS
    objective: str = "star-simple"


@dataclass(frozen=True)
class EarlyStopConfig:
    checkpoints: tuple = (0, 10, 30, 60, 90)
    star_objective: str = "star-full"


@dataclass(frozen=True)
class VerifyConfig:
    k: tuple = (0.5, 2.0, 4.0)
    posterior_k: tuple = (0.5, 1.0, 2.0, 4.0)
    fd_hidden: tuple = (6, 6)


@dataclass(frozen=True)
class RunConfig:
    kind: str = "toy-regression"
    seeds: tuple = (0, 1, 2, 3, 4)
    out: str = "runs/default"
    objectives: tuple = ("naive", "star-full")
    tying: str = "single"
    include_biases: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    likelihood: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    evidence: EvidenceConfig = field(default_factory=EvidenceConfig)
    kscan: KScanConfig = field(default_factory=KScanConfig)
    earlystop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)

    def __post_init__(self):
        validate(self)


SECTIONS = {"model": ModelConfig, "likelihood": LikelihoodConfig, "train": TrainConfig, "data": DataConfig,
            "evidence": EvidenceConfig, "kscan": KScanConfig, "earlystop": EarlyStopConfig,
            "verify": VerifyConfig}
PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels")


def _tuplify(value):
    return tuple(_tuplify(v) for v in value) if isinstance(value, list) else value


def _build(cls, table, where):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in table.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def validate(cfg):
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {cfg.kind!r}")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in cfg.seeds):
        raise ConfigError("seeds must be non-negative integers")
    if not cfg.objectives or any(o not in OBJECTIVES for o in cfg.objectives):
        raise ConfigError(f"objectives must be a non-empty subset of {OBJECTIVES}")
    if cfg.tying not in TYINGS:
        raise ConfigError(f"tying must be one of {TYINGS}")
    if cfg.likelihood.kind not in ("gaussian", "categorical"):
        raise ConfigError("likelihood kind must be gaussian or categorical")
    if not cfg.likelihood.noise_std > 0:
        raise ConfigError("noise_std must be positive")
    if cfg.evidence.method not in ("newton", "mackay", "gradient"):
        raise ConfigError("evidence method must be newton, mackay or gradient")
    if cfg.evidence.grad_mode not in ("exact", "jvp", "fd"):
        raise ConfigError("grad_mode must be exact, jvp or fd")
    if cfg.evidence.mc_samples < 1:
        raise ConfigError("mc_samples must be positive")
    if not cfg.model.hidden:
        raise ConfigError("at least one hidden layer is required")
    d = cfg.data
    if d.train_images is None:
        if d.n_train <= 0 or d.n_test <= 0:
            raise ConfigError("n_train and n_test must be positive")
    elif None in (d.train_labels, d.test_images, d.test_labels):
        raise ConfigError("image data needs train_images, train_labels, test_images and test_labels")
    if cfg.kind == "classification" and (d.train_images is None or cfg.likelihood.kind != "categorical"):
        raise ConfigError("classification needs IDX paths and a categorical likelihood")
    if cfg.kind == "k-scan":
        if not cfg.model.layer_norm:
            raise ConfigError("k-scan needs a layer-norm architecture")
        if any(not k > 0 for k in cfg.kscan.k) or 1.0 not in cfg.kscan.k:
            raise ConfigError("k-scan scales must be positive and include 1")
        if cfg.kscan.objective not in OBJECTIVES or any(t not in TYINGS for t in cfg.kscan.tyings):
            raise ConfigError("invalid k-scan objective or tying")
    if cfg.kind == "early-stop":
        if cfg.earlystop.star_objective not in ("star-full", "star-simple"):
            raise ConfigError("early-stop star_objective must be star-full or star-simple")
        if list(cfg.earlystop.checkpoints) != sorted(set(cfg.earlystop.checkpoints)):
            raise ConfigError("early-stop checkpoints must be sorted and unique")
        if cfg.earlystop.checkpoints and cfg.earlystop.checkpoints[-1] > cfg.train.epochs:
            raise ConfigError("early-stop checkpoint beyond the last training epoch")


def from_dict(raw, base_dir=None):
    raw = dict(raw)
    kwargs = {}
    for name, cls in SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw.pop(name), name)
    top = {f.name for f in dataclasses.fields(RunConfig)} - set(SECTIONS)
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs.update({k: _tuplify(v) for k, v in raw.items()})
    if base_dir is not None and "data" in kwargs:
        fixes = {k: os.path.join(base_dir, getattr(kwargs["data"], k)) for k in PATH_KEYS
                 if getattr(kwargs["data"], k) is not None and not os.path.isabs(getattr(kwargs["data"], k))}
        kwargs["data"] = dataclasses.replace(kwargs["data"], **fixes)
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load(path):
    """Parse a TOML run file; relative data paths resolve against the file's directory."""
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def override(cfg, seed=None, out=None, objective=None, tying=None, include_biases=None):
    changes = {}
    if seed is not None:
        changes["seeds"] = (int(seed),)
    if out is not None:
        changes["out"] = out
    if objective is not None:
        changes["objectives"] = (objective,)
    if tying is not None:
        changes["tying"] = tying
    if include_biases is not None:
        changes["include_biases"] = include_biases
    return dataclasses.replace(cfg, **changes) if changes else cfg
