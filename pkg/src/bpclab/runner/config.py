"""Strict JSON run configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import InvalidInputError
from ..metrics import DEFAULT_BINS
from ..policy import SCHEDULES
from ..robustness import FAMILIES
from ..synthdata import TaskSpec

EXPERIMENTS = ("drift", "contamination", "confat_k", "gradcheck", "metrics_suite", "train")


class ConfigError(InvalidInputError):
    pass


def _build(cls, doc, where: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class TrainSettings:
    """Hyperparameters for both training stages."""

    sft_eta: float = 10.0
    sft_epochs: int = 40
    pref_eta: float = 10.0
    pref_epochs: int = 20
    batch_size: int = 32
    schedule: str = "constant"
    beta: float = 0.1
    lam: float = 0.1
    epsilon_smooth: float = 0.1

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        for name in ("sft_eta", "pref_eta", "beta"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be positive")
        if float(self.lam) < 0:
            raise ConfigError("lam must be nonnegative")
        if not 0.0 <= float(self.epsilon_smooth) < 1.0:
            raise ConfigError("epsilon_smooth must lie in [0, 1)")
        for name in ("sft_epochs", "pref_epochs", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer")


@dataclass(frozen=True)
class ContaminationSettings:
    alphas: tuple = (0.05, 0.1, 0.25)
    Ms: tuple = (10.0, 100.0, 1000.0)
    B: float = 1.0
    family: str = "uniform"
    z: float = 0.0
    n: int = 100_000
    num_seeds: int = 20
    dkw_n: int = 10_000
    dkw_trials: int = 200
    dkw_rho: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "Ms", tuple(float(m) for m in self.Ms))
        if not self.alphas or not self.Ms:
            raise ConfigError("alphas and Ms must be nonempty")
        if any(not 0.0 <= a < 0.5 for a in self.alphas):
            raise ConfigError("alphas must lie in [0, 0.5)")
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if not self.B > 0 or self.n < 1 or self.num_seeds < 1 or self.dkw_trials < 1:
            raise ConfigError("B, n, num_seeds and dkw_trials must be positive")
        if not self.dkw_rho > 1.0 / self.dkw_n:
            raise ConfigError("dkw_rho must exceed 1/dkw_n")


@dataclass(frozen=True)
class SelectionSettings:
    ks: tuple = (4, 8)
    num_trials: int = 20

    def __post_init__(self):
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("ks must be a nonempty list of positive integers")
        if self.num_trials < 1:
            raise ConfigError("num_trials must be positive")


@dataclass(frozen=True)
class GradcheckSettings:
    grad_instances: int = 100
    bound_instances: int = 100_000
    pair_instances: int = 10_000


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "drift"
    task_spec: TaskSpec = field(default_factory=TaskSpec)
    train_config: TrainSettings = field(default_factory=TrainSettings)
    contamination: ContaminationSettings = field(default_factory=ContaminationSettings)
    selection: SelectionSettings = field(default_factory=SelectionSettings)
    gradcheck: GradcheckSettings = field(default_factory=GradcheckSettings)
    bins: int = DEFAULT_BINS
    output_dir: str = "run"
    master_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not isinstance(self.bins, int) or self.bins < 1:
            raise ConfigError("bins must be a positive integer")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        d = dict(doc)
        try:
            if "task_spec" in d:
                d["task_spec"] = TaskSpec.from_dict(d["task_spec"])
        except (InvalidInputError, TypeError) as exc:
            raise ConfigError(f"task_spec: {exc}") from exc
        nested = {
            "train_config": TrainSettings,
            "contamination": ContaminationSettings,
            "selection": SelectionSettings,
            "gradcheck": GradcheckSettings,
        }
        for key, sub in nested.items():
            if key in d:
                d[key] = _build(sub, d[key], key)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task_spec"] = self.task_spec.to_dict()
        for k, v in list(d.items()):
            if isinstance(v, tuple):
                d[k] = list(v)
        for sub in ("contamination", "selection"):
            d[sub] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[sub].items()}
        return d

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)
