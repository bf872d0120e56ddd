"""Run configuration: one TOML file with nested sections, unknown keys rejected."""

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .diff import TrainConfig
from .errors import UsageError
from .mcmc import MHConfig
from .snpe import EmbeddingConfig, FlowConfig, SNPEConfig
from .snre import SamplerConfig, SNREConfig

METHODS = ("snpe", "snre", "mh")


@dataclass
class SNPESection:
    atoms: int = 10
    min_round_size: int = 20
    max_failure_rate: float = 0.2


@dataclass
class SNRESection:
    contrasts: int = 10
    hidden: tuple = (64, 64, 64)
    slope: float = 0.01
    min_round_size: int = 20
    max_failure_rate: float = 0.2


@dataclass
class RunConfig:
    """Everything needed to reproduce an estimation run.

    ``theta`` is the parameter used to simulate observed data when no
    observed panel is given (default: the model's documented value).
    ``prior`` maps parameter names to ``[low, high]`` overrides.
    """

    model: str = "lgssm-ar1"
    method: str = "snpe"
    seed: int = 0
    out: str = "run"
    rounds: int = 2
    sims: int = 5000
    T: int | None = None
    theta: list | None = None
    observed: str | None = None
    posterior_samples: int = 10000
    prior: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    snpe: SNPESection = field(default_factory=SNPESection)
    snre: SNRESection = field(default_factory=SNRESection)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mh: MHConfig = field(default_factory=MHConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.rounds < 1 or self.sims < 1 or self.posterior_samples < 1:
            raise UsageError("rounds, sims and posterior_samples must be positive")
        for name, bounds in self.prior.items():
            if len(bounds) != 2 or not bounds[0] < bounds[1]:
                raise UsageError(f"prior override for {name} must be [low, high] with low < high")

    def snpe_config(self):
        return SNPEConfig(
            atoms=self.snpe.atoms,
            min_round_size=self.snpe.min_round_size,
            max_failure_rate=self.snpe.max_failure_rate,
            flow=self.flow,
            embedding=self.embedding,
            train=self.train,
        )

    def snre_config(self):
        return SNREConfig(
            contrasts=self.snre.contrasts,
            hidden=tuple(self.snre.hidden),
            slope=self.snre.slope,
            min_round_size=self.snre.min_round_size,
            max_failure_rate=self.snre.max_failure_rate,
            embedding=self.embedding,
            train=self.train,
            sampler=self.sampler,
        )

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise UsageError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise UsageError(f"unknown key(s) {unknown} in [{where}]; allowed: {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = _nested_type(f)
        if sub is not None:
            value = _build(sub, value, f"{where}.{name}" if where != "run" else name)
        elif isinstance(f.default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise UsageError(f"[{where}]: {exc}") from None


def _nested_type(f):
    if f.default_factory is not dataclasses.MISSING:
        made = f.default_factory()
        if dataclasses.is_dataclass(made):
            return type(made)
    return None


def config_from_dict(data):
    return _build(RunConfig, dict(data), "run")


def load_config(path):
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    return config_from_dict(data)
