"""JSON experiment configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .advtrain import REGIMES
from .attacks import NORMS, SCOPES, TARGET_MODES, AttackConfig
from .exitpolicy import CRITERIA

ATTACK_KINDS = ("deepsloth", "pgd", "pgd_avg", "pgd_max", "uap")
TRANSFER_SCENARIOS = ("cross_architecture", "limited_data", "cross_domain")

# budgets for 1x16x16 inputs: l2 and l1 rescaled from the 3x32x32 values by sqrt(d) and d
DESK_EPSILON = {"linf": 0.03, "l2": 0.1, "l1": 0.67}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_classes: int = 8
    n: int = 4000
    shape: list[int] = field(default_factory=lambda: [1, 16, 16])
    difficulty: float = 1.0
    path: str | None = None  # MXDS file to use instead of the synthetic generator
    test_frac: float = 0.2
    holdout_frac: float = 0.1

    def validate(self):
        if self.n < 2 or self.num_classes < 2:
            raise ConfigError("data: need n >= 2 and num_classes >= 2")
        if not 0 < self.test_frac < 1 or not 0 < self.holdout_frac < 1:
            raise ConfigError("data: split fractions must lie in (0, 1)")


@dataclass
class ModelConfig:
    arch: str = "convnet"  # convnet | mlp
    widths: list[int] = field(default_factory=lambda: [8, 16, 32])
    hidden: int = 64
    epochs: int = 40
    lr: float = 0.05
    batch_size: int = 32
    exit_loss_weights: list[float] | None = None
    init_seed: int = 0

    def validate(self):
        if self.arch not in ("convnet", "mlp"):
            raise ConfigError(f"model: unknown arch {self.arch!r}")
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1 or not self.widths:
            raise ConfigError("model: epochs/lr must be non-negative, batch_size positive, widths non-empty")


@dataclass
class PolicyConfig:
    criterion: str = "confidence"
    rad_budgets: list[float] = field(default_factory=lambda: [0.05, 0.15])

    def validate(self):
        if self.criterion not in CRITERIA:
            raise ConfigError(f"policy: unknown criterion {self.criterion!r}")
        if not self.rad_budgets or any(not 0 < r < 1 for r in self.rad_budgets):
            raise ConfigError("policy: rad_budgets must be non-empty values in (0, 1)")


_ATTACK_FIELDS = {f.name for f in dataclasses.fields(AttackConfig)}


@dataclass
class AttackBlock:
    """One attack to run; ``overrides`` replaces AttackConfig defaults."""

    name: str
    kind: str = "deepsloth"
    norm: str = "linf"
    epsilon: float | None = None  # None -> DESK_EPSILON[norm]
    scope: str = "per_sample"
    target_mode: str = "uniform"
    target_class: int | None = None  # class_universal with None runs every class
    overrides: dict = field(default_factory=dict)

    def validate(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack {self.name!r}: unknown kind {self.kind!r}")
        if self.norm not in NORMS or self.scope not in SCOPES or self.target_mode not in TARGET_MODES:
            raise ConfigError(f"attack {self.name!r}: bad norm, scope or target_mode")
        if self.kind != "deepsloth" and self.norm != "linf":
            raise ConfigError(f"attack {self.name!r}: baselines use the linf norm")
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigError(f"attack {self.name!r}: epsilon must be non-negative")
        bad = set(self.overrides) - _ATTACK_FIELDS - {"scope", "target_mode", "target_class"}
        if bad:
            raise ConfigError(f"attack {self.name!r}: unknown override keys {sorted(bad)}")

    @property
    def eps(self) -> float:
        return DESK_EPSILON[self.norm] if self.epsilon is None else self.epsilon


@dataclass
class PartitionConfig:
    split_exit: int = 1
    edge_latency_ms: float = 0.0
    remote_latency_ms: float = 11.0
    adversary_craft_ms: float = 2.0

    def validate(self):
        if self.split_exit < 1 or min(self.edge_latency_ms, self.remote_latency_ms) < 0:
            raise ConfigError("partition: split_exit >= 1 and non-negative latencies required")
        if self.adversary_craft_ms <= 0:
            raise ConfigError("partition: adversary_craft_ms must be positive")


@dataclass
class AdvTrainSection:
    regimes: list[str] = field(default_factory=list)
    epsilon: float = 0.01
    inner_iterations: int = 10
    phase1_epochs: int = 10
    phase2_epochs: int = 10
    lr: float = 0.01
    clean_fraction: float = 0.0
    freeze_trunk: bool = True
    from_scratch: bool = False

    def validate(self):
        bad = [r for r in self.regimes if r not in REGIMES]
        if bad:
            raise ConfigError(f"advtrain: unknown regimes {bad}")


@dataclass
class TransferSection:
    scenarios: list[str] = field(default_factory=list)
    fractions: list[float] = field(default_factory=lambda: [0.1, 0.25, 0.5])
    surrogate: ModelConfig = field(default_factory=lambda: ModelConfig(widths=[12, 24, 32], hidden=48, init_seed=1))

    def validate(self):
        bad = [s for s in self.scenarios if s not in TRANSFER_SCENARIOS]
        if bad:
            raise ConfigError(f"transfer: unknown scenarios {bad}")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("transfer: fractions must lie in (0, 1]")
        self.surrogate.validate()


def default_attacks() -> list[AttackBlock]:
    return [
        AttackBlock("pgd20", kind="pgd"),
        AttackBlock("pgd20_avg", kind="pgd_avg"),
        AttackBlock("pgd20_max", kind="pgd_max"),
        AttackBlock("uap_pgd", kind="uap", scope="universal"),
        AttackBlock("deepsloth"),
        AttackBlock("deepsloth_universal", scope="universal"),
        AttackBlock("deepsloth_class_universal", scope="class_universal"),
    ]


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    n_eval: int | None = None  # cap on test samples attacked and evaluated
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    attacks: list[AttackBlock] = field(default_factory=default_attacks)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    advtrain: AdvTrainSection = field(default_factory=AdvTrainSection)
    transfer: TransferSection = field(default_factory=TransferSection)

    def validate(self) -> "ExperimentConfig":
        for section in (self.data, self.model, self.policy, self.partition, self.advtrain, self.transfer):
            section.validate()
        names = [a.name for a in self.attacks]
        if len(set(names)) != len(names):
            raise ConfigError("attack names must be unique")
        for a in self.attacks:
            a.validate()
        if self.n_eval is not None and self.n_eval < 1:
            raise ConfigError("n_eval must be positive")
        return self

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce(tp, value, where):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is list and args and dataclasses.is_dataclass(args[0]):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "config").validate()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)
