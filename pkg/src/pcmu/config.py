"""Run configuration: one structured document mirroring every tunable.

Files may be TOML or JSON; a manifest written by a previous run (which
wraps the resolved config under a "config" key) loads the same way, so any
run can be reproduced from its manifest.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from pcmu.data import SynthGenConfig
from pcmu.env import BatteryConfig, EnvConfig, TariffSchedule
from pcmu.errors import ConfigError

PRIVACY_BACKENDS = ("flatness", "mi-iid", "mi-general")
GENERAL_REWARD_MODES = ("episode", "table")


@dataclass(frozen=True)
class TrainSection:
    gamma: float = 1.0
    train_every: int = 8        # Q-update period in steps
    sync_every: int = 500       # target-copy / refresh period in steps
    batch_size: int = 128
    buffer_capacity: int = 10_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_frac: float = 0.5
    episodes: int = 400
    lambda_weight: float = 0.5
    seed: int = 0
    hidden_width: int = 64
    learning_rate: float = 0.00025
    rms_decay: float = 0.99
    rms_epsilon: float = 1e-8
    mask_target_max: bool = True
    clock_feature: bool = False
    demand_scale: float | None = None   # None: estimated from training split

    def __post_init__(self):
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ConfigError("lambda_weight must be in [0,1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0,1]")
        if self.train_every < 1 or self.sync_every < 1:
            raise ConfigError("update periods must be >= 1")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ConfigError("buffer must hold at least one batch")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if not 0.0 < self.epsilon_decay_frac <= 1.0:
            raise ConfigError("epsilon_decay_frac must be in (0,1]")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")


@dataclass(frozen=True)
class PrivacySection:
    backend: str = "mi-general"
    flat_target_kw: float = 0.7
    n_bins: int = 32
    hnet_learning_rate: float = 0.001
    hnet_hidden_width: int = 64
    hnet_lstm_width: int = 44
    refresh_batches: int = 8
    episode_buffer_capacity: int = 500
    step_buffer_capacity: int = 10_000
    episode_batch_size: int = 64
    step_batch_size: int = 128
    table_sample_episodes: int = 64
    prob_floor: float = 1e-12
    general_reward_mode: str = "episode"
    normalize_signals: bool = False

    def __post_init__(self):
        if self.backend not in PRIVACY_BACKENDS:
            raise ConfigError(
                f"backend must be one of {PRIVACY_BACKENDS}, got "
                f"{self.backend!r}")
        if self.general_reward_mode not in GENERAL_REWARD_MODES:
            raise ConfigError(
                f"general_reward_mode must be one of {GENERAL_REWARD_MODES}")
        if self.flat_target_kw <= 0:
            raise ConfigError("flat_target_kw must be positive")
        if self.n_bins < 2:
            raise ConfigError("need at least 2 demand bins")
        if not 0.0 < self.prob_floor < 1.0:
            raise ConfigError("prob_floor must be in (0,1)")


@dataclass(frozen=True)
class AttackerSection:
    learning_rate: float = 0.001
    epochs: int = 300
    patience: int = 20
    batch_size: int = 32
    load_hidden: tuple = (32, 32, 32)
    occupancy_hidden: tuple = (44, 44)

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("attacker training sizes must be >= 1")


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"   # synthetic | csv
    path: str | None = None
    split_seed: int = 0
    synthetic: SynthGenConfig = field(default_factory=SynthGenConfig)

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError("data source must be 'synthetic' or 'csv'")
        if self.source == "csv" and not self.path:
            raise ConfigError("csv data source needs a path")


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    battery: BatteryConfig = field(default_factory=BatteryConfig)
    tariff: TariffSchedule = field(default_factory=TariffSchedule.default_tou)
    train: TrainSection = field(default_factory=TrainSection)
    privacy: PrivacySection = field(default_factory=PrivacySection)
    attacker: AttackerSection = field(default_factory=AttackerSection)
    data: DataSection = field(default_factory=DataSection)

    def replace(self, **section_updates) -> "RunConfig":
        return dataclasses.replace(self, **section_updates)

    def to_dict(self) -> dict:
        return _as_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = open(path, "rb").read()
        if str(path).endswith(".json"):
            doc = json.loads(text.decode("utf-8"))
        else:
            try:
                doc = tomllib.loads(text.decode("utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a table")
        if "config" in doc and "command" in doc:   # a run manifest
            doc = doc["config"]
        return cls.from_dict(doc)


def _as_plain(obj):
    if isinstance(obj, dict):
        return {k: _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    return obj


_SECTION_TYPES = {
    "env": EnvConfig,
    "battery": BatteryConfig,
    "tariff": TariffSchedule,
    "train": TrainSection,
    "privacy": PrivacySection,
    "attacker": AttackerSection,
    "data": DataSection,
    "synthetic": SynthGenConfig,
}


def _build(cls, doc, path):
    """Construct a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key: {here}")
        f = known[key]
        if f.name in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {here} must be a table")
            kwargs[key] = _build(_SECTION_TYPES[f.name], value, here)
        elif isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v
                                for v in value)
        elif value is None or isinstance(value, (int, float, bool, str)):
            kwargs[key] = value
        else:
            raise ConfigError(f"unsupported value type at {here}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid config near {path or '<root>'}: {exc}") from exc
