"""Run configuration: one structured file holding every tunable key.

Files are YAML (JSON is accepted as a subset). Unknown sections or keys are
rejected, and ``resolve`` materialises every default so a run can write the
exact configuration it used next to its outputs.
"""
import copy
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from .exceptions import ConfigError, InvalidInputError
from .rewards import RewardConfig
from .synthdata import GenerationConfig
from .trainer import TrainConfig


@dataclass
class RunSection:
    run_id: str = "run"
    output_dir: str = "runs"
    dataset_dir: str = ""
    schedule: str = "full"


@dataclass
class PolicySection:
    mode: str = "featurized"
    embed_dim: int = 8
    pos_dim: int = 8
    pos_base: float = 8.0
    init_scale: float = 0.1
    seed: int = 0


@dataclass
class EvalSection:
    val_fraction: float = 0.2
    split_seed: int = 0
    resamples: int = 10_000
    level: float = 0.95
    bootstrap_seed: int = 0


@dataclass
class TheoremSection:
    n_steps: int = 200
    lr: float = 0.03
    init_scale: float = 1.0
    max_ratio: float = 0.5
    min_frac: float = 0.95
    slack: float = 1e-6


@dataclass
class GradcheckSection:
    n_instances: int = 50
    h: float = 1e-5
    tol: float = 1e-5
    seed: int = 0
    inject_bug: bool = False
    h_sweep: tuple = (1e-4, 1e-5, 1e-6)


SECTIONS = {
    "run": RunSection,
    "generation": GenerationConfig,
    "policy": PolicySection,
    "reward": RewardConfig,
    "train": TrainConfig,
    "eval": EvalSection,
    "theorem": TheoremSection,
    "gradcheck": GradcheckSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    policy: PolicySection = field(default_factory=PolicySection)
    reward: RewardConfig = field(default_factory=RewardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    theorem: TheoremSection = field(default_factory=TheoremSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            d = sec.to_dict() if hasattr(sec, "to_dict") else asdict(sec)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _coerce(cls, name, value, key):
    """YAML reads ``1e-3`` as a string; accept numeric strings for numeric fields."""
    ftype = {f.name: f.type for f in fields(cls)}[name]
    if ftype in (float, "float") and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}", key=key) from None
    if ftype in (float, "float") and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    for name, section in raw.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section {name!r}", key=name)
        if section is None:
            section = {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping", key=name)
        cls = SECTIONS[name]
        known = {f.name for f in fields(cls)}
        for key in section:
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}", key=f"{name}.{key}")
        section = {k: _coerce(cls, k, v, f"{name}.{k}") for k, v in section.items()}
        try:
            kwargs[name] = cls(**section)
        except (InvalidInputError, TypeError, ValueError) as err:
            raise ConfigError(f"invalid {name} section: {err}", key=name) from None
    cfg = RunConfig(**kwargs)
    if cfg.policy.mode not in ("featurized", "tabular"):
        raise ConfigError(f"policy.mode must be 'featurized' or 'tabular', got {cfg.policy.mode!r}",
                          key="policy.mode")
    if cfg.run.schedule not in ("sft", "rkto", "full"):
        raise ConfigError("run.schedule must be one of sft, rkto, full", key="run.schedule")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None
    return from_dict(raw)


def resolve_key(key):
    """Map ``section.key`` or a bare key that names exactly one field to its section."""
    if "." in key:
        section, name = key.split(".", 1)
        if section in SECTIONS and name in {f.name for f in fields(SECTIONS[section])}:
            return section, name
        raise ConfigError(f"unknown config key {key}", key=key)
    hits = [s for s, cls in SECTIONS.items() if key in {f.name for f in fields(cls)}]
    if len(hits) != 1:
        raise ConfigError(f"unknown or ambiguous config key {key}", key=key)
    return hits[0], key


def with_override(cfg, key, value):
    """A copy of ``cfg`` with one key replaced (validated through the section type)."""
    section, name = resolve_key(key)
    raw = copy.deepcopy(cfg.to_dict())
    raw[section][name] = value
    return from_dict(raw)
