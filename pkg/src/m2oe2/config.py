"""Configuration objects and the flat key=value run-file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADS = ("deterministic", "gaussian", "variational")


class ConfigError(ValueError):
    """Invalid configuration; CLI maps this to exit code 2."""


@dataclass
class ModelConfig:
    """Architecture dimensions and counts."""

    n_series: int = 1          # load channels per time step
    proj_dim: int = 40         # width of the modulated input fed to the GRU
    hidden_dim: int = 64
    latent_dim: int = 32
    n_layers: int = 4
    horizon: int = 3           # forecast steps emitted per origin
    n_experts: int = 3         # one expert per external source
    top_m: int = 2             # experts kept active by the gate
    head: str = "variational"
    use_experts: bool = True
    mc_samples: int = 100      # draws used for predictive statistics

    def validate(self):
        if self.head not in HEADS:
            raise ConfigError(f"model.head must be one of {HEADS}, got {self.head!r}")
        for name in ("n_series", "proj_dim", "hidden_dim", "latent_dim",
                     "n_layers", "horizon", "n_experts"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if not 1 <= self.top_m <= self.n_experts:
            raise ConfigError(
                f"model.top_m must lie in [1, n_experts={self.n_experts}], got {self.top_m}")
        if self.mc_samples < 2:
            raise ConfigError("model.mc_samples must be >= 2")
        return self

    @property
    def out_dim(self):
        return self.horizon * self.n_series

    @property
    def expert_out_dim(self):
        return self.n_series * self.proj_dim


@dataclass
class TrainConfig:
    """Optimization hyperparameters and reproducibility controls."""

    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 16
    kl_weight: float = 0.01
    seed: int = 0
    clip_norm: float = 5.0
    checkpoint_every: int = 0   # extra periodic checkpoints; 0 keeps best+final only
    window_stride: int = 1      # train on every s-th window origin (desk-scale knob)
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.kl_weight < 0:
            raise ConfigError("train.kl_weight must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.window_stride < 1:
            raise ConfigError("train.window_stride must be >= 1")
        if not 0 <= self.val_fraction < 1 or not 0 <= self.test_fraction < 1:
            raise ConfigError("train split fractions must lie in [0, 1)")
        return self


@dataclass
class RunConfig:
    """Everything one CLI command needs: data paths, model, training, output."""

    data_csv: str = ""
    data_schema: str = ""
    out_dir: str = "runs/out"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self, require_data=True):
        self.model.validate()
        self.train.validate()
        if require_data:
            for label, p in (("data.csv", self.data_csv), ("data.schema", self.data_schema)):
                if not p:
                    raise ConfigError(f"{label} is required")
                if not Path(p).exists():
                    raise ConfigError(f"{label} path does not exist: {p}")
        return self


# All randomness fans out from one seed through fixed stream indices, so
# every command that shares a seed shares the exact same draws.
STREAM_INIT = 0     # parameter initialization
STREAM_NOISE = 1    # reparameterization noise during training
STREAM_BATCH = 2    # per-epoch shuffling
STREAM_EVAL = 3     # Monte Carlo draws during evaluation
STREAM_SYNTH = 4    # synthetic data generation


def seed_stream(seed, stream):
    """Independent generator for one of the documented streams above."""
    children = np.random.SeedSequence(int(seed)).spawn(5)
    return np.random.default_rng(children[stream])


def parse_kv_text(text, source="<config>"):
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(field_obj, value, key, source):
    t = field_obj.type
    try:
        if t in ("int", int):
            return int(value)
        if t in ("float", float):
            return float(value)
        if t in ("bool", bool):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value
    except ValueError:
        raise ConfigError(f"{source}: bad value for {key}: {value!r}") from None


def load_run_config(path):
    """Read a run file with model./train./data. prefixed keys."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    kv = parse_kv_text(path.read_text(), source=str(path))
    cfg = RunConfig()
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for key, value in kv.items():
        if key == "out":
            cfg.out_dir = value
        elif key == "data.csv":
            cfg.data_csv = value
        elif key == "data.schema":
            cfg.data_schema = value
        elif key.startswith("model."):
            name = key[len("model."):]
            if name not in model_fields:
                raise ConfigError(f"{path}: unknown key {key!r}")
            setattr(cfg.model, name, _coerce(model_fields[name], value, key, path))
        elif key.startswith("train."):
            name = key[len("train."):]
            if name not in train_fields:
                raise ConfigError(f"{path}: unknown key {key!r}")
            setattr(cfg.train, name, _coerce(train_fields[name], value, key, path))
        else:
            raise ConfigError(f"{path}: unknown key {key!r}")
    return cfg


def dump_run_config(cfg):
    """Render a RunConfig back to the key=value format (config snapshot)."""
    lines = [f"data.csv = {cfg.data_csv}", f"data.schema = {cfg.data_schema}",
             f"out = {cfg.out_dir}"]
    for prefix, obj in (("model", cfg.model), ("train", cfg.train)):
        for f in dataclasses.fields(obj):
            lines.append(f"{prefix}.{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"


def model_config_json(model_cfg):
    return json.dumps(dataclasses.asdict(model_cfg), sort_keys=True)


def model_config_from_json(text):
    return ModelConfig(**json.loads(text)).validate()
