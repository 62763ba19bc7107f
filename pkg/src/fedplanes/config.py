"""Experiment configuration: schema, validation, file loading, env overrides.

The config file is YAML (JSON works too). Unknown keys are rejected so a
typo in a sweep definition fails loudly instead of running the default.
Environment variables of the form FEDPLANES_<SECTION>_<KEY>=value override
scalar leaves, e.g. FEDPLANES_FEDERATION_ROUNDS=5.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

__all__ = [
    "DatasetConfig",
    "PartitionConfig",
    "ModelConfig",
    "FederationConfig",
    "AttackConfig",
    "DefenseConfig",
    "ExperimentConfig",
    "ConfigError",
    "load_config",
]

ENV_PREFIX = "FEDPLANES"

# server validation set sizes per known dataset
SERVER_VAL_SIZES = {"breast": 89, "synthetic": 250, "diabetes": 250}


class ConfigError(ValueError):
    """One or more invalid configuration entries (all listed at once)."""


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | csv
    name: str = "synthetic"  # report label; selects server_val default
    n_clients: int = 10  # synthetic: honest client count
    n_per_client: int = 1000
    alpha: float = 1.0
    path: str | None = None  # csv file
    label_column: str | None = None
    subsample: int | None = None  # cap on csv rows, drawn seeded


@dataclass
class PartitionConfig:
    mode: str = "noniid"  # noniid | iid
    n_attackers: int = 0
    server_val: int | None = None  # None -> per-dataset default
    unfair_exclude: int | None = None


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [512, 256, 256, 64])
    gen_hidden: list = field(default_factory=lambda: [64, 64])
    latent_dim: int = 8
    loss_weights: dict = field(
        default_factory=lambda: {
            "recon_x": 1.0,
            "task": 1.0,
            "task_cf": 2.0,
            "kl_z": 1.0,
            "kl_zprime": 1.0,
            "dz": 0.5,
        }
    )


@dataclass
class FederationConfig:
    rounds: int = 200
    local_epochs: int = 2
    learning_rate: float = 0.01
    momentum: float = 0.9
    joint_generator: bool = True
    record_planes: bool = True
    record_test_every: int = 1
    n_projections: int = 100


@dataclass
class AttackConfig:
    kind: str = "none"
    beta: float = 1.2


@dataclass
class DefenseConfig:
    kind: str = "fedavg"
    mode: str = "combined"
    window: int = 30
    trim_fraction: float = 0.2
    krum_malicious: int = 1


@dataclass
class MatrixConfig:
    attacks: list = field(default_factory=list)  # str or {kind, beta}
    defenses: list = field(default_factory=list)  # str or {kind, mode, window}
    betas: list = field(default_factory=list)  # crafted-noise sweep
    windows: list = field(default_factory=list)  # moving-average sweep
    epochs: list = field(default_factory=list)  # local-epochs sweep


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    matrix: MatrixConfig = field(default_factory=MatrixConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def server_val_size(self) -> int:
        if self.partition.server_val is not None:
            return self.partition.server_val
        return SERVER_VAL_SIZES.get(self.dataset.name, 250)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        errors = []
        sections = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in (data or {}).items():
            if key not in sections:
                errors.append(f"unknown section {key!r}")
                continue
            if key == "seeds":
                if not isinstance(value, list) or not all(isinstance(s, int) for s in value):
                    errors.append("seeds must be a list of integers")
                else:
                    kwargs["seeds"] = value
                continue
            section_cls = sections[key].default_factory  # type: ignore[union-attr]
            section_type = type(section_cls())
            allowed = {f.name for f in fields(section_type)}
            bad = set(value) - allowed
            if bad:
                errors.append(
                    f"unknown key(s) in {key!r}: {sorted(bad)} (allowed: {sorted(allowed)})"
                )
                continue
            kwargs[key] = section_type(**value)
        if errors:
            raise ConfigError("; ".join(errors))
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        errors = []
        if self.dataset.kind not in ("synthetic", "csv"):
            errors.append(f"dataset.kind {self.dataset.kind!r} not in (synthetic, csv)")
        if self.dataset.kind == "csv":
            if not self.dataset.path:
                errors.append("dataset.path required for csv datasets")
            if not self.dataset.label_column:
                errors.append("dataset.label_column required for csv datasets")
        if self.partition.mode not in ("noniid", "iid"):
            errors.append(f"partition.mode {self.partition.mode!r} not in (noniid, iid)")
        if self.partition.n_attackers < 0:
            errors.append("partition.n_attackers must be >= 0")
        if self.federation.rounds < 1:
            errors.append("federation.rounds must be >= 1")
        if self.federation.local_epochs < 0:
            errors.append("federation.local_epochs must be >= 0")
        from .aggregation import DefenseSpec
        from .attacks import ATTACK_KINDS

        if self.attack.kind not in ATTACK_KINDS:
            errors.append(f"attack.kind {self.attack.kind!r} unknown")
        try:
            DefenseSpec(
                kind=self.defense.kind,
                mode=self.defense.mode,
                window=self.defense.window,
                trim_fraction=self.defense.trim_fraction,
                krum_malicious=self.defense.krum_malicious,
            )
        except ValueError as exc:
            errors.append(str(exc))
        if not self.seeds:
            errors.append("seeds must be nonempty")
        if errors:
            raise ConfigError("; ".join(errors))


def _apply_env_overrides(data: dict, environ) -> dict:
    """FEDPLANES_<SECTION>_<KEY>=value overrides on the raw dict."""
    for var, raw in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX + "_"):
            continue
        parts = var[len(ENV_PREFIX) + 1 :].lower().split("_", 1)
        if len(parts) != 2:
            continue
        section, key = parts
        value = yaml.safe_load(raw)
        if section == "seeds":
            data["seeds"] = value
        else:
            data.setdefault(section, {})[key] = value
    return data


def load_config(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """Load, override (CLI dict, then env vars), validate."""
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for section, values in (overrides or {}).items():
        if section == "seeds":
            data["seeds"] = values
        else:
            data.setdefault(section, {}).update(values)
    data = _apply_env_overrides(data, os.environ if environ is None else environ)
    return ExperimentConfig.from_dict(data)
