"""Experiment configuration: YAML schema, validation, profiles.

The config file is a nested key-value document with blocks dataset, arch,
federation, defense, attack, eval, plus top-level seed/output_dir and an
optional sweep block. Validation errors name the offending field path and
the CLI exits with code 2. Every run writes its fully resolved config next
to its outputs.

Profiles: "desk" (default) keeps runs laptop-sized (train subsampled to at
most 2,000 images, at most 30 federation rounds, 200 attack iterations);
"paper" fills in the published full-scale hyperparameters (per-dataset
learning rates and epoch budgets, 4,000 attack iterations) and lifts the
caps.
"""

import copy
from dataclasses import dataclass, field, asdict

import yaml

from .attack import AttackConfig
from .data import (load_bloodmnist, load_cifar10, make_synthetic_splits,
                   subsample_split)
from .defense import DefenseConfig
from .federation import FederationConfig
from .rng import derive_seed


class ConfigError(ValueError):
    """Schema violation; message starts with the field path."""


DESK_TRAIN_CAP = 2000
DESK_ROUNDS_CAP = 30
DESK_ATTACK_ITERS = 200
PAPER_ATTACK_ITERS = 4000

# Full-scale client training settings (learning rate, epoch budget) per
# dataset and defense family; "none" follows the attack-experiment rates.
PAPER_CLIENT = {
    "cifar10": {
        "none": (1e-4, 400),
        "proposed_fixed": (1e-4, 400),
        "proposed_learnable": (1e-4, 400),
        "dp_sgd": (1e-2, 150),
        "bido": (1e-4, 200),
    },
    "bloodmnist": {
        "none": (1e-3, 400),
        "proposed_fixed": (1e-3, 400),
        "proposed_learnable": (1e-3, 400),
        "dp_sgd": (1e-1, 200),
        "bido": (1e-3, 200),
    },
}
PAPER_ATTACK_LR = {"cifar10": 1.0, "bloodmnist": 1e-2}


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    root: str = None  # cifar10 directory
    path: str = None  # bloodmnist npz file
    n_train: int = 512
    n_test: int = 256
    image_size: int = 16
    channels: int = 3
    num_classes: int = 8
    subsample_train: int = None
    subsample_test: int = None
    checksums: dict = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10", "bloodmnist"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "cifar10" and not self.root:
            raise ValueError("cifar10 requires dataset.root")
        if self.kind == "bloodmnist" and not self.path:
            raise ValueError("bloodmnist requires dataset.path")


@dataclass
class EvalConfig:
    batch_size: int = 256
    limit: int = None  # cap on evaluated test images (None = all)
    eval_every: int = 0  # per-round accuracy cadence (0 = final round only)
    probe_epochs: int = 2  # clean probe model training epochs
    probe_batch_size: int = 64
    probe_lr: float = 1e-3
    save_updates: str = "attacked"  # attacked | all | none

    def __post_init__(self):
        if self.save_updates not in ("attacked", "all", "none"):
            raise ValueError("save_updates must be attacked, all or none")
        if self.batch_size < 1 or self.probe_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")


@dataclass
class SweepSpec:
    parameter: str
    values: list

    def __post_init__(self):
        if not self.parameter:
            raise ValueError("sweep.parameter must be set")
        if not self.values:
            raise ValueError("sweep.values must be non-empty")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    final_deconv_kernel: int = None  # arch block
    seed: int = 0
    output_dir: str = "runs/out"
    profile: str = "desk"
    sweep: SweepSpec = None

    def resolved_dict(self) -> dict:
        out = {
            "dataset": asdict(self.dataset),
            "arch": {"final_deconv_kernel": self.final_deconv_kernel},
            "federation": asdict(self.federation),
            "defense": asdict(self.defense),
            "attack": asdict(self.attack),
            "eval": asdict(self.eval),
            "seed": self.seed,
            "output_dir": self.output_dir,
            "profile": self.profile,
        }
        if self.sweep is not None:
            out["sweep"] = {"parameter": self.sweep.parameter,
                            "values": list(self.sweep.values)}
        return out

    def dump(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(self.resolved_dict(), f, sort_keys=True)


_BLOCKS = {
    "dataset": DatasetConfig,
    "federation": FederationConfig,
    "defense": DefenseConfig,
    "attack": AttackConfig,
    "eval": EvalConfig,
}
_TOP_KEYS = set(_BLOCKS) | {"arch", "seed", "output_dir", "profile", "sweep"}

# Field name -> type template, taken from the dataclass defaults.
_FIELD_TYPES = {
    name: {f.name for f in cls.__dataclass_fields__.values()}
    for name, cls in _BLOCKS.items()
}


def _check_block(raw: dict, block: str) -> dict:
    sub = raw.get(block, {}) or {}
    if not isinstance(sub, dict):
        raise ConfigError(f"{block}: expected a mapping")
    allowed = _FIELD_TYPES[block]
    for key in sub:
        if key not in allowed:
            raise ConfigError(f"{block}.{key}: unknown field")
    return sub


def _apply_profile(raw: dict, profile: str) -> dict:
    raw = copy.deepcopy(raw)
    attack = raw.setdefault("attack", {})
    fed = raw.setdefault("federation", {})
    ds = raw.setdefault("dataset", {})
    defense = raw.setdefault("defense", {})
    kind = ds.get("kind", "synthetic")
    if profile == "desk":
        attack.setdefault("iterations", DESK_ATTACK_ITERS)
        if fed.get("rounds", 1) > DESK_ROUNDS_CAP:
            raise ConfigError(
                f"federation.rounds: {fed['rounds']} exceeds the desk-profile "
                f"cap of {DESK_ROUNDS_CAP}; use --profile paper"
            )
        if kind in ("cifar10", "bloodmnist") and ds.get("subsample_train") is None:
            ds["subsample_train"] = DESK_TRAIN_CAP
        if (ds.get("subsample_train") or 0) > DESK_TRAIN_CAP or (
            kind == "synthetic" and ds.get("n_train", 512) > DESK_TRAIN_CAP
        ):
            raise ConfigError(
                "dataset: desk profile caps training images at "
                f"{DESK_TRAIN_CAP}; use --profile paper"
            )
    elif profile == "paper":
        attack.setdefault("iterations", PAPER_ATTACK_ITERS)
        if kind in PAPER_CLIENT:
            lr, epochs = PAPER_CLIENT[kind][defense.get("kind", "none")]
            defense.setdefault("lr", lr)
            defense.setdefault("pretrain_epochs", epochs)
            fed.setdefault("rounds", epochs)
            fed.setdefault("local_epochs", 1)
            attack.setdefault("lr", PAPER_ATTACK_LR[kind])
    else:
        raise ConfigError(f"profile: expected desk or paper, got {profile!r}")
    return raw


def _build(raw: dict) -> ExperimentConfig:
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"{key}: unknown top-level key")
    blocks = {}
    for name, cls in _BLOCKS.items():
        sub = _check_block(raw, name)
        try:
            blocks[name] = cls(**sub)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: {e}") from e
    arch = raw.get("arch", {}) or {}
    if not isinstance(arch, dict) or set(arch) - {"final_deconv_kernel"}:
        raise ConfigError("arch: only final_deconv_kernel is configurable")
    sweep = None
    if raw.get("sweep") is not None:
        sw = raw["sweep"]
        if not isinstance(sw, dict) or set(sw) - {"parameter", "values"}:
            raise ConfigError("sweep: expected {parameter, values}")
        try:
            sweep = SweepSpec(sw.get("parameter"), sw.get("values"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"sweep: {e}") from e
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")
    return ExperimentConfig(
        dataset=blocks["dataset"],
        federation=blocks["federation"],
        defense=blocks["defense"],
        attack=blocks["attack"],
        eval=blocks["eval"],
        final_deconv_kernel=arch.get("final_deconv_kernel"),
        seed=seed,
        output_dir=raw.get("output_dir", "runs/out"),
        profile=raw.get("profile", "desk"),
        sweep=sweep,
    )


def load_config(path, profile: str = None, seed: int = None,
                out: str = None) -> ExperimentConfig:
    """Read, override (CLI flags win), apply profile defaults, validate."""
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if profile is not None:
        raw["profile"] = profile
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    raw = _apply_profile(raw, raw.get("profile", "desk"))
    return _build(raw)


def config_from_dict(raw: dict, profile: str = None) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    if profile is not None:
        raw["profile"] = profile
    raw = _apply_profile(raw, raw.get("profile", "desk"))
    return _build(raw)


def set_by_path(raw: dict, path: str, value):
    """Assign a dotted-path key in a nested dict (for sweeps)."""
    keys = path.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{path}: not a mapping at {k!r}")
    node[keys[-1]] = value


def load_datasets(ds: DatasetConfig, seed: int) -> dict:
    """Materialize the configured dataset as train/test splits."""
    if ds.kind == "synthetic":
        splits = make_synthetic_splits(
            ds.n_train, ds.n_test,
            image_shape=(ds.channels, ds.image_size, ds.image_size),
            num_classes=ds.num_classes,
            seed=derive_seed("dataset", seed),
        )
    elif ds.kind == "cifar10":
        splits = load_cifar10(ds.root, ds.checksums)
    else:
        loaded = load_bloodmnist(ds.path)
        splits = {"train": loaded["train"], "test": loaded["test"]}
    if ds.subsample_train:
        splits["train"] = subsample_split(
            splits["train"], ds.subsample_train, derive_seed("sub-train", seed)
        )
    if ds.subsample_test:
        splits["test"] = subsample_split(
            splits["test"], ds.subsample_test, derive_seed("sub-test", seed)
        )
    return splits
