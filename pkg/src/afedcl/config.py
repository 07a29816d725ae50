"""Experiment configuration: one JSON document per run.

Schema (defaults in parentheses):

  {
    "method": "afedcl" | "fedavg" | "fedprox" | "local_only",
    "rounds": int,
    "clients": int (5),
    "lambda": float (0.1),            adversarial balance weight
    "mu": float (0.01),               FedProx proximal coefficient
    "optimizer": "adam" | "sgd" ("adam"),
    "learning_rate": float (0.001),
    "dcc_epochs": int (3),            stage-1 local epochs per round
    "aff_epochs": int (1),            stage-2 local epochs per round
    "partition": {"scheme": "disjoint", "classes_per_client": int (2)}
               | {"scheme": "dirichlet", "alpha": float (0.1)},
    "train_samples_per_client": int (20),
    "seed": int (0),
    "network": {"feature_dim": 32, "encoder_hidden": [128, 64],
                "discriminator_hidden": 32},
    "data": {"kind": "synthetic", "classes": 6, "input_dim": 64,
             "noise_sigma": 1.0, "separation": 3.0,
             "samples_per_class": 200, "seed": <experiment seed>}
          | {"kind": "folder", "path": str, "side": int (8), "classes": int},
    "ablation": {"enable_dcc": true, "enable_caa": true, "enable_aff": true,
                 "enable_encoder_adversarial_update": true},
    "output_dir": str ("runs")
  }

Baselines train dcc_epochs + aff_epochs local epochs per round so every method
sees the same per-round compute; local_only runs that many epochs for each of
the `rounds` iterations with no communication.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .data import SyntheticSpec
from .federation import METHODS, AblationFlags
from .models import NetworkConfig
from .numerics import ADAM, SGD

LAMBDA_SWEEP = (0.01, 0.1, 1.0)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    method: str
    rounds: int
    num_clients: int = 5
    balance: float = 0.1
    prox_mu: float = 0.01
    optimizer: str = ADAM
    learning_rate: float = 0.001
    dcc_epochs: int = 3
    aff_epochs: int = 1
    partition_scheme: str = "disjoint"
    classes_per_client: int = 2
    dirichlet_alpha: float = 0.1
    train_per_client: int = 20
    seed: int = 0
    network: NetworkConfig = None
    synthetic: SyntheticSpec | None = None
    data_folder: str | None = None
    folder_side: int = 8
    flags: AblationFlags = field(default_factory=AblationFlags)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.num_clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.balance < 0 or self.prox_mu < 0:
            raise ConfigError("lambda and mu must be >= 0")
        if self.optimizer not in (ADAM, SGD):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.dcc_epochs < 1 or self.aff_epochs < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.partition_scheme not in ("disjoint", "dirichlet"):
            raise ConfigError(f"unknown partition scheme {self.partition_scheme!r}")
        if self.train_per_client < 1:
            raise ConfigError("train_samples_per_client must be >= 1")
        if self.synthetic is None and self.data_folder is None:
            raise ConfigError("config needs synthetic data parameters or a data folder")


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    try:
        method = raw["method"]
        rounds = int(raw["rounds"])
    except KeyError as exc:
        raise ConfigError(f"missing required config key {exc}") from exc

    seed = int(raw.get("seed", 0))
    partition = raw.get("partition", {})
    scheme = partition.get("scheme", "disjoint")

    data = raw.get("data", {})
    kind = data.get("kind", "synthetic")
    synthetic = None
    data_folder = None
    folder_side = int(data.get("side", 8))
    if kind == "synthetic":
        synthetic = SyntheticSpec(
            num_classes=int(data.get("classes", 6)),
            input_dim=int(data.get("input_dim", 64)),
            noise_sigma=float(data.get("noise_sigma", 1.0)),
            samples_per_class=int(data.get("samples_per_class", 200)),
            separation=float(data.get("separation", 3.0)),
            seed=int(data["seed"]) if data.get("seed") is not None else seed,
        )
        input_dim, num_classes = synthetic.input_dim, synthetic.num_classes
    elif kind == "folder":
        try:
            data_folder = data["path"]
            num_classes = int(data["classes"])
        except KeyError as exc:
            raise ConfigError(f"folder data needs key {exc}") from exc
        input_dim = folder_side * folder_side
    else:
        raise ConfigError(f"unknown data kind {kind!r}")

    network_raw = raw.get("network", {})
    network = NetworkConfig(
        input_dim=input_dim,
        num_classes=num_classes,
        feature_dim=int(network_raw.get("feature_dim", 32)),
        encoder_hidden=tuple(network_raw.get("encoder_hidden", (128, 64))),
        discriminator_hidden=int(network_raw.get("discriminator_hidden", 32)),
    )

    ablation = raw.get("ablation", {})
    flags = AblationFlags(
        enable_dcc=bool(ablation.get("enable_dcc", True)),
        enable_caa=bool(ablation.get("enable_caa", True)),
        enable_aff=bool(ablation.get("enable_aff", True)),
        enable_encoder_adversarial_update=bool(
            ablation.get("enable_encoder_adversarial_update", True)
        ),
    )

    return ExperimentConfig(
        method=method,
        rounds=rounds,
        num_clients=int(raw.get("clients", 5)),
        balance=float(raw.get("lambda", 0.1)),
        prox_mu=float(raw.get("mu", 0.01)),
        optimizer=raw.get("optimizer", ADAM),
        learning_rate=float(raw.get("learning_rate", 0.001)),
        dcc_epochs=int(raw.get("dcc_epochs", 3)),
        aff_epochs=int(raw.get("aff_epochs", 1)),
        partition_scheme=scheme,
        classes_per_client=int(partition.get("classes_per_client", 2)),
        dirichlet_alpha=float(partition.get("alpha", 0.1)),
        train_per_client=int(raw.get("train_samples_per_client", 20)),
        seed=seed,
        network=network,
        synthetic=synthetic,
        data_folder=data_folder,
        folder_side=folder_side,
        flags=flags,
        output_dir=raw.get("output_dir", "runs"),
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a JSON object in {path}")
    return config_from_dict(raw)


def config_to_dict(config: ExperimentConfig) -> dict:
    """Fully resolved configuration, suitable for the run manifest."""
    if config.partition_scheme == "disjoint":
        partition = {"scheme": "disjoint", "classes_per_client": config.classes_per_client}
    else:
        partition = {"scheme": "dirichlet", "alpha": config.dirichlet_alpha}
    if config.synthetic is not None:
        spec = config.synthetic
        data = {
            "kind": "synthetic",
            "classes": spec.num_classes,
            "input_dim": spec.input_dim,
            "noise_sigma": spec.noise_sigma,
            "separation": spec.separation,
            "samples_per_class": spec.samples_per_class,
            "seed": spec.seed,
        }
    else:
        data = {
            "kind": "folder",
            "path": config.data_folder,
            "side": config.folder_side,
            "classes": config.network.num_classes,
        }
    return {
        "method": config.method,
        "rounds": config.rounds,
        "clients": config.num_clients,
        "lambda": config.balance,
        "mu": config.prox_mu,
        "optimizer": config.optimizer,
        "learning_rate": config.learning_rate,
        "dcc_epochs": config.dcc_epochs,
        "aff_epochs": config.aff_epochs,
        "partition": partition,
        "train_samples_per_client": config.train_per_client,
        "seed": config.seed,
        "network": {
            "input_dim": config.network.input_dim,
            "num_classes": config.network.num_classes,
            "feature_dim": config.network.feature_dim,
            "encoder_hidden": list(config.network.encoder_hidden),
            "discriminator_hidden": config.network.discriminator_hidden,
        },
        "data": data,
        "ablation": {
            "enable_dcc": config.flags.enable_dcc,
            "enable_caa": config.flags.enable_caa,
            "enable_aff": config.flags.enable_aff,
            "enable_encoder_adversarial_update": config.flags.enable_encoder_adversarial_update,
        },
        "output_dir": config.output_dir,
    }


def with_flags(config: ExperimentConfig, **flag_overrides) -> ExperimentConfig:
    return replace(config, flags=replace(config.flags, **flag_overrides))
