"""Federated-learning privacy harness.

Simulates FedAvg image classification under an honest-but-curious server,
reconstructs client training batches from captured weight updates by
gradient inversion, and evaluates defenses: a latent-noise decoder trained
with a minimax correlation objective, DP-SGD, and an HSIC regularizer.
"""

from .attack import (AttackConfig, infer_labels, invert, match_reconstructions,
                     pseudo_gradient)
from .config import ConfigError, ExperimentConfig, load_config, load_datasets
from .data import DataError, DatasetSplit, NormStats, make_synthetic_splits
from .defense import DefenseConfig, dp_sgd_step, make_strategy, pretrain_noise
from .federation import (FederationConfig, WeightUpdate, centralized_training,
                         fedavg, partition_data, run_federation)
from .metrics import accuracy, f1_macro, make_recon_report, mse, psnr
from .models import (ArchitectureConfig, DefenderModel, ModelParameters,
                     NoiseSpec, SharedClassifier, build_defender,
                     build_surrogate, init_parameters, shared_parameters)
from .objectives import (cosine_grad_distance, cross_entropy, decoder_loss,
                         hsic, pearson_r, predictor_loss, total_variation)
from .rng import derive_seed, generator

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "AttackConfig", "ConfigError", "DataError",
    "DatasetSplit", "DefenderModel", "DefenseConfig", "ExperimentConfig",
    "FederationConfig", "ModelParameters", "NormStats", "NoiseSpec",
    "SharedClassifier", "WeightUpdate", "accuracy", "build_defender",
    "build_surrogate", "centralized_training", "cosine_grad_distance",
    "cross_entropy", "decoder_loss", "derive_seed", "dp_sgd_step", "f1_macro",
    "fedavg", "generator", "hsic", "infer_labels", "init_parameters",
    "invert", "load_config", "load_datasets", "make_recon_report",
    "make_strategy", "make_synthetic_splits", "match_reconstructions",
    "mse", "partition_data",
    "pearson_r", "predictor_loss", "pretrain_noise", "pseudo_gradient",
    "psnr", "run_federation", "shared_parameters", "total_variation",
]
