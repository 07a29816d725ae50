"""Desk-scale personalized federated learning with adversarial consensus.

The package trains personalized per-client models by combining three pieces:
an adversarial stage that aligns local and global feature distributions, a
server aggregation weighted by each client's discrimination loss, and a
learned per-client scalar that fuses global and local features. FedAvg,
FedProx and a no-communication baseline share the same data pipeline and
harness for comparison.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, config_from_dict, load_config
from .data import (
    ClientSplit,
    Dataset,
    PartitionSpec,
    SyntheticSpec,
    load_image_folder,
    partition_dirichlet,
    partition_disjoint,
    subsample_train,
    synth_generate,
)
from .federation import (
    AblationFlags,
    ClientState,
    ExperimentResult,
    RoundReport,
    ServerState,
    aff_local_update,
    classification_loss,
    consensus_aggregate,
    dcc_local_update,
    discrimination_loss,
    fedavg_aggregate,
    fedavg_local_update,
    fedprox_local_update,
    predict,
    run_experiment,
    run_round,
)
from .metrics import MetricsRow, evaluate, regression_discloss_vs_fusion, write_metrics_csv
from .models import NetworkConfig, build_models, checkpoint_load, checkpoint_save
from .numerics import AffineLayer, OptimizerState, optimizer_step, softmax_cross_entropy
