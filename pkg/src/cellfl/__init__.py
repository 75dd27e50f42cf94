"""Federated lottery-ticket learning simulator (CELL, LotteryFL, FedAvg, Standalone)."""

from .comms import CommLedger, PayloadDescriptor, payload_bytes, record_round
from .config import ExperimentConfig, parse_config
from .data import DatasetSource, UserSplit, load_cifar10, make_synthetic, partition
from .nn import Batch, FlatModel, ModelSpec, evaluate_accuracy, forward_loss, sgd_step, train_local
from .protocols import (
    cell_local_step,
    federated_average,
    fedavg_local_step,
    lotteryfl_local_step,
    run_experiment,
    run_round,
    sample_participants,
)
from .pruning import BinaryMask, PruneSchedule, advance_rate, magnitude_prune, reinitialize

__version__ = "0.1.0"
