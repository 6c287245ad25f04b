"""Transducer training with occupancy-weighted consistency between two views."""

from .config import ConfigError, ExperimentConfig
from .consistency import TcrConfig, symmetric_consistency, symmetric_tcr, tcr_loss
from .decode import BeamConfig, beam_decode, greedy_decode, occupancy_heatmap, token_error_rate
from .estimator import TCRTransducer
from .lattice import (
    EmissionLattice,
    lattice_tables,
    loss_grad,
    occupancies,
    transducer_loss,
)
from .model import ModelDims, TransducerModel
from .pruning import PruneBand, banded_loss, select_band
from .synthdata import Dataset, TaskSpec, generate_split
from .training import compare_variants, evaluate, train
from .views import AugmentSpec, make_view_pair, spec_augment

__all__ = [
    "AugmentSpec",
    "BeamConfig",
    "ConfigError",
    "Dataset",
    "EmissionLattice",
    "ExperimentConfig",
    "ModelDims",
    "PruneBand",
    "TCRTransducer",
    "TaskSpec",
    "TcrConfig",
    "TransducerModel",
    "banded_loss",
    "beam_decode",
    "compare_variants",
    "evaluate",
    "generate_split",
    "greedy_decode",
    "lattice_tables",
    "loss_grad",
    "make_view_pair",
    "occupancies",
    "occupancy_heatmap",
    "select_band",
    "spec_augment",
    "symmetric_consistency",
    "symmetric_tcr",
    "tcr_loss",
    "token_error_rate",
    "train",
    "transducer_loss",
]
