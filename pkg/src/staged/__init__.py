"""Spatial gene-regulatory simulation and an attention-based graph neural ODE learner."""

from .data import Dataset, GrnSpec, LrPair, RunConfig, load_dataset, load_grn_specs, load_lr_catalog, save_dataset
from .errors import StagedError
from .model import ModelParams, load_checkpoint, rollout, save_checkpoint
from .sim import assemble_tissue, integrate, simulate

__version__ = "0.1.0"
