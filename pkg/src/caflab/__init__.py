"""Continual learning with active forgetting on small dense networks."""

from .numerics import LearnerSpec, ParamVector
from .model import DiversityBackground, MCLModel, init_mcl, width_for_budget
from .regularize import RegConfig, caf_loss
from .optim import TrainConfig
from .tasks import SyntheticSpec, gen_synthetic_sequence
from .continual import ModelConfig, run_sequence, grid_search
from .metrics import AccuracyMatrix, aac, bwt, fwt, diversity

__version__ = "0.1.0"
