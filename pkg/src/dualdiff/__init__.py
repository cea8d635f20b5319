"""Two-stage diffusion for momentary trajectory prediction.

A history branch reconstructs the unobserved past from two observed frames and
estimates its per-coordinate variance; a future branch samples futures under a
noise schedule driven by that variance.
"""

from .data import (EvalReport, TrajectoryWindow, ade_fde, denormalize, generate_synthetic,
                   load_tsv, normalize, save_tsv)
from .diffusion import UncertaintyEstimate
from .pipeline import (Diffusion2, TrainConfig, TrainState, evaluate, load_checkpoint, sample,
                       save_checkpoint, train, train_step)
from .schedule import GammaField, ScheduleParams, linear_schedule

__version__ = "0.1.0"
