"""deepmf: deep two-branch matrix factorization for matrix completion.

Two fully connected branches embed raw row/column vectors into a shared
latent space joined by a cosine head; unseen rows and columns predict
through the same path without retraining. A jointly trained annealed
quantizer turns the model's output discrete for rating-valued data.
"""

from . import kernels
from .data import RatingMatrix, area_split, random_split, scale, unscale
from .evaluation import evaluate_areas, mae, rmse, rounded_baseline
from .model import BranchConfig, DmfModel, init, load, predict, save
from .ndcore import Tape, Tensor, backward
from .quantizer import AnnealSchedule, Quantizer, anneal
from .train import TrainConfig, TrainReport, predict_discrete

__version__ = "0.1.0"

# the training entry point lives at deepmf.train.train to keep the
# submodule importable under its natural name

__all__ = [
    "AnnealSchedule", "BranchConfig", "DmfModel", "Quantizer", "RatingMatrix",
    "Tape", "Tensor", "TrainConfig", "TrainReport", "anneal", "area_split",
    "backward", "evaluate_areas", "init", "kernels", "load", "mae", "predict",
    "predict_discrete", "random_split", "rmse", "rounded_baseline", "save",
    "scale", "unscale", "__version__",
]
