"""Noise predictors: analytic Gaussian oracle, toy U-Net, control adapter, training and checkpoints."""

import numpy as np

from ..errors import MissingConditionError, ShapeError
from .analytic import AnalyticGaussianDenoiser
from .checkpoint import build_model, load_checkpoint, read_checkpoint, save_checkpoint
from .control import ControlAdapter
from .toynet import TorchDenoiser, ToyNetConfig, ToyUNet
from .training import TrainingCase, fit, make_optimizer, noise_loss, sample_patches, train_step


def predict_noise(d, x_t, t, cond):
    """Call any noise predictor and check the output contract."""
    out = np.asarray(d(x_t, t, cond))
    if out.shape != np.shape(x_t):
        raise ShapeError(f"denoiser returned shape {out.shape} for input {np.shape(x_t)}")
    return out


def control_forward(adapter, x_t, t, cond, layout):
    if cond.target is None:
        raise MissingConditionError("control adapter needs cond.target")
    return TorchDenoiser(adapter, layout)(x_t, t, cond)


__all__ = [
    "AnalyticGaussianDenoiser", "ControlAdapter", "TorchDenoiser", "ToyNetConfig", "ToyUNet",
    "TrainingCase", "build_model", "control_forward", "fit", "load_checkpoint", "make_optimizer",
    "noise_loss", "predict_noise", "read_checkpoint", "sample_patches", "save_checkpoint", "train_step",
]
