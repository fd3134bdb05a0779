"""Greedy hierarchical variational autoencoders for video prediction.

A desk-scale stack: tensors with reverse-mode autodiff, diagonal Gaussians,
the greedily trained hierarchical video model, a sprite-world simulator,
PSNR/SSIM evaluation, a random-shooting visual-foresight planner, and a
training-memory estimator, all behind one CLI.
"""

__version__ = "0.1.0"

from .distributions import DiagonalGaussian, gaussian_log_prob, kl_divergence, sample_reparam
from .model import (ElboTerms, GhvaeStack, LatentSpec, StackConfig, TrainPhaseConfig,
                    build_ladder, greedy_phase_elbo, rollout, uniform_prior_rollout)
from .sim import Dataset, Episode, GenConfig, WorldState, generate_dataset, load_episode, save_episode
from .tensor import Parameter, Tape, Tensor, adam_step, backward, no_grad
from .training import LossCurve, TrainingDiverged, train_phase

__all__ = [
    "__version__",
    "Tensor", "Tape", "Parameter", "backward", "adam_step", "no_grad",
    "DiagonalGaussian", "kl_divergence", "sample_reparam", "gaussian_log_prob",
    "LatentSpec", "StackConfig", "GhvaeStack", "ElboTerms", "TrainPhaseConfig",
    "build_ladder", "greedy_phase_elbo", "rollout", "uniform_prior_rollout",
    "train_phase", "LossCurve", "TrainingDiverged",
    "WorldState", "Episode", "GenConfig", "Dataset",
    "generate_dataset", "save_episode", "load_episode",
]
