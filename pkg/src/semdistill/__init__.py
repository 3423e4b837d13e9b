"""Semantic self-distillation.

A small mixture-density student learns p(answer embedding | prompt
representation) from sampled teacher answers. From one forward pass it gives
an analytic Renyi-2 dispersion score, the log-likelihood of any candidate
answer, and the mixture mean as a consensus estimate.
"""

from .errors import DimensionError, FormatError, LinkageError, TrainingError, UndefinedMetricError
from .gmm import (
    GaussianMixture,
    collision_matrix,
    log_density,
    mixture_mean,
    renyi2_entropy,
    sample,
)
from .mdn import MdnConfig, MdnModel, TrainConfig, forward, load_model, save_model, train
from .pca import PcaTransform

__version__ = "0.1.0"
