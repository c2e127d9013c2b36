"""Versatile inverse reinforcement learning with cumulative density-ratio rewards."""

__version__ = "0.1.0"

from .prob import Gaussian, Kde, Mixture, RngStream, kde_fit, logsumexp  # noqa: E402
from .tasks import ExpertSet, GridWalkerTask, RandomGaussiansTask, make_expert_set  # noqa: E402
from .discriminator import Discriminator, MlpConfig, fit  # noqa: E402
from .policy import GmmPolicy, TrustRegionConfig, policy_update_step  # noqa: E402
from .reward import CumulativeReward, TrainConfig, eim_run, geim_run, virl_run  # noqa: E402

__all__ = [
    "__version__", "Gaussian", "Kde", "Mixture", "RngStream", "kde_fit", "logsumexp",
    "ExpertSet", "GridWalkerTask", "RandomGaussiansTask", "make_expert_set",
    "Discriminator", "MlpConfig", "fit", "GmmPolicy", "TrustRegionConfig", "policy_update_step",
    "CumulativeReward", "TrainConfig", "eim_run", "geim_run", "virl_run",
]
