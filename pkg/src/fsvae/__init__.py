"""Fully spiking variational autoencoder.

All inter-layer features are binary spike trains; latent variables follow
Bernoulli processes sampled by autoregressive spiking networks; training
minimizes reconstruction MSE plus a PSP-kernel MMD between the posterior and
prior spike distributions.
"""

from .bits import BitTensor
from .latent import LatentConfig, SamplerNet
from .model import Fsvae, ModelConfig
from .rng import RngStream
from .snn import LifConfig, NeuronState
from .train import TrainConfig, fit

__all__ = ["BitTensor", "Fsvae", "LatentConfig", "LifConfig", "ModelConfig",
           "NeuronState", "RngStream", "SamplerNet", "TrainConfig", "fit"]
