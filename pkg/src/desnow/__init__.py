"""Lightweight single-image snow removal guided by a learned Laplace-domain coarse mask."""
from .errors import ConfigurationError, InvalidInputError, TrainingDivergedError
from .laplace_vqvae import LaplaceVQVAE, VQVAEConfig
from .mqformer import MQFormer, MQFormerConfig
from .pipeline import SnowRemovalModel

__version__ = "0.1.0"
