"""Mutual-supervision multimodal VAE."""

from .estimator import MemeVAE
from .model import HeadConfig, MemeModel, ModalitySpec

__all__ = ["HeadConfig", "MemeModel", "MemeVAE", "ModalitySpec"]
__version__ = "0.1.0"
