"""Recurrent spatial-transformer attention for cluttered multi-digit MNIST, in numpy."""
from .models import FfnStnCnn, LstmStnCnn, ModelConfig, PlainCnn, build_model
from .tensor import make_rng

__all__ = ["FfnStnCnn", "LstmStnCnn", "ModelConfig", "PlainCnn", "build_model", "make_rng"]
__version__ = "0.1.0"
