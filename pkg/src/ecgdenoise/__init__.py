"""Lightweight ECG denoising: data pipeline, numpy autodiff and a conv/Bi-LSTM autoencoder."""

from .errors import ValidationError

__version__ = "0.1.0"
__all__ = ["ValidationError", "__version__"]
