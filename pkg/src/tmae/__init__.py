"""Temporally-aware masked-autoencoder pretraining for short video clips,
with a downstream reduced-ejection-fraction classifier."""

__version__ = "0.1.0"
