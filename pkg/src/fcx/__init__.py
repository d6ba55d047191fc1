"""Desk-scale FourCastNeXt training lab: AFNO forecaster with deep-norm,
flow warping, LAMB, curriculum fine-tuning and networked data workers."""

__version__ = "0.1.0"
