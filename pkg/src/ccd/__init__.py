"""Deterministic pseudo-label pipeline over precomputed vision-language
embeddings: initial labels, bias calibration, activation-map-guided local
views, label fusion, consistency-regularized head training, and mAP
evaluation."""

__version__ = "0.1.0"
