"""Streaming detection of reasoning-failure fluctuations in neuron activations."""

from .spectral import (
    DEFAULT_PROBES,
    EPSILON,
    FEATURE_NAMES,
    FeatureVector,
    Level,
    ProbeSet,
    SpectralWindow,
    Spectrum,
    dft_spectrum,
    inst_features,
    inter_features,
    intra_features,
    spectral_entropy,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_PROBES",
    "EPSILON",
    "FEATURE_NAMES",
    "FeatureVector",
    "Level",
    "ProbeSet",
    "SpectralWindow",
    "Spectrum",
    "dft_spectrum",
    "inst_features",
    "inter_features",
    "intra_features",
    "spectral_entropy",
]
