"""Spectral simulation of the stochastic damped wave equation on (0, pi),
its averaged heat-equation limit and the stochastic slow manifold of the
associated homotopy system."""

from .dynamics import (EnsembleRun, Trajectory, WaveParams, WaveState, run_ensemble,
                       scale_transform, simulate_averaged, simulate_fast_frozen, simulate_wave)
from .noise import NoiseModel, derive_stream
from .spectral import Grid, Normalization, SineBasis, SpectralField

__version__ = "0.1.0"

__all__ = [
    "EnsembleRun", "Grid", "NoiseModel", "Normalization", "SineBasis", "SpectralField",
    "Trajectory", "WaveParams", "WaveState", "derive_stream", "run_ensemble",
    "scale_transform", "simulate_averaged", "simulate_fast_frozen", "simulate_wave",
]
