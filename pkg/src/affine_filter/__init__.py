"""Affine functional filtering for CIR and Wishart signals observed in Gaussian noise."""

__version__ = "0.1.0"

from .aff import (PosteriorSummary, PriorMixture, aff_cf, aff_filter_sequence, aff_mean_wishart,
                  aff_moments_cir, fourier_invert, solve_filter_riccati)
from .core import AffineModel, DiffusionParams, Inadmissible, solve_homogeneous_riccati, validate_params
from .models import CirModel, WishartModel, derive_rng
from .observation import ObservationModel, ObservationRecord, build_path, generate_observations, make_schedule
from .ode import BlowUp, integrate

__all__ = [
    "AffineModel", "BlowUp", "CirModel", "DiffusionParams", "Inadmissible", "ObservationModel",
    "ObservationRecord", "PosteriorSummary", "PriorMixture", "WishartModel", "aff_cf", "aff_filter_sequence",
    "aff_mean_wishart", "aff_moments_cir", "build_path", "derive_rng", "fourier_invert", "generate_observations",
    "integrate", "make_schedule", "solve_filter_riccati", "solve_homogeneous_riccati", "validate_params",
]
