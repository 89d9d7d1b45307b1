"""Synthetic truth catalog, scan law and along-scan observations."""

from ..scanlaw import ScanLaw, nominal_attitude, observer_state
from .catalog import (
    PerturbationScales,
    TruthCatalog,
    generate_catalog,
    perturb_attitude,
    perturb_catalog,
)
from .observations import NoiseModel, noise_draws, synthesize_observations, truth_attitude
from .transits import catalog_transits, generate_transits

__all__ = [
    "NoiseModel",
    "PerturbationScales",
    "ScanLaw",
    "TruthCatalog",
    "catalog_transits",
    "generate_catalog",
    "generate_transits",
    "noise_draws",
    "nominal_attitude",
    "observer_state",
    "perturb_attitude",
    "perturb_catalog",
    "synthesize_observations",
    "truth_attitude",
]
