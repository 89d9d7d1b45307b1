"""Truth catalogs and perturbed starting catalogs."""

from dataclasses import astuple, dataclass

import numpy as np

from ..constants import MAS
from ..core import Catalog, apply_source_step


@dataclass
class TruthCatalog:
    catalog: Catalog
    rng_seed: int

    def __post_init__(self):
        ids = self.catalog.source_id
        if not np.array_equal(ids, np.arange(ids.size)):
            raise ValueError("truth source ids must be unique and dense from 0")

    def __len__(self):
        return len(self.catalog)


def generate_catalog(n_sources, seed, epoch, parallax_median=2.0, pm_sigma=5.0, rv_sigma=30.0):
    """Sources uniform on the sphere with log-normal parallaxes (mas)."""
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(0.0, 2.0 * np.pi, n_sources)
    delta = np.arcsin(rng.uniform(-1.0, 1.0, n_sources))
    parallax = np.minimum(parallax_median * np.exp(rng.normal(0.0, 0.8, n_sources)), 1000.0)
    pmra = rng.normal(0.0, pm_sigma, n_sources)
    pmdec = rng.normal(0.0, pm_sigma, n_sources)
    rv = rng.normal(0.0, rv_sigma, n_sources)
    cat = Catalog(np.arange(n_sources), alpha, delta, parallax, pmra, pmdec, rv,
                  np.full(n_sources, float(epoch)))
    return TruthCatalog(cat, int(seed))


@dataclass(frozen=True)
class PerturbationScales:
    """1-sigma perturbation per fitted parameter, in mas and mas/yr."""

    alpha_star: float = 100.0
    delta: float = 100.0
    parallax: float = 10.0
    pm_alpha_star: float = 10.0
    pm_delta: float = 10.0

    def __post_init__(self):
        vals = astuple(self)
        if not all(np.isfinite(vals)) or min(vals) < 0:
            raise ValueError("perturbation magnitudes must be finite and >= 0")

    def as_rad(self):
        return np.array(astuple(self)) * MAS


def perturb_catalog(truth, magnitudes, seed):
    """Gaussian perturbation of every fitted parameter; deterministic by seed."""
    cat = truth.catalog if isinstance(truth, TruthCatalog) else truth
    scales = magnitudes.as_rad()
    if not np.any(scales):
        return cat.copy()
    rng = np.random.default_rng(seed)
    step = rng.standard_normal((len(cat), 5)) * scales
    x = apply_source_step(cat.fit_matrix(), step)
    out = cat.copy()
    out.alpha, out.delta = x[:, 0], x[:, 1]
    # parallax and proper motions stay in mas so untouched columns round-trip exactly
    out.parallax = cat.parallax + step[:, 2] / MAS
    out.pmra = cat.pmra + step[:, 3] / MAS
    out.pmdec = cat.pmdec + step[:, 4] / MAS
    return out


def perturb_attitude(att, sigma, seed):
    """Independent Gaussian offsets (rad) on every attitude knot."""
    out = att.copy()
    if sigma > 0:
        out.coeffs = out.coeffs + np.random.default_rng(seed).normal(0.0, sigma, out.n_knots)
    return out
