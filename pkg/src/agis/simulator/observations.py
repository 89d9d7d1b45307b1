"""Noisy along-scan observations of a truth catalog."""

from dataclasses import dataclass

import numpy as np

from ..constants import MAS
from ..core import OBS_DTYPE, _require_finite, model_rows, observation_geometry
from ..params import AttitudeModel
from .transits import catalog_transits


@dataclass(frozen=True)
class NoiseModel:
    sigma_al: float = 0.0  # rad
    seed: int = 0
    # weight recorded when sigma_al is 0 (observations need sigma > 0)
    nominal_sigma: float = 1.0 * MAS

    def __post_init__(self):
        if not self.sigma_al >= 0:
            raise ValueError("sigma_al must be >= 0")

    @property
    def recorded_sigma(self):
        return self.sigma_al if self.sigma_al > 0 else self.nominal_sigma


def noise_draws(seed, source_id, n):
    """Standard normals for transits ``0..n-1`` of one source.

    Philox is counter-based: the stream is keyed by ``(seed, source_id)`` and
    the transit index is the position in the stream, so the draw for a given
    observation never depends on which other sources were simulated.
    """
    key = np.array([seed, source_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(n)


def truth_attitude(law, spacing=0.25):
    return AttitudeModel.covering(law.mission_start, law.mission_end, spacing)


def synthesize_observations(truth, law, cal_truth, glob_truth, noise, transits=None):
    """Observation records (``OBS_DTYPE``) sorted by source id, then time."""
    cat = truth.catalog if hasattr(truth, "catalog") else truth
    _require_finite("truth catalog", cat.fit_matrix())
    _require_finite("calibration", cal_truth.offsets)
    _require_finite("global", np.asarray(glob_truth.g))
    if transits is None:
        transits = catalog_transits(law, cat)
    obs = np.zeros(transits.size, dtype=OBS_DTYPE)
    for name in ("source_id", "t", "fov", "calib_unit", "transit"):
        obs[name] = transits[name]
    obs["sigma"] = noise.recorded_sigma
    if obs.size == 0:
        return obs
    rows = cat.index_of(obs["source_id"])
    geom = observation_geometry(law, obs["t"], obs["fov"])
    att = truth_attitude(law)
    eta = model_rows(cat.fit_matrix()[rows], cat.epoch[rows], geom, obs["calib_unit"],
                     att, cal_truth, glob_truth.g).eta
    if noise.sigma_al > 0:
        draws = np.empty(obs.size)
        ids = obs["source_id"]
        bounds = np.flatnonzero(np.diff(ids)) + 1
        for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, ids.size]):
            idx = obs["transit"][lo:hi]
            draws[lo:hi] = noise_draws(noise.seed, int(ids[lo]), int(idx.max()) + 1)[idx]
        eta = eta + noise.sigma_al * draws
    obs["abscissa"] = eta
    return obs
