"""Source block: per-source weighted least squares, vectorised over a batch."""

from dataclasses import dataclass

import numpy as np

from ..constants import N_SOURCE_PARAMS
from ..core import (
    OBS_DTYPE,
    Catalog,
    SourceParams,
    _require_finite,
    apply_source_step,
    model_rows,
    observation_geometry,
    observations_to_array,
)
from ..errors import NonFiniteInput, UnderdeterminedSource
from .normal import BlockPartials, accumulate_rows

MAX_LINEARIZATIONS = 3
MAX_CONDITION = 1e12
# steps below this (rad) end the Gauss-Newton loop early
_STEP_FLOOR = 1e-16

OK = 0
UNDERDETERMINED = 1


@dataclass
class ObservationBatch:
    """Observations of consecutive sources with their cached geometry.

    Records are sorted by source id and time. ``ids`` lists the sources of
    the batch (including ones without observations) and ``seg`` maps each
    observation to its position in ``ids``.
    """

    obs: np.ndarray
    geom: object
    ids: np.ndarray
    seg: np.ndarray

    @classmethod
    def build(cls, obs, law, ids=None):
        obs = np.asarray(obs, dtype=OBS_DTYPE)
        check_observations(obs)
        if ids is None:
            ids = np.unique(obs["source_id"])
        ids = np.asarray(ids, dtype=np.int64)
        seg = np.searchsorted(ids, obs["source_id"])
        if obs.size and (np.any(seg >= ids.size) or np.any(ids[np.minimum(seg, ids.size - 1)] != obs["source_id"])):
            raise ValueError("observation of a source outside the batch")
        geom = observation_geometry(law, obs["t"], obs["fov"])
        return cls(obs, geom, ids, seg)

    def __len__(self):
        return self.obs.size

    @property
    def weight(self):
        return 1.0 / self.obs["sigma"] ** 2

    def counts(self):
        return np.bincount(self.seg, minlength=self.ids.size)


def check_observations(obs):
    """Fail fast on the first non-finite or invalid observation."""
    for name in ("t", "abscissa", "sigma"):
        bad = np.flatnonzero(~np.isfinite(obs[name]))
        if bad.size:
            o = obs[bad[0]]
            raise NonFiniteInput(
                f"non-finite {name} in observation (source {int(o['source_id'])}, "
                f"transit {int(o['transit'])})",
                where={"source_id": int(o["source_id"]), "transit": int(o["transit"]),
                       "field": name},
            )
    bad = np.flatnonzero(obs["sigma"] <= 0)
    if bad.size:
        raise ValueError(f"non-positive sigma in observation {int(bad[0])}")


@dataclass
class SourceSolution:
    """Result of the source block for one batch (rows follow ``ids``)."""

    ids: np.ndarray
    x: np.ndarray  # (n, 5) fitted parameters, rad units
    cov: np.ndarray  # (n, 5, 5)
    status: np.ndarray  # OK / UNDERDETERMINED
    n_obs: np.ndarray
    chi2_before: np.ndarray
    chi2_after: np.ndarray
    step: np.ndarray  # (n, 5) total applied update (alpha*, delta, ...)


def _normal_blocks(batch, d, r, w):
    n = batch.ids.size
    wd = w[:, None] * d
    mat = np.zeros((n, N_SOURCE_PARAMS, N_SOURCE_PARAMS))
    np.add.at(mat, batch.seg, wd[:, :, None] * d[:, None, :])
    rhs = np.zeros((n, N_SOURCE_PARAMS))
    np.add.at(rhs, batch.seg, wd * r[:, None])
    return mat, rhs


def _chi2(batch, r, w):
    out = np.zeros(batch.ids.size)
    np.add.at(out, batch.seg, w * r * r)
    return out


def _solvable(batch, mat):
    """Mask of sources with a usable normal matrix."""
    counts = batch.counts()
    ok = counts >= N_SOURCE_PARAMS
    # at least two distinct epochs
    t = batch.obs["t"]
    tmin = np.full(batch.ids.size, np.inf)
    tmax = np.full(batch.ids.size, -np.inf)
    np.minimum.at(tmin, batch.seg, t)
    np.maximum.at(tmax, batch.seg, t)
    ok &= tmax > tmin
    if np.any(ok):
        ev = np.linalg.eigvalsh(mat[ok])
        good = (ev[:, 0] > 0) & (ev[:, -1] <= MAX_CONDITION * ev[:, 0])
        ok[np.flatnonzero(ok)[~good]] = False
    return ok


def solve_sources(batch, x0, epoch, nuisance, keep_rows=False):
    """Gauss-Newton fit of every source in ``batch`` with fixed nuisance blocks.

    ``x0`` and ``epoch`` are indexed like ``batch.ids``. A source whose
    linearized steps would raise its chi-square keeps its starting values.
    Returns the solution and the model rows evaluated at the final
    parameters (reused for the block accumulation).
    """
    att, cal, g = nuisance.attitude, nuisance.calibration, nuisance.glob.g
    _require_finite("source parameters", x0)
    obs = batch.obs
    w = batch.weight
    seg = batch.seg
    n = batch.ids.size

    rows0 = model_rows(x0[seg], epoch[seg], batch.geom, obs["calib_unit"], att, cal, g, True)
    r0 = obs["abscissa"] - rows0.eta
    chi2_before = _chi2(batch, r0, w)
    mat, rhs = _normal_blocks(batch, rows0.d_source, r0, w)
    solvable = _solvable(batch, mat)

    x = x0.copy()
    step_total = np.zeros((n, N_SOURCE_PARAMS))
    rows = rows0
    r = r0
    for it in range(MAX_LINEARIZATIONS):
        step = np.zeros((n, N_SOURCE_PARAMS))
        if np.any(solvable):
            step[solvable] = np.linalg.solve(mat[solvable], rhs[solvable][..., None])[..., 0]
        x = apply_source_step(x, step)
        step_total += step
        rows = model_rows(x[seg], epoch[seg], batch.geom, obs["calib_unit"], att, cal, g, True)
        r = obs["abscissa"] - rows.eta
        if it + 1 == MAX_LINEARIZATIONS or np.max(np.abs(step), initial=0.0) < _STEP_FLOOR:
            break
        mat, rhs = _normal_blocks(batch, rows.d_source, r, w)

    chi2_after = _chi2(batch, r, w)
    worse = chi2_after > chi2_before
    if np.any(worse):
        x[worse] = x0[worse]
        step_total[worse] = 0.0
        chi2_after[worse] = chi2_before[worse]
        back = worse[seg]
        rows = rows._replace(
            eta=np.where(back, rows0.eta, rows.eta),
            d_source=np.where(back[:, None], rows0.d_source, rows.d_source),
            d_global=np.where(back, rows0.d_global, rows.d_global),
        )
        r = np.where(back, r0, r)

    mat, _ = _normal_blocks(batch, rows.d_source, r, w)
    cov = np.full((n, N_SOURCE_PARAMS, N_SOURCE_PARAMS), np.nan)
    if np.any(solvable):
        cov[solvable] = np.linalg.inv(mat[solvable])
    status = np.where(solvable, OK, UNDERDETERMINED).astype(np.int8)
    sol = SourceSolution(batch.ids.copy(), x, cov, status, batch.counts(), chi2_before,
                         chi2_after, step_total)
    return sol, rows, r


def accumulate_solution(batch, sol, rows, r, n_knots, n_units, acc=None):
    """Block partials of the batch evaluated at the solved sources.

    Observations of underdetermined sources are left out.
    """
    acc = BlockPartials.zeros(n_knots, n_units) if acc is None else acc
    use = sol.status[batch.seg] == OK
    if not np.all(use):
        sel = np.flatnonzero(use)
        rows = rows._replace(eta=rows.eta[sel], d_source=rows.d_source[sel],
                             att_index=rows.att_index[sel], att_weight=rows.att_weight[sel],
                             d_global=rows.d_global[sel])
        r = r[sel]
        w = batch.weight[sel]
        units = batch.obs["calib_unit"][sel]
    else:
        w = batch.weight
        units = batch.obs["calib_unit"]
    return accumulate_rows(acc, rows, r, w, units)


def accumulate_block_partials(batch, x, epoch, nuisance, n_units=None, acc=None):
    """Residuals and partials of ``batch`` at source parameters ``x`` (per id)."""
    att, cal = nuisance.attitude, nuisance.calibration
    n_units = cal.n_units if n_units is None else n_units
    _require_finite("source parameters", x)
    rows = model_rows(x[batch.seg], epoch[batch.seg], batch.geom, batch.obs["calib_unit"],
                      att, cal, nuisance.glob.g, True)
    r = batch.obs["abscissa"] - rows.eta
    _require_finite("residuals", r)
    acc = BlockPartials.zeros(att.n_knots, n_units) if acc is None else acc
    return accumulate_rows(acc, rows, r, batch.weight, batch.obs["calib_unit"])


def source_update(observations, att, cal, glob, s0: SourceParams, law):
    """Fit one source; returns ``(SourceParams, 5x5 covariance)``.

    Raises UnderdeterminedSource when the observations cannot constrain the
    five parameters.
    """
    from ..params import NuisanceState

    obs = observations
    if not isinstance(obs, np.ndarray):
        obs = observations_to_array(list(obs))
    sid = int(obs["source_id"][0]) if obs.size else -1
    if obs.size < N_SOURCE_PARAMS:
        raise UnderdeterminedSource(sid, f"{obs.size} observations < {N_SOURCE_PARAMS}")
    obs = np.sort(obs, order=["source_id", "t"])
    batch = ObservationBatch.build(obs, law, ids=np.array([sid]))
    sol, _, _ = solve_sources(batch, s0.fit_vector()[None, :], np.array([s0.epoch]),
                              NuisanceState(att, cal, glob))
    if sol.status[0] != OK:
        raise UnderdeterminedSource(sid, "singular or ill-conditioned normal matrix")
    cat = Catalog.from_sources([s0]).with_fit_matrix(sol.x)
    return cat.source(0), sol.cov[0]
