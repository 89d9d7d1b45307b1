"""Block-iterative solution: outer iterations over S, then A, C and G."""

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..constants import C_KMS, DAYS_PER_YEAR
from ..core import Catalog, model_rows
from ..errors import ConfigError, FiniteCheckFailed, NonFiniteInput, NotConverged
from ..params import AttitudeModel, CalibrationTable, GlobalParams, NuisanceState
from .blocks import DAMPING_REL, attitude_update, calibration_update, global_update
from .frame import frame_align
from .normal import BlockPartials, sum_partials
from .sources import OK, UNDERDETERMINED, ObservationBatch, accumulate_solution, solve_sources

# scales the global step to its largest along-scan effect (|v|/c of a 1 AU orbit)
_GLOBAL_EFFECT = 30.0 / C_KMS


@dataclass
class SolverConfig:
    max_outer: int = 100
    tol_update: float = 1e-11  # rad
    tol_chi2_rel: float = 1e-10
    attitude_knot_spacing: float = 0.25  # days
    primary_fraction: float = 1.0
    batch_size: int = 3000
    damping: float = DAMPING_REL
    allow_empty_units: bool = True
    # re-align to the anchors after every outer iteration, not only at the end
    align_each_iteration: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if int(self.max_outer) != self.max_outer or self.max_outer < 1:
            raise ConfigError("max_outer must be an integer >= 1")
        if not (self.tol_update > 0 and self.tol_chi2_rel > 0):
            raise ConfigError("tolerances must be > 0")
        if not 0.0 < self.primary_fraction <= 1.0:
            raise ConfigError("primary_fraction must lie in (0, 1]")
        if not self.attitude_knot_spacing > 0:
            raise ConfigError("attitude_knot_spacing must be > 0")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError("batch_size must be an integer >= 1")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class AgisData:
    """Everything the solver reads: observations, scan law and references.

    ``observations`` are OBS_DTYPE records sorted by source id then time;
    ``anchors`` holds reference values for the frame-defining sources.
    """

    law: object
    observations: np.ndarray
    source_ids: np.ndarray
    anchors: Catalog | None = None

    def primary_ids(self, fraction):
        n = len(self.source_ids)
        return self.source_ids[: max(1, int(math.ceil(fraction * n - 1e-9)))]

    def secondary_ids(self, fraction):
        return self.source_ids[len(self.primary_ids(fraction)):]

    def slice_range(self, lo, hi):
        ids = self.observations["source_id"]
        a, b = np.searchsorted(ids, [lo, hi])
        return self.observations[a:b]


@dataclass
class SolverState:
    catalog: Catalog
    nuisance: NuisanceState
    cov: np.ndarray | None = None
    status: np.ndarray | None = None
    iteration: int = 0

    def __post_init__(self):
        n = len(self.catalog)
        if self.cov is None:
            self.cov = np.full((n, 5, 5), np.nan)
        if self.status is None:
            self.status = np.full(n, -1, dtype=np.int8)

    def copy(self):
        return SolverState(self.catalog.copy(), self.nuisance.copy(), self.cov.copy(),
                           self.status.copy(), self.iteration)

    def check_finite(self):
        for label, arr in (("catalog", self.catalog.fit_matrix()),
                           ("attitude", self.nuisance.attitude.coeffs),
                           ("calibration", self.nuisance.calibration.offsets),
                           ("global", np.array([self.nuisance.glob.g]))):
            bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
            if bad.size:
                raise NonFiniteInput(f"non-finite {label} entry {int(bad[0])}", where=label)


def initial_state(catalog, law, config, n_units=None):
    att = AttitudeModel.covering(law.mission_start, law.mission_end, config.attitude_knot_spacing)
    n_units = law.n_calib_units if n_units is None else n_units
    return SolverState(catalog.copy(), NuisanceState(att, CalibrationTable.zeros(n_units),
                                                     GlobalParams(0.0)))


@dataclass
class IterationRecord:
    iteration: int
    rms_residual: float
    chi2: float
    chi2_before_sources: float
    chi2_after_sources: float
    max_source_update: float
    max_attitude_update: float
    max_calibration_update: float
    global_update: float
    wall_time: float
    n_obs: int
    n_underdetermined: int = 0
    unconstrained_knots: int = 0
    empty_calib_units: int = 0
    attitude_damping: float = 0.0
    attitude_chi2_decrease: float = 0.0
    global_chi2_decrease: float = 0.0
    workers: int = 1
    processing_time: float = 0.0

    @property
    def max_update(self):
        return max(self.max_source_update, self.max_attitude_update,
                   self.max_calibration_update, abs(self.global_update) * _GLOBAL_EFFECT)

    def throughput(self):
        """Normalised throughput: observations / workers / hours."""
        hours = self.processing_time / 3600.0
        return self.n_obs / self.workers / hours if hours > 0 else float("nan")


@dataclass
class ConvergenceReport:
    records: list = field(default_factory=list)
    reason: str = ""
    converged: bool = False
    final_rms: float = float("nan")
    frame: dict = field(default_factory=dict)

    def to_rows(self):
        rows = []
        for r in self.records:
            d = asdict(r)
            d["throughput"] = r.throughput()
            rows.append(d)
        return rows


# -- batches ---------------------------------------------------------------


@dataclass
class Job:
    job_id: str
    lo: int  # first source id
    hi: int  # one past the last source id


def partition(ids, batch_size, iteration, kind="S"):
    """Contiguous batches of ``batch_size`` source ids with canonical ids."""
    ids = np.asarray(ids, dtype=np.int64)
    jobs = []
    for k, start in enumerate(range(0, ids.size, batch_size)):
        chunk = ids[start:start + batch_size]
        if chunk[-1] - chunk[0] + 1 != chunk.size:
            raise ValueError("job batches need contiguous source ids")
        jobs.append(Job(f"{kind}{iteration:05d}-{k:06d}", int(chunk[0]), int(chunk[-1]) + 1))
    return jobs


@dataclass
class BatchResult:
    """Source results and block partials of one job (rows follow ``ids``)."""

    job_id: str
    ids: np.ndarray
    x: np.ndarray
    cov: np.ndarray
    status: np.ndarray
    n_obs_source: np.ndarray
    chi2_before_source: np.ndarray
    chi2_after_source: np.ndarray
    r2_source: np.ndarray  # sum of squared residuals of each source
    partials: BlockPartials
    elapsed: float = 0.0

    @property
    def used(self):
        return self.status == OK

    @property
    def n_obs(self):
        return int(np.sum(self.n_obs_source[self.used]))

    @property
    def chi2_before(self):
        return _seq_sum(self.chi2_before_source)

    @property
    def chi2_after(self):
        return _seq_sum(self.chi2_after_source)

    @property
    def sum_r2(self):
        return _seq_sum(self.r2_source[self.used])

    def arrays(self):
        return (("x", self.x), ("cov", self.cov), ("chi2_before", self.chi2_before_source),
                ("chi2_after", self.chi2_after_source), ("r2", self.r2_source))

    def check_finite(self):
        self.partials.check_finite(self.job_id)
        for label, arr in self.arrays():
            if label == "cov":
                arr = arr[self.used]
            bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
            if bad.size:
                raise FiniteCheckFailed(f"non-finite {label} entry {int(bad[0])} in job {self.job_id}",
                                        block=label, index=int(bad[0]), job_id=self.job_id)

    def identical(self, other):
        return (self.job_id == other.job_id and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.status, other.status)
                and np.array_equal(self.n_obs_source, other.n_obs_source)
                and all(np.array_equal(a, b, equal_nan=True)
                        for (_, a), (_, b) in zip(self.arrays(), other.arrays()))
                and self.partials.identical(other.partials))


def _seq_sum(a):
    total = 0.0
    for v in np.asarray(a, dtype=float).tolist():
        total += v
    return total


def process_sources(job, batches, catalog, nuisance, n_units, accumulate=True):
    """Source update plus block accumulation for one job.

    ``batches`` is a single ObservationBatch or a sequence of consecutive
    sub-batches covering the job; accumulation runs through them in order,
    so splitting a job never changes its result.
    """
    t0 = time.perf_counter()
    if isinstance(batches, ObservationBatch):
        batches = [batches]
    n_knots = nuisance.attitude.n_knots
    acc = BlockPartials.zeros(n_knots, n_units)
    parts = []
    fit = catalog.fit_matrix()
    for batch in batches:
        rows_idx = catalog.index_of(batch.ids)
        sol, rows, r = solve_sources(batch, fit[rows_idx], catalog.epoch[rows_idx], nuisance)
        if accumulate:
            acc = accumulate_solution(batch, sol, rows, r, n_knots, n_units, acc)
        r2 = np.zeros(batch.ids.size)
        np.add.at(r2, batch.seg, r * r)
        parts.append((sol, r2))
    if not parts:
        empty = np.zeros(0)
        return BatchResult(job.job_id, np.zeros(0, np.int64), np.zeros((0, 5)),
                           np.zeros((0, 5, 5)), np.zeros(0, np.int8), np.zeros(0, np.int64),
                           empty, empty, empty, acc, time.perf_counter() - t0)

    def joined(name):
        return np.concatenate([getattr(sol, name) for sol, _ in parts])

    return BatchResult(
        job_id=job.job_id, ids=joined("ids"), x=joined("x"), cov=joined("cov"),
        status=joined("status"), n_obs_source=joined("n_obs"),
        chi2_before_source=joined("chi2_before"), chi2_after_source=joined("chi2_after"),
        r2_source=np.concatenate([r2 for _, r2 in parts]),
        partials=acc, elapsed=time.perf_counter() - t0,
    )


class LocalExecutor:
    """Runs the jobs of an iteration serially in this process."""

    workers = 1

    def __init__(self, data):
        self.data = data
        self._cache = {}

    def batch(self, lo, hi):
        key = (lo, hi)
        if key not in self._cache:
            obs = self.data.slice_range(lo, hi)
            self._cache[key] = ObservationBatch.build(obs, self.data.law, ids=np.arange(lo, hi))
        return self._cache[key]

    def __call__(self, iteration, jobs, state, accumulate=True):
        n_units = state.nuisance.calibration.n_units
        return [process_sources(job, self.batch(job.lo, job.hi), state.catalog, state.nuisance,
                                n_units, accumulate) for job in jobs]


# -- iteration -------------------------------------------------------------


def _max_source_update(old, new):
    d = np.abs(new - old)
    d[:, 0] = np.abs((new[:, 0] - old[:, 0] + np.pi) % (2 * np.pi) - np.pi) * np.cos(old[:, 1])
    return float(np.max(d, initial=0.0))


def apply_source_results(state, results):
    """Write solved source rows into a copy of the state's catalog."""
    cat = state.catalog
    x = cat.fit_matrix()
    old = x.copy()
    cov = state.cov.copy()
    status = state.status.copy()
    for res in results:
        rows = cat.index_of(res.ids)
        ok = res.status == OK
        x[rows[ok]] = res.x[ok]
        cov[rows] = res.cov
        status[rows] = res.status
    return cat.with_fit_matrix(x), cov, status, _max_source_update(old, x)


def outer_iteration(state, data, config, executor=None):
    """One pass S -> (A, C, G); returns ``(state', IterationRecord)``."""
    t0 = time.perf_counter()
    executor = LocalExecutor(data) if executor is None else executor
    state.check_finite()
    iteration = state.iteration
    jobs = partition(data.primary_ids(config.primary_fraction), config.batch_size, iteration)
    results = executor(iteration, jobs, state)
    if [r.job_id for r in results] != [j.job_id for j in jobs]:
        raise RuntimeError("executor returned results out of canonical job order")
    for res in results:
        res.check_finite()
    nuis = state.nuisance
    merged = sum_partials([r.partials for r in results], nuis.attitude.n_knots,
                          nuis.calibration.n_units)
    merged.check_finite()

    catalog, cov, status, max_src = apply_source_results(state, results)

    # sequential A -> C -> G: each later block sees the earlier steps through
    # the cross couplings (exact, the model is linear in A and C)
    a_step = attitude_update(merged.attitude, config.damping)
    cross = merged.cross
    p_cal = replace(merged.calibration, rhs=merged.calibration.rhs - a_step.delta @ cross.att_cal)
    c_step = calibration_update(p_cal, config.allow_empty_units)
    p_glob = replace(merged.glob, rhs=merged.glob.rhs - (a_step.delta @ cross.att_glob
                                                         + c_step.delta @ cross.cal_glob))
    dg = global_update(p_glob) if merged.glob.n_obs else 0.0

    att = nuis.attitude.copy()
    att.coeffs = att.coeffs + a_step.delta
    cal = CalibrationTable(nuis.calibration.offsets + c_step.delta)
    glob = GlobalParams(nuis.glob.g + dg)
    new = SolverState(catalog, NuisanceState(att, cal, glob), cov, status, iteration + 1)
    new.check_finite()

    a_mat = merged.attitude
    dec_a = 2.0 * a_step.delta @ a_mat.rhs - a_step.delta @ (a_mat.dense() @ a_step.delta) \
        if a_mat.n <= 64 else _band_decrease(a_mat, a_step.delta)
    n_obs = sum(r.n_obs for r in results)
    chi2_after = _seq_sum([r.chi2_after for r in results])
    record = IterationRecord(
        iteration=iteration,
        rms_residual=math.sqrt(_seq_sum([r.sum_r2 for r in results]) / n_obs) if n_obs else 0.0,
        chi2=chi2_after,
        chi2_before_sources=_seq_sum([r.chi2_before for r in results]),
        chi2_after_sources=chi2_after,
        max_source_update=max_src,
        max_attitude_update=float(np.max(np.abs(a_step.delta), initial=0.0)),
        max_calibration_update=float(np.max(np.abs(c_step.delta), initial=0.0)),
        global_update=dg,
        wall_time=time.perf_counter() - t0,
        n_obs=n_obs,
        n_underdetermined=int(sum(np.count_nonzero(r.status == UNDERDETERMINED) for r in results)),
        unconstrained_knots=int(a_step.unconstrained.size),
        empty_calib_units=int(c_step.empty_units.size),
        attitude_damping=a_step.damping,
        attitude_chi2_decrease=float(dec_a),
        global_chi2_decrease=float(2 * dg * p_glob.rhs[0] - dg * dg * p_glob.matrix[0, 0]),
        workers=getattr(executor, "workers", 1),
        processing_time=getattr(executor, "last_elapsed", None) or sum(r.elapsed for r in results),
    )
    return new, record


def _band_decrease(p, d):
    nd = p.matrix[1] * d
    nd[:-1] += p.matrix[0, 1:] * d[1:]
    nd[1:] += p.matrix[0, 1:] * d[:-1]
    return 2.0 * d @ p.rhs - d @ nd


def _terminated(config, records):
    last = records[-1]
    if last.max_update < config.tol_update:
        return "update below tolerance"
    if len(records) > 1:
        prev = records[-2].chi2
        if prev > 0 and abs(last.chi2 - prev) / prev < config.tol_chi2_rel:
            return "chi2 change below tolerance"
    return None


def _has_anchors(data):
    return data.anchors is not None and len(data.anchors) > 0


def _aligned(state, data):
    cat, att, rot = frame_align(state.catalog, state.nuisance.attitude, data.anchors, data.law)
    nuis = NuisanceState(att, state.nuisance.calibration, state.nuisance.glob)
    return SolverState(cat, nuis, state.cov, state.status, state.iteration), rot


def run_agis(config, data, state, executor=None, align=True, callback=None, strict=False,
             report=None, stop_after=None):
    """Outer iterations until convergence, then frame alignment.

    Returns ``(state, ConvergenceReport)``. When ``max_outer`` is exhausted the
    report says so; ``strict=True`` raises NotConverged instead. A run can be
    resumed by passing the ``report`` of the iterations already done together
    with the state they produced; ``stop_after`` limits the iterations of this
    call and returns before the final alignment (reason "interrupted").
    """
    config.validate()
    executor = LocalExecutor(data) if executor is None else executor
    report = ConvergenceReport() if report is None else report
    reason = _terminated(config, report.records) if report.records else None
    done_here = 0
    while reason is None and len(report.records) < config.max_outer:
        if stop_after is not None and done_here >= stop_after:
            report.reason = "interrupted"
            return state, report
        state, rec = outer_iteration(state, data, config, executor)
        if config.align_each_iteration and align and _has_anchors(data):
            state, _ = _aligned(state, data)
        report.records.append(rec)
        done_here += 1
        if callback is not None:
            callback(state, rec)
        reason = _terminated(config, report.records)
    report.converged = reason is not None
    report.reason = reason or "max_outer reached"
    if align and _has_anchors(data):
        state, rot = _aligned(state, data)
        report.frame = {"orientation": rot.orientation.tolist(), "spin": rot.spin.tolist()}
    report.final_rms = residual_rms(state, data, data.primary_ids(config.primary_fraction),
                                    executor if isinstance(executor, LocalExecutor) else None)
    if strict and not report.converged:
        raise NotConverged(report.reason, state, report)
    return state, report


def residual_rms(state, data, ids, executor=None):
    """Unweighted RMS residual of ``ids`` under the state (no refitting)."""
    executor = LocalExecutor(data) if executor is None else executor
    if len(ids) == 0:
        return 0.0
    batch = executor.batch(int(ids[0]), int(ids[-1]) + 1)
    rows = state.catalog.index_of(batch.ids)
    ok = np.isin(state.status[rows], [OK, -1])
    x = state.catalog.fit_matrix()[rows]
    nu = state.nuisance
    eta = model_rows(x[batch.seg], state.catalog.epoch[rows][batch.seg], batch.geom,
                     batch.obs["calib_unit"], nu.attitude, nu.calibration, nu.glob.g).eta
    r = (batch.obs["abscissa"] - eta)[ok[batch.seg]]
    return float(np.sqrt(np.mean(r * r))) if r.size else 0.0


@dataclass
class SecondaryResult:
    catalog: Catalog
    cov: np.ndarray
    status: np.ndarray
    failures: list


def secondary_solve(ids, state, data, batch_size=3000, executor=None):
    """Source update of ``ids`` against the frozen attitude/calibration/global.

    Underdetermined sources are collected in ``failures`` and keep their
    starting values.
    """
    executor = LocalExecutor(data) if executor is None else executor
    ids = np.asarray(ids, dtype=np.int64)
    jobs = partition(ids, batch_size, state.iteration, kind="X") if ids.size else []
    results = executor(state.iteration, jobs, state, accumulate=False)
    for res in results:
        res.check_finite()
    catalog, cov, status, _ = apply_source_results(state, results)
    failures = [int(i) for res in results for i in res.ids[res.status != OK]]
    return SecondaryResult(catalog, cov, status, failures)


def formal_errors(cov):
    """Square roots of the covariance diagonals (rad, rad/yr)."""
    return np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))


def years(days):
    return days / DAYS_PER_YEAR
