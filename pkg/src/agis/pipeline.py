"""Run directories: simulate, solve through the whiteboard, report, status."""

import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .constants import MAS
from .core import Catalog
from .datatrain import WorkerConfig, run_datatrain
from .errors import AgisError, ConfigError, FiniteCheckFailed, MissingArtifacts
from .formats import (
    CATALOG_COLUMNS,
    OBS_VERSION,
    STATE_VERSION,
    ObservationStore,
    RunLayout,
    append_jsonl,
    read_catalog,
    read_json,
    read_jsonl,
    read_state,
    write_catalog,
    write_json,
    write_observation_store,
    write_state,
)
from .params import CalibrationTable, GlobalParams
from .scanlaw import ScanLaw
from .simulator import (
    NoiseModel,
    PerturbationScales,
    catalog_transits,
    generate_catalog,
    perturb_attitude,
    perturb_catalog,
    synthesize_observations,
)
from .solver.agis import (
    AgisData,
    ConvergenceReport,
    IterationRecord,
    SolverConfig,
    SolverState,
    initial_state,
    run_agis,
    secondary_solve,
)
from .solver.sources import OK
from .whiteboard import ENVELOPE_VERSION, JobKind, JobState, Whiteboard

FORMAT_VERSIONS = {"observations": OBS_VERSION, "envelope": ENVELOPE_VERSION,
                   "state": STATE_VERSION, "catalog_columns": list(CATALOG_COLUMNS)}


@dataclass
class WorkerSettings:
    lease: float = 60.0
    heartbeat: float = 10.0
    max_batch_memory: int = 256 * 2**20
    # how long spawned workers wait for the next iteration's jobs
    idle_timeout: float = 120.0


@dataclass
class RunConfig:
    n_sources: int = 1000
    seed: int = 1
    epoch: float | None = None  # reference epoch (days); default mid-mission
    sigma_al_mas: float = 0.0
    calibration_sigma_mas: float = 0.1
    global_truth: float = 0.0
    perturbation: PerturbationScales = field(default_factory=PerturbationScales)
    attitude_perturbation: float = 1e-5  # rad
    anchor_stride: int = 10  # every n-th primary source is a frame anchor
    scan_law: ScanLaw = field(default_factory=ScanLaw)
    solver: SolverConfig = field(default_factory=SolverConfig)
    workers: int = 0  # 0 runs the jobs inside the orchestrator process
    worker: WorkerSettings = field(default_factory=WorkerSettings)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if int(self.n_sources) != self.n_sources or self.n_sources < 1:
            raise ConfigError("n_sources must be an integer >= 1")
        if not self.sigma_al_mas >= 0 or not self.calibration_sigma_mas >= 0:
            raise ConfigError("noise scales must be >= 0")
        if int(self.workers) != self.workers or self.workers < 0:
            raise ConfigError("workers must be an integer >= 0")
        if self.anchor_stride < 1:
            raise ConfigError("anchor_stride must be >= 1")
        if not abs(self.global_truth) < 1:
            raise ConfigError("global_truth must satisfy |g| < 1")
        if not (self.worker.lease > self.worker.heartbeat > 0):
            raise ConfigError("worker lease must exceed heartbeat > 0")
        self.solver.validate()
        return self

    @property
    def reference_epoch(self):
        law = self.scan_law
        return 0.5 * (law.mission_start + law.mission_end) if self.epoch is None else self.epoch

    def seeds(self):
        s = int(self.seed)
        return {"catalog": s, "noise": s + 1, "perturbation": s + 2, "attitude": s + 3,
                "calibration": s + 4}

    def to_dict(self):
        d = asdict(self)
        d["scan_law"] = self.scan_law.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "perturbation" in d:
                d["perturbation"] = PerturbationScales(**d["perturbation"])
            if "scan_law" in d:
                d["scan_law"] = ScanLaw.from_dict(d["scan_law"])
            if "solver" in d:
                d["solver"] = SolverConfig(**d["solver"])
            if "worker" in d:
                d["worker"] = WorkerSettings(**d["worker"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


# -- simulate --------------------------------------------------------------


def simulate(cfg: RunConfig, run_dir):
    """Write truth, starting catalog and state, observations and the manifest."""
    cfg.validate()
    layout = RunLayout(run_dir)
    os.makedirs(os.path.join(layout.root, "state"), exist_ok=True)
    law = cfg.scan_law
    seeds = cfg.seeds()
    truth = generate_catalog(cfg.n_sources, seeds["catalog"], cfg.reference_epoch)
    cal = np.random.default_rng(seeds["calibration"]).normal(
        0.0, cfg.calibration_sigma_mas * MAS, law.n_calib_units)
    cal -= cal.mean()
    transits = catalog_transits(law, truth.catalog)
    noise = NoiseModel(cfg.sigma_al_mas * MAS, seeds["noise"])
    obs = synthesize_observations(truth, law, CalibrationTable(cal), GlobalParams(cfg.global_truth),
                                  noise, transits)
    start = perturb_catalog(truth, cfg.perturbation, seeds["perturbation"])
    state = initial_state(start, law, cfg.solver)
    state.nuisance.attitude = perturb_attitude(state.nuisance.attitude,
                                               cfg.attitude_perturbation, seeds["attitude"])

    write_catalog(layout.truth, truth.catalog)
    write_catalog(layout.start, start)
    write_observation_store(layout.observations, obs)
    write_state(layout.state(0), state.catalog, state.nuisance, 0)
    counts = np.bincount(obs["source_id"], minlength=cfg.n_sources)
    manifest = {
        "config": cfg.to_dict(),
        "scan_law": law.to_dict(),
        "seeds": seeds,
        "formats": FORMAT_VERSIONS,
        "n_obs": int(obs.size),
        "mean_obs_per_source": float(counts.mean()),
        "min_obs_per_source": int(counts.min()),
        "max_obs_per_source": int(counts.max()),
        "truth_calibration": cal.tolist(),
    }
    write_json(layout.manifest, manifest)
    return manifest


# -- solve -----------------------------------------------------------------


class WhiteboardExecutor:
    """Runs an iteration's jobs through the job store.

    With ``n_workers == 0`` the orchestrator drains the queue itself;
    otherwise worker subprocesses are spawned once and kept polling until
    :meth:`close`.
    """

    def __init__(self, layout, n_workers, settings: WorkerSettings, batch_size,
                 worker_args=None, poll=0.02):
        self.layout = layout
        self.n_workers = int(n_workers)
        self.settings = settings
        self.batch_size = batch_size
        self.worker_args = worker_args or {}
        self.poll = poll
        self.wb = Whiteboard(layout.store)
        self.procs = []
        self._spawned = 0
        self.last_elapsed = None

    @property
    def workers(self):
        return max(1, self.n_workers)

    def _spawn(self):
        wid = f"w{self._spawned:02d}"
        extra = self.worker_args.get(self._spawned, [])
        self._spawned += 1
        s = self.settings
        cmd = [sys.executable, "-m", "agis.cli", "worker", "--run-dir", self.layout.root,
               "--worker-id", wid, "--lease", str(s.lease), "--heartbeat", str(s.heartbeat),
               "--idle-timeout", str(s.idle_timeout), "--max-batch-memory",
               str(s.max_batch_memory), *extra]
        self.procs.append(subprocess.Popen(cmd, stdout=subprocess.DEVNULL))

    def _ensure_workers(self):
        alive = [p for p in self.procs if p.poll() is None]
        self.procs = alive
        while len(self.procs) < self.n_workers:
            self._spawn()

    def __call__(self, iteration, jobs, state, accumulate=True):
        kind = JobKind.SOURCE_UPDATE if accumulate else JobKind.SECONDARY_UPDATE
        path = self.layout.state(iteration) if accumulate else self.layout.secondary_state(iteration)
        write_state(path, state.catalog, state.nuisance, iteration)
        ids = np.concatenate([np.arange(j.lo, j.hi) for j in jobs]) if jobs else np.zeros(0, int)
        t0 = time.perf_counter()
        posted = self.wb.post_jobs(iteration, ids, self.batch_size, kind)
        expected = [j.job_id for j in jobs]
        if posted != expected:
            raise AgisError(f"posted jobs {posted} differ from the planned {expected}")
        self._drain(iteration, kind)
        self.last_elapsed = time.perf_counter() - t0
        return [env.result for env in self.wb.envelopes(iteration, kind)]

    def _drain(self, iteration, kind):
        while True:
            jobs = self.wb.jobs(iteration, kind)
            failed = [j for j in jobs if j.state == JobState.FAILED]
            if failed:
                raise _job_failure(failed[0])
            if all(j.state == JobState.DONE for j in jobs):
                return
            if self.n_workers == 0:
                run_datatrain(WorkerConfig("local", self.layout.root, self.settings.lease,
                                           self.settings.heartbeat, self.settings.max_batch_memory),
                              emit=False)
                self.wb.expire_leases()
                continue
            self._ensure_workers()
            self.wb.expire_leases()
            time.sleep(self.poll)

    def close(self):
        if not self.procs:
            return
        with open(self.layout.stop_file, "w"):
            pass
        for p in self.procs:
            try:
                p.wait(timeout=30)
            except subprocess.TimeoutExpired:
                p.kill()
        self.procs = []
        os.remove(self.layout.stop_file)


def _job_failure(job):
    try:
        info = json.loads(job.error or "{}")
    except ValueError:
        info = {"message": job.error}
    msg = f"job {job.job_id} failed: {info.get('message', job.error)}"
    if info.get("error") in ("NonFiniteInput", "FiniteCheckFailed"):
        return FiniteCheckFailed(msg, block="observations", job_id=job.job_id,
                                 where=info.get("where"))
    return AgisError(msg)


def _record_from_dict(d):
    names = {f.name for f in fields(IterationRecord)}
    return IterationRecord(**{k: v for k, v in d.items() if k in names})


def load_run(run_dir):
    layout = RunLayout(run_dir)
    manifest = read_json(layout.manifest)
    cfg = RunConfig.from_dict(manifest["config"])
    return layout, manifest, cfg


def solve(run_dir, workers=None, stop_after=None, worker_args=None):
    """Iterate to convergence through the job store, align, solve the rest.

    Picks up where an interrupted solve stopped: finished iterations are read
    back from the report and the per-iteration state snapshots, and jobs
    already DONE in the store are not recomputed. Returns the summary dict.
    """
    layout, manifest, cfg = load_run(run_dir)
    law = cfg.scan_law
    n_workers = cfg.workers if workers is None else int(workers)
    if n_workers < 0:
        raise ConfigError("workers must be >= 0")
    truth = read_catalog(layout.truth)
    store = ObservationStore(layout.observations)
    obs = store.read_all()
    ids = truth.source_id
    data = AgisData(law, obs, ids)
    primary = data.primary_ids(cfg.solver.primary_fraction)
    anchor_rows = truth.index_of(primary[::cfg.anchor_stride])
    data.anchors = truth.subset(anchor_rows)

    report = ConvergenceReport()
    if os.path.exists(layout.report):
        report.records = [_record_from_dict(d) for d in read_jsonl(layout.report)]
    k = len(report.records)
    cat, nuis, it, extras = read_state(layout.state(k))
    if it != k:
        raise MissingArtifacts(f"state snapshot {k} is inconsistent with the report")
    state = SolverState(cat, nuis, iteration=k)
    if "status" in extras:
        state.status, state.cov = extras["status"], extras["cov"]

    executor = WhiteboardExecutor(layout, n_workers, cfg.worker, cfg.solver.batch_size,
                                  worker_args)

    def persist(st, rec):
        write_state(layout.state(st.iteration), st.catalog, st.nuisance, st.iteration,
                    {"status": st.status, "cov": st.cov})
        row = asdict(rec)
        row["throughput"] = rec.throughput()
        append_jsonl(layout.report, row)

    try:
        state, report = run_agis(cfg.solver, data, state, executor, callback=persist,
                                 report=report, stop_after=stop_after)
        if report.reason == "interrupted":
            return {"reason": "interrupted", "iterations": len(report.records)}
        secondary = data.secondary_ids(cfg.solver.primary_fraction)
        failures = []
        if secondary.size:
            res = secondary_solve(secondary, state, data, cfg.solver.batch_size, executor)
            state = SolverState(res.catalog, state.nuisance, res.cov, res.status, state.iteration)
            failures = res.failures
    finally:
        executor.close()

    write_catalog(layout.final_catalog, state.catalog)
    write_state(layout.final_state, state.catalog, state.nuisance, state.iteration,
                {"status": state.status, "cov": state.cov})
    summary = {
        "converged": report.converged,
        "reason": report.reason,
        "iterations": len(report.records),
        "final_rms": report.final_rms,
        "frame": report.frame,
        "n_primary": int(primary.size),
        "n_secondary": int(ids.size - primary.size),
        "underdetermined": [int(i) for i in ids[state.status != OK]],
        "secondary_failures": failures,
        "workers": n_workers,
    }
    write_json(layout.summary, summary)
    return summary


# -- report and status -----------------------------------------------------


def _errors(final: Catalog, truth: Catalog):
    """Per-parameter errors in rad (rad/yr), columns alpha*, delta, plx, pma*, pmd."""
    x, xt = final.fit_matrix(), truth.fit_matrix()
    err = x - xt
    err[:, 0] = ((x[:, 0] - xt[:, 0] + np.pi) % (2 * np.pi) - np.pi) * np.cos(xt[:, 1])
    return err


PARAM_NAMES = ("alpha_star", "delta", "parallax", "pm_alpha_star", "pm_delta")


def error_statistics(final, truth, cov, status, rows=None):
    rows = np.arange(len(truth)) if rows is None else rows
    ok = rows[status[rows] == OK]
    err = _errors(final, truth)[ok]
    sigma = np.sqrt(np.diagonal(cov[ok], axis1=1, axis2=2))
    out = {}
    for k, name in enumerate(PARAM_NAMES):
        e = err[:, k]
        entry = {"rms_rad": float(np.sqrt(np.mean(e * e))) if e.size else 0.0,
                 "max_abs_rad": float(np.max(np.abs(e))) if e.size else 0.0,
                 "median_abs_rad": float(np.median(np.abs(e))) if e.size else 0.0,
                 "median_formal_rad": float(np.median(sigma[:, k])) if e.size else 0.0}
        ratio = np.abs(e) / sigma[:, k]
        entry["median_error_over_formal"] = float(np.median(ratio)) if e.size else 0.0
        # for a Gaussian the median |e|/sigma is 0.6745
        entry["median_normalised_error"] = entry["median_error_over_formal"] / 0.6745
        entry["rms_normalised_error"] = float(np.sqrt(np.mean(ratio ** 2))) if e.size else 0.0
        out[name] = entry
    out["n_sources"] = int(ok.size)
    return out


def report(run_dir):
    """Accuracy and throughput summary derived only from stored artifacts."""
    layout, manifest, cfg = load_run(run_dir)
    truth = read_catalog(layout.truth)
    final = read_catalog(layout.final_catalog)
    _, _, _, extras = read_state(layout.final_state)
    summary = read_json(layout.summary)
    records = read_jsonl(layout.report)
    n_primary = summary["n_primary"]
    rows = np.arange(len(truth))
    out = {
        "summary": summary,
        "mean_obs_per_source": manifest["mean_obs_per_source"],
        "errors_all": error_statistics(final, truth, extras["cov"], extras["status"]),
        "errors_primary": error_statistics(final, truth, extras["cov"], extras["status"],
                                           rows[:n_primary]),
        "errors_secondary": error_statistics(final, truth, extras["cov"], extras["status"],
                                             rows[n_primary:]),
        "chi2_history": [r["chi2"] for r in records],
        "throughput": [{"iteration": r["iteration"], "workers": r["workers"],
                        "n_obs": r["n_obs"], "seconds": r["processing_time"],
                        "obs_per_worker_hour": r["throughput"]} for r in records],
    }
    write_json(os.path.join(layout.root, "report.json"), out)
    return out


def status(run_dir):
    layout = RunLayout(run_dir)
    if not os.path.exists(layout.manifest):
        raise MissingArtifacts(f"no run under {run_dir}")
    wb = Whiteboard(layout.store)
    n_iter = len(read_jsonl(layout.report)) if os.path.exists(layout.report) else 0
    out = {"iterations": n_iter, "jobs": wb.counts(),
           "solved": os.path.exists(layout.summary)}
    if out["solved"]:
        s = read_json(layout.summary)
        out.update(converged=s["converged"], reason=s["reason"])
    return out
