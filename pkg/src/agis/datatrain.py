"""Worker runtime: claim a job, load its observations, solve, post the envelope."""

import json
import os
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field

from .errors import ConfigError, FiniteCheckFailed, InvalidState, NonFiniteInput, StorageError
from .formats import ObservationStore, RunLayout, append_jsonl, read_json, read_state
from .scanlaw import ScanLaw
from .solver.agis import Job as SolverJob
from .solver.agis import process_sources
from .solver.sources import ObservationBatch
from .whiteboard import JobKind, JobState, PartialEnvelope, Whiteboard

# resident bytes per observation: the 48-byte record plus its cached geometry
RESIDENT_BYTES_PER_OBS = 48 + 8 * (9 + 3 + 3 + 1 + 1)
CRASH_EXIT_CODE = 17


@dataclass
class WorkerConfig:
    worker_id: str
    store: str  # run directory holding the job store, observations and states
    lease: float = 60.0  # s
    heartbeat: float = 10.0  # s
    max_batch_memory: int = 256 * 2**20  # bytes
    idle_timeout: float = 0.0  # s to keep polling once no job is pending
    poll_interval: float = 0.05  # s
    crash_after_claims: int | None = None  # fault injection: die holding the next claim

    def __post_init__(self):
        if not (self.lease > self.heartbeat > 0):
            raise ConfigError("worker config needs lease > heartbeat > 0")
        if self.max_batch_memory < RESIDENT_BYTES_PER_OBS:
            raise ConfigError("max_batch_memory is too small for a single observation")


@dataclass
class SharedState:
    """Per-iteration read-only inputs: current catalog and nuisance blocks."""

    catalog: object
    nuisance: object
    iteration: int

    @classmethod
    def load(cls, path):
        cat, nuis, iteration, _ = read_state(path)
        return cls(cat, nuis, iteration)


class BatchCache:
    """Observation batches with geometry, kept within a resident-memory budget."""

    def __init__(self, store, law, max_bytes):
        self.store = store
        self.law = law
        self.max_bytes = max_bytes
        self._items = OrderedDict()
        self.resident = 0

    def _record_budget(self):
        return max(1, self.max_bytes * 48 // RESIDENT_BYTES_PER_OBS)

    def batches(self, lo, hi):
        """Sub-batches of ``[lo, hi)`` in source order, each within the budget."""
        for a, b in self.store.split(lo, hi, self._record_budget()):
            key = (a, b)
            if key in self._items:
                self._items.move_to_end(key)
                yield self._items[key]
                continue
            batch = ObservationBatch.build(self.store.read(a, b), self.law, ids=range(a, b))
            size = len(batch) * RESIDENT_BYTES_PER_OBS
            while self._items and self.resident + size > self.max_bytes:
                _, old = self._items.popitem(last=False)
                self.resident -= len(old) * RESIDENT_BYTES_PER_OBS
            self._items[key] = batch
            self.resident += size
            yield batch


def process_batch(job, shared, store, law, max_batch_memory=None, cache=None):
    """Run the source update (and accumulation) of ``job``; returns a sealed envelope."""
    if cache is None:
        if not isinstance(store, ObservationStore):
            store = ObservationStore(store)
        cache = BatchCache(store, law, max_batch_memory or 2**62)
    lo, hi = job.source_range
    accumulate = JobKind(job.kind) == JobKind.SOURCE_UPDATE
    n_units = shared.nuisance.calibration.n_units
    result = process_sources(SolverJob(job.job_id, lo, hi), cache.batches(lo, hi),
                             shared.catalog, shared.nuisance, n_units, accumulate)
    return PartialEnvelope(job.job_id, job.iteration, result).seal()


@dataclass
class WorkerStats:
    worker_id: str
    jobs: list = field(default_factory=list)
    wall_seconds: float = 0.0
    failures: int = 0

    @property
    def n_jobs(self):
        return len(self.jobs)

    @property
    def n_obs(self):
        return sum(j["n_obs"] for j in self.jobs)

    @property
    def busy_seconds(self):
        return sum(j["seconds"] for j in self.jobs)

    def obs_per_hour(self):
        return self.n_obs / (self.busy_seconds / 3600.0) if self.busy_seconds > 0 else 0.0

    def summary(self):
        return {"worker": self.worker_id, "jobs": self.n_jobs, "n_obs": self.n_obs,
                "busy_seconds": self.busy_seconds, "wall_seconds": self.wall_seconds,
                "failures": self.failures, "obs_per_hour": self.obs_per_hour()}


class _Heartbeat:
    def __init__(self, store_path, job_id, worker, lease, interval):
        self._wb = Whiteboard(store_path, create=False)
        self._args = (job_id, worker, lease)
        self._interval = interval
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.wait(self._interval):
            if not self._wb.renew_lease(*self._args):
                return

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()


def run_datatrain(config: WorkerConfig, emit=True):
    """Claim and process jobs until none are pending (and the idle timeout passed)."""
    layout = RunLayout(config.store)
    if not os.path.isdir(layout.store):
        raise StorageError(f"job store not found under {config.store}")
    wb = Whiteboard(layout.store, create=False)
    law = ScanLaw.from_dict(read_json(layout.manifest)["scan_law"])
    cache = BatchCache(ObservationStore(layout.observations), law, config.max_batch_memory)
    stats = WorkerStats(config.worker_id)
    os.makedirs(layout.workers, exist_ok=True)
    stats_path = layout.worker_stats(config.worker_id)
    shared, shared_key = None, None
    claims = 0
    t_start = time.perf_counter()
    idle_since = None
    while True:
        job = wb.claim_job(config.worker_id, config.lease)
        if job is None:
            if wb.expire_leases():
                continue
            if os.path.exists(layout.stop_file):
                break
            idle_since = idle_since or time.perf_counter()
            if time.perf_counter() - idle_since >= config.idle_timeout:
                break
            time.sleep(config.poll_interval)
            continue
        idle_since = None
        claims += 1
        if config.crash_after_claims is not None and claims > config.crash_after_claims:
            os._exit(CRASH_EXIT_CODE)  # die while holding the lease
        t0 = time.perf_counter()
        try:
            key = (job.kind, job.iteration)
            if shared_key != key:
                path = (layout.state(job.iteration) if job.kind == JobKind.SOURCE_UPDATE
                        else layout.secondary_state(job.iteration))
                shared, shared_key = SharedState.load(path), key
            with _Heartbeat(layout.store, job.job_id, config.worker_id, config.lease,
                            config.heartbeat):
                env = process_batch(job, shared, None, law, cache=cache)
                wb.complete_job(job.job_id, env)
        except (NonFiniteInput, FiniteCheckFailed) as exc:
            stats.failures += 1
            wb.fail_job(job.job_id, reason=_describe(exc), permanent=True)
            continue
        except InvalidState:
            # the lease ran out and another worker owns the job now
            stats.failures += 1
            continue
        except StorageError:
            raise
        except Exception as exc:  # noqa: BLE001  one bad job must not kill the worker
            stats.failures += 1
            try:
                wb.fail_job(job.job_id, reason=repr(exc))
            except InvalidState:
                pass
            continue
        seconds = time.perf_counter() - t0
        n_obs = env.result.n_obs
        record = {"worker": config.worker_id, "job_id": job.job_id, "iteration": job.iteration,
                  "n_sources": int(env.result.ids.size), "n_obs": n_obs, "seconds": seconds,
                  "obs_per_hour": n_obs / (seconds / 3600.0) if seconds > 0 else 0.0}
        stats.jobs.append(record)
        append_jsonl(stats_path, record)
        if emit:
            print(json.dumps(record), flush=True)
    stats.wall_seconds = time.perf_counter() - t_start
    append_jsonl(stats_path, {"summary": stats.summary()})
    if emit:
        print(json.dumps({"summary": stats.summary()}), flush=True)
    return stats


def _describe(exc):
    where = getattr(exc, "where", None)
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "where": where},
                      default=str)


def failed_jobs(wb, iteration):
    return [j for j in wb.jobs(iteration) if j.state == JobState.FAILED]
