"""Persistent job table shared by the orchestrator and the workers.

The store is a directory::

    jobs.log                    append-only JSON lines, one event per line
    snapshot.json               replayed job table plus the log offset it covers
    lock                        fcntl lock serialising every operation
    envelopes/<iteration>/<id>  binary result payloads

Every operation takes the lock, catches up with the log, checks the state
machine, appends its event and releases the lock, so operations from any
number of processes are linearizable. Job states move
PENDING -> CLAIMED -> DONE, back to PENDING when a lease expires, or to
FAILED once ``max_attempts`` is exhausted.
"""

import contextlib
import enum
import fcntl
import hashlib
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ChecksumMismatch, FiniteCheckFailed, InvalidState, StorageError
from .formats import atomic_write
from .solver.agis import BatchResult, partition
from .solver.normal import BlockKind, BlockPartials, CrossTerms, PartialNormalEquations

ENVELOPE_MAGIC = b"AGISENV\0"
ENVELOPE_VERSION = 1
# magic, format version, iteration, n_knots, n_units, n_sources, job id length
_ENV_HEADER = struct.Struct("<8sIqqqqI")
_ARRAY_HEADER = struct.Struct("<4sI")  # dtype code, ndim


class JobState(str, enum.Enum):
    PENDING = "PENDING"
    CLAIMED = "CLAIMED"
    DONE = "DONE"
    FAILED = "FAILED"


class JobKind(str, enum.Enum):
    SOURCE_UPDATE = "SOURCE_UPDATE"
    SECONDARY_UPDATE = "SECONDARY_UPDATE"


_PREFIX = {JobKind.SOURCE_UPDATE: "S", JobKind.SECONDARY_UPDATE: "X"}


@dataclass
class Job:
    job_id: str
    kind: JobKind
    iteration: int
    source_range: tuple  # [lo, hi) source ids
    state: JobState = JobState.PENDING
    lease_expiry: float | None = None
    attempts: int = 0
    worker: str | None = None
    checksum: str | None = None
    error: str | None = None

    @property
    def lo(self):
        return self.source_range[0]

    @property
    def hi(self):
        return self.source_range[1]

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        d["state"] = self.state.value
        d["source_range"] = list(self.source_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kind"] = JobKind(d["kind"])
        d["state"] = JobState(d["state"])
        d["source_range"] = tuple(d["source_range"])
        return cls(**d)


# -- envelopes -------------------------------------------------------------


@dataclass
class PartialEnvelope:
    """Result of one job: block partials plus per-source results."""

    job_id: str
    iteration: int
    result: BatchResult
    checksum: str = ""

    @property
    def partials(self):
        return self.result.partials

    @property
    def source_results(self):
        return self.result

    def check_finite(self):
        self.result.check_finite()

    def body(self):
        return encode_envelope(self.job_id, self.iteration, self.result)

    def seal(self):
        self.checksum = hashlib.sha256(self.body()).hexdigest()
        return self

    def to_bytes(self):
        body = self.body()
        digest = hashlib.sha256(body).digest()
        if self.checksum and digest.hex() != self.checksum:
            raise ChecksumMismatch(f"envelope {self.job_id}: payload does not match its checksum")
        return body + digest

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _ENV_HEADER.size + 32:
            raise ChecksumMismatch("truncated envelope")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise ChecksumMismatch("envelope checksum mismatch")
        job_id, iteration, result = decode_envelope(body)
        return cls(job_id, iteration, result, digest.hex())


def _put_array(out, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
    out.append(_ARRAY_HEADER.pack(np.dtype(dtype).str[1:].encode().ljust(4, b" "), arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
    out.append(arr.tobytes())


def _get_array(buf, pos):
    code, ndim = _ARRAY_HEADER.unpack_from(buf, pos)
    pos += _ARRAY_HEADER.size
    shape = struct.unpack_from(f"<{ndim}q", buf, pos)
    pos += 8 * ndim
    dtype = np.dtype("<" + code.decode().strip())
    n = int(np.prod(shape)) * dtype.itemsize
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape)
    return arr.copy(), pos + n


def encode_envelope(job_id, iteration, res: BatchResult):
    p = res.partials
    jid = job_id.encode()
    out = [_ENV_HEADER.pack(ENVELOPE_MAGIC, ENVELOPE_VERSION, iteration, p.attitude.n,
                            p.calibration.n, res.ids.size, len(jid)), jid]
    for block in p:
        out.append(struct.pack("<q", block.n_obs))
        _put_array(out, block.matrix, "f8")
        _put_array(out, block.rhs, "f8")
    for _, arr in p.cross:
        _put_array(out, arr, "f8")
    _put_array(out, res.ids, "i8")
    _put_array(out, res.status, "i1")
    _put_array(out, res.n_obs_source, "i8")
    for _, arr in res.arrays():
        _put_array(out, arr, "f8")
    return b"".join(out)


def decode_envelope(body):
    magic, version, iteration, n_knots, n_units, n_src, jlen = _ENV_HEADER.unpack_from(body, 0)
    if magic != ENVELOPE_MAGIC:
        raise StorageError("not an envelope payload")
    if version != ENVELOPE_VERSION:
        raise StorageError(f"unsupported envelope version {version}")
    pos = _ENV_HEADER.size
    job_id = body[pos:pos + jlen].decode()
    pos += jlen
    blocks = []
    for kind, n in ((BlockKind.ATTITUDE, n_knots), (BlockKind.CALIBRATION, n_units),
                    (BlockKind.GLOBAL, 1)):
        (n_obs,) = struct.unpack_from("<q", body, pos)
        pos += 8
        matrix, pos = _get_array(body, pos)
        rhs, pos = _get_array(body, pos)
        blocks.append(PartialNormalEquations(kind, n, matrix, rhs, n_obs))
    cross = []
    for _ in range(3):
        arr, pos = _get_array(body, pos)
        cross.append(arr)
    arrays = []
    for _ in range(8):
        arr, pos = _get_array(body, pos)
        arrays.append(arr)
    ids, status, n_obs_source, x, cov, c2b, c2a, r2 = arrays
    partials = BlockPartials(*blocks, CrossTerms(*cross))
    return job_id, int(iteration), BatchResult(job_id, ids, x, cov, status, n_obs_source,
                                               c2b, c2a, r2, partials)


# -- store -----------------------------------------------------------------


@dataclass
class Ack:
    job_id: str
    duplicate: bool = False


@dataclass
class _Table:
    jobs: dict = field(default_factory=dict)
    offset: int = 0


class Whiteboard:
    """File-backed job store; safe to share between processes."""

    def __init__(self, path, max_attempts=3, clock=time.time, create=True):
        self.path = str(path)
        if not os.path.isdir(self.path):
            if not create:
                raise StorageError(f"job store not found: {self.path}")
            os.makedirs(os.path.join(self.path, "envelopes"), exist_ok=True)
        self.max_attempts = int(max_attempts)
        self.clock = clock
        self._table = _Table()
        self._loaded = False

    # -- plumbing

    @property
    def log_path(self):
        return os.path.join(self.path, "jobs.log")

    @property
    def snapshot_path(self):
        return os.path.join(self.path, "snapshot.json")

    def envelope_path(self, job):
        return os.path.join(self.path, "envelopes", f"{job.iteration:05d}", job.job_id)

    @contextlib.contextmanager
    def _locked(self):
        try:
            fd = os.open(os.path.join(self.path, "lock"), os.O_RDWR | os.O_CREAT, 0o644)
        except OSError as exc:
            raise StorageError(f"cannot open job store lock: {exc}") from exc
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            self._catch_up()
            yield self._table.jobs
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
            os.close(fd)

    def _catch_up(self):
        if not self._loaded:
            self._table = _Table()
            if os.path.exists(self.snapshot_path):
                with open(self.snapshot_path) as fh:
                    snap = json.load(fh)
                self._table = _Table({d["job_id"]: Job.from_dict(d) for d in snap["jobs"]},
                                     snap["offset"])
            self._loaded = True
        if not os.path.exists(self.log_path):
            return
        with open(self.log_path, "rb") as fh:
            fh.seek(self._table.offset)
            data = fh.read()
        end = data.rfind(b"\n") + 1  # ignore a torn trailing line
        for line in data[:end].splitlines():
            if line.strip():
                self._apply(json.loads(line))
        self._table.offset += end

    def _apply(self, event):
        job = Job.from_dict(event["job"])
        self._table.jobs[job.job_id] = job

    def _append(self, jobs):
        with open(self.log_path, "ab+") as fh:
            size = fh.seek(0, os.SEEK_END)
            if size > self._table.offset:  # drop a torn line left by a crashed writer
                fh.truncate(self._table.offset)
            data = b"".join(json.dumps({"job": j.to_dict()}, sort_keys=True).encode() + b"\n"
                            for j in jobs)
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        for j in jobs:
            self._table.jobs[j.job_id] = j
        self._table.offset += len(data)

    def snapshot(self):
        """Persist the replayed table so later openings skip the old log."""
        with self._locked() as jobs:
            snap = {"offset": self._table.offset,
                    "jobs": [jobs[k].to_dict() for k in sorted(jobs)]}
            atomic_write(self.snapshot_path, json.dumps(snap, sort_keys=True).encode())

    # -- queries

    def jobs(self, iteration=None, kind=None):
        with self._locked() as jobs:
            out = [jobs[k] for k in sorted(jobs)]
        return [j for j in out if (iteration is None or j.iteration == iteration)
                and (kind is None or j.kind == JobKind(kind))]

    def get(self, job_id):
        with self._locked() as jobs:
            if job_id not in jobs:
                raise InvalidState(f"unknown job {job_id}")
            return jobs[job_id]

    def counts(self, iteration=None):
        out = {s.value: 0 for s in JobState}
        for j in self.jobs(iteration):
            out[j.state.value] += 1
        return out

    # -- operations

    def post_jobs(self, iteration, source_ids, batch_size, kind=JobKind.SOURCE_UPDATE):
        """Partition ``source_ids`` into contiguous batches of PENDING jobs.

        Reposting the same specification returns the same job ids.
        """
        if int(batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        kind = JobKind(kind)
        ids = np.asarray(source_ids, dtype=np.int64)
        planned = partition(ids, int(batch_size), iteration, _PREFIX[kind]) if ids.size else []
        with self._locked() as jobs:
            new = []
            for p in planned:
                job = Job(p.job_id, kind, int(iteration), (p.lo, p.hi))
                old = jobs.get(p.job_id)
                if old is None:
                    new.append(job)
                elif old.source_range != job.source_range or old.kind != kind:
                    raise InvalidState(f"job {p.job_id} already posted with a different range")
            if new:
                self._append(new)
        return [p.job_id for p in planned]

    def claim_job(self, worker, lease):
        """Atomically claim the lowest PENDING job id; None when there is none."""
        if not lease > 0:
            raise ValueError("lease must be > 0")
        with self._locked() as jobs:
            pending = sorted(k for k, j in jobs.items() if j.state == JobState.PENDING)
            if not pending:
                return None
            job = jobs[pending[0]]
            claimed = Job(**{**asdict(job), "state": JobState.CLAIMED, "worker": str(worker),
                             "lease_expiry": self.clock() + lease})
            self._append([claimed])
            return claimed

    def renew_lease(self, job_id, worker, lease):
        with self._locked() as jobs:
            job = jobs.get(job_id)
            if job is None or job.state != JobState.CLAIMED or job.worker != str(worker):
                return False
            self._append([Job(**{**asdict(job), "lease_expiry": self.clock() + lease})])
            return True

    def complete_job(self, job_id, envelope: PartialEnvelope):
        """Validate and persist ``envelope`` and mark the job DONE."""
        if envelope.job_id != job_id:
            raise InvalidState(f"envelope for {envelope.job_id} submitted as {job_id}")
        envelope.check_finite()
        payload = envelope.to_bytes()
        checksum = hashlib.sha256(payload[:-32]).hexdigest()
        with self._locked() as jobs:
            job = jobs.get(job_id)
            if job is None:
                raise InvalidState(f"unknown job {job_id}")
            if envelope.iteration != job.iteration:
                raise InvalidState(f"envelope iteration {envelope.iteration} for job {job_id} "
                                   f"of iteration {job.iteration}")
            if job.state == JobState.DONE:
                if job.checksum == checksum:
                    return Ack(job_id, duplicate=True)
                raise InvalidState(f"job {job_id} already completed with a different envelope")
            if job.state != JobState.CLAIMED:
                raise InvalidState(f"cannot complete job {job_id} in state {job.state.value}")
            path = self.envelope_path(job)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            atomic_write(path, payload)
            self._append([Job(**{**asdict(job), "state": JobState.DONE, "checksum": checksum,
                                 "lease_expiry": None})])
        return Ack(job_id)

    def fail_job(self, job_id, reason="", permanent=False):
        """Give a claimed job back after a worker-side failure.

        The job is requeued unless ``permanent`` is set or its attempts are
        exhausted, in which case it becomes FAILED with ``reason`` recorded.
        """
        with self._locked() as jobs:
            job = jobs.get(job_id)
            if job is None or job.state != JobState.CLAIMED:
                raise InvalidState(f"cannot fail job {job_id}")
            attempts = job.attempts + 1
            failed = permanent or attempts >= self.max_attempts
            state = JobState.FAILED if failed else JobState.PENDING
            self._append([Job(**{**asdict(job), "state": state, "attempts": attempts,
                                 "worker": None, "lease_expiry": None, "error": str(reason)})])
            return state

    def expire_leases(self, now=None):
        """Requeue CLAIMED jobs whose lease ran out; returns their ids."""
        now = self.clock() if now is None else now
        with self._locked() as jobs:
            changed = []
            for k in sorted(jobs):
                job = jobs[k]
                if job.state == JobState.CLAIMED and job.lease_expiry < now:
                    attempts = job.attempts + 1
                    state = JobState.FAILED if attempts >= self.max_attempts else JobState.PENDING
                    changed.append(Job(**{**asdict(job), "state": state, "attempts": attempts,
                                          "worker": None, "lease_expiry": None}))
            if changed:
                self._append(changed)
        return [j.job_id for j in changed if j.state == JobState.PENDING]

    def load_envelope(self, job):
        path = self.envelope_path(job)
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except FileNotFoundError as exc:
            raise StorageError(f"missing envelope for job {job.job_id}") from exc
        env = PartialEnvelope.from_bytes(data)
        if env.checksum != job.checksum or env.job_id != job.job_id:
            raise ChecksumMismatch(f"envelope of job {job.job_id} does not match the job table")
        return env

    def envelopes(self, iteration, kind=JobKind.SOURCE_UPDATE):
        """Envelopes of every job of ``iteration`` in canonical job-id order."""
        jobs = self.jobs(iteration, kind)
        not_done = [j.job_id for j in jobs if j.state != JobState.DONE]
        if not_done:
            raise InvalidState(f"iteration {iteration} has unfinished jobs: {not_done}")
        return [self.load_envelope(j) for j in jobs]

    def merge_partials(self, iteration, n_knots=None, n_units=None, envelopes=None):
        """Sum the partials of an iteration in canonical job-id order."""
        envs = self.envelopes(iteration) if envelopes is None else envelopes
        return merge_envelopes(envs, n_knots, n_units)


def merge_envelopes(envelopes, n_knots=None, n_units=None):
    envs = sorted(envelopes, key=lambda e: e.job_id)
    if n_knots is None or n_units is None:
        if not envs:
            raise ValueError("block sizes are needed to merge zero envelopes")
        n_knots, n_units = envs[0].partials.attitude.n, envs[0].partials.calibration.n
    total = BlockPartials.zeros(n_knots, n_units)
    for env in envs:
        try:
            env.partials.check_finite(env.job_id)
        except FiniteCheckFailed as exc:
            exc.job_id = env.job_id
            raise
        total = total + env.partials
    total.check_finite()
    return total
