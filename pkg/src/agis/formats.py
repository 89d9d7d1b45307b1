"""On-disk formats: text catalogs, the binary observation store, state snapshots.

Catalogs are comma-separated text with a header line. Observations live in
a binary file of fixed 48-byte little-endian records sorted by source id and
time, preceded by a versioned header and a per-source index carrying a
CRC32 of each source's records.
"""

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .core import OBS_DTYPE, Catalog
from .errors import CorruptBlock, MissingArtifacts, StorageError
from .params import AttitudeModel, CalibrationTable, GlobalParams, NuisanceState

CATALOG_COLUMNS = ("source_id", "alpha_rad", "delta_rad", "parallax_mas",
                   "pm_alpha_star_masyr", "pm_delta_masyr", "rv_kms", "epoch")
_CATALOG_FIELDS = ("source_id", "alpha", "delta", "parallax", "pmra", "pmdec", "rv", "epoch")

OBS_MAGIC = b"AGISOBS\0"
OBS_VERSION = 1
# magic, version, record size, n records, n indexed sources, index crc32
_OBS_HEADER = struct.Struct("<8sIIQQI4x")
INDEX_DTYPE = np.dtype([("source_id", "<i8"), ("start", "<u8"), ("count", "<u8"),
                        ("crc32", "<u4"), ("pad", "<u4")])

STATE_VERSION = 1


def atomic_write(path, data: bytes):
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# -- catalogs --------------------------------------------------------------


def write_catalog(path, cat: Catalog):
    lines = [",".join(CATALOG_COLUMNS)]
    for i in range(len(cat)):
        vals = [getattr(cat, f)[i] for f in _CATALOG_FIELDS]
        lines.append(",".join([str(int(vals[0]))] + [repr(float(v)) for v in vals[1:]]))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_catalog(path) -> Catalog:
    if not os.path.exists(path):
        raise MissingArtifacts(f"catalog not found: {path}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CATALOG_COLUMNS:
            raise StorageError(f"{path}: unexpected catalog header {header}")
        body = fh.read()
    data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2) if body.strip() else \
        np.zeros((0, len(CATALOG_COLUMNS)))
    cols = {f: data[:, k] for k, f in enumerate(_CATALOG_FIELDS)}
    cols["source_id"] = cols["source_id"].astype(np.int64)
    return Catalog(**cols)


# -- observation store -----------------------------------------------------


def write_observation_store(path, obs):
    """Write sorted observation records with their per-source index."""
    obs = np.ascontiguousarray(obs, dtype=OBS_DTYPE)
    keys = np.lexsort((obs["t"], obs["source_id"]))
    if not np.array_equal(keys, np.arange(obs.size)):
        raise ValueError("observations must be sorted by source id, then time")
    ids, start, count = np.unique(obs["source_id"], return_index=True, return_counts=True)
    index = np.zeros(ids.size, dtype=INDEX_DTYPE)
    index["source_id"] = ids
    index["start"] = start
    index["count"] = count
    raw = obs.tobytes()
    rs = OBS_DTYPE.itemsize
    for k in range(ids.size):
        index["crc32"][k] = zlib.crc32(raw[start[k] * rs:(start[k] + count[k]) * rs])
    idx_bytes = index.tobytes()
    header = _OBS_HEADER.pack(OBS_MAGIC, OBS_VERSION, rs, obs.size, ids.size, zlib.crc32(idx_bytes))
    atomic_write(path, header + idx_bytes + raw)


class ObservationStore:
    """Read access to an observation file by contiguous source-id ranges."""

    def __init__(self, path):
        self.path = str(path)
        try:
            with open(self.path, "rb") as fh:
                head = fh.read(_OBS_HEADER.size)
                if len(head) < _OBS_HEADER.size:
                    raise StorageError(f"{path}: truncated observation store header")
                magic, version, rs, n_rec, n_src, crc = _OBS_HEADER.unpack(head)
                if magic != OBS_MAGIC:
                    raise StorageError(f"{path}: not an observation store")
                if version != OBS_VERSION or rs != OBS_DTYPE.itemsize:
                    raise StorageError(f"{path}: unsupported store version {version}")
                idx_bytes = fh.read(n_src * INDEX_DTYPE.itemsize)
        except FileNotFoundError as exc:
            raise MissingArtifacts(f"observation store not found: {path}") from exc
        if zlib.crc32(idx_bytes) != crc or len(idx_bytes) != n_src * INDEX_DTYPE.itemsize:
            raise CorruptBlock(f"{path}: index checksum mismatch")
        self.index = np.frombuffer(idx_bytes, dtype=INDEX_DTYPE)
        self.n_records = int(n_rec)
        self._data_offset = _OBS_HEADER.size + len(idx_bytes)

    @property
    def source_ids(self):
        return self.index["source_id"]

    def _span(self, lo, hi):
        a, b = np.searchsorted(self.index["source_id"], [lo, hi])
        return int(a), int(b)

    def nbytes(self, lo, hi):
        a, b = self._span(lo, hi)
        return int(np.sum(self.index["count"][a:b])) * OBS_DTYPE.itemsize

    def read(self, lo, hi):
        """All records of sources ``lo <= id < hi`` in one sequential read."""
        a, b = self._span(lo, hi)
        if a == b:
            return np.zeros(0, dtype=OBS_DTYPE)
        ent = self.index[a:b]
        first = int(ent["start"][0])
        n = int(ent["start"][-1] + ent["count"][-1]) - first
        rs = OBS_DTYPE.itemsize
        with open(self.path, "rb") as fh:
            fh.seek(self._data_offset + first * rs)
            raw = fh.read(n * rs)
        if len(raw) != n * rs:
            raise CorruptBlock(f"{self.path}: truncated records for sources [{lo}, {hi})")
        for e in ent:
            off = (int(e["start"]) - first) * rs
            if zlib.crc32(raw[off:off + int(e["count"]) * rs]) != int(e["crc32"]):
                raise CorruptBlock(f"{self.path}: checksum mismatch for source {int(e['source_id'])}")
        return np.frombuffer(raw, dtype=OBS_DTYPE).copy()

    def read_all(self):
        return self.read(np.iinfo(np.int64).min, np.iinfo(np.int64).max)

    def split(self, lo, hi, max_bytes):
        """Consecutive sub-ranges of ``[lo, hi)`` each holding <= ``max_bytes``."""
        if max_bytes is None:
            return [(lo, hi)]
        a, b = self._span(lo, hi)
        sizes = self.index["count"][a:b].astype(np.int64) * OBS_DTYPE.itemsize
        if np.any(sizes > max_bytes):
            big = int(self.index["source_id"][a + int(np.argmax(sizes))])
            raise StorageError(f"source {big} alone exceeds the memory budget of {max_bytes} bytes")
        ranges = []
        start, used = lo, 0
        for k in range(a, b):
            size = int(sizes[k - a])
            if used + size > max_bytes:
                sid = int(self.index["source_id"][k])
                ranges.append((start, sid))
                start, used = sid, 0
            used += size
        ranges.append((start, hi))
        return ranges


@dataclass
class ObservationBlock:
    lo: int
    hi: int
    records: np.ndarray

    def groups(self):
        """``(source_id, records)`` pairs in ascending source id."""
        ids = self.records["source_id"]
        bounds = np.flatnonzero(np.diff(ids)) + 1
        return [(int(g["source_id"][0]), g) for g in np.split(self.records, bounds) if g.size]


def load_observation_block(store, lo, hi, max_batch_memory=None):
    """Observation blocks for sources ``lo <= id < hi``, split to fit the budget."""
    if not isinstance(store, ObservationStore):
        store = ObservationStore(store)
    return [ObservationBlock(a, b, store.read(a, b))
            for a, b in store.split(lo, hi, max_batch_memory)]


# -- solver state snapshots ------------------------------------------------


def state_to_bytes(catalog, nuisance, iteration, extra=None):
    buf = io.BytesIO()
    att = nuisance.attitude
    arrays = {
        "version": np.array([STATE_VERSION], dtype="<i8"),
        "iteration": np.array([iteration], dtype="<i8"),
        "source_id": catalog.source_id.astype("<i8"),
        "columns": np.stack([getattr(catalog, c) for c in _CATALOG_FIELDS[1:]]).astype("<f8"),
        "att_grid": np.array([att.t_start, att.spacing], dtype="<f8"),
        "att_coeffs": att.coeffs.astype("<f8"),
        "cal": nuisance.calibration.offsets.astype("<f8"),
        "g": np.array([nuisance.glob.g], dtype="<f8"),
    }
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v)
    np.savez(buf, **arrays)
    return buf.getvalue()


def write_state(path, catalog, nuisance, iteration, extra=None):
    atomic_write(path, state_to_bytes(catalog, nuisance, iteration, extra))


def read_state(path):
    """``(catalog, nuisance, iteration, extras)`` from a state snapshot."""
    if not os.path.exists(path):
        raise MissingArtifacts(f"state snapshot not found: {path}")
    try:
        with np.load(path) as z:
            d = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise StorageError(f"{path}: unreadable state snapshot") from exc
    if int(d["version"][0]) != STATE_VERSION:
        raise StorageError(f"{path}: unsupported state version")
    cat = Catalog(d["source_id"], *d["columns"])
    att = AttitudeModel(float(d["att_grid"][0]), float(d["att_grid"][1]), d["att_coeffs"])
    nuis = NuisanceState(att, CalibrationTable(d["cal"]), GlobalParams(float(d["g"][0])))
    known = {"version", "iteration", "source_id", "columns", "att_grid",
             "att_coeffs", "cal", "g"}
    extras = {k: v for k, v in d.items() if k not in known}
    return cat, nuis, int(d["iteration"][0]), extras


def write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    if not os.path.exists(path):
        raise MissingArtifacts(f"missing {path}")
    with open(path) as fh:
        return json.load(fh)


def append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_jsonl(path):
    if not os.path.exists(path):
        raise MissingArtifacts(f"missing {path}")
    out = []
    with open(path) as fh:
        for line in fh:
            if line.endswith("\n") and line.strip():
                out.append(json.loads(line))
    return out


class RunLayout:
    """Standard file names inside a run directory."""

    def __init__(self, run_dir):
        self.root = str(run_dir)

    def _p(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def manifest(self):
        return self._p("manifest.json")

    @property
    def truth(self):
        return self._p("truth.csv")

    @property
    def start(self):
        return self._p("start.csv")

    @property
    def observations(self):
        return self._p("observations.bin")

    @property
    def store(self):
        return self._p("store")

    @property
    def report(self):
        return self._p("report.jsonl")

    @property
    def summary(self):
        return self._p("solve.json")

    @property
    def final_catalog(self):
        return self._p("final.csv")

    @property
    def final_state(self):
        return self._p("final_state.npz")

    @property
    def workers(self):
        return self._p("workers")

    @property
    def stop_file(self):
        return self._p("store", "STOP")

    def state(self, iteration):
        return self._p("state", f"iter_{iteration:05d}.npz")

    def secondary_state(self, iteration):
        return self._p("state", f"secondary_{iteration:05d}.npz")

    def worker_stats(self, worker_id):
        return self._p("workers", f"{worker_id}.jsonl")
