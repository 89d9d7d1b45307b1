"""Transit search: when does a source cross a field-of-view centre line?"""

from functools import lru_cache

import numpy as np

from ..core import Catalog, field_angles, observation_geometry, triad_arrays
from ..scanlaw import FOLLOWING, PRECEDING, calib_unit_for, spin_axis

TRANSIT_DTYPE = np.dtype([("source_id", "<i8"), ("t", "<f8"), ("fov", "<i4"),
                          ("calib_unit", "<i4"), ("transit", "<i4")])

# slack on the across-scan prefilter: aberration (1e-4), parallax, proper motion
_PREFILTER_MARGIN = 1e-3
_BISECTIONS = 6
_MAX_SECANT = 12
_ETA_TOL = 1e-12
_CHUNK = 64


@lru_cache(maxsize=4)
def _sample_grid(law, lo, hi):
    step = law.spin_period / 8.0
    n = int(np.ceil((hi - lo) / step)) + 1
    t = lo + step * np.arange(n)
    t[-1] = hi
    return t, spin_axis(law, t)


def _eta(law, x, epoch, t, fov, g):
    geom = observation_geometry(law, t, fov)
    return field_angles(x, epoch, geom, g)


def _refine(law, x, epoch, a, b, ea, eb, fov, g):
    """Root of eta inside each bracket [a, b] with eta(a) > 0 >= eta(b).

    A few bisection halvings shrink the bracket, then Illinois-modified
    regula falsi converges superlinearly while keeping the bracket.
    """
    for _ in range(_BISECTIONS):
        mid = 0.5 * (a + b)
        em, _ = _eta(law, x, epoch, mid, fov, g)
        pos = em > 0
        a, ea = np.where(pos, mid, a), np.where(pos, em, ea)
        b, eb = np.where(pos, b, mid), np.where(pos, eb, em)
    side = np.zeros(a.size, dtype=np.int8)
    for _ in range(_MAX_SECANT):
        c = (a * eb - b * ea) / (eb - ea)
        c = np.where((c > a) & (c < b), c, 0.5 * (a + b))
        ec, _ = _eta(law, x, epoch, c, fov, g)
        pos = ec > 0
        # Illinois: halve the stale endpoint's value when the same side repeats
        eb = np.where(pos & (side == 1), 0.5 * eb, eb)
        ea = np.where(~pos & (side == -1), 0.5 * ea, ea)
        a, ea = np.where(pos, c, a), np.where(pos, ec, ea)
        b, eb = np.where(pos, b, c), np.where(pos, eb, ec)
        side = np.where(pos, 1, -1).astype(np.int8)
        if np.all(np.abs(ec) < _ETA_TOL):
            return c
    return np.where(np.abs(ea) <= np.abs(eb), a, b)


def _transits(law, x, epoch, window, g):
    """Transit times of the sources with fit vectors ``x`` (rows).

    Returns ``(row, t, fov)`` arrays, unsorted.
    """
    lo, hi = window
    t_grid, z_grid = _sample_grid(law, float(lo), float(hi))
    _, _, r = triad_arrays(x[:, 0], x[:, 1])
    near = np.abs(z_grid @ r.T) < law.across_scan_halfwidth + _PREFILTER_MARGIN
    kk, rows = np.nonzero(near[:-1] | near[1:])
    if kk.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0), np.empty(0, dtype=np.int64)
    kk = np.concatenate([kk, kk])
    rows = np.concatenate([rows, rows])
    fov = np.repeat([PRECEDING, FOLLOWING], kk.size // 2)
    xr, er = x[rows], epoch[rows]
    e0, _ = _eta(law, xr, er, t_grid[kk], fov, g)
    e1, _ = _eta(law, xr, er, t_grid[kk + 1], fov, g)
    # azimuth of a fixed source decreases: crossings go from + to -
    hit = (e0 > 0) & (e1 <= 0) & (np.abs(e0) < np.pi / 2) & (np.abs(e1) < np.pi / 2)
    kk, rows, fov, xr, er = kk[hit], rows[hit], fov[hit], xr[hit], er[hit]
    root = _refine(law, xr, er, t_grid[kk], t_grid[kk + 1], e0[hit], e1[hit], fov, g)
    _, zeta = _eta(law, xr, er, root, fov, g)
    keep = np.abs(zeta) < law.across_scan_halfwidth
    return rows[keep], root[keep], fov[keep]


def _source_transits(law, x, epoch, window, g):
    _, t, fov = _transits(law, x[None, :], np.array([epoch]), window, g)
    order = np.lexsort((fov, t))
    return t[order], fov[order]


def generate_transits(law, s, window=None, g=0.0):
    """All FoV centre-line crossings of source ``s`` inside ``window``.

    Returns a list of ``(t, fov, calib_unit)`` sorted by time.
    """
    lo, hi = (law.mission_start, law.mission_end) if window is None else window
    if hi <= lo:
        return []
    t, fov = _source_transits(law, s.fit_vector(), s.epoch, (lo, hi), g)
    units = calib_unit_for(law, fov, t)
    return [(float(a), int(b), int(c)) for a, b, c in zip(t, fov, units)]


def catalog_transits(law, catalog: Catalog, window=None, g=0.0):
    """Transits of every catalog source as a structured array sorted by (source, t)."""
    lo, hi = (law.mission_start, law.mission_end) if window is None else window
    chunks = []
    if hi > lo:
        x_all = catalog.fit_matrix()
        for c0 in range(0, len(catalog), _CHUNK):
            sl = slice(c0, c0 + _CHUNK)
            rows, t, fov = _transits(law, x_all[sl], catalog.epoch[sl], (lo, hi), g)
            order = np.lexsort((fov, t, rows))
            rows, t, fov = rows[order], t[order], fov[order]
            rec = np.zeros(t.size, dtype=TRANSIT_DTYPE)
            rec["source_id"] = catalog.source_id[sl][rows]
            rec["t"] = t
            rec["fov"] = fov
            rec["calib_unit"] = calib_unit_for(law, fov, t)
            starts = np.searchsorted(rows, rows, side="left")
            rec["transit"] = np.arange(t.size) - starts
            chunks.append(rec)
    if not chunks:
        return np.zeros(0, dtype=TRANSIT_DTYPE)
    return np.concatenate(chunks)
