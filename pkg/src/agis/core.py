"""Astrometric source model and the along-scan measurement equation.

The abscissa of a source observed at time ``t`` in field of view ``fov`` is

    eta = wrap(az(R_nom(t) @ u_app) - phi_fov) - attitude(t) + calibration[unit]

where ``u_app`` is the aberrated, parallax- and proper-motion-propagated
direction, ``az`` the azimuth about the spin axis and ``phi_fov = +-Gamma/2``.

Sign conventions:
  * parallactic displacement is ``-parallax * b_perp`` with ``b_perp`` the
    observer position projected onto the tangent plane of the source;
  * the attitude phase correction enters ``eta`` with a negative sign;
  * the calibration offset is additive.

Fitted source parameters are ``(alpha*, delta, parallax, pm_alpha*, pm_delta)``.
Their partial derivatives are returned per radian (and radian/yr), i.e. a
parallax partial multiplies a parallax expressed in radians, not mas.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .constants import C_KMS, DAYS_PER_YEAR, MAS
from .errors import NonFiniteInput
from .scanlaw import nominal_attitude, observer_state

# 48-byte little-endian observation record (see ``agis.obsstore``)
OBS_DTYPE = np.dtype(
    [
        ("source_id", "<i8"),
        ("t", "<f8"),
        ("abscissa", "<f8"),
        ("sigma", "<f8"),
        ("fov", "<i4"),
        ("calib_unit", "<i4"),
        ("transit", "<i4"),
        ("flags", "<u4"),
    ]
)
assert OBS_DTYPE.itemsize == 48


def wrap_alpha(a):
    """Right ascension in ``[0, 2 pi)``; tiny negatives would otherwise round to 2 pi."""
    a = np.mod(a, 2 * np.pi)
    return np.where(a >= 2 * np.pi, 0.0, a)


@dataclass(frozen=True)
class SourceParams:
    alpha: float  # rad
    delta: float  # rad
    parallax: float = 0.0  # mas
    pm_alpha_star: float = 0.0  # mas/yr, includes cos(delta)
    pm_delta: float = 0.0  # mas/yr
    radial_velocity: float = 0.0  # km/s, carried but not fitted
    epoch: float = 0.0  # TAI days

    def __post_init__(self):
        vals = (self.alpha, self.delta, self.parallax, self.pm_alpha_star,
                self.pm_delta, self.radial_velocity, self.epoch)
        if not all(np.isfinite(vals)):
            raise NonFiniteInput("non-finite source parameter")
        if abs(self.delta) > np.pi / 2 + 1e-15:
            raise ValueError("delta outside [-pi/2, pi/2]")
        object.__setattr__(self, "alpha", float(wrap_alpha(self.alpha)))

    def fit_vector(self):
        """``(alpha, delta, parallax, pm_alpha*, pm_delta)`` in rad and rad/yr."""
        return np.array([self.alpha, self.delta, self.parallax * MAS,
                         self.pm_alpha_star * MAS, self.pm_delta * MAS])


class LocalTriad(NamedTuple):
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray


class ObserverState(NamedTuple):
    t: float
    position: np.ndarray  # AU
    velocity: np.ndarray  # km/s


@dataclass(frozen=True)
class Observation:
    source_id: int
    t: float
    fov: int
    calib_unit: int
    abscissa_obs: float = 0.0
    sigma: float = 1.0 * MAS
    transit: int = 0

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ValueError("sigma must be > 0")
        if not np.isfinite(self.abscissa_obs) or not np.isfinite(self.t):
            raise NonFiniteInput("non-finite observation", where=self.source_id)


def observations_to_array(observations):
    out = np.zeros(len(observations), dtype=OBS_DTYPE)
    for i, o in enumerate(observations):
        out[i] = (o.source_id, o.t, o.abscissa_obs, o.sigma, o.fov, o.calib_unit, o.transit, 0)
    return out


# -- catalog ---------------------------------------------------------------


@dataclass
class Catalog:
    """Column-oriented set of sources; angles in rad, parallax/pm in mas(/yr)."""

    source_id: np.ndarray
    alpha: np.ndarray
    delta: np.ndarray
    parallax: np.ndarray
    pmra: np.ndarray
    pmdec: np.ndarray
    rv: np.ndarray
    epoch: np.ndarray
    meta: dict = field(default_factory=dict)

    COLUMNS = ("source_id", "alpha", "delta", "parallax", "pmra", "pmdec", "rv", "epoch")

    def __post_init__(self):
        self.source_id = np.asarray(self.source_id, dtype=np.int64)
        for name in self.COLUMNS[1:]:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def __len__(self):
        return self.source_id.size

    def copy(self):
        return Catalog(*(getattr(self, c).copy() for c in self.COLUMNS), meta=dict(self.meta))

    def subset(self, idx):
        return Catalog(*(getattr(self, c)[idx] for c in self.COLUMNS), meta=dict(self.meta))

    def source(self, i):
        return SourceParams(self.alpha[i], self.delta[i], self.parallax[i], self.pmra[i],
                            self.pmdec[i], self.rv[i], self.epoch[i])

    @classmethod
    def from_sources(cls, sources, ids=None):
        ids = np.arange(len(sources)) if ids is None else ids
        cols = np.array([[s.alpha, s.delta, s.parallax, s.pm_alpha_star, s.pm_delta,
                          s.radial_velocity, s.epoch] for s in sources]).reshape(-1, 7)
        return cls(ids, *cols.T)

    def fit_matrix(self):
        """(N, 5) array of fitted parameters in rad and rad/yr."""
        return np.stack([self.alpha, self.delta, self.parallax * MAS,
                         self.pmra * MAS, self.pmdec * MAS], axis=-1)

    def with_fit_matrix(self, x, rows=None):
        """Copy with the fitted columns of ``rows`` replaced from ``x`` (rad units)."""
        out = self.copy()
        rows = slice(None) if rows is None else rows
        out.alpha[rows] = wrap_alpha(x[:, 0])
        out.delta[rows] = x[:, 1]
        out.parallax[rows] = x[:, 2] / MAS
        out.pmra[rows] = x[:, 3] / MAS
        out.pmdec[rows] = x[:, 4] / MAS
        return out

    def index_of(self, ids):
        """Row positions of ``ids`` (catalog ids are sorted)."""
        pos = np.searchsorted(self.source_id, ids)
        if np.any(pos >= len(self)) or np.any(self.source_id[np.minimum(pos, len(self) - 1)] != ids):
            raise KeyError("unknown source id")
        return pos


def apply_source_step(x, step):
    """Add a step in ``(alpha*, delta, plx, pma*, pmd)`` to fit vectors ``x``.

    The alpha* component is converted with the current cos(delta).
    """
    x = np.array(x, dtype=float, copy=True)
    x[..., 0] = x[..., 0] + step[..., 0] / np.cos(x[..., 1])
    x[..., 1:] = x[..., 1:] + step[..., 1:]
    # keep delta within the domain; crossing a pole flips alpha by pi
    over = np.abs(x[..., 1]) > np.pi / 2
    if np.any(over):
        d = x[..., 1]
        d_new = np.where(d > 0, np.pi - d, -np.pi - d)
        x[..., 1] = np.where(over, d_new, d)
        x[..., 0] = np.where(over, x[..., 0] + np.pi, x[..., 0])
    x[..., 0] = wrap_alpha(x[..., 0])
    return x


# -- geometry --------------------------------------------------------------


def _require_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput(f"non-finite {name}", where=name)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def triad_arrays(alpha, delta):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cd, sd = np.cos(delta), np.sin(delta)
    zero = np.zeros_like(ca * cd)
    p = np.stack([-sa + zero, ca + zero, zero], axis=-1)
    q = np.stack([-sd * ca, -sd * sa, cd + zero], axis=-1)
    r = np.stack([cd * ca, cd * sa, sd + zero], axis=-1)
    return p, q, r


def local_triad(alpha, delta):
    """Local ``(p, q, r)`` frame: increasing alpha, increasing delta, direction."""
    if not -np.pi / 2 <= delta <= np.pi / 2:
        raise ValueError("delta outside [-pi/2, pi/2]")
    return LocalTriad(*triad_arrays(np.float64(alpha), np.float64(delta)))


def _propagate(x, tau, b):
    """Unnormalized propagated direction and the triad; ``x`` in rad units."""
    p, q, r = triad_arrays(x[..., 0], x[..., 1])
    br = _dot(b, r)
    b_perp = b - br[..., None] * r
    m = (
        r
        + (tau * x[..., 3])[..., None] * p
        + (tau * x[..., 4])[..., None] * q
        - x[..., 2][..., None] * b_perp
    )
    return m, (p, q, r, br, b_perp)


def propagate_direction(s, t, obs):
    """Apparent (unaberrated) direction of ``s`` seen from ``obs`` at time ``t``."""
    x = s.fit_vector()
    b = np.asarray(obs.position, dtype=float)
    _require_finite("propagate_direction input", x, b, np.asarray(t, dtype=float))
    tau = (t - s.epoch) / DAYS_PER_YEAR
    m, _ = _propagate(x, tau, b)
    return _unit(m)


def _aberration_terms(u, v, g):
    """``beta_perp``, its norm ``s`` and ``cos s``, ``sin s``, ``sin s / s``."""
    beta = (1.0 + g) * np.asarray(v, dtype=float) / C_KMS
    bp = beta - _dot(u, beta)[..., None] * u
    s = np.linalg.norm(bp, axis=-1)
    return beta, bp, s, np.cos(s), np.sin(s), np.sinc(s / np.pi)


def _aberrate(u, v, g):
    _, bp, _, c, _, k = _aberration_terms(u, v, g)
    return c[..., None] * u + k[..., None] * bp


def apply_aberration(u, v, g=0.0):
    """Aberration with scale ``(1 + g)``; returns a unit vector.

    ``u`` is turned towards the apex by ``|beta_perp| = (1 + g) |v| sin(theta) / c``,
    the first-order deflection, so the shift is exactly linear in ``(1 + g)``.
    """
    u = np.asarray(u, dtype=float)
    _require_finite("apply_aberration input", u, np.asarray(v, dtype=float), np.asarray(g))
    return _aberrate(u, v, g)


# -- vectorised model --------------------------------------------------------


@dataclass
class ObsGeometry:
    """Per-observation quantities that do not depend on any fitted parameter."""

    t: np.ndarray
    rot: np.ndarray  # (N, 3, 3) nominal attitude
    position: np.ndarray  # (N, 3) AU
    velocity: np.ndarray  # (N, 3) km/s
    fov_azimuth: np.ndarray  # (N,)

    def __len__(self):
        return self.t.size

    def take(self, idx):
        return ObsGeometry(self.t[idx], self.rot[idx], self.position[idx],
                           self.velocity[idx], self.fov_azimuth[idx])


def observation_geometry(law, t, fov):
    t = np.asarray(t, dtype=float)
    pos, vel = observer_state(law, t)
    return ObsGeometry(t, nominal_attitude(law, t), pos, vel, law.fov_azimuth(fov))


def wrap_angle(a):
    return np.mod(a + np.pi, 2 * np.pi) - np.pi


def field_angles(x, epoch, geom, g=0.0):
    """Along-scan angle from the FoV centre line and across-scan angle.

    Nominal attitude only: no phase correction and no calibration offset.
    """
    tau = (geom.t - epoch) / DAYS_PER_YEAR
    m, _ = _propagate(x, tau, geom.position)
    ua = _aberrate(_unit(m), geom.velocity, g)
    w = np.einsum("...ij,...j->...i", geom.rot, ua)
    eta = wrap_angle(np.arctan2(w[..., 1], w[..., 0]) - geom.fov_azimuth)
    zeta = np.arcsin(np.clip(w[..., 2], -1.0, 1.0))
    return eta, zeta


class ModelRows(NamedTuple):
    eta: np.ndarray  # predicted abscissa
    d_source: np.ndarray | None  # (N, 5)
    att_index: np.ndarray | None  # (N,) left covering knot
    att_weight: np.ndarray | None  # (N, 2) -d eta / d coeff[j], [j+1] is minus this
    d_global: np.ndarray | None  # (N,)


def model_rows(x, epoch, geom, calib_unit, att, cal, g, partials=False):
    """Predicted abscissae (and optionally partials) for N observations.

    ``x`` holds one fit vector per observation (rad units), ``epoch`` the
    reference epoch of that source.
    """
    tau = (geom.t - epoch) / DAYS_PER_YEAR
    b = geom.position
    m, (p, q, r, br, b_perp) = _propagate(x, tau, b)
    nm = np.linalg.norm(m, axis=-1)
    u = m / nm[..., None]
    beta, bp, s, cs, sn, k = _aberration_terms(u, geom.velocity, g)
    ua = cs[..., None] * u + k[..., None] * bp
    w = np.einsum("...ij,...j->...i", geom.rot, ua)
    az = np.arctan2(w[..., 1], w[..., 0])
    j, hat = att.basis(geom.t)
    phase = hat[..., 0] * att.coeffs[j] + hat[..., 1] * att.coeffs[j + 1]
    eta = wrap_angle(az - geom.fov_azimuth) - phase + cal.offsets[calib_unit]
    if not partials:
        return ModelRows(eta, None, None, None, None)

    rho2 = w[..., 0] ** 2 + w[..., 1] ** 2
    xr, yr = geom.rot[..., 0, :], geom.rot[..., 1, :]
    grad = (w[..., 0, None] * yr - w[..., 1, None] * xr) / rho2[..., None]
    # pull the azimuth gradient back through the aberration rotation;
    # e is the apex direction on the tangent plane, a = grad . d ua / d s
    e = bp / np.where(s > 0, s, 1.0)[..., None]
    a = _dot(grad, -sn[..., None] * u + (cs - k)[..., None] * e)
    ub = _dot(u, beta)
    g2 = (cs[..., None] * grad
          - k[..., None] * (_dot(grad, u)[..., None] * beta + ub[..., None] * grad)
          - (a * ub)[..., None] * e)
    gm = (g2 - _dot(u, g2)[..., None] * u) / nm[..., None]

    cd, sd = np.cos(x[..., 1]), np.sin(x[..., 1])
    plx, pma, pmd = x[..., 2], x[..., 3], x[..., 4]
    bp, bq = _dot(b, p), _dot(b, q)
    dp_da = np.stack([-np.cos(x[..., 0]), -np.sin(x[..., 0]), np.zeros_like(cd)], axis=-1)
    dm_dastar = (
        p
        + (tau * (pma / cd))[..., None] * dp_da
        - (tau * pmd * sd / cd)[..., None] * p
        + plx[..., None] * (bp[..., None] * r + br[..., None] * p)
    )
    dm_ddelta = (
        q
        - (tau * pmd)[..., None] * r
        + plx[..., None] * (bq[..., None] * r + br[..., None] * q)
    )
    d_source = np.stack(
        [
            _dot(gm, dm_dastar),
            _dot(gm, dm_ddelta),
            -_dot(gm, b_perp),
            tau * _dot(gm, p),
            tau * _dot(gm, q),
        ],
        axis=-1,
    )
    vc = geom.velocity / C_KMS
    vp = vc - _dot(u, vc)[..., None] * u
    d_global = k * _dot(grad, vp) + a * _dot(e, vp)
    return ModelRows(eta, d_source, j, -hat, d_global)


# -- single-observation API ---------------------------------------------------


class ObservationPartials(NamedTuple):
    d_source: np.ndarray  # (5,) wrt alpha*, delta, parallax, pm_alpha*, pm_delta (rad units)
    d_attitude: dict  # knot index -> coefficient
    d_calib: dict  # calib unit -> coefficient
    d_global: float


def _single(s, att, cal, glob, meta, law, partials):
    x = s.fit_vector()
    _require_finite("source", x)
    _require_finite("attitude", att.coeffs)
    _require_finite("calibration", cal.offsets)
    _require_finite("global", np.asarray(glob.g))
    if not np.isfinite(meta.t):
        raise NonFiniteInput("non-finite observation time", where=meta.source_id)
    t = np.array([meta.t])
    att.basis(t)  # raises OutOfAttitudeSpan before the scan law is evaluated
    geom = observation_geometry(law, t, np.array([meta.fov]))
    return model_rows(x[None, :], np.array([s.epoch]), geom,
                      np.array([meta.calib_unit]), att, cal, glob.g, partials)


def predict_abscissa(s, att, cal, glob, meta, law):
    """Predicted along-scan field angle (rad) of ``s`` for observation ``meta``."""
    return float(_single(s, att, cal, glob, meta, law, False).eta[0])


def observation_partials(s, att, cal, glob, meta, law):
    rows = _single(s, att, cal, glob, meta, law, True)
    j = int(rows.att_index[0])
    d_att = {j: float(rows.att_weight[0, 0]), j + 1: float(rows.att_weight[0, 1])}
    return ObservationPartials(rows.d_source[0].copy(), d_att, {int(meta.calib_unit): 1.0},
                               float(rows.d_global[0]))

