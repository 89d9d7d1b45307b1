"""Nominal scanning law and observer ephemeris.

The satellite sits on a circular heliocentric orbit (radius 1.01 AU, one
revolution per Julian year) in the x-y plane of the celestial frame. Its spin
axis keeps a fixed solar aspect angle to the Sun and precesses around the
Sun direction; the instrument spins about that axis. All functions accept
scalar or array times (TAI days) and broadcast.

Frame conventions
-----------------
``nominal_attitude`` returns ``R`` with rows ``(x, y, z)`` in celestial
coordinates, so ``w = R @ u`` gives instrument coordinates of a celestial
direction ``u``. ``z`` is the spin axis. ``x`` is obtained by rotating the
projection of the celestial pole ``k = (0, 0, 1)`` onto the scan plane by the
spin phase ``psi`` about ``z``. Azimuth ``atan2(w_y, w_x)`` of a fixed source
decreases as the instrument spins. The preceding field of view points at
azimuth ``+basic_angle/2``, the following one at ``-basic_angle/2``.

At ``mission_start`` with zero initial phases the Sun is seen along
``(-1, 0, 0)``, the spin axis is ``(-cos xi, 0, sin xi)`` and ``x`` is the
pole projection; this is the reference frame of phase 0.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .constants import AU_KM, DAYS_PER_YEAR, SECONDS_PER_DAY
from .errors import ConfigError, OutOfMissionSpan

PRECEDING = 0
FOLLOWING = 1

_POLE = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ScanLaw:
    spin_rate: float = 2.0 * np.pi * 4.0  # rad/day, 6 h spin period
    precession_rate: float = 2.0 * np.pi / 63.12  # rad/day
    solar_aspect: float = np.deg2rad(45.0)
    basic_angle: float = np.deg2rad(106.5)
    mission_start: float = 0.0
    mission_end: float = 5.0 * DAYS_PER_YEAR
    # half width of the across-scan acceptance band; sets the transit count
    across_scan_halfwidth: float = 0.0055
    orbit_radius: float = 1.01  # AU
    n_phase_buckets: int = 8
    spin_phase0: float = 0.0
    precession_phase0: float = 0.0
    orbit_phase0: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.basic_angle < np.pi:
            raise ConfigError("basic_angle must lie in (0, pi)")
        if not self.mission_end > self.mission_start:
            raise ConfigError("mission_end must be after mission_start")
        if self.spin_rate <= 0 or self.across_scan_halfwidth <= 0:
            raise ConfigError("spin_rate and across_scan_halfwidth must be positive")
        if self.n_phase_buckets < 1:
            raise ConfigError("n_phase_buckets must be >= 1")

    @property
    def spin_period(self):
        return 2.0 * np.pi / self.spin_rate

    @property
    def n_calib_units(self):
        return 2 * self.n_phase_buckets

    def fov_azimuth(self, fov):
        """Azimuth of the FoV centre line (+Gamma/2 preceding, -Gamma/2 following)."""
        return np.where(np.asarray(fov) == PRECEDING, 0.5, -0.5) * self.basic_angle

    def to_dict(self):
        return {k: float(v) if not isinstance(v, int) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _check_span(law, t):
    t = np.asarray(t, dtype=float)
    eps = 1e-9
    if np.any(t < law.mission_start - eps) or np.any(t > law.mission_end + eps):
        raise OutOfMissionSpan(
            f"time outside mission span [{law.mission_start}, {law.mission_end}]"
        )
    return t


def observer_state(law, t):
    """Barycentric-like observer position (AU) and velocity (km/s) at ``t``."""
    t = np.asarray(t, dtype=float)
    n = 2.0 * np.pi / DAYS_PER_YEAR
    lam = law.orbit_phase0 + n * (t - law.mission_start)
    c, s = np.cos(lam), np.sin(lam)
    z = np.zeros_like(lam)
    pos = law.orbit_radius * np.stack([c, s, z], axis=-1)
    speed = law.orbit_radius * AU_KM * n / SECONDS_PER_DAY
    vel = speed * np.stack([-s, c, z], axis=-1)
    return pos, vel


def spin_axis(law, t):
    t = np.asarray(t, dtype=float)
    pos, _ = observer_state(law, t)
    sun = -pos / np.linalg.norm(pos, axis=-1, keepdims=True)
    sxk = np.cross(sun, _POLE)
    nu = law.precession_phase0 + law.precession_rate * (t - law.mission_start)
    cx, sx = np.cos(law.solar_aspect), np.sin(law.solar_aspect)
    return (
        cx * sun
        + sx * np.cos(nu)[..., None] * _POLE
        + sx * np.sin(nu)[..., None] * sxk
    )


def spin_phase(law, t):
    t = np.asarray(t, dtype=float)
    return law.spin_phase0 + law.spin_rate * (t - law.mission_start)


def phase_bucket(law, t):
    frac = np.mod(spin_phase(law, t) / (2.0 * np.pi), 1.0)
    return np.minimum((frac * law.n_phase_buckets).astype(np.int64), law.n_phase_buckets - 1)


def calib_unit_for(law, fov, t):
    """Calibration unit index: ``fov * n_phase_buckets + spin-phase bucket``."""
    return np.asarray(fov, dtype=np.int64) * law.n_phase_buckets + phase_bucket(law, t)


def frame_from_axis(z, psi):
    """Instrument rows ``(x, y, z)`` for spin axis ``z`` and spin phase ``psi``."""
    z = np.asarray(z, dtype=float)
    x0 = _POLE - (z @ _POLE)[..., None] * z
    x0 = x0 / np.linalg.norm(x0, axis=-1, keepdims=True)
    y0 = np.cross(z, x0)
    c, s = np.cos(psi)[..., None], np.sin(psi)[..., None]
    x = c * x0 + s * y0
    y = -s * x0 + c * y0
    return np.stack([x, y, z], axis=-2)


def nominal_attitude(law, t, check=True):
    """Rotation matrix (celestial -> instrument) of the nominal scan law."""
    t = _check_span(law, t) if check else np.asarray(t, dtype=float)
    return frame_from_axis(spin_axis(law, t), spin_phase(law, t))
