"""Attitude, calibration and global parameter containers.

These are the non-source blocks of the solution. They live here rather than
in ``agis.solver`` because the measurement model evaluates them too.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteInput, OutOfAttitudeSpan


@dataclass
class AttitudeModel:
    """Phase correction about the spin axis, linear between uniform knots.

    ``coeffs[j]`` is the correction (rad) at ``t_start + j * spacing``. The
    correction enters the abscissa with a negative sign: the true attitude is
    the nominal one rotated by ``+phase`` about the spin axis.
    """

    t_start: float
    spacing: float
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 1 or self.coeffs.size < 2:
            raise ValueError("attitude model needs at least two knots")
        if not self.spacing > 0:
            raise ValueError("knot spacing must be positive")

    @classmethod
    def covering(cls, t_start, t_end, spacing):
        """Zero correction over knots covering ``[t_start, t_end]``."""
        n = int(np.ceil((t_end - t_start) / spacing - 1e-9)) + 1
        return cls(t_start, spacing, np.zeros(max(n, 2)))

    @property
    def n_knots(self):
        return self.coeffs.size

    @property
    def knots(self):
        return self.t_start + self.spacing * np.arange(self.n_knots)

    @property
    def t_end(self):
        return self.t_start + self.spacing * (self.n_knots - 1)

    def basis(self, t):
        """Index of the left covering knot and the two hat-function weights."""
        t = np.asarray(t, dtype=float)
        x = (t - self.t_start) / self.spacing
        last = self.n_knots - 1
        if np.any(x < -1e-9) or np.any(x > last + 1e-9):
            raise OutOfAttitudeSpan(
                f"time outside attitude knot span [{self.t_start}, {self.t_end}]"
            )
        x = np.clip(x, 0.0, float(last))
        j = np.minimum(np.floor(x).astype(np.int64), last - 1)
        f = x - j
        return j, np.stack([1.0 - f, f], axis=-1)

    def evaluate(self, t):
        j, w = self.basis(t)
        return w[..., 0] * self.coeffs[j] + w[..., 1] * self.coeffs[j + 1]

    def copy(self):
        return AttitudeModel(self.t_start, self.spacing, self.coeffs.copy())


@dataclass
class CalibrationTable:
    """Along-scan offset (rad) per calibration unit, zero-mean gauge."""

    offsets: np.ndarray

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)

    @classmethod
    def zeros(cls, n_units):
        return cls(np.zeros(n_units))

    @property
    def n_units(self):
        return self.offsets.size

    def offset(self, unit):
        return self.offsets[np.asarray(unit, dtype=np.int64)]

    def copy(self):
        return CalibrationTable(self.offsets.copy())


@dataclass
class GlobalParams:
    """Deviation ``g`` of the aberration scale from its nominal value (0)."""

    g: float = 0.0

    def __post_init__(self):
        self.g = float(self.g)
        if not np.isfinite(self.g):
            raise NonFiniteInput("global parameter g is not finite", where="GLOBAL")
        if abs(self.g) >= 1.0:
            raise ValueError("|g| must be < 1")

    def copy(self):
        return GlobalParams(self.g)


@dataclass
class NuisanceState:
    """The three non-source blocks evaluated together by the model."""

    attitude: AttitudeModel
    calibration: CalibrationTable
    glob: GlobalParams = field(default_factory=GlobalParams)

    def copy(self):
        return NuisanceState(self.attitude.copy(), self.calibration.copy(), self.glob.copy())
