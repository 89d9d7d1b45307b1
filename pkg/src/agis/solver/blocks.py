"""Attitude, calibration and global block updates from merged partials."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded

from ..errors import SingularBlock
from .normal import BlockKind

DAMPING_REL = 1e-12
DAMPING_RETRIES = 2


@dataclass
class AttitudeStep:
    delta: np.ndarray
    damping: float
    unconstrained: np.ndarray  # knot indices without any observation


def attitude_update(p, damping=DAMPING_REL):
    """Solve ``(N + lambda I) d = rhs`` for the tridiagonal attitude block.

    ``lambda`` starts at ``damping * trace(N)`` and grows x10 on each
    Cholesky failure, at most twice.
    """
    if p.block_kind != BlockKind.ATTITUDE:
        raise ValueError("attitude_update needs an ATTITUDE block")
    p.check_finite()
    diag = p.matrix[1]
    unconstrained = np.flatnonzero(diag == 0.0)
    trace = float(np.sum(diag))
    lam = damping * trace if trace > 0 else 1.0
    for attempt in range(DAMPING_RETRIES + 1):
        ab = p.matrix.copy()
        ab[1] += lam
        try:
            c = cholesky_banded(ab, lower=False, check_finite=False)
        except LinAlgError:
            lam *= 10.0
            continue
        delta = cho_solve_banded((c, False), p.rhs, check_finite=False)
        delta[unconstrained] = 0.0
        return AttitudeStep(delta, lam, unconstrained)
    raise SingularBlock(f"attitude Cholesky failed with damping up to {lam / 10.0:.3g}")


@dataclass
class CalibrationStep:
    delta: np.ndarray
    empty_units: np.ndarray


def calibration_update(p, allow_empty=True):
    """Per-unit solve of the diagonal calibration block, then zero-mean gauge."""
    if p.block_kind != BlockKind.CALIBRATION:
        raise ValueError("calibration_update needs a CALIBRATION block")
    p.check_finite()
    diag = np.diagonal(p.matrix).copy()
    empty = np.flatnonzero(diag <= 0.0)
    if empty.size and not allow_empty:
        raise SingularBlock(f"calibration units without observations: {empty.tolist()}")
    delta = np.zeros(p.n)
    full = diag > 0.0
    delta[full] = p.rhs[full] / diag[full]
    delta -= delta.mean()
    return CalibrationStep(delta, empty)


def global_update(p):
    if p.block_kind != BlockKind.GLOBAL:
        raise ValueError("global_update needs a GLOBAL block")
    p.check_finite()
    m = float(p.matrix[0, 0])
    if not m > 0.0:
        raise SingularBlock("global block has no information")
    return float(p.rhs[0]) / m
