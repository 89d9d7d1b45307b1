"""Partial normal equations for the attitude, calibration and global blocks.

Every accumulation is a strictly sequential sum in observation order
(``np.add.at`` semantics), so accumulating a batch gives bitwise the same
result as adding its single-observation accumulators one after the other,
and summing per-batch accumulators in a fixed order is reproducible.
"""

import enum
from dataclasses import dataclass

import numpy as np

from ..errors import FiniteCheckFailed


class BlockKind(enum.IntEnum):
    ATTITUDE = 0
    CALIBRATION = 1
    GLOBAL = 2


@dataclass
class PartialNormalEquations:
    """Accumulated ``A^T W A`` and ``A^T W r`` of one block.

    The attitude matrix is tridiagonal and stored in LAPACK upper band form:
    ``matrix[1]`` is the diagonal and ``matrix[0, 1:]`` the superdiagonal.
    The other blocks store a dense square matrix.
    """

    block_kind: BlockKind
    n: int
    matrix: np.ndarray
    rhs: np.ndarray
    n_obs: int = 0

    @classmethod
    def zeros(cls, kind, n):
        kind = BlockKind(kind)
        shape = (2, n) if kind == BlockKind.ATTITUDE else (n, n)
        return cls(kind, n, np.zeros(shape), np.zeros(n), 0)

    def __add__(self, other):
        if self.block_kind != other.block_kind or self.n != other.n:
            raise ValueError("cannot add partial normal equations of different blocks")
        return PartialNormalEquations(self.block_kind, self.n, self.matrix + other.matrix,
                                      self.rhs + other.rhs, self.n_obs + other.n_obs)

    def dense(self):
        if self.block_kind != BlockKind.ATTITUDE:
            return self.matrix.copy()
        m = np.diag(self.matrix[1])
        off = self.matrix[0, 1:]
        m[np.arange(self.n - 1), np.arange(1, self.n)] = off
        m[np.arange(1, self.n), np.arange(self.n - 1)] = off
        return m

    def check_finite(self, job_id=None):
        for label, arr in (("matrix", self.matrix), ("rhs", self.rhs)):
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise FiniteCheckFailed(
                    f"non-finite {label} entry {int(bad[0])} in {self.block_kind.name} block"
                    + (f" of job {job_id}" if job_id is not None else ""),
                    block=self.block_kind.name, index=int(bad[0]), job_id=job_id,
                )

    def identical(self, other):
        return (self.block_kind == other.block_kind and self.n == other.n
                and self.n_obs == other.n_obs
                and np.array_equal(self.matrix, other.matrix)
                and np.array_equal(self.rhs, other.rhs))


@dataclass
class CrossTerms:
    """Off-diagonal couplings ``A_x^T W A_y`` between the nuisance blocks.

    They let the calibration and global updates see the attitude (and
    calibration) steps taken earlier in the same outer iteration without
    another pass over the observations.
    """

    att_cal: np.ndarray  # (n_knots, n_units)
    att_glob: np.ndarray  # (n_knots,)
    cal_glob: np.ndarray  # (n_units,)

    @classmethod
    def zeros(cls, n_knots, n_units):
        return cls(np.zeros((n_knots, n_units)), np.zeros(n_knots), np.zeros(n_units))

    def __iter__(self):
        return iter((("ATT_CAL", self.att_cal), ("ATT_GLOB", self.att_glob),
                     ("CAL_GLOB", self.cal_glob)))

    def __add__(self, other):
        return CrossTerms(self.att_cal + other.att_cal, self.att_glob + other.att_glob,
                          self.cal_glob + other.cal_glob)

    def check_finite(self, job_id=None):
        for label, arr in self:
            bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
            if bad.size:
                raise FiniteCheckFailed(
                    f"non-finite entry {int(bad[0])} in {label} coupling"
                    + (f" of job {job_id}" if job_id is not None else ""),
                    block=label, index=int(bad[0]), job_id=job_id,
                )

    def identical(self, other):
        return all(np.array_equal(a, b) for (_, a), (_, b) in zip(self, other))


@dataclass
class BlockPartials:
    attitude: PartialNormalEquations
    calibration: PartialNormalEquations
    glob: PartialNormalEquations
    cross: CrossTerms

    @classmethod
    def zeros(cls, n_knots, n_units):
        return cls(PartialNormalEquations.zeros(BlockKind.ATTITUDE, n_knots),
                   PartialNormalEquations.zeros(BlockKind.CALIBRATION, n_units),
                   PartialNormalEquations.zeros(BlockKind.GLOBAL, 1),
                   CrossTerms.zeros(n_knots, n_units))

    def __iter__(self):
        return iter((self.attitude, self.calibration, self.glob))

    def __add__(self, other):
        return BlockPartials(self.attitude + other.attitude,
                             self.calibration + other.calibration,
                             self.glob + other.glob, self.cross + other.cross)

    def check_finite(self, job_id=None):
        for p in self:
            p.check_finite(job_id)
        self.cross.check_finite(job_id)

    def identical(self, other):
        return all(a.identical(b) for a, b in zip(self, other)) and self.cross.identical(other.cross)


def accumulate_rows(acc, rows, residual, weight, calib_unit):
    """Add observation rows into ``acc`` in place, in row order.

    ``rows`` carries the attitude weights (``-hat``), the global partial and
    (implicitly) a unit calibration partial.
    """
    n = residual.size
    if n == 0:
        return acc
    j = rows.att_index
    a = rows.att_weight
    wa = weight[:, None] * a
    # interleave the two covering knots so additions follow observation order
    idx = np.stack([j, j + 1], axis=1).ravel()
    np.add.at(acc.attitude.matrix[1], idx, (wa * a).ravel())
    np.add.at(acc.attitude.matrix[0], j + 1, wa[:, 0] * a[:, 1])
    np.add.at(acc.attitude.rhs, idx, (wa * residual[:, None]).ravel())
    acc.attitude.n_obs += n

    diag = acc.calibration.matrix.reshape(-1)
    units = np.asarray(calib_unit, dtype=np.int64)
    np.add.at(diag, units * (acc.calibration.n + 1), weight * 1.0 * 1.0)
    np.add.at(acc.calibration.rhs, units, weight * 1.0 * residual)
    acc.calibration.n_obs += n

    dg = rows.d_global
    zero = np.zeros(n, dtype=np.int64)
    wg = weight * dg
    np.add.at(acc.glob.matrix.reshape(-1), zero, wg * dg)
    np.add.at(acc.glob.rhs, zero, wg * residual)
    acc.glob.n_obs += n

    cross = acc.cross
    cal_idx = np.stack([j * cross.att_cal.shape[1] + units,
                        (j + 1) * cross.att_cal.shape[1] + units], axis=1).ravel()
    np.add.at(cross.att_cal.reshape(-1), cal_idx, wa.ravel())
    np.add.at(cross.att_glob, idx, (wa * dg[:, None]).ravel())
    np.add.at(cross.cal_glob, units, wg)
    return acc


def sum_partials(parts, n_knots, n_units):
    """Sequential sum of block partials in the given (canonical) order."""
    total = BlockPartials.zeros(n_knots, n_units)
    for p in parts:
        total = total + p
    return total
