"""Alignment of the solution to a reference frame defined by anchor sources.

A self-calibrated solution is only determined up to a small rigid rotation
``eps`` and a spin ``omega`` (rotation rate of the proper-motion system).
With ``d r = eps x r`` the components on the local triad are
``d alpha* = q . eps`` and ``d delta = -p . eps``; the same relation links
``omega`` to proper-motion differences.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ..constants import DAYS_PER_YEAR, MAS
from ..core import triad_arrays, wrap_alpha, wrap_angle
from ..errors import DegenerateAnchors
from ..scanlaw import spin_axis

# singular-value ratio below which anchor directions count as collinear
_COLLINEAR_TOL = 1e-6


@dataclass
class FrameRotation:
    orientation: np.ndarray  # eps, rad
    spin: np.ndarray  # omega, rad/yr


def _design(alpha, delta):
    p, q, _ = triad_arrays(alpha, delta)
    return np.concatenate([q, -p], axis=0)


def estimate_rotation(solved, reference):
    """Least-squares ``(eps, omega)`` taking ``reference`` onto ``solved``.

    Both arguments are catalogs with the same sources in the same order.
    """
    n = len(reference)
    if n < 3:
        raise DegenerateAnchors(f"{n} anchors; at least 3 non-collinear needed")
    _, _, r = triad_arrays(reference.alpha, reference.delta)
    sv = np.linalg.svd(r, compute_uv=False)
    if sv[1] < _COLLINEAR_TOL * sv[0]:
        raise DegenerateAnchors("anchor directions are collinear")
    a = _design(reference.alpha, reference.delta)
    cd = np.cos(reference.delta)
    d_pos = np.concatenate([wrap_angle(solved.alpha - reference.alpha) * cd,
                            solved.delta - reference.delta])
    d_pm = np.concatenate([solved.pmra - reference.pmra, solved.pmdec - reference.pmdec]) * MAS
    eps = np.linalg.lstsq(a, d_pos, rcond=None)[0]
    omega = np.linalg.lstsq(a, d_pm, rcond=None)[0]
    return FrameRotation(eps, omega)


def rotate_catalog(cat, rot: FrameRotation):
    """Remove ``rot`` from every source: positions and proper motions."""
    out = cat.copy()
    undo = Rotation.from_rotvec(-rot.orientation).as_matrix()
    p, q, r = triad_arrays(cat.alpha, cat.delta)
    pm = (cat.pmra * MAS)[:, None] * p + (cat.pmdec * MAS)[:, None] * q
    r_new = r @ undo.T
    pm_new = pm @ undo.T - np.cross(rot.spin, r_new)
    out.alpha = wrap_alpha(np.arctan2(r_new[:, 1], r_new[:, 0]))
    out.delta = np.arcsin(np.clip(r_new[:, 2], -1.0, 1.0))
    p2, q2, _ = triad_arrays(out.alpha, out.delta)
    out.pmra = np.einsum("ij,ij->i", pm_new, p2) / MAS
    out.pmdec = np.einsum("ij,ij->i", pm_new, q2) / MAS
    return out


def rotate_attitude(att, rot: FrameRotation, law, epoch):
    """Phase correction compensating the removed rotation at every knot."""
    out = att.copy()
    t = att.knots
    z = spin_axis(law, t)
    tau = (t - epoch) / DAYS_PER_YEAR
    angle = rot.orientation[None, :] + tau[:, None] * rot.spin[None, :]
    out.coeffs = out.coeffs - np.einsum("ij,ij->i", angle, z)
    return out


def frame_align(catalog, attitude, anchors, law, iterations=2):
    """Align ``catalog`` to ``anchors`` and compensate the attitude.

    ``anchors`` is a catalog of reference values for a subset of sources.
    Returns ``(catalog', attitude', FrameRotation)`` with the total rotation
    removed.
    """
    rows = catalog.index_of(anchors.source_id)
    epoch = float(anchors.epoch[0]) if len(anchors) else 0.0
    total_eps = np.zeros(3)
    total_spin = np.zeros(3)
    for _ in range(iterations):
        rot = estimate_rotation(catalog.subset(rows), anchors)
        catalog = rotate_catalog(catalog, rot)
        attitude = rotate_attitude(attitude, rot, law, epoch)
        total_eps += rot.orientation
        total_spin += rot.spin
    return catalog, attitude, FrameRotation(total_eps, total_spin)
