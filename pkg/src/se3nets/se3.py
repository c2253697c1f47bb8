"""Rigid-body transform algebra.

Rotations are parameterized by axis-angle vectors ``a`` (direction = axis,
norm = angle in radians). The exponential map is Rodrigues' formula written as

    R = I + A(s) K + B(s) K^2,   K = skew(a),  s = |a|^2,
    A = sin(theta)/theta,  B = (1 - cos(theta))/theta^2,

which avoids dividing by ``theta`` for the axis and evaluates ``A`` and ``B``
by Taylor series close to zero.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _record, as_tensor

SMALL_ANGLE = 1e-8
# Below this angle the derivative coefficients switch to their Taylor series;
# the closed forms lose all precision to cancellation well before SMALL_ANGLE.
SMALL_ANGLE_DERIV = 1e-2


class DomainError(ValueError):
    pass


def skew(v):
    """Cross-product matrices for ``(..., 3)`` vectors."""
    v = np.asarray(v, dtype=np.float64)
    k = np.zeros(v.shape[:-1] + (3, 3))
    k[..., 0, 1] = -v[..., 2]
    k[..., 0, 2] = v[..., 1]
    k[..., 1, 0] = v[..., 2]
    k[..., 1, 2] = -v[..., 0]
    k[..., 2, 0] = -v[..., 1]
    k[..., 2, 1] = v[..., 0]
    return k


def _coefficients(s):
    """A(s), B(s) for squared angles ``s``."""
    theta = np.sqrt(s)
    small = theta < SMALL_ANGLE
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(small, 1.0, theta)
        a = np.sin(safe) / safe
        half = np.sin(0.5 * safe)
        b = 2.0 * half * half / (safe * safe)
    a_taylor = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0
    b_taylor = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0
    return np.where(small, a_taylor, a), np.where(small, b_taylor, b)


def _coefficient_derivatives(s):
    """dA/ds and dB/ds."""
    theta = np.sqrt(s)
    small = theta < SMALL_ANGLE_DERIV
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(small, 1.0, theta)
        da = (t * np.cos(t) - np.sin(t)) / (2.0 * t ** 3)
        db = (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / (2.0 * t ** 4)
    da_taylor = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0 + s ** 3 / 90720.0
    db_taylor = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0 + s ** 3 / 907200.0
    return np.where(small, da_taylor, da), np.where(small, db_taylor, db)


def _check_finite(a):
    if not np.all(np.isfinite(a)):
        raise DomainError("axis-angle input contains non-finite values")


def exp_map(a):
    """Rotation matrices for axis-angle vectors of shape ``(..., 3)``."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1:] != (3,):
        raise DomainError(f"axis-angle vectors must have a trailing axis of 3, got {a.shape}")
    _check_finite(a)
    s = np.einsum("...i,...i->...", a, a)
    ca, cb = _coefficients(s)
    k = skew(a)
    k2 = k @ k
    return np.eye(3) + ca[..., None, None] * k + cb[..., None, None] * k2


_GENERATORS = skew(np.eye(3))  # E_i = skew(e_i), shape (3, 3, 3)


def exp_map_jacobian(a):
    """``dR/da_i`` with shape ``(..., 3, 3, 3)``; the last axis indexes ``i``."""
    a = np.asarray(a, dtype=np.float64)
    s = np.einsum("...i,...i->...", a, a)
    ca, cb = _coefficients(s)
    da, db = _coefficient_derivatives(s)
    k = skew(a)
    k2 = k @ k
    e = _GENERATORS
    ek = np.einsum("iab,...bc->...iac", e, k)
    ke = np.einsum("...ab,ibc->...iac", k, e)
    jac = (ca[..., None, None, None] * e
           + cb[..., None, None, None] * (ek + ke)
           + 2.0 * a[..., :, None, None] * (da[..., None, None, None] * k[..., None, :, :]
                                            + db[..., None, None, None] * k2[..., None, :, :]))
    return np.moveaxis(jac, -3, -1)


def exp_map_t(a):
    """Differentiable exponential map on a Tensor of shape ``(..., 3)``."""
    a = as_tensor(a)
    ad = a.data
    rot = exp_map(ad)

    def bw(g):
        jac = exp_map_jacobian(ad)
        return (np.einsum("...bc,...bci->...i", g, jac),)

    return _record(rot, (a,), bw, "exp_map")


def log_map(rot):
    """Axis-angle vector of a rotation matrix (angle in ``[0, pi]``)."""
    rot = np.asarray(rot, dtype=np.float64)
    cos_t = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    if theta < 1e-6:
        return 0.5 * w  # first order; exp_map round-trips to ~1e-12
    if np.pi - theta < 1e-4:
        # sin(theta) ~ 0: recover the axis from the symmetric part.
        sym = 0.5 * (rot + rot.T) - cos_t * np.eye(3)
        col = int(np.argmax(np.diag(sym)))
        axis = sym[:, col] / np.sqrt(max(sym[col, col], 1e-300))
        if axis @ w < 0:
            axis = -axis
        return axis * theta
    return w * (theta / (2.0 * np.sin(theta)))


def quaternion_to_matrix(q):
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_to_quaternion(a):
    a = np.asarray(a, dtype=np.float64)
    theta = np.linalg.norm(a)
    if theta == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * a / theta])


@dataclass
class RigidTransform:
    """``x -> R x + t`` with ``R`` stored as a 3x3 matrix."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, a, t=(0.0, 0.0, 0.0)):
        return cls(exp_map(a), t)

    @classmethod
    def from_vector(cls, v):
        """From the 6-vector ``(axis-angle, translation)``."""
        v = np.asarray(v, dtype=np.float64)
        return cls.from_axis_angle(v[:3], v[3:])

    def axis_angle(self):
        return log_map(self.rotation)

    def to_vector(self):
        return np.concatenate([self.axis_angle(), self.translation])

    def apply(self, x):
        """Transform points of shape ``(..., 3)``."""
        return apply(self, x)

    def compose(self, other):
        return compose(self, other)

    def inverse(self):
        return invert(self)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def apply(transform, x):
    x = np.asarray(x, dtype=np.float64)
    return x @ transform.rotation.T + transform.translation


def compose(t1, t2):
    """The transform applying ``t2`` first, then ``t1``."""
    return RigidTransform(t1.rotation @ t2.rotation, t1.rotation @ t2.translation + t1.translation)


def invert(transform):
    rt = transform.rotation.T
    return RigidTransform(rt, -rt @ transform.translation)


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
