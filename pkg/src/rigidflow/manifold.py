"""Numerics on the product manifold T^2 x SO(3).

Rotations are plain ``(..., 3, 3)`` float64 arrays and axis-angle vectors are
``(..., 3)`` arrays; every function broadcasts over leading batch axes. The
angular-velocity convention is the space frame, ``dR/dt = hat(omega) @ R``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoxMismatch, NotSkew

# below this angle the Rodrigues coefficients switch to their Taylor expansion
THETA_SMALL = 1e-4
# cos(theta) below this uses axis extraction from the symmetric part (theta > ~3.0)
_COS_NEAR_PI = -0.99


def hat(v):
    """Cross-product matrix: ``hat(v) @ w == np.cross(v, w)``."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def vee(M, tol: float = 1e-8):
    """Inverse of :func:`hat`. Raises NotSkew if ``M`` is not antisymmetric."""
    M = np.asarray(M, dtype=np.float64)
    sym = M + np.swapaxes(M, -1, -2)
    if np.any(np.abs(sym) > tol):
        raise NotSkew(f"matrix is not skew-symmetric (max |M + M^T| = {np.abs(sym).max():.3e})")
    return _vee_unchecked(M)


def _vee_unchecked(M):
    # antisymmetrized read-out, valid for any square matrix
    return 0.5 * np.stack(
        [M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0], M[..., 1, 0] - M[..., 0, 1]],
        axis=-1,
    )


def exp_so3(v):
    """Rodrigues exponential of an axis-angle vector."""
    v = np.asarray(v, dtype=np.float64)
    theta2 = np.sum(v * v, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < THETA_SMALL
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def log_so3(R):
    """Principal logarithm, returned as an axis-angle vector with norm <= pi."""
    R = np.asarray(R, dtype=np.float64)
    w = _vee_unchecked(R)  # sin(theta) * axis
    sin_t = np.linalg.norm(w, axis=-1)
    cos_t = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    theta = np.arctan2(sin_t, cos_t)

    small = theta < THETA_SMALL
    near_pi = cos_t < _COS_NEAR_PI
    safe_sin = np.where(small | near_pi, 1.0, sin_t)
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / safe_sin)
    out = scale[..., None] * w

    if np.any(near_pi):
        # (R + R^T)/2 - cos(theta) I = (1 - cos(theta)) n n^T
        B = 0.5 * (R + np.swapaxes(R, -1, -2)) - cos_t[..., None, None] * np.eye(3)
        diag = np.diagonal(B, axis1=-2, axis2=-1)
        k = np.argmax(diag, axis=-1)
        col = np.take_along_axis(B, k[..., None, None], axis=-1)[..., 0]
        n = col / np.linalg.norm(col, axis=-1, keepdims=True)
        sign = np.where(np.sum(n * w, axis=-1) < 0.0, -1.0, 1.0)
        axis_branch = (sign * theta)[..., None] * n
        out = np.where(near_pi[..., None], axis_branch, out)
    return out


def geodesic(R0, R1, t):
    """Constant-speed path ``exp(t log(R1 R0^T)) R0``."""
    R0 = np.asarray(R0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    omega = rotation_target(R0, R1)
    return exp_so3(t[..., None] * omega) @ R0


def rotation_target(R0, R1):
    """Space-frame angular velocity carrying R0 (at t=0) to R1 (at t=1)."""
    R0 = np.asarray(R0, dtype=np.float64)
    R1 = np.asarray(R1, dtype=np.float64)
    return log_so3(R1 @ np.swapaxes(R0, -1, -2))


def geodesic_angle(R0, R1):
    return np.linalg.norm(rotation_target(R0, R1), axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def sample_rotation(rng: np.random.Generator, size=None):
    """Haar-uniform rotation(s) from normalized Gaussian quaternions."""
    shape = (4,) if size is None else tuple(np.atleast_1d(size)) + (4,)
    q = rng.standard_normal(shape)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return quat_to_matrix(q)


def rotation_error(R):
    """Frobenius deviation from orthonormality and |det - 1|."""
    R = np.asarray(R, dtype=np.float64)
    ortho = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - np.eye(3), axis=(-2, -1))
    return ortho, np.abs(np.linalg.det(R) - 1.0)


def is_rotation(R, tol: float = 1e-9) -> bool:
    ortho, det = rotation_error(R)
    return bool(np.all(ortho < tol) and np.all(det < tol))


def project_to_so3(R):
    """Nearest rotation in Frobenius norm (symmetric polar factor)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(U.shape[:-1])
    D[..., -1] = d
    return (U * D[..., None, :]) @ Vt


def rot_x(angle):
    return exp_so3(np.array([angle, 0.0, 0.0]))


def rot_z(angle):
    return exp_so3(np.array([0.0, 0.0, angle]))


# ---------------------------------------------------------------- torus


@dataclass(frozen=True)
class TorusPoint:
    t: np.ndarray
    box: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))
        object.__setattr__(self, "box", np.asarray(self.box, dtype=np.float64))


def wrap(p, box):
    """Component-wise ``p mod L`` in ``[0, L)``.

    Tiny negative inputs whose float modulus rounds up to ``L`` map to 0.0.
    """
    box = np.asarray(box, dtype=np.float64)
    out = np.mod(np.asarray(p, dtype=np.float64), box)
    return np.where(out >= box, out - box, out)


def min_image(d, box):
    """Minimal-image representative of a displacement, in ``[-L/2, L/2)``."""
    box = np.asarray(box, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    out = d - box * np.floor(d / box + 0.5)
    out = np.where(out >= 0.5 * box, out - box, out)
    return np.where(out < -0.5 * box, out + box, out)


def torus_wrap(p, box) -> TorusPoint:
    return TorusPoint(wrap(p, box), np.asarray(box, dtype=np.float64))


def torus_displacement(a: TorusPoint, b: TorusPoint):
    """Shortest periodic displacement from ``a`` to ``b``."""
    if a.box.shape != b.box.shape or not np.array_equal(a.box, b.box):
        raise BoxMismatch(f"boxes differ: {a.box} vs {b.box}")
    return min_image(b.t - a.t, a.box)
