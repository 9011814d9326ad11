"""Rigid-body arithmetic on SE(3).

Twists are 6-vectors ordered rotation first, ``[phi1, phi2, phi3, rho1, rho2, rho3]``.
Increments are applied on the left: ``T <- exp(dxi) @ T``.

The ``*_batch`` helpers operate on stacks of twists / rotations and back the
single-value API; they exist so that property suites over many samples stay
vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
# log is refused within this distance of a half turn
PI_MARGIN = 1e-6
ORTHO_TOL = 1e-9


class IllConditionedLogError(ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


def skew(v):
    """Hat operator; accepts (3,) or (..., 3) and returns (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [
            np.stack([z, -w, y], axis=-1),
            np.stack([w, z, -x], axis=-1),
            np.stack([-y, x, z], axis=-1),
        ],
        axis=-2,
    )


def vee(S):
    S = np.asarray(S, dtype=float)
    return np.stack([S[..., 2, 1], S[..., 0, 2], S[..., 1, 0]], axis=-1)


def _exp_coefficients(theta):
    """Return (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) with a Taylor branch."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = t * t
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / (t2 * t))
    return a, b, c


def exp_twist_batch(xi):
    """Exponential of stacked twists (..., 6) -> rotations (..., 3, 3), translations (..., 3)."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(phi, axis=-1)
    a, b, c = _exp_coefficients(theta)
    K = skew(phi)
    K2 = K @ K
    eye = np.eye(3)
    R = eye + a[..., None, None] * K + b[..., None, None] * K2
    V = eye + b[..., None, None] * K + c[..., None, None] * K2
    t = np.einsum("...ij,...j->...i", V, rho)
    return R, t


def log_batch(R, t):
    """Inverse of :func:`exp_twist_batch`. Raises near the half-turn cut."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    w = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    s = np.linalg.norm(w, axis=-1)
    cos = np.clip(0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    theta = np.arctan2(s, cos)
    if np.any(theta > np.pi - PI_MARGIN):
        raise IllConditionedLogError(
            f"ill-conditioned logarithm: rotation angle {float(np.max(theta))!r} too close to pi"
        )
    small = theta < SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / safe_s)
    phi = scale[..., None] * w

    K = skew(phi)
    th = np.where(small, 1.0, theta)
    # coefficient of K^2 in V^-1; limit 1/12 at zero
    d = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        (1.0 - th * np.sin(th) / (2.0 * (1.0 - np.cos(th)))) / (th * th),
    )
    Vinv = np.eye(3) - 0.5 * K + d[..., None, None] * (K @ K)
    rho = np.einsum("...ij,...j->...i", Vinv, t)
    return np.concatenate([phi, rho], axis=-1)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation ``R`` and translation ``t`` acting as ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("rigid transform has non-finite entries")
        if np.linalg.norm(R.T @ R - np.eye(3)) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        if M.shape != (4, 4) or not np.array_equal(M[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("expected a 4x4 homogeneous matrix with bottom row (0, 0, 0, 1)")
        return cls(M[:3, :3], M[:3, 3])

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        return compose(self, other)

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def exp_twist(xi):
    """Map a twist to the rigid transform ``exp(xi^)``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("twist has non-finite entries")
    R, t = exp_twist_batch(xi)
    return RigidTransform(R, t)


def log_transform(T):
    """Twist whose exponential reproduces ``T``."""
    return log_batch(T.rotation, T.translation)


def compose(A, B):
    """``A after B``: the returned transform maps x to A(B(x))."""
    return RigidTransform(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def apply_transform(T, points):
    """Apply ``T`` to an (N, 3) cloud (or a single point), preserving order."""
    P = np.asarray(points, dtype=float)
    return P @ T.rotation.T + T.translation


def point_twist_jacobian(T, p):
    """d(R p + t)/d xi under a left perturbation, shape (3, 6) or (N, 3, 6) for stacked points.

    The rotation block is ``-[R p + t]x`` and the translation block is the identity.
    """
    y = apply_transform(T, p)
    J = np.zeros(y.shape[:-1] + (3, 6))
    J[..., :3] = -skew(y)
    J[..., 3:] = np.eye(3)
    return J
