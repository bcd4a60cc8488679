"""Unit quaternion algebra on plain numpy arrays.

Quaternions are arrays of shape (4,) ordered ``[w, x, y, z]`` (scalar
first).  Rotation vectors live in R^3; ``exp_map`` uses the full-angle
convention ``exp_map(xi) = [cos|xi|, xi sin|xi|/|xi|]``, so the quaternion
describing a rotation by angle ``theta`` about unit axis ``u`` is
``exp_map(theta * u / 2)``.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# below this angle the sin(x)/x series is used to avoid 0/0
_SMALL_ANGLE = 1e-6
# quaternions with smaller norm cannot be safely inverted
_MIN_NORM = 1e-12


def normalize(q: np.ndarray) -> np.ndarray:
    """Rescale to unit norm. Raises ValueError near the zero quaternion."""
    n = np.linalg.norm(q)
    if n < _MIN_NORM:
        raise ValueError("cannot normalize quaternion with norm < 1e-12")
    return q / n


def hamilton(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product p * q."""
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def conjugate(q: np.ndarray) -> np.ndarray:
    """Conjugate [w, -x, -y, -z]."""
    return np.array([q[0], -q[1], -q[2], -q[3]])


def inverse(q: np.ndarray) -> np.ndarray:
    """Multiplicative inverse conj(q) / |q|^2."""
    n2 = float(q @ q)
    if n2 < _MIN_NORM**2:
        raise ValueError("cannot invert quaternion with norm < 1e-12")
    return conjugate(q) / n2


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x with [v]x w = v x w."""
    x, y, z = v
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def xi_matrix(p: np.ndarray) -> np.ndarray:
    """Left-multiplication matrix: xi_matrix(p) @ q == hamilton(p, q)."""
    w, x, y, z = p
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def omega_matrix(q: np.ndarray) -> np.ndarray:
    """Right-multiplication matrix: omega_matrix(q) @ p == hamilton(p, q)."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def omega_rate(omega: np.ndarray) -> np.ndarray:
    """omega_matrix of the pure quaternion [0, omega]; used in propagation."""
    x, y, z = omega
    return np.array([
        [0.0, -x, -y, -z],
        [x, 0.0, z, -y],
        [y, -z, 0.0, x],
        [z, y, -x, 0.0],
    ])


def exp_map(xi: np.ndarray) -> np.ndarray:
    """Exponential map R^3 -> S^3, full-angle convention.

    exp_map(xi) = [cos|xi|, xi sin|xi|/|xi|], with the series
    sin(a)/a = 1 - a^2/6 + ... below the small-angle threshold.
    """
    xi = np.asarray(xi, dtype=float)
    angle = np.linalg.norm(xi)
    if angle < _SMALL_ANGLE:
        s = 1.0 - angle * angle / 6.0
    else:
        s = np.sin(angle) / angle
    q = np.empty(4)
    q[0] = np.cos(angle)
    q[1:] = s * xi
    return q / np.linalg.norm(q)


def log_map(q: np.ndarray) -> np.ndarray:
    """Inverse of exp_map; returns the representative with |result| <= pi.

    Inverts exp_map exactly on the open ball |xi| < pi.  Near the
    antipode (scalar part -1, vanishing vector part) the axis is not
    determined and the zero vector is returned.
    """
    q = np.asarray(q, dtype=float)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < _MIN_NORM:
        return np.zeros(3)
    angle = np.arctan2(s, q[0])
    return v * (angle / s)


def rotate_world_to_body(q: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Resolve the world-frame vector u in the body frame of attitude q.

    The vector part of q^-1 * [0, u] * q, expanded as
    u - w t + v x t with t = 2 (v x u).
    """
    w, vx, vy, vz = q
    ux, uy, uz = u
    tx = 2.0 * (vy * uz - vz * uy)
    ty = 2.0 * (vz * ux - vx * uz)
    tz = 2.0 * (vx * uy - vy * ux)
    return np.array([
        ux - w * tx + vy * tz - vz * ty,
        uy - w * ty + vz * tx - vx * tz,
        uz - w * tz + vx * ty - vy * tx,
    ])


def rotate_body_to_world(q: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse of rotate_world_to_body: vector part of q * [0, u] * q^-1."""
    w, vx, vy, vz = q
    ux, uy, uz = u
    tx = 2.0 * (vy * uz - vz * uy)
    ty = 2.0 * (vz * ux - vx * uz)
    tz = 2.0 * (vx * uy - vy * ux)
    return np.array([
        ux + w * tx + vy * tz - vz * ty,
        uy + w * ty + vz * tx - vx * tz,
        uz + w * tz + vx * ty - vy * tx,
    ])
