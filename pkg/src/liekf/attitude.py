"""Attitude kinematics and the two-vector (accelerometer + magnetometer)
measurement model.

The state is a unit quaternion ``q`` rotating body coordinates into world
coordinates; the estimation error is parameterized in the body frame as
``eps = q_hat^-1 * q = exp_map(x / 2)`` with ``x`` a 3-vector in radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quaternion as quat

_UNIT_TOL = 1e-12
# minimum angular separation between the two reference directions
_ALIGNMENT_TOL = 1e-6


def _as_vector(v, size: int, name: str) -> np.ndarray:
    out = np.asarray(v, dtype=float)
    if out.shape != (size,):
        raise ValueError(f"{name} must have shape ({size},), got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite")
    return out


@dataclass(frozen=True)
class ReferenceFields:
    """World-frame gravity and magnetic field directions (unit vectors).

    The defaults put gravity along +z and the magnetic field in the x-z
    plane at 60 degrees inclination.  The two directions must not be
    (anti-)parallel or the attitude is unobservable about their common axis.
    """

    gravity: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    magnetic: np.ndarray = field(
        default_factory=lambda: np.array(
            [0.5, 0.0, -np.sqrt(3.0) / 2.0]))

    def __post_init__(self):
        g = _as_vector(self.gravity, 3, "gravity")
        m = _as_vector(self.magnetic, 3, "magnetic")
        for name, v in (("gravity", g), ("magnetic", m)):
            if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
                raise ValueError(f"{name} reference must be a unit vector")
        if abs(g @ m) >= 1.0 - _ALIGNMENT_TOL:
            raise ValueError("reference directions are (anti-)parallel")
        object.__setattr__(self, "gravity", g)
        object.__setattr__(self, "magnetic", m)

    def rotated(self, gamma: np.ndarray) -> "ReferenceFields":
        """References expressed in a world frame rotated by unit quaternion gamma."""
        return ReferenceFields(
            gravity=quat.rotate_body_to_world(gamma, self.gravity),
            magnetic=quat.rotate_body_to_world(gamma, self.magnetic),
        )


@dataclass(frozen=True)
class ImuSample:
    """One time step of sensor data.

    omega is the rate-gyro reading (rad/s) over the interval leading into
    this step; accel and mag are the normalized accelerometer and
    magnetometer direction readings taken at the end of the interval.
    """

    omega: np.ndarray
    accel: np.ndarray
    mag: np.ndarray
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "omega", _as_vector(self.omega, 3, "omega"))
        object.__setattr__(self, "accel", _as_vector(self.accel, 3, "accel"))
        object.__setattr__(self, "mag", _as_vector(self.mag, 3, "mag"))
        if not self.dt > 0.0:
            raise ValueError("dt must be > 0")

    @property
    def z(self) -> np.ndarray:
        """Stacked 6-vector measurement [accel; mag]."""
        return np.concatenate([self.accel, self.mag])


@dataclass(frozen=True)
class NoiseSpec:
    """Continuous-time sensor noise covariances (all 3x3, symmetric PSD)."""

    sigma_eta: np.ndarray  # rate gyro, (rad/s)^2
    sigma_a: np.ndarray    # accelerometer direction
    sigma_m: np.ndarray    # magnetometer direction

    def __post_init__(self):
        for name in ("sigma_eta", "sigma_a", "sigma_m"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (3, 3):
                raise ValueError(f"{name} must be 3x3")
            if not np.allclose(m, m.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(m)) < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
            object.__setattr__(self, name, m)


def propagate_quaternion(q: np.ndarray, omega: np.ndarray,
                         dt: float) -> np.ndarray:
    """First-order attitude propagation under body rate omega.

    q_next = (I4 + dt/2 * Omega[omega]) q, renormalized.  Exact for the
    direction when omega is constant over the step; the normalization
    absorbs the second-order scalar defect.
    """
    dq = q + (dt / 2.0) * (quat.omega_rate(omega) @ q)
    return dq / np.linalg.norm(dq)


def measure_h(q: np.ndarray, refs: ReferenceFields) -> np.ndarray:
    """Noise-free measurement: both references resolved in the body frame."""
    return np.concatenate([
        quat.rotate_world_to_body(q, refs.gravity),
        quat.rotate_world_to_body(q, refs.magnetic),
    ])


def attitude_from_vectors(z: np.ndarray, refs: ReferenceFields) -> np.ndarray:
    """Single-epoch attitude from one stacked vector measurement.

    Solves the two-vector orthogonal-fit problem (Davenport's eigenvalue
    form): the returned unit quaternion q maximizes agreement between the
    body-frame observations z = [z_a; z_m] and the world references, i.e.
    measure_h(q, refs) is as close to z as a rotation allows.  The sign
    of the quaternion is fixed with a non-negative scalar part.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (6,):
        raise ValueError("z must be a 6-vector")
    B = np.outer(z[:3], refs.gravity) + np.outer(z[3:], refs.magnetic)
    sigma = np.trace(B)
    Z = np.array([B[1, 2] - B[2, 1], B[2, 0] - B[0, 2], B[0, 1] - B[1, 0]])
    K = np.empty((4, 4))
    K[0, 0] = sigma
    K[0, 1:] = Z
    K[1:, 0] = Z
    K[1:, 1:] = B + B.T - sigma * _EYE3
    _, vecs = np.linalg.eigh(K)
    q = vecs[:, -1]
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def jacobian_H(q: np.ndarray, refs: ReferenceFields) -> np.ndarray:
    """Measurement Jacobian (6x3) with respect to the body-frame error x.

    Stacks the cross-product matrices of the predicted body-frame
    reference directions: d h(q exp_map(x/2)) / d x at x = 0.
    """
    H = np.empty((6, 3))
    H[:3] = quat.skew(quat.rotate_world_to_body(q, refs.gravity))
    H[3:] = quat.skew(quat.rotate_world_to_body(q, refs.magnetic))
    return H


_EYE3 = np.eye(3)


def transition_F(omega: np.ndarray, dt: float) -> np.ndarray:
    """Discrete error-state transition I3 - dt * [omega]x."""
    return _EYE3 - dt * quat.skew(omega)


def process_noise_Q(sigma_eta: np.ndarray, dt: float) -> np.ndarray:
    """Discrete error-state process noise dt^2 * sigma_eta."""
    return dt * dt * np.asarray(sigma_eta, dtype=float)


def assemble_R(sigma_a: np.ndarray, sigma_m: np.ndarray) -> np.ndarray:
    """Block-diagonal 6x6 measurement covariance diag(sigma_a, sigma_m)."""
    R = np.zeros((6, 6))
    R[:3, :3] = sigma_a
    R[3:, 3:] = sigma_m
    return R
