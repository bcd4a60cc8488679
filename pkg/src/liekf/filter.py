"""Left-invariant extended Kalman filter on the unit quaternion group.

The attitude estimate is propagated with the rate gyro and corrected with
the two-vector measurement; the 3-dimensional error state
``x = 2 log_map(q_hat^-1 * q)`` lives in the body frame.  After every
update the error mean is injected into the quaternion
(``q_hat <- q_hat * exp_map(x_post / 2)``) and reset to zero, so stored
priors are identically zero and posteriors hold the correction that was
injected at that step.  The covariance recursion is unaffected by the
reset.

``run_linear_window`` runs the same gain and covariance arithmetic on an
ordinary linear-Gaussian system (no injection, no reset); it exists so the
window machinery can be validated against textbook filters and feeds the
linear EM surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import quaternion as quat
from .attitude import ImuSample, ReferenceFields, jacobian_H, measure_h, \
    propagate_quaternion, transition_F
from .exceptions import NumericalError

# innovation covariances beyond this condition number abort the run
MAX_CONDITION = 1e12

_SYM_TOL = 1e-12
_EYE3 = np.eye(3)
_EIG_TOL = -1e-12
_R_MIN_EIG = 1e-15


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _check_covariance(M, shape: tuple, name: str,
                      min_eig: float) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {M.shape}")
    if np.max(np.abs(M - M.T)) > _SYM_TOL * max(1.0, np.max(np.abs(M))):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) < min_eig:
        raise ValueError(f"{name} eigenvalues must be >= {min_eig}")
    return _symmetrize(M)


@dataclass(frozen=True)
class FilterParams:
    """Fixed process and measurement noise covariances (Q 3x3, R 6x6).

    R must be strictly positive definite (eigenvalues >= 1e-15) so the
    innovation covariance stays invertible.
    """

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "Q", _check_covariance(self.Q, (3, 3), "Q", _EIG_TOL))
        object.__setattr__(
            self, "R", _check_covariance(self.R, (6, 6), "R", _R_MIN_EIG))


class FilterState(NamedTuple):
    """Attitude estimate and error covariance after a step."""

    q: np.ndarray  # unit quaternion [w, x, y, z]
    P: np.ndarray  # 3x3 error covariance

    @classmethod
    def create(cls, q, P) -> "FilterState":
        """Validating constructor for API boundaries."""
        q = np.asarray(q, dtype=float)
        if q.shape != (4,):
            raise ValueError(f"q must have shape (4,), got {q.shape}")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("q must be a unit quaternion")
        P = _check_covariance(np.asarray(P, dtype=float), (3, 3), "P",
                              _EIG_TOL)
        return cls(q / np.linalg.norm(q), P)


@dataclass(slots=True)
class StepRecord:
    """Everything the smoother and EM need about one filter step."""

    x_prior: np.ndarray   # predicted error mean (zero under reset)
    x_post: np.ndarray    # corrected error mean
    P_prior: np.ndarray
    P_post: np.ndarray
    F: np.ndarray         # transition from the previous step into this one
    H: np.ndarray
    K: np.ndarray
    innovation: np.ndarray
    z: np.ndarray
    q_prior: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())
    q_post: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())


@dataclass
class WindowBuffer:
    """Initial state plus per-step records of one filter pass.

    initial_mean is the error mean at step 0 (always zero for attitude
    windows by the reset convention; arbitrary for linear windows).
    """

    initial_state: FilterState
    records: list
    initial_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __len__(self) -> int:
        return len(self.records)


class UpdateInfo(NamedTuple):
    """Fragment of a StepRecord produced by a single update."""

    x_post: np.ndarray
    H: np.ndarray
    K: np.ndarray
    innovation: np.ndarray


def _kalman_gain(P_prior: np.ndarray, H: np.ndarray,
                 R: np.ndarray) -> np.ndarray:
    """Gain K = P- H^T S^-1 via Cholesky of the innovation covariance."""
    HP = H @ P_prior
    S = _symmetrize(HP @ H.T + R)
    eigs = np.linalg.eigvalsh(S)
    if eigs[0] <= 0.0 or eigs[-1] >= MAX_CONDITION * eigs[0]:
        raise NumericalError(
            "innovation covariance is singular or ill-conditioned "
            f"(eigenvalue range [{eigs[0]:.3e}, {eigs[-1]:.3e}])")
    return cho_solve(cho_factor(S, lower=True, check_finite=False), HP,
                     check_finite=False).T


def _posterior_cov(P_prior: np.ndarray, K: np.ndarray,
                   H: np.ndarray) -> np.ndarray:
    eye = _EYE3 if P_prior.shape[0] == 3 else np.eye(P_prior.shape[0])
    return _symmetrize((eye - K @ H) @ P_prior)


def predict(state: FilterState, omega: np.ndarray, dt: float,
            params: FilterParams):
    """Propagate attitude and covariance through one gyro interval.

    Returns ``(q_prior, P_prior, F)`` where F is the error transition for
    the interval.
    """
    F = transition_F(omega, dt)
    q_prior = propagate_quaternion(state.q, omega, dt)
    P_prior = _symmetrize(F @ state.P @ F.T + params.Q)
    return q_prior, P_prior, F


def update(q_prior: np.ndarray, P_prior: np.ndarray, z: np.ndarray,
           refs: ReferenceFields, params: FilterParams):
    """Correct the predicted attitude with one stacked measurement.

    Computes the error correction ``x_post = K (z - h(q_prior))`` (the
    predicted error mean is zero by the reset convention), injects it into
    the quaternion and returns the new state plus the update fragment.
    """
    hg = quat.rotate_world_to_body(q_prior, refs.gravity)
    hm = quat.rotate_world_to_body(q_prior, refs.magnetic)
    H = np.empty((6, 3))
    H[:3] = quat.skew(hg)
    H[3:] = quat.skew(hm)
    innovation = z - np.concatenate([hg, hm])
    K = _kalman_gain(P_prior, H, params.R)
    x_post = K @ innovation
    P_post = _posterior_cov(P_prior, K, H)
    q_post = quat.hamilton(q_prior, quat.exp_map(0.5 * x_post))
    q_post /= np.linalg.norm(q_post)
    return FilterState(q_post, P_post), UpdateInfo(x_post, H, K, innovation)


def run_window(init_state: FilterState, samples: Sequence[ImuSample],
               refs: ReferenceFields, params: FilterParams):
    """Filter a window of samples, recording every step for smoothing.

    Returns ``(final_state, WindowBuffer)``.  Numerical failures are
    re-raised with the offending step index.
    """
    state = init_state
    records = []
    zero = np.zeros(3)
    for k, sample in enumerate(samples):
        q_prior, P_prior, F = predict(state, sample.omega, sample.dt, params)
        z = sample.z
        try:
            state, info = update(q_prior, P_prior, z, refs, params)
        except NumericalError as err:
            raise NumericalError(f"step {k}: {err}") from err
        records.append(StepRecord(
            x_prior=zero, x_post=info.x_post, P_prior=P_prior,
            P_post=state.P, F=F, H=info.H, K=info.K,
            innovation=info.innovation, z=z, q_prior=q_prior,
            q_post=state.q))
    return state, WindowBuffer(initial_state=init_state, records=records)


def run_linear_window(x0: np.ndarray, P0: np.ndarray,
                      Fs: Sequence[np.ndarray], Hs: Sequence[np.ndarray],
                      zs: Sequence[np.ndarray], Q: np.ndarray,
                      R: np.ndarray) -> WindowBuffer:
    """Kalman-filter a linear-Gaussian window with the same arithmetic.

    ``Fs[k]`` carries the state from step k into step k+1, ``Hs[k]`` and
    ``zs[k]`` belong to step k+1, mirroring how ``run_window`` indexes its
    records.  No injection or reset takes place: priors are ``F x_post``.
    """
    x, P = np.asarray(x0, dtype=float), _symmetrize(np.asarray(P0, float))
    records = []
    for k, (F, H, z) in enumerate(zip(Fs, Hs, zs)):
        x_prior = F @ x
        P_prior = _symmetrize(F @ P @ F.T + Q)
        innovation = z - H @ x_prior
        try:
            K = _kalman_gain(P_prior, H, R)
        except NumericalError as err:
            raise NumericalError(f"step {k}: {err}") from err
        x = x_prior + K @ innovation
        P = _posterior_cov(P_prior, K, H)
        records.append(StepRecord(
            x_prior=x_prior, x_post=x, P_prior=P_prior, P_post=P, F=F,
            H=H, K=K, innovation=innovation, z=z))
    init = FilterState(quat.IDENTITY.copy(), _symmetrize(np.asarray(P0, float)))
    return WindowBuffer(initial_state=init, records=records,
                        initial_mean=np.asarray(x0, dtype=float))
