"""Scikit-learn style wrapper around the adaptive attitude filter.

``fit`` identifies the noise covariances by EM on the leading window of
samples; ``predict`` filters a sample array into quaternion estimates.
The sample matrix has 9 columns: gyro rate (rad/s), accelerometer
direction and magnetometer direction, one row per time step.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .attitude import ImuSample, ReferenceFields
from .em import EmConfig, run_em
from .filter import FilterParams, FilterState, run_window

_MAG_DEFAULT = (0.5, 0.0, -np.sqrt(3.0) / 2.0)


def _as_covariance(value, size: int, name: str) -> np.ndarray:
    """Accept a scalar, a diagonal or a full matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(size)
    if arr.shape == (size,):
        return np.diag(arr)
    if arr.shape == (size, size):
        return arr
    raise ValueError(
        f"{name} must be a scalar, length-{size} diagonal or "
        f"{size}x{size} matrix, got shape {arr.shape}")


class AdaptiveAttitudeEKF(BaseEstimator):
    """Attitude filter with EM-identified process/measurement noise.

    Parameters
    ----------
    q0, r0 : scalar, diagonal or full covariance
        Initial guesses for the error-state process noise (3x3) and the
        stacked measurement noise (6x6).  Used as-is when ``adapt`` is
        False.
    dt : float
        Sample interval in seconds.
    window_length : int
        Number of leading samples the EM pass consumes.
    max_iterations, rel_tolerance, q_floor, r_floor : EM controls.
    gravity_ref, magnetic_ref : world-frame unit reference directions.
    initial_attitude : unit quaternion [w, x, y, z] at the first sample.
    initial_cov : scalar, diagonal or full 3x3 initial error covariance.
    adapt : bool
        When False, ``fit`` validates the inputs and freezes (q0, r0)
        without running EM.

    Attributes
    ----------
    Q_, R_ : fitted noise covariances.
    loglik_trace_ : per-iteration window-averaged EM objective.
    n_iter_ : EM iterations performed.
    converged_ : whether the relative-change tolerance was met.
    """

    def __init__(self, q0=1e-6, r0=1e-4, dt=0.01, window_length=100,
                 max_iterations=50, rel_tolerance=1e-3, q_floor=1e-12,
                 r_floor=1e-12, gravity_ref=(0.0, 0.0, 1.0),
                 magnetic_ref=_MAG_DEFAULT,
                 initial_attitude=(1.0, 0.0, 0.0, 0.0),
                 initial_cov=0.0025, adapt=True):
        self.q0 = q0
        self.r0 = r0
        self.dt = dt
        self.window_length = window_length
        self.max_iterations = max_iterations
        self.rel_tolerance = rel_tolerance
        self.q_floor = q_floor
        self.r_floor = r_floor
        self.gravity_ref = gravity_ref
        self.magnetic_ref = magnetic_ref
        self.initial_attitude = initial_attitude
        self.initial_cov = initial_cov
        self.adapt = adapt

    def _refs(self) -> ReferenceFields:
        return ReferenceFields(gravity=np.asarray(self.gravity_ref, float),
                               magnetic=np.asarray(self.magnetic_ref, float))

    def _init_state(self) -> FilterState:
        return FilterState.create(
            self.initial_attitude,
            _as_covariance(self.initial_cov, 3, "initial_cov"))

    def _samples(self, X) -> list:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 9:
            raise ValueError(
                f"X must be (n_samples, 9) [omega, accel, mag], got "
                f"{X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("X must be finite")
        if not self.dt > 0.0:
            raise ValueError("dt must be > 0")
        return [ImuSample(omega=row[:3], accel=row[3:6], mag=row[6:9],
                          dt=self.dt) for row in X]

    def _theta0(self) -> FilterParams:
        return FilterParams(_as_covariance(self.q0, 3, "q0"),
                            _as_covariance(self.r0, 6, "r0"))

    def fit(self, X, y=None):
        """Identify (Q, R) on the leading window of X."""
        samples = self._samples(X)
        self.n_features_in_ = 9
        theta0 = self._theta0()
        if not self.adapt:
            self.Q_, self.R_ = theta0.Q, theta0.R
            self.loglik_trace_ = []
            self.n_iter_ = 0
            self.converged_ = True
            return self
        if len(samples) < self.window_length:
            raise ValueError(
                f"need at least window_length={self.window_length} "
                f"samples to fit, got {len(samples)}")
        cfg = EmConfig(window_length=self.window_length,
                       max_iterations=self.max_iterations,
                       rel_tolerance=self.rel_tolerance,
                       q_floor=self.q_floor, r_floor=self.r_floor)
        result = run_em(samples[:self.window_length], self._init_state(),
                        theta0, self._refs(), cfg)
        self.Q_, self.R_ = result.Q_est, result.R_est
        self.loglik_trace_ = result.loglik_trace
        self.n_iter_ = result.iterations
        self.converged_ = result.converged
        return self

    def predict(self, X) -> np.ndarray:
        """Filter X into an (n_samples, 4) array of unit quaternions."""
        if not hasattr(self, "Q_"):
            raise RuntimeError("call fit before predict")
        samples = self._samples(X)
        params = FilterParams(self.Q_, self.R_)
        _, buffer = run_window(self._init_state(), samples, self._refs(),
                               params)
        return np.array([rec.q_post for rec in buffer.records])

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).predict(X)
