"""Fixed-interval (RTS) and lag-one covariance smoothing over a window.

Both routines consume the ``WindowBuffer`` recorded by a filter pass and
index states 0..n, where 0 is the window's initial state and i >= 1 maps
to ``records[i-1]``.  ``records[i-1].F`` is the transition carrying step
i-1 into step i.  They only touch the linear-Gaussian fields, so they
apply unchanged to attitude windows (priors zero by reset) and to plain
linear windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import NumericalError
from .filter import WindowBuffer, _symmetrize


@dataclass
class SmoothedWindow:
    """Smoothed means/covariances for states 0..n plus lag-one terms.

    ``P_lag[i - 1]`` holds the smoothed cross-covariance between states i
    and i-1, for i = 1..n.  ``gains[i]`` is the smoother gain linking
    state i to state i+1, for i = 0..n-1.
    """

    x: list
    P: list
    P_lag: list
    gains: list

    def __len__(self) -> int:
        return len(self.x) - 1


def rts_smooth(buffer: WindowBuffer):
    """Backward Rauch-Tung-Striebel pass.

    Returns ``(x_smooth, P_smooth, gains)``, each indexed 0..n (gains
    0..n-1).  The final entries equal the filtered posteriors; earlier
    entries fold in all later measurements via
    ``J_i = P_i+ F_i^T (P_{i+1}-)^-1``.
    """
    n = len(buffer)
    if n < 2:
        raise ValueError("smoothing needs a window of at least 2 steps")
    recs = buffer.records
    x0 = np.asarray(buffer.initial_mean, dtype=float)
    if x0.shape != recs[0].x_post.shape:
        raise ValueError("initial_mean shape does not match the records")
    x_post = [x0] + [r.x_post for r in recs]
    P_post = [buffer.initial_state.P] + [r.P_post for r in recs]

    x_s = [None] * (n + 1)
    P_s = [None] * (n + 1)
    gains = [None] * n
    x_s[n] = x_post[n]
    P_s[n] = P_post[n]
    for i in range(n - 1, -1, -1):
        nxt = recs[i]  # step i+1: its F carries state i into i+1
        try:
            cf = cho_factor(nxt.P_prior, lower=True, check_finite=False)
        except np.linalg.LinAlgError as err:
            raise NumericalError(
                f"step {i + 1}: predicted covariance is singular") from err
        J = cho_solve(cf, nxt.F @ P_post[i], check_finite=False).T
        x_s[i] = x_post[i] + J @ (x_s[i + 1] - nxt.x_prior)
        P_s[i] = _symmetrize(P_post[i] + J @ (P_s[i + 1] - nxt.P_prior) @ J.T)
        gains[i] = J
    return x_s, P_s, gains


def lag_one_smooth(buffer: WindowBuffer, gains):
    """Smoothed cross-covariances between consecutive states.

    Seeds the backward recursion at the window end with
    ``P_{n,n-1} = (I - K_n H_n) F_{n-1} P_{n-1}+`` and returns a list
    whose element i-1 is P_{i,i-1}, for i = 1..n.
    """
    n = len(buffer)
    if n < 2:
        raise ValueError("lag-one smoothing needs a window of at least 2 steps")
    recs = buffer.records
    P_post = [buffer.initial_state.P] + [r.P_post for r in recs]

    last = recs[n - 1]
    eye = np.eye(last.K.shape[0])
    P_lag = [None] * n
    P_lag[n - 1] = (eye - last.K @ last.H) @ last.F @ P_post[n - 1]
    for i in range(n - 1, 0, -1):
        F_i = recs[i].F  # carries state i into i+1
        P_lag[i - 1] = P_post[i] @ gains[i - 1].T + \
            gains[i] @ (P_lag[i] - F_i @ P_post[i]) @ gains[i - 1].T
    return P_lag


def smooth_window(buffer: WindowBuffer) -> SmoothedWindow:
    """Run both smoothing passes and bundle the results."""
    x_s, P_s, gains = rts_smooth(buffer)
    P_lag = lag_one_smooth(buffer, gains)
    return SmoothedWindow(x=x_s, P=P_s, P_lag=P_lag, gains=gains)
