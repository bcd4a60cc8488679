"""Synthetic trajectories, sensor noise injection and the Monte Carlo
harness comparing adaptive (EM-tuned) and fixed-parameter filters.

Ground truth is integrated with 10 exact constant-rate substeps per
sample interval, so the first-order propagation inside the filter is an
approximation of a genuinely smoother reference.  Every Monte Carlo run
draws its gyro noise, measurement noise and initial attitude perturbation
from independent substreams of ``base_seed + run_index``.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import quaternion as quat
from .attitude import ImuSample, ReferenceFields, measure_h, process_noise_Q
from .em import EmConfig, _floor_eigenvalues, run_em
from .exceptions import NumericalError
from .filter import FilterParams, FilterState, run_window

_SUBSTEPS = 10


def _as_array(v, shape, name):
    out = np.asarray(v, dtype=float)
    if out.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite")
    return out


@dataclass(frozen=True)
class RateProfile:
    """Body angular rate as a function of time.

    kinds:
      constant    -- omega(t) = offset
      sinusoidal  -- omega_i(t) = offset_i
                     + amplitude_i sin(2 pi frequency_hz_i t + phase_i)
      piecewise   -- constant segments; ``segments`` is a sequence of
                     (t_end, omega_3vec), the last one holding beyond its
                     end time
    """

    kind: str = "sinusoidal"
    amplitude: tuple = (0.3, 0.2, 0.25)
    frequency_hz: tuple = (0.5 / (2.0 * np.pi), 0.3 / (2.0 * np.pi),
                           0.4 / (2.0 * np.pi))
    offset: tuple = (0.0, 0.1, 0.0)
    phase: tuple = (0.0, 0.0, np.pi / 2.0)
    segments: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "sinusoidal", "piecewise"):
            raise ValueError(f"unknown rate profile kind {self.kind!r}")
        for name in ("amplitude", "frequency_hz", "offset", "phase"):
            object.__setattr__(
                self, name, tuple(_as_array(getattr(self, name), (3,), name)))
        if self.kind == "piecewise":
            if not self.segments:
                raise ValueError("piecewise profile needs segments")
            segs = []
            for t_end, omega in self.segments:
                segs.append((float(t_end),
                             tuple(_as_array(omega, (3,), "segment rate"))))
            if any(b[0] <= a[0] for a, b in zip(segs, segs[1:])):
                raise ValueError("segment end times must increase")
            object.__setattr__(self, "segments", tuple(segs))

    def rate(self, t: float) -> np.ndarray:
        if self.kind == "constant":
            return np.array(self.offset)
        if self.kind == "sinusoidal":
            arg = 2.0 * np.pi * np.asarray(self.frequency_hz) * t \
                + np.asarray(self.phase)
            return np.asarray(self.offset) + \
                np.asarray(self.amplitude) * np.sin(arg)
        for t_end, omega in self.segments:
            if t < t_end:
                return np.array(omega)
        return np.array(self.segments[-1][1])


@dataclass(frozen=True)
class TrajectoryConfig:
    """Duration, sampling interval, rate profile and initial attitude."""

    duration_s: float = 60.0
    dt_s: float = 0.01
    profile: RateProfile = field(default_factory=RateProfile)
    initial_attitude: tuple = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.duration_s > 0.0:
            raise ValueError("duration_s must be > 0")
        if not self.dt_s > 0.0:
            raise ValueError("dt_s must be > 0")
        if self.duration_s < self.dt_s:
            raise ValueError("duration_s must cover at least one step")
        q0 = _as_array(self.initial_attitude, (4,), "initial_attitude")
        if abs(np.linalg.norm(q0) - 1.0) > 1e-9:
            raise ValueError("initial_attitude must be a unit quaternion")
        object.__setattr__(self, "initial_attitude", tuple(q0))

    @property
    def steps(self) -> int:
        return int(round(self.duration_s / self.dt_s))


@dataclass(frozen=True)
class NoiseConfig:
    """Diagonal sensor noise variances and the base RNG seed.

    sigma_eta_diag is the gyro noise variance per axis in (rad/s)^2;
    sigma_nu_diag stacks the accelerometer and magnetometer direction
    variances (6 entries).
    """

    sigma_eta_diag: tuple = (0.075, 0.15, 0.1)
    sigma_nu_diag: tuple = (1e-5, 2e-5, 3e-5, 3e-5, 3.5e-5, 6e-5)
    seed: int = 0

    def __post_init__(self):
        eta = _as_array(self.sigma_eta_diag, (3,), "sigma_eta_diag")
        nu = _as_array(self.sigma_nu_diag, (6,), "sigma_nu_diag")
        if np.any(eta < 0.0) or np.any(nu < 0.0):
            raise ValueError("noise variances must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "sigma_eta_diag", tuple(eta))
        object.__setattr__(self, "sigma_nu_diag", tuple(nu))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class EmOptions:
    """EM controls shared by every window length in a study."""

    max_iterations: int = 50
    rel_tolerance: float = 1e-3
    q_floor: float = 1e-12
    r_floor: float = 1e-12

    def config(self, window_length: int) -> EmConfig:
        return EmConfig(window_length=window_length,
                        max_iterations=self.max_iterations,
                        rel_tolerance=self.rel_tolerance,
                        q_floor=self.q_floor, r_floor=self.r_floor)


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo study layout.

    Each initial-guess variant (multipliers applied to the true Q and R)
    gets one adaptive configuration per window length plus, when
    ``include_baselines`` is set, a fixed filter at that initial guess;
    a single fixed filter at the true parameters is shared by all
    variants.  ``adaptation_mode`` selects whether EM runs once on the
    leading window or is re-triggered on every consecutive window.
    """

    runs: int = 100
    window_lengths: tuple = (20, 40, 60, 80, 100)
    theta0_multipliers: tuple = ((400.0, 200.0), (400.0, 0.2))
    include_baselines: bool = True
    init_sigma_rad: float = 0.05
    adaptation_mode: str = "single_window"
    em: EmOptions = field(default_factory=EmOptions)

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        wls = tuple(int(w) for w in self.window_lengths)
        if not wls or any(w < 2 for w in wls):
            raise ValueError("window lengths must be integers >= 2")
        mults = tuple((float(a), float(b))
                      for a, b in self.theta0_multipliers)
        if not mults or any(a < 0.0 or b < 0.0 for a, b in mults):
            raise ValueError("theta0 multipliers must be >= 0 pairs")
        if self.init_sigma_rad < 0.0:
            raise ValueError("init_sigma_rad must be >= 0")
        if self.adaptation_mode not in ("single_window", "per_window"):
            raise ValueError(
                f"unknown adaptation_mode {self.adaptation_mode!r}")
        object.__setattr__(self, "window_lengths", wls)
        object.__setattr__(self, "theta0_multipliers", mults)


@dataclass(frozen=True)
class Trajectory:
    """Ground-truth attitude and rate sampled at the step times."""

    times: np.ndarray   # (N+1,)
    qs: np.ndarray      # (N+1, 4)
    omegas: np.ndarray  # (N+1, 3)
    dt: float


def generate_trajectory(cfg: TrajectoryConfig) -> Trajectory:
    """Integrate the rate profile into a ground-truth attitude sequence.

    Each sample interval is covered by 10 substeps, each an exact
    constant-rate rotation at the substep midpoint rate.
    """
    n = cfg.steps
    dt = cfg.dt_s
    times = np.arange(n + 1) * dt
    qs = np.empty((n + 1, 4))
    qs[0] = cfg.initial_attitude
    h = dt / _SUBSTEPS
    q = qs[0]
    for k in range(n):
        t0 = k * dt
        for s in range(_SUBSTEPS):
            w = cfg.profile.rate(t0 + (s + 0.5) * h)
            q = quat.hamilton(q, quat.exp_map(0.5 * h * w))
        q = q / np.linalg.norm(q)
        qs[k + 1] = q
    omegas = np.array([cfg.profile.rate(t) for t in times])
    return Trajectory(times=times, qs=qs, omegas=omegas, dt=dt)


def synthesize_measurements(traj: Trajectory, noise: NoiseConfig,
                            refs: ReferenceFields) -> list:
    """Corrupt the trajectory into a list of ImuSamples.

    Gyro and vector-measurement noises come from independent substreams
    of the configured seed.  Sample k carries the gyro reading over
    [t_{k-1}, t_k] and the vector measurements taken at t_k.
    """
    n = len(traj.qs) - 1
    eta_ss, nu_ss = np.random.SeedSequence(noise.seed).spawn(2)
    eta = np.random.default_rng(eta_ss).standard_normal((n, 3)) \
        * np.sqrt(noise.sigma_eta_diag)
    nu = np.random.default_rng(nu_ss).standard_normal((n, 6)) \
        * np.sqrt(noise.sigma_nu_diag)
    samples = []
    for k in range(n):
        z = measure_h(traj.qs[k + 1], refs) + nu[k]
        samples.append(ImuSample(
            omega=traj.omegas[k] + eta[k], accel=z[:3], mag=z[3:],
            dt=traj.dt))
    return samples


def _batch_error_vectors(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Rotation-vector errors 2 log_map(est^-1 * truth), vectorized."""
    pw = est[:, 0]
    px, py, pz = -est[:, 1], -est[:, 2], -est[:, 3]
    qw, qx, qy, qz = truth.T
    ew = pw * qw - px * qx - py * qy - pz * qz
    ex = pw * qx + px * qw + py * qz - pz * qy
    ey = pw * qy - px * qz + py * qw + pz * qx
    ez = pw * qz + px * qy - py * qx + pz * qw
    flip = ew < 0.0
    ew = np.where(flip, -ew, ew)
    v = np.stack([ex, ey, ez], axis=1)
    v[flip] *= -1.0
    s = np.linalg.norm(v, axis=1)
    angle = np.arctan2(s, np.minimum(ew, 1.0))
    factor = np.where(s < 1e-12, 1.0, angle / np.where(s < 1e-12, 1.0, s))
    return 2.0 * v * factor[:, None]


def attitude_rmse(est: np.ndarray, truth: np.ndarray):
    """Per-axis RMSE of the rotation-vector error plus its Euclidean norm.

    Estimates and truth are (n, 4) quaternion arrays aligned step by
    step; the error at each step is ``2 log_map(est^-1 * truth)`` after
    sign canonicalization.
    """
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape or est.ndim != 2 or est.shape[1] != 4:
        raise ValueError("est and truth must both be (n, 4) arrays")
    e = _batch_error_vectors(est, truth)
    per_axis = np.sqrt(np.mean(e * e, axis=0))
    return per_axis, float(np.linalg.norm(per_axis))


def quaternion_rmse(est: np.ndarray, truth: np.ndarray):
    """Alternative metric: per-component RMSE of the quaternion difference.

    The estimate sign is flipped per step to the hemisphere of the truth
    before differencing.
    """
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape or est.ndim != 2 or est.shape[1] != 4:
        raise ValueError("est and truth must both be (n, 4) arrays")
    dots = np.sum(est * truth, axis=1, keepdims=True)
    d = np.where(dots < 0.0, -est, est) - truth
    per_component = np.sqrt(np.mean(d * d, axis=0))
    return per_component, float(np.linalg.norm(per_component))


def true_params(noise: NoiseConfig, dt: float, q_floor: float = 1e-12,
                r_floor: float = 1e-12) -> FilterParams:
    """Discrete (Q, R) implied by a noise config, eigenvalue-floored."""
    Q = process_noise_Q(np.diag(noise.sigma_eta_diag), dt)
    R = np.diag(noise.sigma_nu_diag)
    return FilterParams(_floor_eigenvalues(Q, q_floor),
                        _floor_eigenvalues(R, r_floor))


def scaled_params(base: FilterParams, alpha_q: float,
                  alpha_r: float, q_floor: float = 1e-12,
                  r_floor: float = 1e-12) -> FilterParams:
    """Initial-guess parameters: multiplier pair applied to a baseline."""
    return FilterParams(_floor_eigenvalues(alpha_q * base.Q, q_floor),
                        _floor_eigenvalues(alpha_r * base.R, r_floor))


def _label(kind: str, theta0_index, window_length) -> str:
    if kind == "fixed_true":
        return "fixed_true"
    if kind == "fixed_initial":
        return f"fixed_initial_{theta0_index}"
    return f"adaptive_{theta0_index}_wl{window_length}"


@dataclass
class ConfigResult:
    """Per-run outcomes for one filter configuration, aggregated."""

    kind: str                      # adaptive | fixed_true | fixed_initial
    theta0_index: Optional[int]    # index into theta0_multipliers
    window_length: Optional[int]
    rmse_axes: np.ndarray          # (runs, 3), NaN where the run failed
    rmse_norms: np.ndarray         # (runs,)
    median_rmse: float
    frob_Q: Optional[np.ndarray] = None
    frob_R: Optional[np.ndarray] = None
    loglik_traces: Optional[list] = None
    em_iterations: Optional[np.ndarray] = None
    em_converged: Optional[np.ndarray] = None

    @property
    def label(self) -> str:
        return _label(self.kind, self.theta0_index, self.window_length)


@dataclass
class McSummary:
    """Aggregated Monte Carlo study results."""

    results: list
    frob_Q_true: float
    frob_R_true: float
    failures: list        # (run index, config label, message)
    partial: bool
    runs: int
    window_lengths: tuple
    theta0_multipliers: tuple

    def by_label(self, label: str) -> ConfigResult:
        for res in self.results:
            if res.label == label:
                return res
        raise KeyError(label)


def _config_plan(mc: McConfig) -> list:
    plan = []
    if mc.include_baselines:
        plan.append(("fixed_true", None, None))
    for vi in range(len(mc.theta0_multipliers)):
        if mc.include_baselines:
            plan.append(("fixed_initial", vi, None))
        for wl in mc.window_lengths:
            plan.append(("adaptive", vi, wl))
    return plan


def _posterior_quaternions(buffer) -> np.ndarray:
    return np.array([r.q_post for r in buffer.records])


def _posterior_trace_P(buffer) -> list:
    return [float(np.trace(r.P_post)) for r in buffer.records]


def _adaptive_pass(samples, init_state, theta0, refs, wl, mc: McConfig):
    """EM-tune on window(s), then filter; returns (q_est, p_trace, params,
    traces, iterations, converged)."""
    if mc.adaptation_mode == "single_window":
        em = run_em(samples[:wl], init_state, theta0, refs,
                    mc.em.config(wl))
        params = FilterParams(em.Q_est, em.R_est)
        _, buffer = run_window(init_state, samples, refs, params)
        return (_posterior_quaternions(buffer), _posterior_trace_P(buffer),
                params, em.loglik_trace, em.iterations, em.converged)
    # per_window: re-estimate on every full window, carry state across
    state, params = init_state, theta0
    q_est, p_trace, trace = [], [], []
    iterations, converged = 0, True
    pos = 0
    while pos + wl <= len(samples):
        em = run_em(samples[pos:pos + wl], state, params, refs,
                    mc.em.config(wl))
        params = FilterParams(em.Q_est, em.R_est)
        trace.extend(em.loglik_trace)
        iterations += em.iterations
        converged = converged and em.converged
        state, buffer = run_window(state, samples[pos:pos + wl], refs,
                                   params)
        q_est.extend(buffer.records[i].q_post for i in range(wl))
        p_trace.extend(_posterior_trace_P(buffer))
        pos += wl
    if pos < len(samples):
        state, buffer = run_window(state, samples[pos:], refs, params)
        q_est.extend(r.q_post for r in buffer.records)
        p_trace.extend(_posterior_trace_P(buffer))
    return np.array(q_est), p_trace, params, trace, iterations, converged


def _per_run_setup(run_idx: int, mc: McConfig, traj: Trajectory,
                   noise: NoiseConfig, refs: ReferenceFields):
    """Noise realization and perturbed initial state for one run."""
    noise_r = replace(noise, seed=noise.seed + run_idx)
    samples = synthesize_measurements(traj, noise_r, refs)
    init_rng = np.random.default_rng(
        np.random.SeedSequence(noise_r.seed).spawn(3)[2])
    delta = init_rng.standard_normal(3) * mc.init_sigma_rad
    q0 = quat.hamilton(np.asarray(traj.qs[0]), quat.exp_map(0.5 * delta))
    init_state = FilterState(q0 / np.linalg.norm(q0),
                             mc.init_sigma_rad**2 * np.eye(3))
    theta_true = true_params(noise, traj.dt, mc.em.q_floor, mc.em.r_floor)
    return samples, init_state, theta_true


def _run_single(args):
    """One Monte Carlo run: returns {label: outcome or error message}."""
    (run_idx, mc, traj, noise, refs, plan) = args
    samples, init_state, theta_true = _per_run_setup(run_idx, mc, traj,
                                                     noise, refs)
    truth = traj.qs[1:]
    out = {}
    for kind, vi, wl in plan:
        label = _label(kind, vi, wl)
        try:
            if kind == "fixed_true":
                _, buffer = run_window(init_state, samples, refs,
                                       theta_true)
                q_est = _posterior_quaternions(buffer)
                extra = None
            elif kind == "fixed_initial":
                aq, ar = mc.theta0_multipliers[vi]
                params = scaled_params(theta_true, aq, ar,
                                       mc.em.q_floor, mc.em.r_floor)
                _, buffer = run_window(init_state, samples, refs, params)
                q_est = _posterior_quaternions(buffer)
                extra = None
            else:
                aq, ar = mc.theta0_multipliers[vi]
                theta0 = scaled_params(theta_true, aq, ar,
                                       mc.em.q_floor, mc.em.r_floor)
                q_est, _, params, trace, iters, conv = _adaptive_pass(
                    samples, init_state, theta0, refs, wl, mc)
                extra = (float(np.linalg.norm(params.Q)),
                         float(np.linalg.norm(params.R)),
                         list(trace), iters, conv)
            per_axis, norm = attitude_rmse(q_est, truth)
            out[label] = (per_axis, norm, extra)
        except NumericalError as err:
            out[label] = str(err)
    return out


def run_monte_carlo(mc: McConfig, traj_cfg: TrajectoryConfig,
                    noise: NoiseConfig, refs: ReferenceFields,
                    workers: int = 1) -> McSummary:
    """Run the full study and aggregate per-configuration statistics.

    Runs are independent; with ``workers > 1`` they execute in a process
    pool and are reduced in run-index order, so results do not depend on
    scheduling.  A run that fails numerically is recorded in ``failures``
    and contributes NaN cells instead of aborting the study.
    """
    traj = generate_trajectory(traj_cfg)
    n_steps = len(traj.qs) - 1
    max_wl = max(mc.window_lengths)
    if max_wl > n_steps:
        raise ValueError(
            f"longest window ({max_wl}) exceeds trajectory length "
            f"({n_steps} steps)")

    plan = _config_plan(mc)
    tasks = [(r, mc, traj, noise, refs, plan) for r in range(mc.runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_run = list(pool.map(_run_single, tasks, chunksize=1))
    else:
        per_run = [_run_single(t) for t in tasks]

    failures = []
    results = []
    for kind, vi, wl in plan:
        label = _label(kind, vi, wl)
        axes = np.full((mc.runs, 3), np.nan)
        norms = np.full(mc.runs, np.nan)
        adaptive = kind == "adaptive"
        frob_q = np.full(mc.runs, np.nan) if adaptive else None
        frob_r = np.full(mc.runs, np.nan) if adaptive else None
        traces = [None] * mc.runs if adaptive else None
        iters = np.zeros(mc.runs, dtype=int) if adaptive else None
        conv = np.zeros(mc.runs, dtype=bool) if adaptive else None
        for r, outcome in enumerate(per_run):
            value = outcome[label]
            if isinstance(value, str):
                failures.append((r, label, value))
                continue
            per_axis, norm, extra = value
            axes[r] = per_axis
            norms[r] = norm
            if adaptive:
                frob_q[r], frob_r[r], traces[r], iters[r], conv[r] = extra
        results.append(ConfigResult(
            kind=kind, theta0_index=vi, window_length=wl, rmse_axes=axes,
            rmse_norms=norms,
            median_rmse=float(np.nanmedian(norms)) if np.any(
                np.isfinite(norms)) else float("nan"),
            frob_Q=frob_q, frob_R=frob_r, loglik_traces=traces,
            em_iterations=iters, em_converged=conv))

    theta_true = true_params(noise, traj.dt, mc.em.q_floor, mc.em.r_floor)
    return McSummary(
        results=results,
        frob_Q_true=float(np.linalg.norm(theta_true.Q)),
        frob_R_true=float(np.linalg.norm(theta_true.R)),
        failures=failures, partial=bool(failures), runs=mc.runs,
        window_lengths=mc.window_lengths,
        theta0_multipliers=mc.theta0_multipliers)


@dataclass(frozen=True)
class RunTrace:
    """Per-step detail of one replayed adaptive run."""

    times: np.ndarray     # (n,) sample times, excluding t=0
    truth: np.ndarray     # (n, 4) true quaternions
    estimate: np.ndarray  # (n, 4) posterior quaternions
    error: np.ndarray     # (n, 3) rotation-vector estimate errors
    trace_P: np.ndarray   # (n,) trace of the posterior covariance


def replay_run(mc: McConfig, traj_cfg: TrajectoryConfig, noise: NoiseConfig,
               refs: ReferenceFields, run_index: int) -> RunTrace:
    """Re-run one Monte Carlo run and keep its per-step filter detail.

    Replays the adaptive configuration built from the first multiplier
    pair and the first window length with the exact seeding used by
    ``run_monte_carlo``, so step-level output can be inspected for any
    run of a study.
    """
    if not 0 <= run_index < mc.runs:
        raise ValueError(
            f"run index {run_index} out of range (runs = {mc.runs})")
    traj = generate_trajectory(traj_cfg)
    wl = mc.window_lengths[0]
    if wl > len(traj.qs) - 1:
        raise ValueError(
            f"longest window ({wl}) exceeds trajectory length "
            f"({len(traj.qs) - 1} steps)")
    samples, init_state, theta_true = _per_run_setup(run_index, mc, traj,
                                                     noise, refs)
    aq, ar = mc.theta0_multipliers[0]
    theta0 = scaled_params(theta_true, aq, ar, mc.em.q_floor, mc.em.r_floor)
    q_est, p_trace, _, _, _, _ = _adaptive_pass(samples, init_state, theta0,
                                                refs, wl, mc)
    truth = traj.qs[1:]
    return RunTrace(times=traj.times[1:], truth=truth, estimate=q_est,
                    error=_batch_error_vectors(q_est, truth),
                    trace_P=np.array(p_trace))
