"""Acceptance gate: eight numbered criteria covering the algebra layer,
the measurement Jacobian, the linear-Gaussian oracles, EM convergence
behavior, the Monte Carlo study trends, covariance recovery, output
determinism and filter left-invariance.  Each test records one visible
pass/fail line (printed after the summary) and asserts the criterion at
its stated tolerances and runtime budget."""

import time

import numpy as np
import pytest
from scipy import stats

import oracles
from liekf import attitude, quaternion as quat
from liekf.cli import DEFAULT_CONFIG, main
from liekf.em import EmConfig, evaluate_objective, run_em, run_linear_em
from liekf.filter import FilterState, run_linear_window, run_window
from liekf.simulation import (McConfig, NoiseConfig, TrajectoryConfig,
                              generate_trajectory, scaled_params,
                              synthesize_measurements, true_params)
from liekf.smoothing import smooth_window

REFS = attitude.ReferenceFields()
DT = 0.01
WINDOW_LENGTHS = (20, 40, 60, 80, 100)


def _default_run0_window(n):
    """Samples and initial state exactly as run 0 of the default study."""
    traj = generate_trajectory(TrajectoryConfig(duration_s=2.0))
    noise = NoiseConfig(seed=0)
    samples = synthesize_measurements(traj, noise, REFS)[:n]
    init_rng = np.random.default_rng(np.random.SeedSequence(0).spawn(3)[2])
    delta = init_rng.standard_normal(3) * 0.05
    q0 = quat.hamilton(quat.IDENTITY, quat.exp_map(0.5 * delta))
    init = FilterState.create(q0, 0.0025 * np.eye(3))
    return samples, init, noise


@pytest.fixture(scope="session")
def big_study():
    """The 50-run full-scale study shared by criteria 5 and 6."""
    start = time.perf_counter()
    from liekf.simulation import run_monte_carlo
    summary = run_monte_carlo(McConfig(runs=50), TrajectoryConfig(),
                              NoiseConfig(), REFS)
    return summary, time.perf_counter() - start


def test_criterion_1_quaternion_algebra(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {"norm": 0.0, "matrix": 0.0, "roundtrip": 0.0, "rotation": 0.0}
    for _ in range(1000):
        a = rng.standard_normal(4)
        b = rng.standard_normal(4)
        prod = quat.hamilton(a, b)
        scale = np.linalg.norm(a) * np.linalg.norm(b)
        worst["norm"] = max(worst["norm"],
                            abs(np.linalg.norm(prod) - scale) / (1 + scale))

        p = a / np.linalg.norm(a)
        q = b / np.linalg.norm(b)
        ref = quat.hamilton(p, q)
        worst["matrix"] = max(
            worst["matrix"],
            np.max(np.abs(quat.xi_matrix(p) @ q - ref)),
            np.max(np.abs(quat.omega_matrix(q) @ p - ref)))

        xi = rng.standard_normal(3)
        xi *= rng.uniform(1e-9, np.pi - 0.05) / np.linalg.norm(xi)
        worst["roundtrip"] = max(
            worst["roundtrip"],
            np.max(np.abs(quat.log_map(quat.exp_map(xi)) - xi)))

        u = rng.standard_normal(3)
        dcm = oracles.dcm_body_to_world(q)
        worst["rotation"] = max(
            worst["rotation"],
            np.max(np.abs(quat.rotate_world_to_body(q, u) - dcm.T @ u)),
            np.max(np.abs(quat.rotate_body_to_world(q, u) - dcm @ u)))
    elapsed = time.perf_counter() - start
    ok = (worst["norm"] <= 1e-11 and worst["matrix"] <= 1e-12
          and worst["roundtrip"] <= 1e-9 and worst["rotation"] <= 1e-10
          and elapsed < 5.0)
    detail = (f"1000 cases, worst: norm {worst['norm']:.1e}, "
              f"matrix {worst['matrix']:.1e}, "
              f"exp/log {worst['roundtrip']:.1e}, "
              f"rotation {worst['rotation']:.1e} ({elapsed:.1f} s)")
    criterion(1, ok, detail)
    assert ok, detail


def test_criterion_2_measurement_jacobian(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(100):
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)

        def h_of_xi(xi, q=q):
            return attitude.measure_h(
                quat.hamilton(q, quat.exp_map(xi / 2)), REFS)

        H_fd = oracles.finite_difference_jacobian(h_of_xi, np.zeros(3))
        worst = max(worst,
                    np.max(np.abs(attitude.jacobian_H(q, REFS) - H_fd)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 5.0
    detail = (f"100 attitudes, max deviation {worst:.2e} "
              f"(bound 1e-5, {elapsed:.1f} s)")
    criterion(2, ok, detail)
    assert ok, detail


def test_criterion_3_linear_oracles(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(103)
    worst_filter = 0.0
    for m in (2, 4, 6):
        x0, P0, Fs, Hs, zs, Q, R = oracles.simulate_linear_system(
            rng, 3, m, 30)
        buffer = run_linear_window(x0, P0, Fs, Hs, zs, Q, R)
        ref = oracles.kalman_filter_textbook(x0, P0, Fs, Hs, zs, Q, R)
        for k, rec in enumerate(buffer.records):
            worst_filter = max(
                worst_filter,
                np.max(np.abs(rec.x_prior - ref["x_prior"][k])),
                np.max(np.abs(rec.P_prior - ref["P_prior"][k])),
                np.max(np.abs(rec.x_post - ref["x_post"][k])),
                np.max(np.abs(rec.P_post - ref["P_post"][k])),
                np.max(np.abs(rec.K - ref["K"][k])))

    worst_smoother = 0.0
    for n in (12, 20):
        x0, P0, Fs, Hs, zs, Q, R = oracles.simulate_linear_system(
            rng, 3, 4, n)
        buffer = run_linear_window(x0, P0, Fs, Hs, zs, Q, R)
        smoothed = smooth_window(buffer)
        means, covs, lag = oracles.joint_gaussian_smoother(
            x0, P0, Fs, Hs, zs, Q, R)
        for i in range(n + 1):
            worst_smoother = max(
                worst_smoother,
                np.max(np.abs(smoothed.x[i] - means[i])),
                np.max(np.abs(smoothed.P[i] - covs[i])))
        for i in range(n):
            worst_smoother = max(
                worst_smoother, np.max(np.abs(smoothed.P_lag[i] - lag[i])))

    worst_em = 0.0
    for seed in (7, 11):
        srng = np.random.default_rng(seed)
        x0, P0, Fs, Hs, zs, Q, R = oracles.simulate_linear_system(
            srng, 3, 4, 25)
        Q0, R0 = 4.0 * Q, 0.5 * R
        ref = oracles.shumway_stoffer_em(x0, P0, Fs, Hs, zs, Q0, R0, 8)
        for k in (1, 3, 8):
            res = run_linear_em(x0, P0, Fs, Hs, zs, Q0, R0,
                                EmConfig(window_length=25,
                                         max_iterations=k,
                                         rel_tolerance=1e-15))
            Q_ref, R_ref = ref[k - 1]
            worst_em = max(worst_em,
                           np.max(np.abs(res.Q_est - Q_ref)),
                           np.max(np.abs(res.R_est - R_ref)))
    elapsed = time.perf_counter() - start
    ok = (worst_filter < 1e-7 and worst_smoother < 1e-7
          and worst_em < 1e-8 and elapsed < 30.0)
    detail = (f"filter {worst_filter:.1e}, smoother {worst_smoother:.1e} "
              f"(bound 1e-7), EM per-iteration {worst_em:.1e} "
              f"(bound 1e-8) ({elapsed:.1f} s)")
    criterion(3, ok, detail)
    assert ok, detail


def test_criterion_4_em_trace_monotone_and_close(criterion):
    start = time.perf_counter()
    problems = []
    gaps = {}
    samples_all, init, noise = _default_run0_window(max(WINDOW_LENGTHS))
    theta_true = true_params(noise, DT)
    theta0 = scaled_params(theta_true, 400.0, 200.0)
    for wl in WINDOW_LENGTHS:
        cfg = EmConfig(window_length=wl)
        res = run_em(samples_all[:wl], init, theta0, REFS, cfg)
        trace = res.loglik_trace
        for j in range(1, len(trace)):
            slack = 1e-3 * abs(trace[j - 1])
            if trace[j] > trace[j - 1] + slack:
                problems.append(
                    f"wl={wl}: trace rises at iteration {j + 1}")
                break
        reference = evaluate_objective(samples_all[:wl], init, theta_true,
                                       REFS)
        gap = abs(trace[-1] - reference) / abs(reference)
        gaps[wl] = gap
        if gap > 0.05:
            problems.append(f"wl={wl}: final value {gap:.1%} from the "
                            f"true-parameter level (bound 5%)")
    elapsed = time.perf_counter() - start
    if elapsed >= 60.0:
        problems.append(f"runtime {elapsed:.0f} s (budget 60 s)")
    ok = not problems
    gap_text = ", ".join(f"wl{wl} {gaps[wl]:.1%}" for wl in WINDOW_LENGTHS)
    detail = (f"monotone and within 5% at every window ({gap_text}, "
              f"{elapsed:.0f} s)" if ok else "; ".join(problems)
              + f" ({elapsed:.0f} s)")
    criterion(4, ok, detail)
    assert ok, detail


def test_criterion_5_mc_rmse_trends(criterion, big_study):
    summary, elapsed = big_study
    med = {res.label: res.median_rmse for res in summary.results}
    base = med["fixed_true"]
    problems = []
    ratios = {wl: med[f"adaptive_0_wl{wl}"] / base for wl in WINDOW_LENGTHS}
    for wl in (60, 80, 100):
        if ratios[wl] > 1.15:
            problems.append(f"adaptive wl={wl} at {ratios[wl]:.3f}x the "
                            f"true-parameter baseline (bound 1.15x)")
    detuned_ratio = med["fixed_initial_1"] / base
    if detuned_ratio < 1.3:
        problems.append(f"detuned fixed filter only {detuned_ratio:.2f}x "
                        f"the baseline (bound 1.3x)")
    rho = stats.spearmanr(WINDOW_LENGTHS,
                          [ratios[wl] for wl in WINDOW_LENGTHS]).statistic
    if rho > 0.0:
        problems.append(f"median RMSE not non-increasing in window length "
                        f"(spearman rho {rho:.2f})")
    if summary.failures:
        problems.append(f"{len(summary.failures)} runs failed")
    if elapsed >= 600.0:
        problems.append(f"runtime {elapsed:.0f} s (budget 600 s)")
    ok = not problems
    ratio_text = ", ".join(f"wl{wl} {ratios[wl]:.2f}x"
                           for wl in WINDOW_LENGTHS)
    detail = (f"50 runs: {ratio_text}; detuned {detuned_ratio:.2f}x; "
              f"rho {rho:.2f} ({elapsed:.0f} s)")
    if not ok:
        detail = "; ".join(problems) + f" [{detail}]"
    criterion(5, ok, detail)
    assert ok, detail


def test_criterion_6_covariance_recovery(criterion, big_study):
    summary, _ = big_study
    problems = []
    parts = []
    for wl in (60, 80, 100):
        res = summary.by_label(f"adaptive_0_wl{wl}")
        q_ratio = float(np.nanmedian(res.frob_Q)) / summary.frob_Q_true
        r_ratio = float(np.nanmedian(res.frob_R)) / summary.frob_R_true
        parts.append(f"wl{wl} Q {q_ratio:.2f}x R {r_ratio:.2f}x")
        if not 0.5 <= q_ratio <= 2.0:
            problems.append(f"wl={wl}: median Q norm {q_ratio:.2f}x the "
                            f"truth (bound [0.5, 2])")
        if not 0.5 <= r_ratio <= 2.0:
            problems.append(f"wl={wl}: median R norm {r_ratio:.2f}x the "
                            f"truth (bound [0.5, 2])")
    ok = not problems
    detail = "; ".join(parts) if ok else "; ".join(problems)
    criterion(6, ok, detail)
    assert ok, detail


def test_criterion_7_deterministic_outputs(criterion, tmp_path):
    start = time.perf_counter()
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    rc_a = main(["run", str(DEFAULT_CONFIG), "--output-dir", str(out_a)])
    rc_b = main(["run", str(DEFAULT_CONFIG), "--output-dir", str(out_b)])
    names = ("loglik_trace.csv", "qr_estimates.csv", "rmse_table.csv")
    identical = all((out_a / n).read_bytes() == (out_b / n).read_bytes()
                    for n in names)
    elapsed = time.perf_counter() - start
    ok = rc_a == 0 and rc_b == 0 and identical
    detail = (f"two default-config runs byte-identical across "
              f"{len(names)} CSV bodies ({elapsed:.0f} s)" if ok else
              f"rc=({rc_a}, {rc_b}), identical={identical}")
    criterion(7, ok, detail)
    assert ok, detail


def test_criterion_8_left_invariance(criterion):
    start = time.perf_counter()
    samples, init, noise = _default_run0_window(150)
    params = true_params(noise, DT)
    _, buf_a = run_window(init, samples, REFS, params)
    rng = np.random.default_rng(108)
    worst = 0.0
    for _ in range(3):
        gamma = rng.standard_normal(4)
        gamma /= np.linalg.norm(gamma)
        init_b = FilterState.create(quat.hamilton(gamma, init.q), init.P)
        _, buf_b = run_window(init_b, samples, REFS.rotated(gamma), params)
        for ra, rb in zip(buf_a.records, buf_b.records):
            worst = max(worst,
                        np.max(np.abs(ra.innovation - rb.innovation)),
                        np.max(np.abs(ra.x_prior - rb.x_prior)),
                        np.max(np.abs(ra.x_post - rb.x_post)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9
    detail = (f"150 steps x 3 random shifts, innovations and error states "
              f"agree to {worst:.1e} (bound 1e-9, {elapsed:.1f} s)")
    criterion(8, ok, detail)
    assert ok, detail
