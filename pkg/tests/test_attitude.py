"""Process/measurement model tests against finite-difference and
matrix-exponential oracles, plus the frozen numeric examples."""

import numpy as np
import pytest
from scipy.linalg import expm

import oracles
from liekf import attitude, quaternion as quat


REFS = attitude.ReferenceFields()


def random_units(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def test_reference_fields_defaults():
    assert np.allclose(REFS.gravity, [0, 0, 1], atol=0)
    assert abs(np.linalg.norm(REFS.magnetic) - 1.0) <= 1e-12
    assert abs(REFS.magnetic @ REFS.gravity) < 1 - 1e-6


def test_reference_fields_validation():
    with pytest.raises(ValueError):
        attitude.ReferenceFields(gravity=(0, 0, 2))
    with pytest.raises(ValueError):
        attitude.ReferenceFields(magnetic=(0, 0, 1))  # parallel to g
    with pytest.raises(ValueError):
        attitude.ReferenceFields(magnetic=(0, 0, -1))  # anti-parallel


def test_reference_fields_rotated():
    gamma = quat.exp_map([0.2, -0.1, 0.4])
    rot = REFS.rotated(gamma)
    assert np.allclose(rot.gravity, quat.rotate_body_to_world(gamma, REFS.gravity),
                       atol=1e-12)
    assert abs(np.linalg.norm(rot.gravity) - 1.0) <= 1e-12
    assert abs(np.linalg.norm(rot.magnetic) - 1.0) <= 1e-12


def test_imu_sample_validation():
    ok = attitude.ImuSample(omega=(0.1, 0, 0), accel=(0, 0, 1),
                            mag=(1, 0, 0), dt=0.01)
    assert np.array_equal(ok.z, [0, 0, 1, 1, 0, 0])
    with pytest.raises(ValueError):
        attitude.ImuSample(omega=(0.1, 0), accel=(0, 0, 1), mag=(1, 0, 0),
                           dt=0.01)
    with pytest.raises(ValueError):
        attitude.ImuSample(omega=(0.1, 0, 0), accel=(0, 0, 1), mag=(1, 0, 0),
                           dt=0.0)
    with pytest.raises(ValueError):
        attitude.ImuSample(omega=(np.nan, 0, 0), accel=(0, 0, 1),
                           mag=(1, 0, 0), dt=0.01)


def test_noise_spec_validation():
    attitude.NoiseSpec(sigma_eta=np.eye(3) * 0.1, sigma_a=np.eye(3),
                       sigma_m=np.eye(3))
    bad = np.eye(3)
    bad[0, 1] = 0.5  # asymmetric
    with pytest.raises(ValueError):
        attitude.NoiseSpec(sigma_eta=bad, sigma_a=np.eye(3),
                           sigma_m=np.eye(3))
    with pytest.raises(ValueError):
        attitude.NoiseSpec(sigma_eta=-np.eye(3), sigma_a=np.eye(3),
                           sigma_m=np.eye(3))


def test_propagate_zero_rate_identity():
    rng = np.random.default_rng(31)
    for q in random_units(rng, 50):
        out = attitude.propagate_quaternion(q, np.zeros(3), 0.01)
        assert np.allclose(out, q, atol=1e-15)


def test_propagate_frozen_first_order_step():
    # identity, omega=(0.1,0,0), dt=0.01: (1, 0.0005, 0, 0) pre-renorm
    out = attitude.propagate_quaternion(quat.IDENTITY, [0.1, 0, 0], 0.01)
    expect = np.array([1.0, 0.0005, 0.0, 0.0])
    expect /= np.linalg.norm(expect)
    assert np.allclose(out, expect, atol=1e-15)


def test_propagate_matches_constant_rate_closed_form():
    rng = np.random.default_rng(32)
    omega = np.array([0.7, -0.9, 0.4])
    dt = 0.001
    n = 1000
    q = random_units(rng, 1)[0]
    q_num = q.copy()
    for _ in range(n):
        q_num = attitude.propagate_quaternion(q_num, omega, dt)
    q_exact = quat.hamilton(q, quat.exp_map(omega * (n * dt) / 2))
    assert np.linalg.norm(q_num - q_exact) < 1e-4


def test_propagate_unit_norm_random_steps():
    rng = np.random.default_rng(33)
    qs = random_units(rng, 100000)
    omegas = rng.uniform(-5, 5, size=(100000, 3))
    dts = rng.uniform(1e-4, 0.05, size=100000)
    for q, w, dt in zip(qs, omegas, dts):
        out = attitude.propagate_quaternion(q, w, dt)
        assert abs(np.linalg.norm(out) - 1.0) <= 1e-12


def test_measure_h_identity_exact():
    z = attitude.measure_h(quat.IDENTITY, REFS)
    assert np.array_equal(z[:3], REFS.gravity)
    assert np.array_equal(z[3:], REFS.magnetic)


def test_measure_h_unit_blocks_and_oracle():
    rng = np.random.default_rng(34)
    for q in random_units(rng, 300):
        z = attitude.measure_h(q, REFS)
        assert abs(np.linalg.norm(z[:3]) - 1.0) <= 1e-12
        assert abs(np.linalg.norm(z[3:]) - 1.0) <= 1e-12
        ref = np.concatenate([
            oracles.rotate_world_to_body_dcm(q, REFS.gravity),
            oracles.rotate_world_to_body_dcm(q, REFS.magnetic),
        ])
        assert np.allclose(z, ref, atol=1e-10)


def test_jacobian_identity_block():
    H = attitude.jacobian_H(quat.IDENTITY, REFS)
    assert np.array_equal(H[:3], quat.skew(REFS.gravity))
    assert np.array_equal(H[3:], quat.skew(REFS.magnetic))


def test_jacobian_blocks_antisymmetric():
    rng = np.random.default_rng(35)
    for q in random_units(rng, 100):
        H = attitude.jacobian_H(q, REFS)
        assert np.allclose(H[:3], -H[:3].T, atol=1e-14)
        assert np.allclose(H[3:], -H[3:].T, atol=1e-14)


def test_jacobian_matches_finite_differences():
    # H is the sensitivity of h(q * exp(xi/2)) at xi = 0
    rng = np.random.default_rng(36)
    worst = 0.0
    for q in random_units(rng, 100):
        def h_of_xi(xi, q=q):
            return attitude.measure_h(
                quat.hamilton(q, quat.exp_map(xi / 2)), REFS)
        J = oracles.finite_difference_jacobian(h_of_xi, np.zeros(3), 1e-6)
        H = attitude.jacobian_H(q, REFS)
        worst = max(worst, np.max(np.abs(J - H)))
    assert worst < 1e-5


def test_transition_frozen_example():
    F = attitude.transition_F([0, 0, 1], 0.01)
    expect = np.eye(3)
    expect[0, 1] = 0.01
    expect[1, 0] = -0.01
    assert np.allclose(F, expect, atol=0)


def test_transition_zero_rate():
    assert np.array_equal(attitude.transition_F(np.zeros(3), 0.5), np.eye(3))


def test_transition_inverse_pair_to_second_order():
    rng = np.random.default_rng(37)
    for _ in range(100):
        w = rng.uniform(-3, 3, 3)
        dt = rng.uniform(1e-4, 0.02)
        prod = attitude.transition_F(w, dt) @ attitude.transition_F(-w, dt)
        assert np.linalg.norm(prod - np.eye(3)) <= 2 * (dt * np.linalg.norm(w)) ** 2


def test_transition_matches_matrix_exponential():
    rng = np.random.default_rng(38)
    for _ in range(100):
        w = rng.uniform(-3, 3, 3)
        dt = rng.uniform(1e-4, 0.1)
        a = dt * np.linalg.norm(w)
        exact = expm(-dt * quat.skew(w))
        err = np.linalg.norm(attitude.transition_F(w, dt) - exact)
        assert err <= 0.9 * a * a


def test_process_noise_frozen_values():
    Q = attitude.process_noise_Q(np.diag([0.075, 0.15, 0.1]), 0.01)
    assert np.allclose(Q, np.diag([0.75e-5, 1.5e-5, 1.0e-5]), rtol=1e-14,
                       atol=0)
    assert np.array_equal(
        attitude.process_noise_Q(np.zeros((3, 3)), 0.01), np.zeros((3, 3)))
    base = attitude.process_noise_Q(np.eye(3), 0.01)
    assert np.allclose(
        attitude.process_noise_Q(np.eye(3), 0.02), 4 * base, rtol=1e-14)


def test_assemble_R_frozen_values():
    R = attitude.assemble_R(np.diag([1e-5, 2e-5, 3e-5]),
                            np.diag([3e-5, 3.5e-5, 6e-5]))
    assert np.allclose(
        R, np.diag([1e-5, 2e-5, 3e-5, 3e-5, 3.5e-5, 6e-5]), rtol=1e-14,
        atol=0)
    assert np.array_equal(R[:3, 3:], np.zeros((3, 3)))
    assert np.array_equal(R[3:, :3], np.zeros((3, 3)))
    assert np.array_equal(attitude.assemble_R(np.eye(3), np.eye(3)),
                          np.eye(6))


def test_attitude_from_vectors_recovers_noise_free():
    rng = np.random.default_rng(21)
    for q in random_units(rng, 100):
        q_hat = attitude.attitude_from_vectors(attitude.measure_h(q, REFS),
                                               REFS)
        d = quat.hamilton(quat.conjugate(q_hat), q)
        angle = 2.0 * np.arctan2(np.linalg.norm(d[1:]), abs(d[0]))
        assert angle < 1e-12
        assert q_hat[0] >= 0.0
        assert abs(np.linalg.norm(q_hat) - 1.0) < 1e-12


def test_attitude_from_vectors_left_equivariant():
    # Rotating the world references rotates the solution from the left.
    rng = np.random.default_rng(22)
    gamma = rng.standard_normal(4)
    gamma /= np.linalg.norm(gamma)
    shifted = attitude.ReferenceFields(
        gravity=quat.rotate_body_to_world(gamma, REFS.gravity),
        magnetic=quat.rotate_body_to_world(gamma, REFS.magnetic))
    for q in random_units(rng, 20):
        z = attitude.measure_h(q, REFS)
        q_a = attitude.attitude_from_vectors(z, REFS)
        q_b = attitude.attitude_from_vectors(z, shifted)
        expect = quat.hamilton(gamma, q_a)
        assert min(np.linalg.norm(q_b - expect),
                   np.linalg.norm(q_b + expect)) < 1e-9


def test_attitude_from_vectors_shape_check():
    with pytest.raises(ValueError):
        attitude.attitude_from_vectors(np.zeros(5), REFS)
