import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigidflow import manifold as mf
from rigidflow.errors import BoxMismatch, NotSkew


def series_exp(M, terms=30):
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ M / k
        out = out + term
    return out


def axis_angle_matrix(axis, angle):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


vec3 = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_hat_examples():
    assert np.array_equal(mf.hat([0, 0, 0]), np.zeros((3, 3)))
    assert np.array_equal(mf.hat([0, 0, 1]), [[0, -1, 0], [1, 0, 0], [0, 0, 0]])


@given(vec3, vec3)
def test_hat_is_cross_product(v, w):
    H = mf.hat(v)
    assert np.allclose(H, -H.T)
    assert np.allclose(H @ w, np.cross(v, w), atol=1e-12)
    assert np.array_equal(mf.vee(H), v)


def test_vee_examples():
    assert np.array_equal(mf.vee(np.zeros((3, 3))), np.zeros(3))
    assert np.array_equal(mf.vee(mf.hat([1, 2, 3])), [1, 2, 3])
    with pytest.raises(NotSkew):
        mf.vee(np.eye(3))


def test_exp_examples():
    assert np.array_equal(mf.exp_so3([0, 0, 0]), np.eye(3))
    expected = [[0, -1, 0], [1, 0, 0], [0, 0, 1]]
    assert np.allclose(mf.exp_so3([0, 0, math.pi / 2]), expected, atol=1e-15)


@pytest.mark.parametrize("v", [(0.1, 0.2, 0.3), (1.0, -2.0, 0.5), (3e-5, -1e-5, 2e-5)])
def test_exp_matches_series(v):
    assert np.max(np.abs(mf.exp_so3(v) - series_exp(mf.hat(v)))) < 1e-10


def test_exp_taylor_branch_continuous():
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    below = mf.exp_so3(axis * (mf.THETA_SMALL * (1 - 1e-9)))
    above = mf.exp_so3(axis * (mf.THETA_SMALL * (1 + 1e-9)))
    assert np.max(np.abs(below - above)) < 1e-12


def test_log_examples():
    assert np.array_equal(mf.log_so3(np.eye(3)), np.zeros(3))
    assert np.allclose(mf.log_so3(mf.rot_z(math.pi / 2)), [0, 0, math.pi / 2], atol=1e-15)
    angle = math.pi - 1e-7
    v = mf.log_so3(axis_angle_matrix([1, 0, 0], angle))
    assert np.linalg.norm(v) == pytest.approx(angle, abs=1e-5)
    assert np.allclose(v / np.linalg.norm(v), [1, 0, 0], atol=1e-6)


def test_log_exact_pi_has_norm_pi():
    v = mf.log_so3(axis_angle_matrix([1, 2, 2], math.pi))
    assert np.linalg.norm(v) == pytest.approx(math.pi, abs=1e-12)
    assert np.allclose(mf.exp_so3(v), axis_angle_matrix([1, 2, 2], math.pi), atol=1e-12)


def test_exp_log_roundtrip_haar():
    rng = np.random.default_rng(0)
    R = mf.sample_rotation(rng, 10_000)
    err = np.linalg.norm(mf.exp_so3(mf.log_so3(R)) - R, axis=(-2, -1))
    assert err.max() < 1e-8


def test_log_exp_roundtrip():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((10_000, 3))
    v *= (rng.random(10_000) * (math.pi - 1e-3) / np.linalg.norm(v, axis=1))[:, None]
    assert np.max(np.linalg.norm(mf.log_so3(mf.exp_so3(v)) - v, axis=-1)) < 1e-8


def test_geodesic_examples():
    rng = np.random.default_rng(2)
    R0, R1 = mf.sample_rotation(rng, 2)
    assert np.array_equal(mf.geodesic(R0, R1, 0.0), R0)
    assert np.max(np.abs(mf.geodesic(R0, R1, 1.0) - R1)) < 1e-9
    half = mf.geodesic(np.eye(3), mf.rot_z(math.pi / 2), 0.5)
    assert np.allclose(half, mf.rot_z(math.pi / 4), atol=1e-15)


def test_geodesic_constant_speed():
    rng = np.random.default_rng(3)
    R0, R1 = mf.sample_rotation(rng, 2)
    h = 1e-3
    ts = np.linspace(0.0, 1.0 - h, 50)
    Rt = mf.geodesic(R0, R1, ts)
    Rh = mf.geodesic(R0, R1, ts + h)
    speed = mf.geodesic_angle(Rt, Rh) / h
    assert np.ptp(speed) < 1e-6
    assert speed[0] == pytest.approx(mf.geodesic_angle(R0, R1), abs=1e-6)


def test_rotation_target_examples():
    R = mf.sample_rotation(np.random.default_rng(4))
    assert np.allclose(mf.rotation_target(R, R), 0.0, atol=1e-15)
    assert np.allclose(mf.rotation_target(np.eye(3), mf.rot_z(math.pi / 2)), [0, 0, math.pi / 2])


def test_rotation_target_is_space_frame_velocity():
    rng = np.random.default_rng(5)
    R0, R1 = mf.sample_rotation(rng, 2)
    omega = mf.rotation_target(R0, R1)
    h = 1e-5
    for t in (0.2, 0.5, 0.8):
        dR = (mf.geodesic(R0, R1, t + h) - mf.geodesic(R0, R1, t - h)) / (2 * h)
        assert np.max(np.abs(dR - mf.hat(omega) @ mf.geodesic(R0, R1, t))) < 1e-5


def test_rk4_ode_reaches_endpoint():
    rng = np.random.default_rng(6)
    R0, R1 = mf.sample_rotation(rng, 2)
    W = mf.hat(mf.rotation_target(R0, R1))
    R, n = R0.copy(), 1000
    h = 1.0 / n
    for _ in range(n):
        k1 = W @ R
        k2 = W @ (R + 0.5 * h * k1)
        k3 = W @ (R + 0.5 * h * k2)
        k4 = W @ (R + h * k3)
        R = R + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert np.linalg.norm(R - R1) < 1e-6


def test_sample_rotation():
    a = mf.sample_rotation(np.random.default_rng(7))
    b = mf.sample_rotation(np.random.default_rng(7))
    assert np.array_equal(a, b)
    R = mf.sample_rotation(np.random.default_rng(8), 100_000)
    assert mf.is_rotation(R)
    # Haar: E[R_ij] = 0 and Var[R_ij] = 1/3
    sigma = math.sqrt(1 / 3 / len(R))
    assert abs(R[:, 0, 0].mean()) < 3 * sigma
    assert abs(R[:, 1, 2].mean()) < 3 * sigma


def test_torus_wrap():
    box = np.array([10.0, 10.0])
    assert np.allclose(mf.torus_wrap([10.5, -0.5], box).t, [0.5, 9.5])
    assert np.array_equal(mf.torus_wrap([3.0, 7.25], box).t, [3.0, 7.25])
    # tiny negatives land just below L; values that round up to L map to 0
    assert mf.torus_wrap([-1e-12, 0.0], box).t[0] == 10.0 - 1e-12
    assert mf.torus_wrap([-1e-17, 0.0], box).t[0] == 0.0


def test_torus_displacement():
    box = (10.0, 10.0)
    P = lambda *t: mf.TorusPoint(np.array(t), box)  # noqa: E731
    assert np.allclose(mf.torus_displacement(P(9.5, 0), P(0.5, 0)), [1.0, 0.0])
    assert np.array_equal(mf.torus_displacement(P(3, 4), P(3, 4)), [0.0, 0.0])
    assert np.array_equal(mf.torus_displacement(P(0, 0), P(5, 0)), [-5.0, 0.0])
    with pytest.raises(BoxMismatch):
        mf.torus_displacement(P(0, 0), mf.TorusPoint(np.zeros(2), (10.0, 12.0)))


@settings(max_examples=200)
@given(st.floats(0, 10, exclude_max=True), st.floats(0, 10, exclude_max=True), st.floats(0, 10, exclude_max=True), st.floats(0, 10, exclude_max=True))
def test_displacement_reaches_target(ax, ay, bx, by):
    box = np.array([10.0, 10.0])
    a, b = mf.TorusPoint([ax, ay], box), mf.TorusPoint([bx, by], box)
    d = mf.torus_displacement(a, b)
    assert np.all(d >= -5.0) and np.all(d < 5.0)
    assert np.allclose(mf.wrap(a.t + d, box), b.t, atol=1e-12) or np.any(np.abs(np.abs(d) - 5.0) < 1e-9)


def test_pure_functions_bit_identical():
    v = np.array([0.3, -1.1, 2.0])
    assert np.array_equal(mf.exp_so3(v), mf.exp_so3(v.copy()))
    R = mf.exp_so3(v)
    assert np.array_equal(mf.log_so3(R), mf.log_so3(R.copy()))


def test_project_to_so3():
    R = mf.sample_rotation(np.random.default_rng(9))
    noisy = R + 1e-7 * np.random.default_rng(10).standard_normal((3, 3))
    P = mf.project_to_so3(noisy)
    assert mf.is_rotation(P, 1e-12)
    assert np.linalg.norm(P - R) < 1e-6
