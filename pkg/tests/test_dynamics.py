import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

import kle3
from kle3.dynamics import DivergenceError, LinearModel, rollout, step_dynamics

ALL_SYSTEMS = [kle3.double_integrator_2d, kle3.cart_pole,
               kle3.cart_double_pendulum, kle3.quadcopter]


def fd_jacobian_x(model, x, u, eps=1e-6):
    J = np.zeros((model.n, model.n))
    for k in range(model.n):
        dx = np.zeros(model.n)
        dx[k] = eps
        J[:, k] = (model.eval(x + dx, u) - model.eval(x - dx, u)) / (2 * eps)
    return J


def fd_jacobian_u(model, x, u, eps=1e-6):
    J = np.zeros((model.n, model.m))
    for k in range(model.m):
        du = np.zeros(model.m)
        du[k] = eps
        J[:, k] = (model.eval(x, u + du) - model.eval(x, u - du)) / (2 * eps)
    return J


def test_double_integrator_chain():
    s = kle3.double_integrator_2d()
    out = s.model.eval(np.array([1.0, 2.0, 0.5, -0.5]), np.array([3.0, 4.0]))
    np.testing.assert_allclose(out, [0.5, -0.5, 3.0, 4.0])


@pytest.mark.parametrize("make", ALL_SYSTEMS)
def test_equilibria(make):
    s = make()
    resid = s.model.eval(s.x_eq, s.u_eq)
    assert np.max(np.abs(resid)) < 1e-8


def test_cart_double_pendulum_vs_lagrangian_oracle():
    """Energy-based numerical Euler-Lagrange oracle for the manipulator form."""
    s = kle3.cart_double_pendulum()
    mdl = s.model

    def kinetic(q, qd):
        x, th1, th2 = q
        xd, w1, w2 = qd
        v1sq = xd**2 + 2 * mdl.l1 * xd * w1 * np.cos(th1) + mdl.l1**2 * w1**2
        v2sq = (xd**2 + mdl.l1**2 * w1**2 + mdl.l2**2 * w2**2
                + 2 * mdl.l1 * xd * w1 * np.cos(th1)
                + 2 * mdl.l2 * xd * w2 * np.cos(th2)
                + 2 * mdl.l1 * mdl.l2 * w1 * w2 * np.cos(th1 - th2))
        return 0.5 * mdl.mc * xd**2 + 0.5 * mdl.m1 * v1sq + 0.5 * mdl.m2 * v2sq

    def potential(q):
        return (mdl.m1 * mdl.grav * mdl.l1 * np.cos(q[1])
                + mdl.m2 * mdl.grav * (mdl.l1 * np.cos(q[1]) + mdl.l2 * np.cos(q[2])))

    def lagrangian_accel(q, qd, u, eps=1e-6, eps2=3e-4):
        # second differences use a larger step: truncation and roundoff
        # balance near eps2 ~ (machine eps)^(1/4)
        M = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                pp = np.zeros(3)
                pm = np.zeros(3)
                pp[i] += eps2
                pp[j] += eps2
                pm[i] += eps2
                pm[j] -= eps2
                M[i, j] = (kinetic(q, qd + pp) - kinetic(q, qd + pm)
                           - kinetic(q, qd - pm) + kinetic(q, qd - pp)) / (4 * eps2**2)
        # d/dt dT/dqd - dT/dq + dV/dq = B u, solved for qdd
        dTdqd = np.zeros(3)
        dTdq = np.zeros(3)
        dVdq = np.zeros(3)
        for i in range(3):
            d = np.zeros(3)
            d[i] = eps
            dTdqd[i] = (kinetic(q, qd + d) - kinetic(q, qd - d)) / (2 * eps)
            dTdq[i] = (kinetic(q + d, qd) - kinetic(q - d, qd)) / (2 * eps)
            dVdq[i] = (potential(q + d) - potential(q - d)) / (2 * eps)
        # partial of dT/dqd with respect to q, contracted with qd
        cross = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                dq = np.zeros(3)
                dq[j] = eps2
                dv = np.zeros(3)
                dv[i] = eps2
                cross[i, j] = (kinetic(q + dq, qd + dv) - kinetic(q + dq, qd - dv)
                               - kinetic(q - dq, qd + dv) + kinetic(q - dq, qd - dv)) / (4 * eps2**2)
        rhs = np.array([u, 0.0, 0.0]) - cross @ qd + dTdq - dVdq
        return np.linalg.solve(M, rhs)

    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.normal(0, 0.4, 6)
        u = rng.normal(0, 2.0, 1)
        got = mdl.eval(x, u)[3:]
        want = lagrangian_accel(x[:3], x[3:], u[0])
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-6 * max(1, np.max(np.abs(want))))


@pytest.mark.parametrize("make", ALL_SYSTEMS)
def test_control_affinity(make):
    s = make()
    rng = np.random.default_rng(11)
    for _ in range(5):
        x = s.x_eq + rng.normal(0, 0.3, s.model.n)
        u1 = s.u_eq + rng.normal(0, 0.5, s.model.m)
        u2 = s.u_eq + rng.normal(0, 0.5, s.model.m)
        lhs = s.model.eval(x, u1) - s.model.eval(x, u2)
        rhs = s.model.h(x) @ (u1 - u2)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("make", ALL_SYSTEMS)
def test_jacobians_match_finite_differences(make):
    s = make()
    rng = np.random.default_rng(5)
    for _ in range(4):
        x = s.x_eq + rng.normal(0, 0.25, s.model.n)
        u = s.u_eq + rng.normal(0, 0.5, s.model.m)
        Jx = s.model.jacobian_x(x, u)
        Ju = s.model.jacobian_u(x)
        scale = max(np.max(np.abs(Jx)), 1.0)
        assert np.max(np.abs(Jx - fd_jacobian_x(s.model, x, u))) / scale < 1e-4
        scale_u = max(np.max(np.abs(Ju)), 1.0)
        assert np.max(np.abs(Ju - fd_jacobian_u(s.model, x, u))) / scale_u < 1e-4


def test_linearize_double_integrator_block_form():
    s = kle3.double_integrator_2d()
    A, B = kle3.linearize(s.model, s.x_eq, s.u_eq)
    np.testing.assert_allclose(A[:2, 2:], np.eye(2))
    np.testing.assert_allclose(A[2:], 0.0, atol=1e-12)
    np.testing.assert_allclose(B[:2], 0.0, atol=1e-12)
    np.testing.assert_allclose(B[2:], np.eye(2))


def test_linearize_quadcopter_gravity_tilt():
    s = kle3.quadcopter()
    A, _ = kle3.linearize(s.model, s.x_eq, s.u_eq)
    g = s.params["gravity"]
    assert abs(A[6, 4] - g) < 1e-6   # pitch tips forward acceleration
    assert abs(A[7, 3] + g) < 1e-6   # roll tips lateral acceleration


def test_linearize_cart_pole_upright_unstable():
    s = kle3.cart_pole()
    A, _ = kle3.linearize(s.model, s.x_eq, s.u_eq)
    assert np.max(np.linalg.eigvals(A).real) > 0.1


def test_eval_dimension_mismatch():
    s = kle3.cart_pole()
    with pytest.raises(ValueError):
        s.model.eval(np.zeros(3), np.zeros(1))
    with pytest.raises(ValueError):
        s.model.eval(np.zeros(4), np.zeros(2))


def test_rollout_zero_dynamics_constant():
    zero = LinearModel(np.zeros((2, 2)), np.zeros((2, 1)))
    traj = rollout(zero, lambda x: np.array([3.0]), np.array([1.0, -2.0]), 0.0, 1.0, 0.1)
    np.testing.assert_allclose(traj.states, np.tile([1.0, -2.0], (11, 1)))


def test_rollout_scalar_decay():
    model = LinearModel(np.array([[-1.0]]), np.array([[0.0]]))
    traj = rollout(model, lambda x: np.zeros(1), np.array([1.0]), 0.0, 1.0, 0.01)
    assert abs(traj.states[-1, 0] - np.exp(-1.0)) < 1e-6


def test_rollout_linear_matches_matrix_exponential():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(3, 3))
    A = A - 2.0 * np.eye(3)
    model = LinearModel(A, np.zeros((3, 1)))
    x0 = rng.normal(size=3)
    traj = rollout(model, lambda x: np.zeros(1), x0, 0.0, 1.0, 0.01)
    want = expm(A) @ x0
    assert np.max(np.abs(traj.states[-1] - want)) / np.max(np.abs(want)) < 1e-6


def test_rollout_rk4_order():
    s = kle3.double_integrator_2d()
    K = np.array([[1.0, 0.0, 1.2, 0.0], [0.0, 1.0, 0.0, 1.2]])

    def policy(x):
        return -K @ x + 0.3 * np.tanh(x[:2])

    x0 = np.array([0.8, -0.5, 0.2, 0.4])
    ends = [rollout(s.model, policy, x0, 0.0, 1.0, dt).states[-1]
            for dt in (0.02, 0.01, 0.005)]
    e1 = np.linalg.norm(ends[0] - ends[1])
    e2 = np.linalg.norm(ends[1] - ends[2])
    order = np.log2(e1 / e2)
    assert order >= 3.5


def test_rollout_blowup_guard():
    model = LinearModel(np.array([[5.0]]), np.array([[0.0]]))
    with pytest.raises(DivergenceError) as err:
        rollout(model, lambda x: np.zeros(1), np.array([1.0]), 0.0, 20.0, 0.01)
    assert err.value.time > 0


def test_quadcopter_lqr_lyapunov_nonincreasing():
    s = kle3.quadcopter()
    Q = np.diag([10.0, 10, 10, 5, 5, 5, 1, 1, 1, 0.5, 0.5, 0.5])
    policy, cert = kle3.lqr_policy(s, Q, 2 * np.eye(4))
    rng = np.random.default_rng(0)
    x0 = s.x_eq + 0.05 * rng.normal(size=12)
    traj = rollout(s.model, policy, x0, 0.0, 2.0, 0.01)
    V = cert.value(traj.states)
    assert np.all(np.diff(V) <= 1e-9)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        kle3.Trajectory(0.0, 1.0, 0.1, np.zeros((5, 2)), np.zeros((10, 1)))
    with pytest.raises(ValueError):
        kle3.Trajectory(0.0, 1.0, -0.1, np.zeros((11, 2)), np.zeros((10, 1)))
    bad = np.zeros((11, 2))
    bad[3, 0] = np.nan
    with pytest.raises(ValueError):
        kle3.Trajectory(0.0, 1.0, 0.1, bad, np.zeros((10, 1)))


@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=-0.5, max_value=0.5), st.floats(min_value=-1.0, max_value=1.0))
def test_step_methods_consistent(x0, u0):
    model = LinearModel(np.array([[-0.5]]), np.array([[1.0]]))
    u_fn = lambda t, x: np.array([u0])
    x = np.array([x0])
    rk4 = step_dynamics(model, x, u_fn, 0.0, 0.01)
    eul = step_dynamics(model, x, u_fn, 0.0, 0.01, method="euler")
    assert abs(rk4[0] - eul[0]) < 1e-4
