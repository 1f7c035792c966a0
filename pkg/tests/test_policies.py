import numpy as np
import pytest
import scipy.linalg as sla

import kle3
from kle3.policies import SynthesisError, care_residual, lqr_synthesize, lyapunov_trace

BENCH = [
    (kle3.double_integrator_2d, np.eye(4), np.eye(2)),
    (kle3.cart_pole, np.diag([1.0, 10.0, 1.0, 1.0]), np.eye(1)),
    (kle3.cart_double_pendulum, np.diag([1.0, 50, 50, 1, 5, 5]), np.eye(1)),
    (kle3.quadcopter, np.diag([10.0, 10, 10, 5, 5, 5, 1, 1, 1, 0.5, 0.5, 0.5]), 2 * np.eye(4)),
]


def test_scalar_closed_form():
    K, P = lqr_synthesize(np.array([[0.0]]), np.array([[1.0]]),
                          np.array([[1.0]]), np.array([[1.0]]))
    np.testing.assert_allclose(P, [[1.0]], atol=1e-10)
    np.testing.assert_allclose(K, [[1.0]], atol=1e-10)


def test_hurwitz_zero_cost():
    A = np.array([[-1.0, 0.3], [0.0, -2.0]])
    K, P = lqr_synthesize(A, np.array([[0.0], [1.0]]), np.zeros((2, 2)), np.eye(1))
    np.testing.assert_allclose(P, 0.0, atol=1e-12)
    np.testing.assert_allclose(K, 0.0, atol=1e-12)


def test_double_integrator_vs_independent_solver():
    s = kle3.double_integrator_2d()
    A, B = kle3.linearize(s.model, s.x_eq, s.u_eq)
    K, P = lqr_synthesize(A, B, np.eye(4), np.eye(2))
    P_ref = sla.solve_continuous_are(A, B, np.eye(4), np.eye(2))
    assert np.max(np.abs(P - P_ref)) < 1e-6


@pytest.mark.parametrize("make,Q,R", BENCH)
def test_care_residual_and_stability(make, Q, R):
    s = make()
    A, B = kle3.linearize(s.model, s.x_eq, s.u_eq)
    K, P = lqr_synthesize(A, B, Q, R)
    assert care_residual(A, B, Q, R, P) < 1e-8
    assert np.max(np.linalg.eigvals(A - B @ K).real) < 0
    cert = kle3.LyapunovCertificate(P, s.x_eq)
    assert cert.min_eigenvalue() > 0
    assert cert.closed_loop_decay(A, B, K) < 0


def test_synthesis_error_reports_residual():
    # uncontrollable unstable pair cannot be stabilized
    A = np.array([[1.0, 0.0], [0.0, 1.0]])
    B = np.array([[0.0], [0.0]])
    with pytest.raises(SynthesisError):
        lqr_synthesize(A, B, np.eye(2), np.eye(1))


def test_policy_reference_and_jacobian():
    K = np.array([[1.0, 2.0]])
    pol = kle3.EquilibriumPolicy(K, np.array([0.5, -0.5]), np.array([0.3]))
    np.testing.assert_allclose(pol(np.array([0.5, -0.5])), [0.3])
    np.testing.assert_allclose(pol.jacobian, -K)
    moved = pol.with_reference(np.array([1.0, 0.0]))
    np.testing.assert_allclose(moved(np.array([1.0, 0.0])), [0.3])


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    M = rng.normal(size=(3, 3))
    P = M @ M.T + np.eye(3)
    cert = kle3.LyapunovCertificate(P, np.zeros(3))
    for _ in range(5):
        x = rng.normal(size=3)
        g = cert.gradient(x)
        fd = np.zeros(3)
        for k in range(3):
            d = np.zeros(3)
            d[k] = 1e-6
            fd[k] = (cert.value(x + d) - cert.value(x - d)) / 2e-6
        assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12) < 1e-6


def test_lyapunov_trace_constant_at_equilibrium():
    s = kle3.double_integrator_2d()
    policy, cert = kle3.lqr_policy(s, np.eye(4), np.eye(2))
    traj = kle3.rollout(s.model, policy, s.x_eq, 0.0, 1.0, 0.05)
    tr = lyapunov_trace(cert, traj, s.model)
    np.testing.assert_allclose(tr.values, 0.0, atol=1e-18)


def test_lyapunov_trace_strictly_decreasing_closed_loop():
    s = kle3.double_integrator_2d()
    policy, cert = kle3.lqr_policy(s, np.eye(4), np.eye(2))
    x0 = np.array([1.0, -1.0, 0.5, 0.2])
    traj = kle3.rollout(s.model, policy, x0, 0.0, 2.0, 0.02)
    tr = lyapunov_trace(cert, traj, s.model)
    assert np.all(np.diff(tr.values) < 0)
    assert np.all(tr.derivatives < 0)
    assert tr.max_value == tr.values[0]
    assert len(tr.nonneg_derivative_times()) == 0
