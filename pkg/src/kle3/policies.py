"""Equilibrium policies (LQR) and Lyapunov certificates.

The Riccati equation is solved with a Kleinman-Newton iteration seeded by a
stabilizing gain from Bass' Lyapunov-equation construction, so synthesis is
dependency-free and checkable against its own residual. The certificate is
the LQR value function V(x) = e' P e, which satisfies the equilibrium-policy
conditions locally for the linearized closed loop.
"""

from dataclasses import dataclass

import numpy as np


class SynthesisError(RuntimeError):
    """Riccati synthesis failed; carries the final residual norm."""

    def __init__(self, message, residual=np.inf):
        super().__init__(message)
        self.residual = residual


def solve_lyapunov(M, C):
    """Solve M' P + P M = -C for P by Kronecker vectorization.

    One pass of iterative refinement guards against badly scaled right-hand
    sides from aggressive stabilizing gains.
    """
    n = M.shape[0]
    lhs = np.kron(M.T, np.eye(n)) + np.kron(np.eye(n), M.T)
    rhs = -C.reshape(-1)
    vec = np.linalg.solve(lhs, rhs)
    vec = vec + np.linalg.solve(lhs, rhs - lhs @ vec)
    P = vec.reshape(n, n)
    return 0.5 * (P + P.T)


def _is_hurwitz(A):
    return np.max(np.linalg.eigvals(A).real) < 0.0


def _bass_stabilizing_gain(A, B):
    """Stabilizing gain K0 = B' Z^-1 with Z from Bass' Lyapunov equation."""
    n = A.shape[0]
    beta = 1.2 * np.max(np.abs(np.linalg.eigvals(A).real)) + 0.5
    for _ in range(8):
        M = A + beta * np.eye(n)
        lhs = np.kron(M, np.eye(n)) + np.kron(np.eye(n), M)
        Z = np.linalg.solve(lhs, (2.0 * B @ B.T).reshape(-1)).reshape(n, n)
        Z = 0.5 * (Z + Z.T)
        try:
            K0 = np.linalg.solve(Z, B).T
        except np.linalg.LinAlgError:
            raise SynthesisError("Bass initialization failed: (A, B) not controllable")
        if _is_hurwitz(A - B @ K0):
            return K0
        beta *= 2.0
    raise SynthesisError("Bass initialization failed to stabilize (A, B)")


def care_residual(A, B, Q, R, P):
    Rinv = np.linalg.inv(R)
    res = A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q
    return np.max(np.abs(res))


def lqr_synthesize(A, B, Q, R, max_iter=200, tol=1e-10):
    """LQR gain and value matrix from the continuous Riccati equation.

    Returns (K, P) with P solving A'P + PA - PBR^-1B'P + Q = 0 and
    K = R^-1 B' P, so A - BK is Hurwitz.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Rinv = np.linalg.inv(R)

    K = np.zeros((B.shape[1], A.shape[0])) if _is_hurwitz(A) else _bass_stabilizing_gain(A, B)
    residual = np.inf
    for _ in range(max_iter):
        P = solve_lyapunov(A - B @ K, Q + K.T @ R @ K)
        K_new = Rinv @ B.T @ P
        # damp the Newton step if roundoff pushed it outside the stabilizing set
        t = 1.0
        while t > 1e-4 and not _is_hurwitz(A - B @ (K + t * (K_new - K))):
            t *= 0.5
        K = K + t * (K_new - K)
        residual = care_residual(A, B, Q, R, P)
        # the attainable floor scales with the magnitude of the CARE terms
        scale = max(np.max(np.abs(A.T @ P)), np.max(np.abs(Q)), 1.0)
        if residual < max(tol, 5e-11 * scale):
            return K, P
    raise SynthesisError(
        f"Kleinman iteration did not converge in {max_iter} steps "
        f"(residual {residual:.3e})", residual=residual)


@dataclass(frozen=True)
class EquilibriumPolicy:
    """Feedback law mu(x) = u_eq - K (x - x_eq) with constant Jacobian -K."""

    K: np.ndarray
    x_eq: np.ndarray
    u_eq: np.ndarray

    def __call__(self, x):
        return self.u_eq - self.K @ (x - self.x_eq)

    @property
    def jacobian(self):
        return -self.K

    def with_reference(self, x_ref):
        """Same gain, retargeted reference state (u_eq unchanged)."""
        return EquilibriumPolicy(self.K, np.asarray(x_ref, dtype=float), self.u_eq)


@dataclass(frozen=True)
class ClampedPolicy:
    """Wraps a policy with element-wise actuator limits."""

    base: object
    lower: np.ndarray
    upper: np.ndarray

    def __call__(self, x):
        return np.clip(self.base(x), self.lower, self.upper)


def lqr_policy(system, Q, R):
    """Synthesize the equilibrium LQR policy and its Lyapunov certificate."""
    from .dynamics import linearize

    A, B = linearize(system.model, system.x_eq, system.u_eq)
    K, P = lqr_synthesize(A, B, Q, R)
    policy = EquilibriumPolicy(K, system.x_eq, system.u_eq)
    cert = LyapunovCertificate(P, system.x_eq)
    return policy, cert


@dataclass(frozen=True)
class LyapunovCertificate:
    """Quadratic certificate V(x) = (x - x_eq)' P (x - x_eq)."""

    P: np.ndarray
    x_eq: np.ndarray

    def value(self, x):
        e = np.asarray(x) - self.x_eq
        if e.ndim == 1:
            return float(e @ self.P @ e)
        return np.einsum("ij,jk,ik->i", e, self.P, e)

    def gradient(self, x):
        return 2.0 * self.P @ (np.asarray(x) - self.x_eq)

    def min_eigenvalue(self):
        return float(np.min(np.linalg.eigvalsh(self.P)))

    def closed_loop_decay(self, A, B, K):
        """Largest eigenvalue of (A-BK)'P + P(A-BK); negative means Eq-style decrease."""
        Acl = A - B @ K
        S = Acl.T @ self.P + self.P @ Acl
        return float(np.max(np.linalg.eigvalsh(0.5 * (S + S.T))))


@dataclass(frozen=True)
class LyapunovTrace:
    """V and Vdot along a trajectory; Vdot uses the recorded controls."""

    times: np.ndarray
    values: np.ndarray
    derivatives: np.ndarray

    @property
    def max_value(self):
        return float(np.max(self.values))

    def nonneg_derivative_times(self):
        return self.times[self.derivatives >= 0.0]


def lyapunov_trace(cert, traj, model):
    """Evaluate (t, V, Vdot) along ``traj``; the final control is held."""
    states = traj.states
    controls = traj.controls
    V = cert.value(states)
    Vdot = np.empty(len(states))
    for j in range(len(states)):
        u = controls[min(j, len(controls) - 1)]
        Vdot[j] = cert.gradient(states[j]) @ model.eval(states[j], u)
    return LyapunovTrace(times=traj.times, values=V, derivatives=Vdot)
