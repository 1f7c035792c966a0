"""Control-affine benchmark dynamics and fixed-step simulation.

Every model has the form ``dx/dt = g(x) + h(x) u`` with drift ``g`` and
actuation matrix ``h``. Angles are measured from the upright configuration so
each benchmark has its named equilibrium at the origin of the error
coordinates. Jacobians with respect to the state default to complex-step
differentiation (exact to roundoff for the smooth models here); the control
Jacobian is ``h(x)`` exactly by control-affinity.
"""

from dataclasses import dataclass, field

import numpy as np

_CSTEP = 1e-20  # complex-step size; derivative error is O(step^2) ~ 0


class NumericOverflowError(RuntimeError):
    """A model produced a non-finite state derivative."""


class DivergenceError(RuntimeError):
    """A rollout exceeded the blow-up bound."""

    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


class TransitionModel:
    """Continuous-time control-affine model ``dx/dt = g(x) + h(x) u``."""

    name = "model"
    n = 0
    m = 0

    def g(self, x):
        raise NotImplementedError

    def h(self, x):
        raise NotImplementedError

    def eval(self, x, u):
        """State derivative ``g(x) + h(x) u`` with dimension/finite checks."""
        x = np.asarray(x)
        u = np.asarray(u)
        if x.shape != (self.n,):
            raise ValueError(f"{self.name}: state has shape {x.shape}, expected ({self.n},)")
        if u.shape != (self.m,):
            raise ValueError(f"{self.name}: control has shape {u.shape}, expected ({self.m},)")
        dx = self.g(x) + self.h(x) @ u
        if not np.all(np.isfinite(dx)):
            raise NumericOverflowError(f"non-finite derivative from model '{self.name}'")
        return dx

    def __call__(self, x, u):
        return self.eval(x, u)

    def jacobian_x(self, x, u):
        """d(dx/dt)/dx by complex-step differentiation."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        J = np.empty((self.n, self.n))
        for k in range(self.n):
            xc = x.astype(complex)
            xc[k] += 1j * _CSTEP
            J[:, k] = (self.g(xc) + self.h(xc) @ u).imag / _CSTEP
        return J

    def jacobian_u(self, x):
        """d(dx/dt)/du, which is h(x) exactly for control-affine models."""
        return self.h(np.asarray(x, dtype=float))


class LinearModel(TransitionModel):
    """``dx/dt = A (x - x_ref) + B (u - u_ref)``, the planning-model form."""

    def __init__(self, A, B, x_ref=None, u_ref=None, name="linear"):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        self.A = A
        self.B = B
        self.n = A.shape[0]
        self.m = B.shape[1]
        self.x_ref = np.zeros(self.n) if x_ref is None else np.asarray(x_ref, dtype=float)
        self.u_ref = np.zeros(self.m) if u_ref is None else np.asarray(u_ref, dtype=float)
        self.name = name

    def g(self, x):
        return self.A @ (x - self.x_ref) - self.B @ self.u_ref

    def h(self, x):
        return self.B

    def jacobian_x(self, x, u):
        return self.A.copy()


class IntegratorChain(TransitionModel):
    """d-dimensional double integrator: positions then velocities, u = accel."""

    def __init__(self, dim=2):
        self.dim = dim
        self.n = 2 * dim
        self.m = dim
        self.name = f"double-integrator-{dim}d"

    def g(self, x):
        return np.concatenate([x[self.dim:], 0.0 * x[:self.dim]])

    def h(self, x):
        H = np.zeros((self.n, self.m))
        H[self.dim:, :] = np.eye(self.dim)
        return H

    def jacobian_x(self, x, u):
        A = np.zeros((self.n, self.n))
        A[:self.dim, self.dim:] = np.eye(self.dim)
        return A


class CartPole(TransitionModel):
    """Classic cart pole, pole angle measured from upright.

    State (x, th, xdot, thdot); control = horizontal force on the cart.
    """

    n = 4
    m = 1
    name = "cart-pole"

    def __init__(self, cart_mass=1.0, pole_mass=0.1, length=0.5, gravity=9.81):
        self.mc = cart_mass
        self.mp = pole_mass
        self.l = length
        self.grav = gravity

    def _den(self, th):
        return self.mc + self.mp * np.sin(th) ** 2

    def g(self, x):
        th, xdot, thdot = x[1], x[2], x[3]
        s, c = np.sin(th), np.cos(th)
        den = self._den(th)
        xacc = self.mp * s * (self.l * thdot**2 - self.grav * c) / den
        thacc = ((self.mc + self.mp) * self.grav * s - self.mp * self.l * thdot**2 * s * c) / (self.l * den)
        return np.stack([xdot, thdot, xacc, thacc])

    def h(self, x):
        th = x[1]
        den = self._den(th)
        col = np.stack([0.0 * th, 0.0 * th, 1.0 / den, -np.cos(th) / (self.l * den)])
        return col.reshape(4, 1)


class CartDoublePendulum(TransitionModel):
    """Cart with two point-mass pendulum links, angles from upright.

    State (x, th1, th2, xdot, th1dot, th2dot); control = force on the cart.
    Dynamics follow the manipulator form M(q) qdd + C(q, qd) qd + G(q) = B u
    with M, C, G derived from the Lagrangian of the cart plus two point
    masses on massless rods.
    """

    n = 6
    m = 1
    name = "cart-double-pendulum"

    def __init__(self, cart_mass=1.0, mass1=0.3, mass2=0.3, length1=0.5,
                 length2=0.5, gravity=9.81):
        self.mc = cart_mass
        self.m1 = mass1
        self.m2 = mass2
        self.l1 = length1
        self.l2 = length2
        self.grav = gravity

    def mass_matrix(self, q):
        th1, th2 = q[1], q[2]
        m12 = self.m1 + self.m2
        c1, c2, c12 = np.cos(th1), np.cos(th2), np.cos(th1 - th2)
        return np.array([
            [self.mc + m12, m12 * self.l1 * c1, self.m2 * self.l2 * c2],
            [m12 * self.l1 * c1, m12 * self.l1**2, self.m2 * self.l1 * self.l2 * c12],
            [self.m2 * self.l2 * c2, self.m2 * self.l1 * self.l2 * c12, self.m2 * self.l2**2],
        ])

    def bias(self, q, qd):
        """C(q, qd) qd + G(q)."""
        th1, th2 = q[1], q[2]
        w1, w2 = qd[1], qd[2]
        m12 = self.m1 + self.m2
        s1, s2, s12 = np.sin(th1), np.sin(th2), np.sin(th1 - th2)
        cor = np.stack([
            -m12 * self.l1 * s1 * w1**2 - self.m2 * self.l2 * s2 * w2**2,
            self.m2 * self.l1 * self.l2 * s12 * w2**2,
            -self.m2 * self.l1 * self.l2 * s12 * w1**2,
        ])
        grav = np.stack([
            0.0 * th1,
            -m12 * self.grav * self.l1 * s1,
            -self.m2 * self.grav * self.l2 * s2,
        ])
        return cor + grav

    def g(self, x):
        q, qd = x[:3], x[3:]
        qdd = np.linalg.solve(self.mass_matrix(q), -self.bias(q, qd))
        return np.concatenate([qd, qdd])

    def h(self, x):
        q = x[:3]
        col = np.linalg.solve(self.mass_matrix(q), np.array([1.0, 0.0, 0.0]))
        H = np.zeros((6, 1), dtype=col.dtype)
        H[3:, 0] = col
        return H


class Quadcopter(TransitionModel):
    """12-state rigid-body quadcopter with four rotor-thrust inputs.

    State (p(3), euler(3: roll, pitch, yaw), v(3, world), w(3, body)).
    Rotors sit on a plus-configuration frame: 1 at +x, 2 at +y, 3 at -x,
    4 at -y, with alternating spin for yaw torque. Aerodynamic drag (linear
    plus quadratic in the translational speed, linear in the body rates)
    makes the velocity response genuinely state-dependent.
    """

    n = 12
    m = 4
    name = "quadcopter-12d"

    def __init__(self, mass=0.5, arm=0.17, inertia=(3.2e-3, 3.2e-3, 5.5e-3),
                 yaw_coeff=0.016, gravity=9.81, drag_lin=0.1, drag_quad=1.5,
                 rot_damping=0.05):
        self.mass = mass
        self.arm = arm
        self.J = np.asarray(inertia, dtype=float)
        self.c_yaw = yaw_coeff
        self.grav = gravity
        self.drag_lin = drag_lin
        self.drag_quad = drag_quad
        self.rot_damping = rot_damping
        l, c = arm, yaw_coeff
        # torque allocation rows (roll, pitch, yaw) for thrusts (T1..T4)
        self._alloc = np.array([
            [0.0, -l, 0.0, l],
            [l, 0.0, -l, 0.0],
            [-c, c, -c, c],
        ])

    def _body_z(self, phi, th, psi):
        cph, sph = np.cos(phi), np.sin(phi)
        cth, sth = np.cos(th), np.sin(th)
        cps, sps = np.cos(psi), np.sin(psi)
        return np.stack([
            cps * sth * cph + sps * sph,
            sps * sth * cph - cps * sph,
            cth * cph,
        ])

    def g(self, x):
        phi, th = x[3], x[4]
        v = x[6:9]
        w = x[9:12]
        cph, sph = np.cos(phi), np.sin(phi)
        tth, cth = np.tan(th), np.cos(th)
        euler_rate = np.stack([
            w[0] + sph * tth * w[1] + cph * tth * w[2],
            cph * w[1] - sph * w[2],
            sph / cth * w[1] + cph / cth * w[2],
        ])
        # smooth speed keeps the drag term analytic for complex-step Jacobians
        speed = np.sqrt(v @ v + 1e-18)
        drag = -(self.drag_lin + self.drag_quad * speed) * v / self.mass
        acc = np.stack([0.0 * phi, 0.0 * phi, -self.grav + 0.0 * phi]) + drag
        Jw = self.J * w
        wdot = (-np.cross(w, Jw) - self.rot_damping * w) / self.J
        return np.concatenate([v, euler_rate, acc, wdot])

    def h(self, x):
        phi, th, psi = x[3], x[4], x[5]
        z = self._body_z(phi, th, psi) / self.mass
        H = np.zeros((12, 4), dtype=z.dtype)
        H[6:9, :] = z[:, None] * np.ones(4)
        H[9:12, :] = self._alloc / self.J[:, None]
        return H


@dataclass(frozen=True)
class BenchmarkSystem:
    """A transition model together with its named equilibrium."""

    name: str
    model: TransitionModel
    x_eq: np.ndarray
    u_eq: np.ndarray
    params: dict = field(default_factory=dict)


def double_integrator(dim=2):
    model = IntegratorChain(dim)
    return BenchmarkSystem(model.name, model, np.zeros(model.n), np.zeros(model.m),
                           {"dim": dim})


def double_integrator_2d():
    return double_integrator(2)


def cart_pole(**kw):
    model = CartPole(**kw)
    return BenchmarkSystem(model.name, model, np.zeros(4), np.zeros(1),
                           {"cart_mass": model.mc, "pole_mass": model.mp,
                            "length": model.l, "gravity": model.grav})


def cart_double_pendulum(**kw):
    model = CartDoublePendulum(**kw)
    return BenchmarkSystem(model.name, model, np.zeros(6), np.zeros(1),
                           {"cart_mass": model.mc, "mass1": model.m1, "mass2": model.m2,
                            "length1": model.l1, "length2": model.l2, "gravity": model.grav})


def quadcopter(**kw):
    model = Quadcopter(**kw)
    hover = model.mass * model.grav / 4.0
    return BenchmarkSystem(model.name, model, np.zeros(12), np.full(4, hover),
                           {"mass": model.mass, "arm": model.arm, "gravity": model.grav,
                            "hover_thrust": hover})


def linearize(model, x0, u0):
    """Local linear model (A, B) of ``model`` at (x0, u0)."""
    return model.jacobian_x(x0, u0), model.jacobian_u(x0)


def linearized_model(system: BenchmarkSystem) -> LinearModel:
    """Planning model: the system linearized about its equilibrium."""
    A, B = linearize(system.model, system.x_eq, system.u_eq)
    return LinearModel(A, B, x_ref=system.x_eq, u_ref=system.u_eq,
                       name=f"{system.name}-linearized")


@dataclass(frozen=True)
class Trajectory:
    """Fixed-timestep record of states and controls over [t0, tf].

    ``states`` has one more row than ``controls``; row j is the state at
    t0 + j dt and controls[j] is held over [t_j, t_{j+1}).
    """

    t0: float
    tf: float
    dt: float
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        steps = int(round((self.tf - self.t0) / self.dt))
        if len(self.states) != steps + 1 or len(self.controls) != steps:
            raise ValueError(
                f"trajectory lengths inconsistent: {len(self.states)} states, "
                f"{len(self.controls)} controls, {steps} steps")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory contains non-finite states")

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(len(self.states))

    @property
    def duration(self):
        return self.tf - self.t0


def step_dynamics(model, x, u_fn, t, dt, method="rk4"):
    """Advance one fixed step of ``dx/dt = f(x, u_fn(t, x))``."""
    if method == "rk4":
        k1 = model.eval(x, u_fn(t, x))
        x2 = x + 0.5 * dt * k1
        k2 = model.eval(x2, u_fn(t + 0.5 * dt, x2))
        x3 = x + 0.5 * dt * k2
        k3 = model.eval(x3, u_fn(t + 0.5 * dt, x3))
        x4 = x + dt * k3
        k4 = model.eval(x4, u_fn(t + dt, x4))
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if method == "euler":
        return x + dt * model.eval(x, u_fn(t, x))
    raise ValueError(f"unknown integrator '{method}'")


def rollout(model, policy, x0, t0, horizon, dt, method="rk4", blowup=1e6):
    """Simulate the closed loop ``dx/dt = f(x, policy(x))`` for ``horizon``.

    The policy is evaluated at every integrator stage (continuous feedback);
    the recorded control for step j is policy(x_j) at the step start.
    """
    if horizon <= 0 or dt <= 0 or dt > horizon + 1e-12:
        raise ValueError("require horizon > 0 and 0 < dt <= horizon")
    steps = int(round(horizon / dt))
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((steps + 1, model.n))
    controls = np.empty((steps, model.m))
    states[0] = x

    def u_fn(t, xs):
        return policy(xs)

    for j in range(steps):
        controls[j] = np.asarray(policy(x), dtype=float)
        x = step_dynamics(model, x, u_fn, t0 + j * dt, dt, method)
        if np.max(np.abs(x)) > blowup:
            raise DivergenceError(
                f"rollout of '{model.name}' exceeded blow-up bound at t={t0 + (j + 1) * dt:.4f}",
                time=t0 + (j + 1) * dt)
        states[j + 1] = x
    return Trajectory(t0=t0, tf=t0 + steps * dt, dt=dt, states=states, controls=controls)
