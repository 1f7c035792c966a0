"""Gaussian-process regression, UCB acquisition, and the cart-double-pendulum
Bayesian-optimization benchmark.

Four methods share one config surface and identical objectives, seeds, and
evaluation budgets: exploration-from-equilibrium, unconstrained Bayesian
optimization, an LQR servo to the acquisition argmax, and direct gradient
ascent of the acquisition through the planning model. GP hyperparameters are
fixed (no marginal-likelihood optimization) so method comparisons are not
confounded by model selection.
"""

from dataclasses import dataclass, field

import numpy as np

from . import dynamics, policies
from .controller import KLE3Config, KLE3Controller
from .distributions import SearchDomain, ucb_target, uniform_distribution
from .dynamics import DivergenceError
from .streams import stream


class FitError(RuntimeError):
    """Gram factorization failed even at the maximum jitter."""


@dataclass(frozen=True)
class GPConfig:
    length_scale: float = 0.3
    amplitude: float = 1.0
    noise: float = 0.05
    max_jitter: float = 1e-4


class GaussianProcess:
    """RBF-kernel GP regression with fixed hyperparameters.

    The Gram matrix is Cholesky-factored with escalating jitter; posterior
    variance is clamped at zero (clamp events counted).
    """

    def __init__(self, cfg: GPConfig, X=None, y=None):
        self.cfg = cfg
        self.X = np.zeros((0, 1)) if X is None else np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.zeros(0) if y is None else np.asarray(y, dtype=float)
        self.n_var_clamped = 0
        self.jitter_used = 0.0
        self._chol = None
        self._alpha = None
        if self.n_observations:
            self._factorize()

    @property
    def n_observations(self):
        return len(self.y)

    def _kernel(self, A, B):
        ls = np.asarray(self.cfg.length_scale, dtype=float)
        d = (np.atleast_2d(A)[:, None, :] - np.atleast_2d(B)[None, :, :]) / ls
        return self.cfg.amplitude**2 * np.exp(-0.5 * np.sum(d * d, axis=2))

    def _factorize(self):
        K = self._kernel(self.X, self.X) + self.cfg.noise**2 * np.eye(self.n_observations)
        jitter = 1e-10
        while jitter <= self.cfg.max_jitter:
            try:
                self._chol = np.linalg.cholesky(K + jitter * np.eye(len(K)))
                self.jitter_used = jitter
                self._alpha = np.linalg.solve(
                    self._chol.T, np.linalg.solve(self._chol, self.y))
                return
            except np.linalg.LinAlgError:
                jitter *= 10.0
        raise FitError(f"Gram factorization failed at jitter {self.cfg.max_jitter:g}")

    def factorization_residual(self):
        if self._chol is None:
            return 0.0
        K = self._kernel(self.X, self.X) + (self.cfg.noise**2 + self.jitter_used) * np.eye(self.n_observations)
        R = self._chol @ self._chol.T - K
        return float(np.max(np.abs(R)) / max(np.max(np.abs(K)), 1e-300))

    def predict(self, Xq):
        """Posterior mean and standard deviation at the query points."""
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        if self.n_observations == 0:
            return np.zeros(len(Xq)), np.full(len(Xq), self.cfg.amplitude)
        Ks = self._kernel(Xq, self.X)
        mean = Ks @ self._alpha
        v = np.linalg.solve(self._chol, Ks.T)
        var = self.cfg.amplitude**2 - np.sum(v * v, axis=0)
        clamped = var < 0
        self.n_var_clamped += int(np.sum(clamped))
        return mean, np.sqrt(np.maximum(var, 0.0))

    def add(self, x, y):
        """New GP with one more observation (distributions stay immutable)."""
        X = np.vstack([self.X, np.atleast_2d(x)]) if self.n_observations else np.atleast_2d(x)
        return GaussianProcess(self.cfg, X, np.append(self.y, y))


def gp_fit(pairs, cfg):
    """Fit a GP to (x, y) pairs; an empty list yields the prior."""
    if not len(pairs):
        return GaussianProcess(cfg)
    X = np.atleast_2d(np.asarray([p[0] for p in pairs], dtype=float))
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray([p[1] for p in pairs], dtype=float)
    return GaussianProcess(cfg, X, y)


def gp_predict(gp, query):
    return gp.predict(query)


def ucb(gp, x, kappa):
    mean, std = gp.predict(x)
    return mean + kappa * std


def maximize_ucb(gp, kappa, domain, rng, n_starts=32, n_iters=100):
    """Multi-start projected gradient ascent of the acquisition.

    Finite-difference gradients with per-start adaptive step, clamped to the
    domain; returns the best point seen across all starts.
    """
    span = domain.upper - domain.lower
    starts = domain.uniform(rng, n_starts)
    pts = starts.copy()
    step = np.full(n_starts, 0.05)
    vals = ucb(gp, pts, kappa)
    h = 1e-4
    for _ in range(n_iters):
        grad = np.zeros_like(pts)
        for d in range(domain.dim):
            dp = np.zeros(domain.dim)
            dp[d] = h * span[d]
            grad[:, d] = (ucb(gp, pts + dp, kappa) - ucb(gp, pts - dp, kappa)) / (2 * h * span[d])
        cand = np.clip(pts + step[:, None] * span * grad, domain.lower, domain.upper)
        cand_vals = ucb(gp, cand, kappa)
        improved = cand_vals > vals
        pts[improved] = cand[improved]
        vals[improved] = cand_vals[improved]
        step = np.where(improved, step, step * 0.5)
    best = int(np.argmax(vals))
    return pts[best]


@dataclass(frozen=True)
class ObjectiveFunction:
    """Deterministic bounded scalar field with a grid-certified maximum."""

    evaluate: object
    max_value: float
    argmax: np.ndarray

    def __call__(self, x):
        return self.evaluate(np.atleast_2d(np.asarray(x, dtype=float)))


def mixture_objective(domain, means, sigmas, weights, resolution=4096):
    """1-d-friendly mixture-of-Gaussians objective with known maximum."""
    means = np.atleast_2d(np.asarray(means, dtype=float))
    sigmas = np.asarray(sigmas, dtype=float)
    weights = np.asarray(weights, dtype=float)

    def evaluate(pts):
        pts = np.atleast_2d(pts)
        out = np.zeros(len(pts))
        for mu, sg, w in zip(means, sigmas, weights):
            out += w * np.exp(-0.5 * np.sum((pts - mu) ** 2, axis=1) / sg**2)
        return out

    grid, _, _ = domain.grid(resolution if domain.dim == 1 else 64)
    vals = evaluate(grid)
    best = int(np.argmax(vals))
    return ObjectiveFunction(evaluate=evaluate, max_value=float(vals[best]),
                             argmax=grid[best].copy())


@dataclass
class BayesOptConfig:
    """Shared config for all four optimization methods."""

    duration: float = 25.0
    dt: float = 0.02
    replan_steps: int = 5
    sample_period: float = 0.2
    kappa: float = 2.0
    c: float = 3.0
    norm_samples: int = 2048
    start_low: float = -0.8
    start_high: float = 0.8
    domain_low: float = -2.0
    domain_high: float = 2.0
    objective_means: tuple = (-1.2, 0.3, 1.5)
    objective_sigmas: tuple = (0.3, 0.25, 0.35)
    objective_weights: tuple = (0.55, 1.0, 0.8)
    gp: GPConfig = field(default_factory=GPConfig)
    horizon: float = 0.2
    reg: float = 0.1
    kernel_sigma: float = 0.1
    samples: int = 20
    lqr_q: tuple = (1.0, 50.0, 50.0, 1.0, 5.0, 5.0)
    lqr_r: float = 1.0
    ascent_iters: int = 30
    ascent_step: float = 1.0
    ascent_du_max: float = 15.0
    system_params: dict = field(default_factory=dict)


@dataclass
class BayesOptRecord:
    method: str
    seed: int
    times: np.ndarray
    lyapunov: np.ndarray
    sample_times: list
    samples_x: list
    samples_y: list
    best_trace: list
    aborted: bool = False

    @property
    def best_value(self):
        return max(self.samples_y) if self.samples_y else -np.inf

    @property
    def max_lyapunov(self):
        return float(np.max(self.lyapunov)) if len(self.lyapunov) else np.nan


def _setup(cfg):
    system = dynamics.cart_double_pendulum(**cfg.system_params)
    Q = np.diag(np.asarray(cfg.lqr_q, dtype=float))
    R = np.atleast_2d(cfg.lqr_r)
    policy, cert = policies.lqr_policy(system, Q, R)
    planning = dynamics.linearized_model(system)
    domain = SearchDomain([cfg.domain_low], [cfg.domain_high], projection=[0])
    objective = mixture_objective(domain, [[m] for m in cfg.objective_means],
                                  cfg.objective_sigmas, cfg.objective_weights)
    return system, policy, cert, planning, domain, objective


def _start_state(cfg, seed):
    rng = stream(seed, "init")
    x0 = np.zeros(6)
    x0[0] = rng.uniform(cfg.start_low, cfg.start_high)
    return x0


def bo_baseline(cfg, seed):
    """Bayesian optimization without the dynamic constraint (no robot)."""
    _, _, _, domain, objective = _setup(cfg)[1:]
    rng = stream(seed, "acquisition")
    iters = int(round(cfg.duration / cfg.sample_period))
    gp = GaussianProcess(cfg.gp)
    rec = BayesOptRecord("bo", seed, np.zeros(0), np.zeros(0), [], [], [], [])
    for i in range(iters):
        x = domain.uniform(rng, 1)[0] if gp.n_observations == 0 else maximize_ucb(
            gp, cfg.kappa, domain, rng)
        y = float(objective(x)[0])
        gp = gp.add(x, y)
        rec.sample_times.append(i * cfg.sample_period)
        rec.samples_x.append(float(x[0]))
        rec.samples_y.append(y)
        rec.best_trace.append(max(rec.samples_y))
    return rec


def _dynamic_loop(cfg, seed, method, act):
    """Shared execute/sample/refit loop for the three dynamic methods.

    ``act(gp, p, x, t) -> (states, controls)`` advances one control period.
    """
    system, policy, cert, planning, domain, objective = _setup(cfg)
    x = _start_state(cfg, seed)
    gp = GaussianProcess(cfg.gp)
    p = uniform_distribution(domain)
    rng_norm = stream(seed, "normalization")
    period = cfg.replan_steps * cfg.dt
    n_periods = int(round(cfg.duration / period))
    sample_every = max(1, int(round(cfg.sample_period / period)))
    rec = BayesOptRecord(method, seed, np.zeros(0), np.zeros(0), [], [], [], [])
    V = [cert.value(x)]
    times = [0.0]
    aborted = False
    state = {"gp": gp, "p": p, "policy": policy, "system": system,
             "planning": planning, "domain": domain, "cert": cert}
    for i in range(n_periods):
        t_i = i * period
        try:
            states, controls = act(state, x, t_i)
        except DivergenceError:
            aborted = True
            break
        for s in states[1:]:
            V.append(cert.value(s))
            times.append(times[-1] + cfg.dt)
        x = states[-1]
        if i % sample_every == 0:
            y = float(objective(np.array([x[0]]))[0])
            rec.sample_times.append(t_i + period)
            rec.samples_x.append(float(x[0]))
            rec.samples_y.append(y)
            rec.best_trace.append(max(rec.samples_y))
            state["gp"] = state["gp"].add(np.array([x[0]]), y)
            state["p"] = ucb_target(state["gp"], cfg.kappa, cfg.c, domain,
                                    cfg.norm_samples, rng_norm)
    rec.times = np.asarray(times)
    rec.lyapunov = np.asarray(V)
    rec.aborted = aborted
    return rec


def kle3_bayesopt(cfg, seed):
    """Exploration from equilibrium with the UCB softmax as coverage target."""
    kcfg = KLE3Config(horizon=cfg.horizon, dt=cfg.dt, samples=cfg.samples,
                      reg=cfg.reg, kernel_sigma=cfg.kernel_sigma,
                      mode="full-kl", window_mode="line-search",
                      steps_per_replan=cfg.replan_steps)
    holder = {}

    def act(state, x, t_i):
        if "ctrl" not in holder:
            holder["ctrl"] = KLE3Controller(
                state["system"].model, state["planning"], state["policy"],
                state["domain"], kcfg, stream(seed, "sampling"),
                certificate=state["cert"])
        res = holder["ctrl"].step(x, state["p"], t_i)
        return res.states, res.controls

    return _dynamic_loop(cfg, seed, "kle3", act)


def lqr_bayes_baseline(cfg, seed):
    """LQR servo to the acquisition argmax, one period per target."""
    rng_acq = stream(seed, "acquisition")

    def act(state, x, t_i):
        if state["gp"].n_observations == 0:
            target = state["policy"].x_eq
        else:
            xa = maximize_ucb(state["gp"], cfg.kappa, state["domain"], rng_acq)
            target = np.array([xa[0], 0.0, 0.0, 0.0, 0.0, 0.0])
        servo = state["policy"].with_reference(target)
        traj = dynamics.rollout(state["system"].model, servo, x, t_i,
                                cfg.replan_steps * cfg.dt, cfg.dt)
        return traj.states, traj.controls

    return _dynamic_loop(cfg, seed, "lqr-bayes", act)


def acquisition_shooting_gradient(state_mats, du, x0, cfg, util_grad):
    """Gradient of a terminal-state utility w.r.t. the control sequence.

    Euler-discretized linear closed loop: x_{k+1} = M x_k + dt B du_k, so
    d(util)/d(du_k) = util'(proj x_T) e' M^(T-1-k) dt B.
    """
    M, B, proj = state_mats
    T = len(du)
    xt = x0.copy()
    for k in range(T):
        xt = M @ xt + cfg.dt * (B @ du[k])
    g = util_grad(proj @ xt)
    grad = np.zeros_like(du)
    back = proj.copy()
    for k in range(T - 1, -1, -1):
        grad[k] = g * (back @ (cfg.dt * B))
        back = back @ M
    return grad, xt


def ascend_acquisition(gp, planning, policy, x, cfg):
    """Shooting ascent of UCB(terminal cart position) over the correction
    sequence: normalized gradient direction, adaptive step, fixed iteration
    count. Purely local; this is the machinery that stalls on multimodal
    acquisitions.

    The plan spans exactly the executed period: planning past the execution
    window rewards counter-swing prefixes that replanning never completes.
    """
    T = cfg.replan_steps
    Acl = planning.A - planning.B @ policy.K
    M = np.eye(planning.n) + cfg.dt * Acl
    proj = np.zeros(planning.n)
    proj[0] = 1.0
    h = 1e-4

    def util_grad(cart):
        up = ucb(gp, [[cart + h]], cfg.kappa)[0]
        dn = ucb(gp, [[cart - h]], cfg.kappa)[0]
        return (up - dn) / (2 * h)

    def terminal_cart(du_seq):
        xt = x - planning.x_ref
        for k in range(T):
            xt = M @ xt + cfg.dt * (planning.B @ du_seq[k])
        return float(proj @ xt)

    du = np.zeros((T, planning.m))
    if gp.n_observations == 0:
        return du
    step = cfg.ascent_step
    best_util = ucb(gp, [[terminal_cart(du)]], cfg.kappa)[0]
    for _ in range(cfg.ascent_iters):
        grad, _ = acquisition_shooting_gradient(
            (M, planning.B, proj), du, x - planning.x_ref, cfg, util_grad)
        norm = np.linalg.norm(grad)
        if norm < 1e-12:
            break
        cand = np.clip(du + step * grad / norm, -cfg.ascent_du_max,
                       cfg.ascent_du_max)
        cand_util = ucb(gp, [[terminal_cart(cand)]], cfg.kappa)[0]
        if cand_util > best_util:
            du, best_util = cand, cand_util
            step *= 1.5
        else:
            step *= 0.5
    return du


def direct_acq_max_baseline(cfg, seed):
    """First-order shooting ascent of UCB through the planning model.

    The local-in-nature gradient climb composes with the stabilizing policy
    and is prone to stalling on multimodal acquisitions.
    """

    def act(state, x, t_i):
        planning = state["planning"]
        policy = state["policy"]
        du = ascend_acquisition(state["gp"], planning, policy, x, cfg)

        x_cur = x.copy()
        states = np.empty((cfg.replan_steps + 1, 6))
        controls = np.empty((cfg.replan_steps, 1))
        states[0] = x_cur
        for j in range(cfg.replan_steps):
            ff = du[j]
            u_fn = lambda t, xs, ff=ff: policy(xs) + ff
            controls[j] = u_fn(0.0, x_cur)
            x_cur = dynamics.step_dynamics(state["system"].model, x_cur, u_fn,
                                           t_i + j * cfg.dt, cfg.dt)
            if np.max(np.abs(x_cur)) > 1e6:
                raise DivergenceError("direct-max rollout diverged", time=t_i)
            states[j + 1] = x_cur
        return states, controls

    return _dynamic_loop(cfg, seed, "direct-max", act)


METHODS = {
    "kle3": kle3_bayesopt,
    "bo": bo_baseline,
    "lqr-bayes": lqr_bayes_baseline,
    "direct-max": direct_acq_max_baseline,
}
