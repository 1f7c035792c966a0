"""Exploration-from-equilibrium controller.

Plans on an approximate model under the equilibrium policy, backward-integrates
the coverage adjoint, and augments the policy with the closed-form exploratory
correction delta_mu(t) = -R^-1 h(x)' rho(t) inside an application window
(tau, lambda). Two adjoint forcings are available: the full sampled-KL form
(needs the time-averaged density q) and the Jensen surrogate (needs only the
target density p), selected per step by ``mode``.
"""

from dataclasses import dataclass, field

import numpy as np

from .dynamics import Trajectory, rollout, step_dynamics, DivergenceError
from .measures import SigmaKernel, DEFAULT_Q_FLOOR


class AdjointDivergenceError(RuntimeError):
    """The backward sweep produced a non-finite co-state."""

    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class AdjointSolution:
    """Co-state rho over the planning grid; rho at the horizon end is zero."""

    times: np.ndarray
    rho: np.ndarray
    mode: str
    n_ratio_clipped: int = 0


def _closed_loop_jacobians(plan, model, policy):
    """(df/dx + df/du dmu/dx) at every grid point of the plan."""
    T = len(plan.controls)
    A = np.empty((T + 1, model.n, model.n))
    dmu_dx = policy.jacobian
    for j in range(T + 1):
        u = plan.controls[min(j, T - 1)]
        A[j] = model.jacobian_x(plan.states[j], u) + model.jacobian_u(plan.states[j]) @ dmu_dx
    return A


def adjoint_forcing(plan, domain, kernel, samples, p_vals, mode,
                    q_vals=None, horizon_norm=None, ratio_clip=1e3):
    """Sample-sum forcing term of the co-state ODE at every grid point.

    full-kl: (1/(tf-t0)) sum_i (p_i/q_i) dpsi/dx, ratio clipped.
    jensen:  -sum_i p_i dl/dx with l the Sigma-weighted squared distance.
    Both are nonzero only on the projected coordinates.
    """
    S = np.atleast_2d(samples)
    xbar_all, _ = domain.project(plan.states)
    diffs = S[:, None, :] - xbar_all[None, :, :]          # (N, T+1, v)
    sigma_inv_diffs = diffs @ kernel.inv.T                # Sigma^-1 (s - xbar)
    n_clipped = 0
    if mode == "full-kl":
        if q_vals is None:
            raise ValueError("full-kl forcing needs q values at the samples")
        horizon_norm = plan.duration if horizon_norm is None else horizon_norm
        psi = kernel.psi(S, xbar_all)                     # (N, T+1)
        ratio = p_vals / q_vals
        n_clipped = int(np.sum(ratio > ratio_clip))
        ratio = np.minimum(ratio, ratio_clip)
        weights = (ratio[:, None] * psi) / horizon_norm
    elif mode == "jensen":
        # dl/dx = -2 Sigma^-1 (s - xbar); forcing is -sum p_i dl/dx
        weights = 2.0 * p_vals[:, None] * np.ones(xbar_all.shape[0])[None, :]
    else:
        raise ValueError(f"unknown adjoint mode '{mode}'")
    forcing_proj = np.einsum("ij,ijk->jk", weights, sigma_inv_diffs)
    forcing = np.zeros((xbar_all.shape[0], plan.states.shape[1]))
    forcing[:, domain.projection] = forcing_proj
    return forcing, n_clipped


def adjoint_backward(plan, planning_model, policy, domain, kernel, samples,
                     p_vals, mode="full-kl", q_vals=None, horizon_norm=None,
                     ratio_clip=1e3, method="euler"):
    """Backward sweep of the co-state from rho(t_i + t_H) = 0.

    The default is the Euler recursion rho_{j-1} = rho_j - rhodot_j dt on
    the same grid as the forward rollout; 'rk4' integrates the reversed-time
    ODE with interpolated coefficients for accuracy studies.
    """
    forcing, n_clipped = adjoint_forcing(plan, domain, kernel, samples, p_vals,
                                         mode, q_vals, horizon_norm, ratio_clip)
    A = _closed_loop_jacobians(plan, planning_model, policy)
    T = len(plan.controls)
    dt = plan.dt
    rho = np.zeros((T + 1, planning_model.n))
    if method == "euler":
        for j in range(T, 0, -1):
            rhodot = forcing[j] - A[j].T @ rho[j]
            rho[j - 1] = rho[j] - dt * rhodot
    elif method == "rk4":
        def rhodot_at(s, r):
            # s is reversed time in [0, T dt]; linear interpolation of grid data
            jf = np.clip(T - s / dt, 0.0, T)
            j0 = int(np.floor(jf))
            j1 = min(j0 + 1, T)
            w = jf - j0
            F = (1 - w) * forcing[j0] + w * forcing[j1]
            At = (1 - w) * A[j0] + w * A[j1]
            return -(F - At.T @ r)

        r = np.zeros(planning_model.n)
        for j in range(T):
            s = j * dt
            k1 = rhodot_at(s, r)
            k2 = rhodot_at(s + dt / 2, r + dt / 2 * k1)
            k3 = rhodot_at(s + dt / 2, r + dt / 2 * k2)
            k4 = rhodot_at(s + dt, r + dt * k3)
            r = r + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            rho[T - 1 - j] = r
    else:
        raise ValueError(f"unknown adjoint integrator '{method}'")
    if not np.all(np.isfinite(rho)):
        bad = np.where(~np.all(np.isfinite(rho), axis=1))[0]
        t_bad = plan.t0 + dt * bad[0]
        raise AdjointDivergenceError(f"non-finite co-state at t={t_bad:.4f}", time=t_bad)
    return AdjointSolution(times=plan.times, rho=rho, mode=mode, n_ratio_clipped=n_clipped)


def mode_insertion_gradient(rho_tau, f1, f2):
    """Objective sensitivity rho(tau)' (f2 - f1) to an infinitesimal switch."""
    return float(np.asarray(rho_tau) @ (np.asarray(f2) - np.asarray(f1)))


def exploratory_correction(rho, h, R):
    """delta_mu = -R^-1 h' rho, for a single time or stacked over the grid."""
    Rinv = np.linalg.inv(np.atleast_2d(R))
    rho = np.asarray(rho)
    if rho.ndim == 1:
        return -Rinv @ np.asarray(h).T @ rho
    h = np.asarray(h)
    if h.ndim == 2:
        return -(rho @ h) @ Rinv.T
    return -np.einsum("ml,tnl,tn->tm", Rinv, h, rho)


def select_window(t_i, horizon, dt, mode, resimulate=None, nominal_objective=None):
    """Application window (tau, lambda) for the exploratory correction.

    mpc: (t_i, dt). trajopt: (t_i, horizon). line-search: tau = t_i with
    lambda backtracked from the horizon until the re-simulated objective
    decreases; falls back to lambda = dt with a logged no-descent event.
    """
    if mode == "mpc":
        return t_i, dt, None, False
    if mode == "trajopt":
        return t_i, horizon, None, False
    if mode != "line-search":
        raise ValueError(f"unknown window mode '{mode}'")
    if resimulate is None or nominal_objective is None:
        raise ValueError("line-search needs a re-simulation oracle and baseline")
    lam = horizon
    while lam >= dt - 1e-12:
        obj = resimulate(lam)
        if obj < nominal_objective:
            return t_i, lam, obj, False
        lam *= 0.5
    return t_i, dt, resimulate(dt), True


@dataclass
class KLE3Config:
    """Per-run controller parameters (regularization R and kernel Sigma are
    isotropic scales unless full matrices are given)."""

    horizon: float
    dt: float
    samples: int
    reg: object = 1.0
    kernel_sigma: object = 0.1
    mode: str = "full-kl"
    window_mode: str = "line-search"
    steps_per_replan: int = 1
    ratio_clip: float = 1e3
    q_floor: float = DEFAULT_Q_FLOOR
    integrator: str = "rk4"
    adjoint_method: str = "euler"
    persistent_q: bool = False
    history_stride: int = 1
    blowup: float = 1e6
    control_lower: object = None
    control_upper: object = None


@dataclass
class WindowRecord:
    tau: float
    lam: float
    start_index: int
    end_index: int
    beta: float
    v_pre: float


@dataclass
class StepResult:
    states: np.ndarray
    controls: np.ndarray
    times: np.ndarray
    delta_mu: np.ndarray
    window: tuple
    diagnostics: dict


@dataclass
class ExplorationRun:
    trajectory: Trajectory
    windows: list
    diagnostics: list
    aborted: bool = False
    abort_time: float = None


class KLE3Controller:
    """Stateful per-run controller: owns its RNG stream and coverage history.

    One instance drives one run; independent runs use independent streams.
    """

    def __init__(self, plant_model, planning_model, policy, domain, config,
                 rng, certificate=None):
        self.plant = plant_model
        self.planning = planning_model
        self.policy = policy
        self.domain = domain
        self.cfg = config
        self.rng = rng
        self.certificate = certificate
        m = planning_model.m
        reg = np.asarray(config.reg, dtype=float)
        self.R = reg * np.eye(m) if reg.ndim == 0 else reg
        self.Rinv = np.linalg.inv(self.R)
        self.kernel = SigmaKernel(config.kernel_sigma, dim=domain.dim)
        self._history = []  # executed projected states (persistent q)
        self.n_domain_clamped = 0

    # -- coverage statistics -------------------------------------------------

    def _history_array(self):
        if not self._history:
            return None
        return np.concatenate(self._history, axis=0)

    def _q_values(self, samples, plan):
        xbar_plan, n_cl = self.domain.project(plan.states[:-1])
        self.n_domain_clamped += n_cl
        mass = self.kernel.psi(samples, xbar_plan).sum(axis=1) * self.cfg.dt
        total = plan.duration
        hist = self._history_array() if self.cfg.persistent_q else None
        if hist is not None and len(hist):
            w = self.cfg.history_stride * self.cfg.dt
            mass = mass + self.kernel.psi(samples, hist).sum(axis=1) * w
            total = total + len(hist) * w
        return mass / total, total

    def _objective(self, samples, p_vals, plan):
        if self.cfg.mode == "jensen":
            xbar, _ = self.domain.project(plan.states[:-1])
            d2 = self.kernel.sq_dist(samples, xbar)
            return float(np.sum(p_vals * d2.sum(axis=1) * plan.dt))
        q_vals, _ = self._q_values(samples, plan)
        return float(-np.sum(p_vals * np.log(np.maximum(q_vals, self.cfg.q_floor))))

    # -- planning ------------------------------------------------------------

    def _switched_rollout(self, x0, t_i, delta_mu, active):
        """Planning-model rollout applying the correction on active steps."""
        cfg = self.cfg
        steps = len(active)
        x = np.asarray(x0, dtype=float).copy()
        states = np.empty((steps + 1, self.planning.n))
        controls = np.empty((steps, self.planning.m))
        states[0] = x
        for j in range(steps):
            ff = delta_mu[j] if active[j] else np.zeros(self.planning.m)
            u_fn = lambda t, xs: self.policy(xs) + ff
            controls[j] = u_fn(0.0, x)
            x = step_dynamics(self.planning, x, u_fn, t_i + j * cfg.dt, cfg.dt, cfg.integrator)
            if np.max(np.abs(x)) > cfg.blowup:
                raise DivergenceError("switched rollout diverged", time=t_i + (j + 1) * cfg.dt)
            states[j + 1] = x
        return Trajectory(t_i, t_i + steps * cfg.dt, cfg.dt, states, controls)

    def plan(self, x_hat, p, t_i):
        """Alg-1 planning pass: rollout, samples, adjoint, correction, window."""
        cfg = self.cfg
        plan = rollout(self.planning, self.policy, x_hat, t_i, cfg.horizon,
                       cfg.dt, method=cfg.integrator, blowup=cfg.blowup)
        samples = self.domain.uniform(self.rng, cfg.samples)
        p_vals = p.pdf(samples)
        q_vals, horizon_norm = self._q_values(samples, plan)
        q_floored = np.maximum(q_vals, cfg.q_floor)
        adj = adjoint_backward(
            plan, self.planning, self.policy, self.domain, self.kernel, samples,
            p_vals, mode=cfg.mode, q_vals=q_floored, horizon_norm=horizon_norm,
            ratio_clip=cfg.ratio_clip, method=cfg.adjoint_method)
        h_stack = np.stack([self.planning.h(s) for s in plan.states])
        delta_mu = exploratory_correction(adj.rho, h_stack, self.R)

        objective = self._objective(samples, p_vals, plan)
        T = len(plan.controls)

        def resimulate(lam):
            active = [t_i + j * cfg.dt < t_i + lam - 1e-12 for j in range(T)]
            switched = self._switched_rollout(x_hat, t_i, delta_mu, active)
            return self._objective(samples, p_vals, switched)

        tau, lam, obj_after, no_descent = select_window(
            t_i, cfg.horizon, cfg.dt, cfg.window_mode,
            resimulate=resimulate, nominal_objective=objective)

        # predicted descent from the closed-form insertion gradient at tau
        j_tau = int(round((tau - t_i) / cfg.dt))
        hr = h_stack[j_tau].T @ adj.rho[j_tau]
        dDdlam = -float(hr @ self.Rinv @ hr)
        return {
            "plan": plan, "samples": samples, "p_vals": p_vals, "q_vals": q_vals,
            "adjoint": adj, "delta_mu": delta_mu, "objective": objective,
            "tau": tau, "lam": lam, "objective_after": obj_after,
            "no_descent": no_descent, "predicted_descent": dDdlam * lam,
        }

    # -- execution -----------------------------------------------------------

    def step(self, x_hat, p, t_i, explore=True):
        """One replanning cycle: plan, then execute ``steps_per_replan`` steps
        on the plant, composing the correction with live policy feedback."""
        cfg = self.cfg
        if explore:
            ctx = self.plan(x_hat, p, t_i)
            delta_mu, tau, lam = ctx["delta_mu"], ctx["tau"], ctx["lam"]
            rho = ctx["adjoint"].rho
        else:
            ctx = None
            delta_mu = np.zeros((int(round(cfg.horizon / cfg.dt)) + 1, self.planning.m))
            tau, lam, rho = t_i, 0.0, None

        steps = cfg.steps_per_replan
        x = np.asarray(x_hat, dtype=float).copy()
        states = np.empty((steps + 1, self.plant.n))
        controls = np.empty((steps, self.plant.m))
        states[0] = x
        beta = -np.inf
        window_hit = False
        for j in range(steps):
            t_j = t_i + j * cfg.dt
            active = explore and (tau - 1e-12 <= t_j < tau + lam - 1e-12)
            ff = delta_mu[j] if active else np.zeros(self.plant.m)

            def u_fn(t, xs, ff=ff):
                u = self.policy(xs) + ff
                if cfg.control_lower is not None:
                    u = np.clip(u, cfg.control_lower, cfg.control_upper)
                return u

            controls[j] = u_fn(t_j, x)
            if active and self.certificate is not None:
                gv = self.certificate.gradient(x)
                hx = self.plant.h(x)
                b_j = -float(gv @ hx @ self.Rinv @ hx.T @ rho[j])
                beta = max(beta, b_j)
                window_hit = True
            x = step_dynamics(self.plant, x, u_fn, t_j, cfg.dt, cfg.integrator)
            if np.max(np.abs(x)) > cfg.blowup:
                raise DivergenceError(
                    f"plant rollout exceeded blow-up bound at t={t_j + cfg.dt:.4f}",
                    time=t_j + cfg.dt)
            states[j + 1] = x

        if cfg.persistent_q:
            proj, n_cl = self.domain.project(states[:-1:cfg.history_stride])
            self.n_domain_clamped += n_cl
            self._history.append(proj)

        diag = {
            "t": t_i, "tau": tau, "lam": lam if explore else 0.0,
            "explore": bool(explore), "window_hit": window_hit,
            "beta": beta if window_hit else 0.0,
        }
        if ctx is not None:
            diag.update({
                "objective": ctx["objective"],
                "objective_after": ctx["objective_after"],
                "predicted_descent": ctx["predicted_descent"],
                "no_descent": ctx["no_descent"],
                "max_delta_mu": float(np.max(np.abs(ctx["delta_mu"]))),
                "n_ratio_clipped": ctx["adjoint"].n_ratio_clipped,
            })
        dm = ctx["delta_mu"] if ctx is not None else delta_mu
        times = t_i + cfg.dt * np.arange(steps + 1)
        return StepResult(states=states, controls=controls, times=times,
                          delta_mu=dm, window=(tau, lam), diagnostics=diag)


def run_exploration(controller, p, x0, duration, t0=0.0, explore_schedule=None,
                    p_provider=None):
    """Drive the plant for ``duration`` with replanning every cycle.

    ``explore_schedule(i, t)`` gates exploration per replan (default: always
    on); ``p_provider(i, t, x)`` may supply an updated target each cycle.
    Divergence aborts the run but preserves the partial record.
    """
    cfg = controller.cfg
    steps_total = int(round(duration / cfg.dt))
    per = cfg.steps_per_replan
    n_replans = steps_total // per
    x = np.asarray(x0, dtype=float).copy()
    all_states = [x.copy()]
    all_controls = []
    windows = []
    diags = []
    aborted, abort_time = False, None
    for i in range(n_replans):
        t_i = t0 + i * per * cfg.dt
        explore = True if explore_schedule is None else bool(explore_schedule(i, t_i))
        if p_provider is not None:
            p = p_provider(i, t_i, x)
        try:
            res = controller.step(x, p, t_i, explore=explore)
        except (DivergenceError, AdjointDivergenceError) as err:
            aborted, abort_time = True, getattr(err, "time", t_i)
            break
        start_idx = i * per
        if res.diagnostics["window_hit"]:
            v_pre = (controller.certificate.value(res.states[0])
                     if controller.certificate is not None else np.nan)
            windows.append(WindowRecord(
                tau=res.window[0], lam=res.window[1], start_index=start_idx,
                end_index=start_idx + per, beta=res.diagnostics["beta"], v_pre=v_pre))
        diags.append(res.diagnostics)
        all_states.extend(list(res.states[1:]))
        all_controls.extend(list(res.controls))
        x = res.states[-1]
    states = np.asarray(all_states)
    controls = (np.asarray(all_controls) if all_controls
                else np.zeros((0, controller.plant.m)))
    traj = Trajectory(t0, t0 + len(controls) * cfg.dt, cfg.dt, states, controls)
    return ExplorationRun(trajectory=traj, windows=windows, diagnostics=diags,
                          aborted=aborted, abort_time=abort_time)


@dataclass
class AttractivenessReport:
    """Window-bound checks against a paired no-exploration reference."""

    available: bool
    windows: list = field(default_factory=list)
    gamma: float = np.nan

    @property
    def all_bounds_hold(self):
        return all(w["bound_ok"] for w in self.windows)


def attractiveness_report(run, certificate, plant_model, policy, ref_traj=None,
                          tol=0.0):
    """Check V(x_run(t)) - V(x_ref(t)) <= lam * beta + tol after each window,
    estimate the reference decay rate gamma, and report whether V returns
    below its pre-window value before the run ends."""
    if ref_traj is None:
        return AttractivenessReport(available=False)
    V_run = certificate.value(run.trajectory.states)
    V_ref = certificate.value(ref_traj.states)
    n = min(len(V_run), len(V_ref))
    entries = []
    for w in run.windows:
        lhs = V_run[w.end_index:n] - V_ref[w.end_index:n]
        bound = w.lam * w.beta + tol
        entries.append({
            "tau": w.tau, "lam": w.lam, "beta": w.beta,
            "bound_ok": bool(np.all(lhs <= bound)),
            "max_violation": float(np.max(lhs - bound)) if len(lhs) else 0.0,
            "returned_below": bool(np.any(V_run[w.end_index:] <= w.v_pre + 1e-12)),
        })
    from .policies import lyapunov_trace
    ref_trace = lyapunov_trace(certificate, ref_traj, plant_model)
    gamma = -float(np.max(ref_trace.derivatives))
    return AttractivenessReport(available=True, windows=entries, gamma=gamma)
