"""Stochastic dynamics-model learning on the quadcopter and the
exploration-noise baselines.

The model is a pair of small feed-forward networks: a mean head f(x, u) for
the state derivative and a positive diagonal variance head sig2(x), trained
by gradient ascent on the Gaussian log likelihood (implemented as descent on
the mean NLL with hand-rolled reverse-mode gradients, checkable against
finite differences). A shared sampling-based MPC evaluator scores every
method's learned model on the same tracking task.
"""

from dataclasses import dataclass, field

import numpy as np

from . import dynamics, policies
from .controller import KLE3Config, KLE3Controller
from .distributions import SearchDomain, uniform_distribution, variance_target
from .dynamics import DivergenceError, step_dynamics
from .streams import stream


class TrainingError(RuntimeError):
    """Non-finite loss during an update; carries the batch index."""


def _softplus(z):
    return np.logaddexp(0.0, z)


def _mlp_init(sizes, rng):
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        params.append([rng.normal(0.0, scale, size=(fan_out, fan_in)),
                       np.zeros(fan_out)])
    return params


def _mlp_forward(params, Z):
    """tanh MLP; returns the pre-activation output and a cache for backprop."""
    acts = [Z]
    for W, b in params[:-1]:
        acts.append(np.tanh(acts[-1] @ W.T + b))
    W, b = params[-1]
    out = acts[-1] @ W.T + b
    return out, acts


def _mlp_backward(params, acts, d_out):
    grads = []
    delta = d_out
    W_last, _ = params[-1]
    grads.append([delta.T @ acts[-1], delta.sum(axis=0)])
    delta = delta @ W_last
    for layer in range(len(params) - 2, -1, -1):
        delta = delta * (1.0 - acts[layer + 1] ** 2)
        grads.append([delta.T @ acts[layer], delta.sum(axis=0)])
        if layer:
            delta = delta @ params[layer][0]
    grads.reverse()
    return grads


class StochasticModel:
    """Mean network f(x, u) -> dx and diagonal variance head sig2(x) > 0.

    Inputs and outputs pass through affine normalizers (identity until
    ``set_normalizers``); the variance positivity comes from a softplus.
    ``state_features`` selects which state coordinates feed the networks
    (e.g. dropping absolute position for translation-invariant vehicles);
    the predicted dx always spans the full state.
    """

    VAR_FLOOR = 1e-6

    def __init__(self, state_dim, control_dim, width=64, rng=None,
                 state_features=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.n = state_dim
        self.m = control_dim
        self.width = width
        self.features = (np.arange(state_dim) if state_features is None
                         else np.asarray(state_features, dtype=int))
        nf = len(self.features)
        self.mean_params = _mlp_init([nf + control_dim, width, width, state_dim], rng)
        self.var_params = _mlp_init([nf, width, width, state_dim], rng)
        self.in_mean = np.zeros(nf + control_dim)
        self.in_std = np.ones(nf + control_dim)
        self.out_mean = np.zeros(state_dim)
        self.out_std = np.ones(state_dim)

    def set_normalizers(self, X, U, DX):
        Z = np.hstack([np.atleast_2d(X)[:, self.features], np.atleast_2d(U)])
        self.in_mean = Z.mean(axis=0)
        self.in_std = np.maximum(Z.std(axis=0), 1e-3)
        self.out_mean = DX.mean(axis=0)
        self.out_std = np.maximum(DX.std(axis=0), 1e-3)

    def _norm_in(self, X, U):
        Z = np.hstack([np.atleast_2d(X)[:, self.features], np.atleast_2d(U)])
        return (Z - self.in_mean) / self.in_std

    def _norm_x(self, X):
        nf = len(self.features)
        Z = np.atleast_2d(X)[:, self.features]
        return (Z - self.in_mean[:nf]) / self.in_std[:nf]

    def mean_forward(self, X, U):
        out, _ = _mlp_forward(self.mean_params, self._norm_in(X, U))
        return self.out_mean + self.out_std * out

    def var_forward(self, X):
        raw, _ = _mlp_forward(self.var_params, self._norm_x(X))
        return (_softplus(raw) + self.VAR_FLOOR) * self.out_std**2

    def parameters(self):
        return self.mean_params + self.var_params

    def copy_parameters(self):
        return [[W.copy(), b.copy()] for W, b in self.parameters()]


def gaussian_nll(model, batch):
    """Mean diagonal-Gaussian NLL of the batch and its parameter gradient.

    batch = (X, DX, U). The reported loss is the exact NLL of the raw dx
    (normalizer constants included); gradients flow through both heads.
    """
    X, DX, U = batch
    B = len(X)
    Zm = model._norm_in(X, U)
    f_norm, mean_acts = _mlp_forward(model.mean_params, Zm)
    raw, var_acts = _mlp_forward(model.var_params, model._norm_x(X))
    sig2 = _softplus(raw) + model.VAR_FLOOR
    r = (np.atleast_2d(DX) - model.out_mean) / model.out_std - f_norm

    per_dim = 0.5 * np.log(2 * np.pi * sig2) + r**2 / (2 * sig2)
    loss = float(np.mean(np.sum(per_dim + np.log(model.out_std), axis=1)))
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss on current batch")

    d_f = (-r / sig2) / B
    d_sig2 = (0.5 / sig2 - 0.5 * r**2 / sig2**2) / B
    d_raw = d_sig2 * 0.5 * (1.0 + np.tanh(0.5 * raw))
    mean_grads = _mlp_backward(model.mean_params, mean_acts, d_f)
    var_grads = _mlp_backward(model.var_params, var_acts, d_raw)
    return loss, mean_grads + var_grads


def apply_gradient(model, grads, alpha):
    """Descend the mean-NLL gradient with step alpha (log-likelihood ascent)."""
    for (W, b), (gW, gb) in zip(model.parameters(), grads):
        W -= alpha * gW
        b -= alpha * gb


@dataclass
class ReplayBuffer:
    """Append-only (x, dx, u) store with seed-reproducible batch sampling."""

    capacity: int = 100_000
    states: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    times: list = field(default_factory=list)

    def append(self, x, dx, u, t):
        if len(self.states) >= self.capacity:
            return
        self.states.append(np.asarray(x, dtype=float))
        self.deltas.append(np.asarray(dx, dtype=float))
        self.controls.append(np.asarray(u, dtype=float))
        self.times.append(float(t))

    def __len__(self):
        return len(self.states)

    def arrays(self):
        return (np.asarray(self.states), np.asarray(self.deltas),
                np.asarray(self.controls))

    def sample_batch(self, k, rng):
        idx = rng.integers(0, len(self), size=k)
        X, DX, U = self.arrays()
        return X[idx], DX[idx], U[idx]


GRAD_CLIP = 1e3


def train_step(model, buffer, k, alpha, rng):
    """One log-likelihood ascent step on a uniformly sampled K-batch.

    Gradient norms are clipped and non-finite updates skipped so a rough
    batch cannot destroy the online model mid-run.
    """
    batch = buffer.sample_batch(k, rng)
    loss, grads = gaussian_nll(model, batch)
    total = np.sqrt(sum(float(np.sum(g[0]**2) + np.sum(g[1]**2)) for g in grads))
    if not np.isfinite(total):
        return loss
    if total > GRAD_CLIP:
        scale = GRAD_CLIP / total
        grads = [[g[0] * scale, g[1] * scale] for g in grads]
    apply_gradient(model, grads, alpha)
    return loss


class AdamState:
    """Adam moments for the offline trainer (the online updates stay plain)."""

    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
        self.v = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]

    def update(self, params, grads):
        self.t += 1
        corr1 = 1.0 - self.b1**self.t
        corr2 = 1.0 - self.b2**self.t
        for (pair, mpair, vpair, gpair) in zip(params, self.m, self.v, grads):
            for k in range(2):
                mpair[k] = self.b1 * mpair[k] + (1 - self.b1) * gpair[k]
                vpair[k] = self.b2 * vpair[k] + (1 - self.b2) * gpair[k] ** 2
                step = self.lr * (mpair[k] / corr1) / (np.sqrt(vpair[k] / corr2) + self.eps)
                pair[k] -= step


def train_offline(buffer, state_dim, control_dim, width=64, batch=200,
                  iterations=2000, alpha=1e-3, seed=0, state_features=None):
    """Separately learned evaluation model: fixed batch/iteration budget.

    Adam with step ``alpha``; the likelihood surface couples the mean and
    variance heads, and plain ascent underfits badly within the budget.
    """
    rng = stream(seed, "offline-train")
    model = StochasticModel(state_dim, control_dim, width, rng,
                            state_features=state_features)
    X, DX, U = buffer.arrays()
    model.set_normalizers(X, U, DX)
    adam = AdamState(model.parameters(), lr=alpha)
    losses = np.empty(iterations)
    for i in range(iterations):
        b = buffer.sample_batch(batch, rng)
        losses[i], grads = gaussian_nll(model, b)
        adam.update(model.parameters(), grads)
    return model, losses


@dataclass
class NoiseProcess:
    """Exploration noise: time-correlated OU, white normal, or uniform."""

    kind: str
    scale: float
    dim: int
    dt: float
    theta_ou: float = 1.0
    state: np.ndarray = None

    def reset(self):
        self.state = np.zeros(self.dim)

    def step(self, rng):
        if self.state is None:
            self.reset()
        if self.kind == "ou":
            w = rng.normal(size=self.dim)
            self.state = (self.state - self.theta_ou * self.state * self.dt
                          + self.scale * np.sqrt(self.dt) * w)
        elif self.kind == "normal":
            self.state = self.scale * rng.normal(size=self.dim)
        elif self.kind == "uniform":
            self.state = rng.uniform(-self.scale, self.scale, size=self.dim)
        else:
            raise ValueError(f"unknown noise kind '{self.kind}'")
        return self.state


class NoisyPolicy:
    """Base policy plus the current noise sample (zero-order held per step)."""

    def __init__(self, base, process, rng):
        self.base = base
        self.process = process
        self.rng = rng
        self.eps = np.zeros(process.dim)

    def step_noise(self):
        self.eps = self.process.step(self.rng)
        return self.eps

    def __call__(self, x):
        return self.base(x) + self.eps


def noise_policy(base, process, rng):
    return NoisyPolicy(base, process, rng)


def avg_control_norm(controls):
    return float(np.mean(np.linalg.norm(np.atleast_2d(controls), axis=1)))


def energy_metrics(controls, system):
    """(average power loss, average ||u||) for a quadcopter control trace.

    Power loss is the excess rotor-power proxy mean_t sum_r |T_r|^{3/2}
    normalized by the same quantity at hover, minus one. Only defined for
    the quadcopter; other systems still get avg_control_norm.
    """
    if system.model.m != 4 or "quadcopter" not in system.name:
        raise ValueError("average power loss is defined for quadcopter runs only")
    controls = np.atleast_2d(controls)
    power = np.mean(np.sum(np.abs(controls) ** 1.5, axis=1))
    hover = np.sum(np.abs(system.u_eq) ** 1.5)
    return float(power / hover - 1.0), avg_control_norm(controls)


@dataclass
class ModelLearningConfig:
    """Quadcopter exploration-for-model-learning protocol parameters."""

    steps: int = 1200
    dt: float = 0.05
    horizon: float = 0.6
    reg: float = 0.5
    kernel_sigma: float = 0.1
    samples: int = 100
    c: float = 2.0
    ratio_clip: float = 10.0
    norm_samples: int = 2048
    explore_until: float = 0.7
    domain_low: object = -1.0
    domain_high: object = 1.0
    width: int = 64
    online_batch: int = 64
    online_alpha: float = 0.01
    offline_batch: int = 200
    offline_iters: int = 2000
    offline_alpha: float = 2e-3
    theta_ou: float = 0.5
    noise_relative_to_hover: bool = True
    drop_position_features: bool = True
    start_vel_std: float = 0.0
    lqr_q: tuple = (10.0, 10.0, 10.0, 5.0, 5.0, 5.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5)
    lqr_r: float = 2.0
    system_params: dict = field(default_factory=lambda: {
        "mass": 2.0, "arm": 0.35, "inertia": (0.3, 0.3, 0.5), "yaw_coeff": 0.2})
    n_targets: int = 4
    track_duration: float = 2.5
    track_horizon: int = 20
    track_samples: int = 128
    track_sigma: float = 1.0
    track_temperature: float = 0.3
    track_iters: int = 2
    reach_threshold: float = 0.5


@dataclass
class ModelLearningRecord:
    method: str
    seed: int
    trajectory: object
    buffer: ReplayBuffer
    windows: list
    lyapunov: np.ndarray
    online_model: object = None
    aborted: bool = False


def _setup_quad(cfg):
    system = dynamics.quadcopter(**cfg.system_params)
    Q = np.diag(np.asarray(cfg.lqr_q, dtype=float))
    R = cfg.lqr_r * np.eye(4)
    policy, cert = policies.lqr_policy(system, Q, R)
    planning = dynamics.linearized_model(system)
    lo = np.broadcast_to(np.asarray(cfg.domain_low, dtype=float), 6)
    hi = np.broadcast_to(np.asarray(cfg.domain_high, dtype=float), 6)
    domain = SearchDomain(lo, hi, projection=list(range(6, 12)))
    return system, policy, cert, planning, domain


def _start_state(cfg, seed):
    rng = stream(seed, "init")
    x0 = np.zeros(12)
    x0[6:] = rng.normal(0.0, cfg.start_vel_std, 6)
    return x0


def _model_features(cfg):
    return np.arange(3, 12) if cfg.drop_position_features else None


def _lift_velocity_points(points):
    """Embed velocity-space query points into full quadcopter states."""
    pts = np.atleast_2d(points)
    X = np.zeros((len(pts), 12))
    X[:, 6:12] = pts
    return X


def kle3_model_learning(cfg, seed):
    """Single 1200-step execution with variance-targeted exploration and
    online likelihood updates driving the target density."""
    system, policy, cert, planning, domain = _setup_quad(cfg)
    kcfg = KLE3Config(horizon=cfg.horizon, dt=cfg.dt, samples=cfg.samples,
                      reg=cfg.reg, kernel_sigma=cfg.kernel_sigma,
                      mode="full-kl", window_mode="trajopt", steps_per_replan=1,
                      ratio_clip=cfg.ratio_clip)
    ctrl = KLE3Controller(system.model, planning, policy, domain, kcfg,
                          stream(seed, "sampling"), certificate=cert)
    model = StochasticModel(12, 4, cfg.width, stream(seed, "model-init"),
                            state_features=_model_features(cfg))
    buffer = ReplayBuffer()
    rng_train = stream(seed, "online-train")
    rng_norm = stream(seed, "normalization")
    p = uniform_distribution(domain)
    x = _start_state(cfg, seed)
    states = [x.copy()]
    controls = []
    V = [cert.value(x)]
    windows = []
    aborted = False
    normalized = False
    explore_steps = int(cfg.explore_until * cfg.steps)
    for i in range(cfg.steps):
        t_i = i * cfg.dt
        try:
            res = ctrl.step(x, p, t_i, explore=i < explore_steps)
        except (DivergenceError,) as err:
            aborted = True
            break
        x_next = res.states[-1]
        dx = (x_next - x) / cfg.dt
        buffer.append(x, dx, res.controls[0], t_i)
        if res.diagnostics["window_hit"]:
            windows.append((t_i, res.window, res.diagnostics["beta"], V[-1]))
        states.append(x_next.copy())
        controls.append(res.controls[0].copy())
        V.append(cert.value(x_next))
        x = x_next
        if len(buffer) >= cfg.online_batch:
            if not normalized:
                X, DX, U = buffer.arrays()
                model.set_normalizers(X, U, DX)
                normalized = True
            train_step(model, buffer, cfg.online_batch, cfg.online_alpha, rng_train)
            p = variance_target(
                lambda pts: model.var_forward(_lift_velocity_points(pts)),
                cfg.c, domain, cfg.norm_samples, rng_norm)
    traj = dynamics.Trajectory(0.0, len(controls) * cfg.dt, cfg.dt,
                               np.asarray(states), np.asarray(controls))
    return ModelLearningRecord("kle3", seed, traj, buffer, windows,
                               np.asarray(V), online_model=model, aborted=aborted)


def noise_baseline_run(cfg, method, seed):
    """Hover policy plus exploration noise for the same 1200-step execution."""
    kind, scale = method.split("-", 1)
    scale = float(scale)
    system, policy, cert, planning, domain = _setup_quad(cfg)
    if cfg.noise_relative_to_hover:
        scale = scale * float(system.u_eq[0])
    process = NoiseProcess(kind=kind, scale=scale, dim=4, dt=cfg.dt,
                           theta_ou=cfg.theta_ou)
    noisy = NoisyPolicy(policy, process, stream(seed, "noise"))
    buffer = ReplayBuffer()
    x = _start_state(cfg, seed)
    states = [x.copy()]
    controls = []
    V = [cert.value(x)]
    aborted = False
    explore_steps = int(cfg.explore_until * cfg.steps)
    for i in range(cfg.steps):
        t_i = i * cfg.dt
        eps = noisy.step_noise() if i < explore_steps else np.zeros(4)

        def u_fn(t, xs, eps=eps):
            return policy(xs) + eps

        u0 = u_fn(t_i, x)
        try:
            x_next = step_dynamics(system.model, x, u_fn, t_i, cfg.dt)
        except Exception:
            aborted = True
            break
        if np.max(np.abs(x_next)) > 1e6:
            aborted = True
            break
        dx = (x_next - x) / cfg.dt
        buffer.append(x, dx, u0, t_i)
        states.append(x_next.copy())
        controls.append(u0.copy())
        V.append(cert.value(x_next))
        x = x_next
    traj = dynamics.Trajectory(0.0, len(controls) * cfg.dt, cfg.dt,
                               np.asarray(states), np.asarray(controls))
    return ModelLearningRecord(method, seed, traj, buffer, [], np.asarray(V),
                               aborted=aborted)


class OracleModel:
    """Mean-model shim exposing the true linearized quadcopter dynamics."""

    def __init__(self, planning):
        self.planning = planning

    def mean_forward(self, X, U):
        X = np.atleast_2d(X)
        U = np.atleast_2d(U)
        return ((X - self.planning.x_ref) @ self.planning.A.T
                + (U - self.planning.u_ref) @ self.planning.B.T)


def _mppi_step(model, x, useq, target, cfg, system, rng):
    """One path-integral control update through the learned mean model.

    Exponential weights are scaled by the cost spread so the temperature is
    unitless; a couple of refinement iterations sharpen the plan before the
    first action is applied.
    """
    K, H = cfg.track_samples, cfg.track_horizon
    hover = system.u_eq
    for _ in range(cfg.track_iters):
        eps = rng.normal(0.0, cfg.track_sigma, size=(K, H, 4))
        cand = np.clip(useq[None, :, :] + eps, 0.0, 3.0 * hover[0])
        X = np.tile(x, (K, 1))
        costs = np.zeros(K)
        for hstep in range(H):
            dX = model.mean_forward(X, cand[:, hstep, :])
            X = X + cfg.dt * dX
            costs += (np.sum((X[:, 0:3] - target) ** 2, axis=1)
                      + 0.1 * np.sum(X[:, 6:9] ** 2, axis=1)
                      + 1.0 * np.sum(X[:, 3:5] ** 2, axis=1)
                      + 0.1 * np.sum(X[:, 9:12] ** 2, axis=1)) * cfg.dt
        costs += 20.0 * np.sum((X[:, 0:3] - target) ** 2, axis=1) * cfg.dt
        if not np.all(np.isfinite(costs)):
            raise TrainingError("non-finite rollout cost in tracking evaluation")
        spread = max(float(np.std(costs)), 1e-9)
        w = np.exp(-(costs - costs.min()) / (cfg.track_temperature * spread))
        w = w / w.sum()
        useq = np.clip(useq + np.einsum("k,khm->hm", w, eps), 0.0, 3.0 * hover[0])
    u0 = useq[0].copy()
    useq = np.vstack([useq[1:], system.u_eq[None, :]])
    return u0, useq


def tracking_eval(model, cfg, seed):
    """Drive the true quadcopter to random targets with sampling-based MPC
    through the learned mean model; a method completes when the mean final
    position error stays within the reach threshold."""
    system, policy, cert, planning, domain = _setup_quad(cfg)
    rng_t = stream(seed, "targets")
    rng_m = stream(seed, "mppi")
    targets = rng_t.uniform(-2.0, 2.0, size=(cfg.n_targets, 3))
    errors = []
    steps = int(round(cfg.track_duration / cfg.dt))
    for target in targets:
        x = np.zeros(12)
        useq = np.tile(system.u_eq, (cfg.track_horizon, 1))
        failed = False
        for i in range(steps):
            try:
                u0, useq = _mppi_step(model, x, useq, target, cfg, system, rng_m)
            except TrainingError:
                failed = True
                break
            u_fn = lambda t, xs, u0=u0: u0
            x = step_dynamics(system.model, x, u_fn, i * cfg.dt, cfg.dt)
            if np.max(np.abs(x)) > 1e6:
                failed = True
                break
        errors.append(np.inf if failed else float(np.linalg.norm(x[0:3] - target)))
    errors = np.asarray(errors)
    finite = errors[np.isfinite(errors)]
    mean_err = float(np.mean(errors)) if np.all(np.isfinite(errors)) else np.inf
    completed = bool(np.isfinite(mean_err) and mean_err <= cfg.reach_threshold)
    return mean_err, completed, errors


def run_method(cfg, method, seed):
    """One repetition of the Table-style protocol for one method.

    Returns the run record plus (power loss, avg ||u||, tracking error,
    completed) computed with the shared offline trainer and evaluator.
    """
    if method == "kle3":
        record = kle3_model_learning(cfg, seed)
    else:
        record = noise_baseline_run(cfg, method, seed)
    system = dynamics.quadcopter(**cfg.system_params)
    power_loss, u_norm = energy_metrics(record.trajectory.controls, system)
    model, losses = train_offline(record.buffer, 12, 4, cfg.width,
                                  cfg.offline_batch, cfg.offline_iters,
                                  cfg.offline_alpha, seed,
                                  state_features=_model_features(cfg))
    mean_err, completed, _ = tracking_eval(model, cfg, seed)
    return {
        "method": method, "seed": seed, "power_loss": power_loss,
        "u_norm": u_norm, "tracking_error": mean_err, "completed": completed,
        "aborted": record.aborted, "record": record, "offline_losses": losses,
    }
