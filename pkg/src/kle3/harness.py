"""Experiment orchestration: validated configs, seeded trials, persistent
records, and the reconstruction pipeline.

Configs are single JSON files validated strictly (unknown keys rejected,
every violation reported at once) and embedded into each run's summary for
provenance. Trace files are line-delimited CSV written as the run
progresses; a record re-runs byte-identically from its embedded config in
single-threaded mode.
"""

import csv
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bayesopt as bayes_mod
from . import model_learning as ml_mod
from .controller import KLE3Config, KLE3Controller, run_exploration
from .distributions import SearchDomain, gaussian_mixture_density
from .dynamics import Trajectory, double_integrator, rollout
from .measures import SigmaKernel, reconstruct_density
from .policies import lqr_policy
from .streams import stream, trial_seed

OUTPUT_ROOT_ENV = "KLE3_OUT_ROOT"

EXPERIMENT_KINDS = ("coverage-demo", "bayesopt", "model-learning", "reconstruct-fig1")


class ConfigError(ValueError):
    """Carries every validation violation, with field paths."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in self.errors))


@dataclass
class CoverageDemoConfig:
    """2-d double-integrator coverage demo against a fixed mixture target.

    The control kernel is wide (the sampled-KL forcing only reaches a few
    kernel widths); reconstruction uses a narrow kernel so dwell structure
    stays visible in the emitted grids.
    """

    duration: float = 100.0
    dt: float = 0.04
    horizon: float = 0.6
    samples: int = 40
    reg: float = 0.02
    kernel_sigma: float = 0.15
    recon_sigma: float = 0.02
    steps_per_replan: int = 2
    history_stride: int = 5
    window: str = "line-search"
    domain_low: float = -1.0
    domain_high: float = 1.0
    target_means: tuple = ((-0.45, -0.45), (0.45, 0.45))
    target_sigmas: tuple = (0.2, 0.2)
    target_weights: tuple = (0.55, 0.45)
    lqr_q: tuple = (0.02, 0.02, 0.05, 0.05)
    lqr_r: float = 1.0
    method: str = "kle3"  # or "lqr-argmax"
    start_low: float = -0.2
    start_high: float = 0.2


@dataclass
class ReconstructConfig:
    """Grid emission for a stored trajectory: Fourier, Sigma, moment grids."""

    trajectory: str = ""
    dt: float = 0.02
    domain_low: float = -1.0
    domain_high: float = 1.0
    dim: int = 2
    projection: tuple = (0, 1)
    kernel_sigma: float = 0.02
    grid_res: int = 60
    max_index: int = 20
    target_means: tuple = ((-0.5, -0.5), (0.5, 0.5))
    target_sigmas: tuple = (0.15, 0.15)
    target_weights: tuple = (0.55, 0.45)


@dataclass
class ExperimentConfig:
    """Top-level experiment description (one JSON file per experiment)."""

    experiment: str = "coverage-demo"
    seed: int = 0
    trials: int = 1
    out: str = "runs"
    jobs: int = 1
    mode: str = "full-kl"
    coverage: CoverageDemoConfig = field(default_factory=CoverageDemoConfig)
    bayesopt: bayes_mod.BayesOptConfig = field(default_factory=bayes_mod.BayesOptConfig)
    model_learning: ml_mod.ModelLearningConfig = field(default_factory=ml_mod.ModelLearningConfig)
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)
    methods: tuple = ()


_NESTED = {
    "coverage": CoverageDemoConfig,
    "bayesopt": bayes_mod.BayesOptConfig,
    "model_learning": ml_mod.ModelLearningConfig,
    "reconstruct": ReconstructConfig,
    "gp": bayes_mod.GPConfig,
}


def _coerce(dc_type, data, path, errors):
    fields = {f.name: f for f in dataclasses.fields(dc_type)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in fields:
            errors.append(f"{where}: unknown key")
            continue
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _coerce(_NESTED[key], value, where, errors)
        elif isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(value, dict):
            kwargs[key] = dict(value)
        else:
            kwargs[key] = value
    try:
        return dc_type(**kwargs)
    except TypeError as err:
        errors.append(f"{path or dc_type.__name__}: {err}")
        return dc_type()


def _positive(errors, value, name):
    if not (isinstance(value, (int, float)) and value > 0):
        errors.append(f"{name}: must be a positive number, got {value!r}")


def validate_config(data):
    """Build an ExperimentConfig from a JSON dict, collecting all errors."""
    errors = []
    if not isinstance(data, dict):
        raise ConfigError(["top level must be a JSON object"])
    cfg = _coerce(ExperimentConfig, data, "", errors)
    if cfg.experiment not in EXPERIMENT_KINDS:
        errors.append(f"experiment: must be one of {EXPERIMENT_KINDS}, got {cfg.experiment!r}")
    if cfg.trials < 1:
        errors.append(f"trials: must be >= 1, got {cfg.trials}")
    if cfg.mode not in ("full-kl", "jensen"):
        errors.append(f"mode: must be 'full-kl' or 'jensen', got {cfg.mode!r}")
    if cfg.experiment == "coverage-demo":
        _positive(errors, cfg.coverage.duration, "coverage.duration")
        _positive(errors, cfg.coverage.dt, "coverage.dt")
        _positive(errors, cfg.coverage.horizon, "coverage.horizon")
        if not cfg.coverage.domain_low < cfg.coverage.domain_high:
            errors.append("coverage.domain_low: must be < coverage.domain_high")
    if cfg.experiment == "bayesopt":
        _positive(errors, cfg.bayesopt.duration, "bayesopt.duration")
        _positive(errors, cfg.bayesopt.dt, "bayesopt.dt")
        _positive(errors, cfg.bayesopt.horizon, "bayesopt.horizon")
        _positive(errors, cfg.bayesopt.sample_period, "bayesopt.sample_period")
        _positive(errors, cfg.bayesopt.kappa, "bayesopt.kappa")
        _positive(errors, cfg.bayesopt.c, "bayesopt.c")
    if cfg.experiment == "model-learning":
        _positive(errors, cfg.model_learning.dt, "model_learning.dt")
        _positive(errors, cfg.model_learning.horizon, "model_learning.horizon")
        if cfg.model_learning.steps < 1:
            errors.append("model_learning.steps: must be >= 1")
    if cfg.experiment == "reconstruct-fig1" and not cfg.reconstruct.trajectory:
        errors.append("reconstruct.trajectory: path to a stored trace is required")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path, overrides=None):
    with open(path) as fh:
        data = json.load(fh)
    data.update(overrides or {})
    return validate_config(data)


def config_dict(cfg):
    return dataclasses.asdict(cfg)


def config_digest(cfg):
    """Digest of the experiment-defining content (where it runs and how many
    workers execute it do not change what it computes)."""
    payload = config_dict(cfg)
    payload.pop("out", None)
    payload.pop("jobs", None)
    blob = json.dumps(payload, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _resolve_out(cfg):
    root = os.environ.get(OUTPUT_ROOT_ENV, "")
    return os.path.join(root, cfg.out) if root else cfg.out


class TraceWriter:
    """Line-delimited CSV trace: one row per executed step, flushed live."""

    def __init__(self, path, state_dim, control_dim, digest):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._fh.write(f"# config {digest}\n")
        self._writer = csv.writer(self._fh)
        cols = (["step", "t"] + [f"x{i}" for i in range(state_dim)]
                + [f"u{i}" for i in range(control_dim)]
                + ["V", "D_KL", "beta", "tau", "lambda"])
        self._writer.writerow(cols)
        self._step = 0

    def write(self, t, x, u, V=np.nan, dkl=np.nan, beta=np.nan, tau=np.nan, lam=np.nan):
        row = ([self._step, repr(float(t))]
               + [repr(float(v)) for v in np.atleast_1d(x)]
               + [repr(float(v)) for v in np.atleast_1d(u)]
               + [repr(float(V)), repr(float(dkl)), repr(float(beta)),
                  repr(float(tau)), repr(float(lam))])
        self._writer.writerow(row)
        self._fh.flush()
        self._step += 1

    def close(self):
        self._fh.close()


def read_trace_states(path, state_dim):
    """State columns of a trace file, for reconstructions and re-run checks."""
    states = []
    dt = None
    prev_t = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            break
        reader = csv.DictReader([line] + fh.readlines())
        for row in reader:
            states.append([float(row[f"x{i}"]) for i in range(state_dim)])
            t = float(row["t"])
            if prev_t is not None and dt is None:
                dt = t - prev_t
            prev_t = t
    return np.asarray(states), dt


def _coverage_trial(cfg, seed, out_dir, digest):
    cc = cfg.coverage
    system = double_integrator(2)
    Q = np.diag(np.asarray(cc.lqr_q, dtype=float))
    R = cc.lqr_r * np.eye(2)
    policy, cert = lqr_policy(system, Q, R)
    domain = SearchDomain([cc.domain_low] * 2, [cc.domain_high] * 2, projection=[0, 1])
    target = gaussian_mixture_density(domain, cc.target_means, cc.target_sigmas,
                                      cc.target_weights)
    rng = stream(seed, "init")
    x0 = np.zeros(4)
    x0[:2] = rng.uniform(cc.start_low, cc.start_high, 2)

    writer = TraceWriter(os.path.join(out_dir, f"trace_{seed}.csv"), 4, 2, digest)
    if cc.method == "kle3":
        kcfg = KLE3Config(horizon=cc.horizon, dt=cc.dt, samples=cc.samples,
                          reg=cc.reg, kernel_sigma=cc.kernel_sigma,
                          mode=cfg.mode, window_mode=cc.window,
                          steps_per_replan=cc.steps_per_replan,
                          persistent_q=True, history_stride=cc.history_stride)
        ctrl = KLE3Controller(system.model, system.model, policy, domain, kcfg,
                              stream(seed, "sampling"), certificate=cert)

        def on_diag(d):
            return (d.get("objective", np.nan), d.get("beta", np.nan),
                    d.get("tau", np.nan), d.get("lam", np.nan))

        run = run_exploration(ctrl, target, x0, cc.duration)
        traj = run.trajectory
        for j in range(len(traj.controls)):
            dkl, beta, tau, lam = on_diag(run.diagnostics[min(j, len(run.diagnostics) - 1)])
            writer.write(traj.times[j], traj.states[j], traj.controls[j],
                         V=cert.value(traj.states[j]), dkl=dkl, beta=beta, tau=tau, lam=lam)
        aborted = run.aborted
    elif cc.method == "lqr-argmax":
        pts, _, _ = domain.grid(64)
        dens = target.pdf(pts)
        argmax = pts[int(np.argmax(dens))]
        servo = policy.with_reference(np.array([argmax[0], argmax[1], 0.0, 0.0]))
        traj = rollout(system.model, servo, x0, 0.0, cc.duration, cc.dt)
        for j in range(len(traj.controls)):
            writer.write(traj.times[j], traj.states[j], traj.controls[j],
                         V=cert.value(traj.states[j]))
        aborted = False
    else:
        raise ConfigError([f"coverage.method: unknown method {cc.method!r}"])
    writer.close()
    kernel = SigmaKernel(cc.recon_sigma, dim=2)
    _, sigma_grid = reconstruct_density(traj, domain, kernel, mode="sigma", grid_res=60)
    mass = _mode_masses(domain, sigma_grid, cc.target_means, cc.target_sigmas)
    return {"seed": seed, "aborted": aborted, "mode_masses": mass,
            "method": cc.method}


def _mode_masses(domain, grid_vals, means, sigmas, radius_sigmas=2.0):
    res = grid_vals.shape[0]
    pts, _, cell = domain.grid(res)
    vals = grid_vals.ravel()
    total = np.sum(vals) * cell
    masses = []
    for mu, sg in zip(means, sigmas):
        inside = np.linalg.norm(pts - np.asarray(mu), axis=1) <= radius_sigmas * sg
        masses.append(float(np.sum(vals[inside]) * cell / max(total, 1e-300)))
    return masses


def _bayesopt_trial(cfg, seed, out_dir, digest):
    method = cfg.methods[0] if cfg.methods else "kle3"
    rec = bayes_mod.METHODS[method](cfg.bayesopt, seed)
    writer = TraceWriter(os.path.join(out_dir, f"trace_{seed}.csv"), 1, 0, digest)
    for j, t in enumerate(rec.times):
        writer.write(t, [rec.lyapunov[j]], [], V=rec.lyapunov[j])
    writer.close()
    with open(os.path.join(out_dir, f"bayes_{seed}.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "best_y", "V", "method", "seed"])
        for i, t in enumerate(rec.sample_times):
            v_idx = min(int(round(t / cfg.bayesopt.dt)), len(rec.lyapunov) - 1)
            w.writerow([i, repr(float(t)), repr(float(rec.best_trace[i])),
                        repr(float(rec.lyapunov[v_idx])), method, seed])
    return {"seed": seed, "method": method, "best_value": rec.best_value,
            "max_lyapunov": rec.max_lyapunov, "aborted": rec.aborted}


def _model_learning_trial(cfg, seed, out_dir, digest):
    method = cfg.methods[0] if cfg.methods else "kle3"
    out = ml_mod.run_method(cfg.model_learning, method, seed)
    rec = out.pop("record")
    traj = rec.trajectory
    writer = TraceWriter(os.path.join(out_dir, f"trace_{method}_{seed}.csv"),
                         12, 4, digest)
    for j in range(len(traj.controls)):
        writer.write(traj.times[j], traj.states[j], traj.controls[j],
                     V=rec.lyapunov[j])
    writer.close()
    out.pop("offline_losses", None)
    return out


def run(cfg):
    """Execute the configured experiment; one record set per trial.

    Returns (summary dict, exit status); nonzero status when a trial aborts.
    """
    out_dir = _resolve_out(cfg)
    os.makedirs(out_dir, exist_ok=True)
    digest = config_digest(cfg)
    t_start = time.time()

    methods = list(cfg.methods) if cfg.methods else None
    jobs = []
    if cfg.experiment == "coverage-demo":
        for k in range(cfg.trials):
            jobs.append((None, trial_seed(cfg.seed, k)))
        worker = _coverage_trial
    elif cfg.experiment == "bayesopt":
        for m in methods or ["kle3"]:
            for k in range(cfg.trials):
                jobs.append((m, trial_seed(cfg.seed, k)))
        worker = _bayesopt_trial
    elif cfg.experiment == "model-learning":
        for m in methods or ["kle3"]:
            for k in range(cfg.trials):
                jobs.append((m, trial_seed(cfg.seed, k)))
        worker = _model_learning_trial
    elif cfg.experiment == "reconstruct-fig1":
        summary = reconstruct(cfg)
        return summary, 0
    else:
        raise ConfigError([f"experiment: unsupported kind {cfg.experiment!r}"])

    results = []
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_run_one, cfg, m, s, out_dir, digest, worker.__name__)
                       for m, s in jobs]
            results = [f.result() for f in futures]
    else:
        for m, s in jobs:
            results.append(_run_one(cfg, m, s, out_dir, digest, worker.__name__))

    summary = _summarize(cfg, results)
    summary["wall_clock_s"] = time.time() - t_start
    summary["config"] = config_dict(cfg)
    summary["config_digest"] = digest
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, default=_json_default)
    if cfg.experiment == "model-learning":
        _write_metrics_table(os.path.join(out_dir, "table_metrics.csv"), summary)
    status = 1 if any(r.get("aborted") for r in results) else 0
    return summary, status


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


_WORKERS = {}


def _run_one(cfg, method, seed, out_dir, digest, worker_name):
    worker = {"_coverage_trial": _coverage_trial,
              "_bayesopt_trial": _bayesopt_trial,
              "_model_learning_trial": _model_learning_trial}[worker_name]
    sub = cfg if method is None else dataclasses.replace(cfg, methods=(method,))
    return worker(sub, seed, out_dir, digest)


def _summarize(cfg, results):
    summary = {"experiment": cfg.experiment, "trials": cfg.trials,
               "results": results}
    by_method = {}
    for r in results:
        by_method.setdefault(r.get("method", "default"), []).append(r)
    stats = {}
    for m, rs in by_method.items():
        entry = {"n": len(rs), "aborted": sum(bool(r.get("aborted")) for r in rs)}
        for key in ("best_value", "max_lyapunov", "power_loss", "u_norm",
                    "tracking_error"):
            vals = [r[key] for r in rs if key in r and np.isfinite(r[key])]
            if vals:
                entry[f"{key}_mean"] = float(np.mean(vals))
                entry[f"{key}_std"] = float(np.std(vals))
        if any("completed" in r for r in rs):
            entry["completed_frac"] = float(np.mean([bool(r.get("completed"))
                                                     for r in rs]))
        stats[m] = entry
    summary["methods"] = stats
    return summary


def _write_metrics_table(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "power_loss_mean", "power_loss_std",
                    "u_norm_mean", "u_norm_std", "completed_frac", "completes"])
        for m, e in summary["methods"].items():
            w.writerow([m,
                        e.get("power_loss_mean", ""), e.get("power_loss_std", ""),
                        e.get("u_norm_mean", ""), e.get("u_norm_std", ""),
                        e.get("completed_frac", ""),
                        "" if "completed_frac" not in e else
                        ("yes" if e["completed_frac"] > 0.5 else "no (*)")])


def reconstruct(cfg):
    """Emit the three trajectory-statistics grids plus the target grid."""
    rc = cfg.reconstruct
    out_dir = _resolve_out(cfg)
    os.makedirs(out_dir, exist_ok=True)
    states, dt = read_trace_states(rc.trajectory, max(rc.projection) + 1)
    if not len(states):
        raise IOError(f"no states found in trajectory file {rc.trajectory!r}")
    dt = dt or rc.dt
    controls = np.zeros((len(states) - 1, 1))
    traj = Trajectory(0.0, (len(states) - 1) * dt, dt, states, controls)
    domain = SearchDomain([rc.domain_low] * rc.dim, [rc.domain_high] * rc.dim,
                          projection=list(rc.projection))
    kernel = SigmaKernel(rc.kernel_sigma, dim=rc.dim)
    target = gaussian_mixture_density(domain, rc.target_means, rc.target_sigmas,
                                      rc.target_weights)
    written = {}
    for mode, name in (("fourier", f"fourier_k{rc.max_index}"), ("sigma", "sigma"),
                       ("moment", "moment")):
        _, grid = reconstruct_density(traj, domain, kernel, mode=mode,
                                      grid_res=rc.grid_res, max_index=rc.max_index)
        path = os.path.join(out_dir, f"{name}.csv")
        np.savetxt(path, grid, delimiter=",")
        written[mode] = path
    pts, _, _ = domain.grid(rc.grid_res)
    tgrid = target.pdf(pts).reshape((rc.grid_res,) * rc.dim)
    path = os.path.join(out_dir, "target.csv")
    np.savetxt(path, tgrid, delimiter=",")
    written["target"] = path
    return {"experiment": "reconstruct-fig1", "files": written,
            "grid_res": rc.grid_res, "config": config_dict(cfg)}
