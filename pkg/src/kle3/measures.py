"""Ergodic measures: Gaussian-bump time-averaged statistics, the sampled
KL coverage objective, its Jensen-bound surrogate, the Fourier ergodic
metric, and grid reconstructions of trajectory statistics.

Conventions fixed here (they change logged values, never minimizers):
the bump psi carries the full multivariate Gaussian normalization by
default so q is a proper density, time integrals use the trajectory's own
dt with left-endpoint weights, and q is floored before any log so the
objective stays finite during line search.
"""

import numpy as np

DEFAULT_Q_FLOOR = 1e-12


class UnsupportedDimensionError(ValueError):
    """The Fourier metric is limited to low-dimensional search domains."""


class SigmaKernel:
    """Gaussian bump psi(s | x) = exp(-0.5 ||s - x||^2_{Sigma^-1}) / eta."""

    def __init__(self, sigma, dim=None, eta="gaussian"):
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim == 0:
            if dim is None:
                raise ValueError("scalar sigma needs an explicit dim")
            sigma = sigma * np.eye(dim)
        elif sigma.ndim == 1:
            sigma = np.diag(sigma)
        self.sigma = sigma
        self.dim = sigma.shape[0]
        self.inv = np.linalg.inv(sigma)
        eigs = np.linalg.eigvalsh(0.5 * (sigma + sigma.T))
        if np.min(eigs) <= 0:
            raise ValueError("Sigma must be positive definite")
        if eta == "gaussian":
            self.eta = float(np.sqrt((2 * np.pi) ** self.dim * np.linalg.det(sigma)))
        elif eta == "unit":
            self.eta = 1.0
        else:
            self.eta = float(eta)

    def sq_dist(self, queries, points):
        """||s_i - x_j||^2_{Sigma^-1} as an (Nq, Np) matrix."""
        d = np.atleast_2d(queries)[:, None, :] - np.atleast_2d(points)[None, :, :]
        return np.einsum("ijk,kl,ijl->ij", d, self.inv, d)

    def psi(self, queries, points):
        """(Nq, Np) matrix of bump values psi(s_i | x_j)."""
        return np.exp(-0.5 * self.sq_dist(queries, points)) / self.eta


def projected_states(traj, domain):
    """Left-endpoint projected trajectory points (T, v) plus clamp count."""
    return domain.project(traj.states[:-1])


def time_avg_density(traj, domain, kernel, queries):
    """Sigma-approximated time-averaged statistics q(s | x(t)) at ``queries``."""
    xbar, _ = projected_states(traj, domain)
    psi = kernel.psi(np.atleast_2d(queries), xbar)
    return psi.sum(axis=1) * traj.dt / traj.duration


def kl_objective(traj, domain, kernel, samples, p, q_floor=DEFAULT_Q_FLOOR):
    """Sampled coverage objective  -sum_i p(s_i) log q(s_i | x(t)).

    p may be a SpatialDistribution or a precomputed array of densities at
    the samples. q is floored at ``q_floor`` before the log.
    """
    p_vals = p if isinstance(p, np.ndarray) else p.pdf(samples)
    q_vals = time_avg_density(traj, domain, kernel, samples)
    return float(-np.sum(p_vals * np.log(np.maximum(q_vals, q_floor))))


def jensen_objective(traj, domain, kernel, samples, p):
    """Jensen-bound surrogate  sum_i p(s_i) sum_j ||s_i - x_j||^2_{Sigma^-1} dt.

    Quadratic in the trajectory; requires no q evaluation and no log.
    """
    p_vals = p if isinstance(p, np.ndarray) else p.pdf(samples)
    xbar, _ = projected_states(traj, domain)
    d2 = kernel.sq_dist(np.atleast_2d(samples), xbar)
    return float(np.sum(p_vals * d2.sum(axis=1) * traj.dt))


def _fourier_indices(max_index, dim):
    grids = np.meshgrid(*[np.arange(max_index + 1)] * dim, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _fourier_basis(points, ks, domain):
    """Orthonormal cosine basis values F_k(s) as (Npoints, Nk)."""
    lengths = domain.upper - domain.lower
    rel = (np.atleast_2d(points) - domain.lower) / lengths
    vals = np.prod(np.cos(np.pi * ks[None, :, :] * rel[:, None, :]), axis=2)
    hk = np.sqrt(np.prod(np.where(ks > 0, 0.5, 1.0), axis=1) * np.prod(lengths))
    return vals / hk


def fourier_ergodic_metric(traj, domain, p, max_index, grid_res=50):
    """Sobolev-weighted squared coefficient distance between trajectory
    statistics and the target density.

    Cost grows as O((K+1)^v); domains beyond v = 3 are rejected, which is
    precisely the scalability gap the sampled KL measure closes.
    """
    v = domain.dim
    if v > 3:
        raise UnsupportedDimensionError(
            f"Fourier metric supports v <= 3, got v = {v}")
    ks = _fourier_indices(max_index, v)
    lam = (1.0 + np.sum(ks**2, axis=1)) ** (-(v + 1) / 2.0)

    xbar, _ = projected_states(traj, domain)
    ck = _fourier_basis(xbar, ks, domain).sum(axis=0) * traj.dt / traj.duration

    pts, _, cell = domain.grid(grid_res)
    p_vals = p if isinstance(p, np.ndarray) else p.pdf(pts)
    pk = (_fourier_basis(pts, ks, domain) * p_vals[:, None]).sum(axis=0) * cell

    return float(np.sum(lam * (ck - pk) ** 2))


def reconstruct_density(traj, domain, kernel=None, mode="sigma", grid_res=60,
                        max_index=20):
    """Grid reconstruction of the trajectory's spatial statistics.

    Modes: 'sigma' (sum of Gaussian bumps), 'fourier' (cosine partial sum
    of the empirical coefficients, which can ring negative), and 'moment'
    (single Gaussian with the trajectory's empirical mean and covariance).
    Returns (grid_axes, values) with values shaped res^v.
    """
    if grid_res < 8:
        raise ValueError("reconstruction grids need at least 8 cells per axis")
    v = domain.dim
    pts, axes, _ = domain.grid(grid_res)
    xbar, _ = projected_states(traj, domain)

    if mode == "sigma":
        if kernel is None:
            raise ValueError("sigma reconstruction needs a kernel")
        vals = kernel.psi(pts, xbar).sum(axis=1) * traj.dt / traj.duration
    elif mode == "fourier":
        ks = _fourier_indices(max_index, v)
        ck = _fourier_basis(xbar, ks, domain).sum(axis=0) * traj.dt / traj.duration
        vals = _fourier_basis(pts, ks, domain) @ ck
    elif mode == "moment":
        mean = xbar.mean(axis=0)
        centered = xbar - mean
        cov = centered.T @ centered / len(xbar)
        cov = cov + 1e-10 * np.eye(v)
        diff = pts - mean
        expo = np.einsum("ij,jk,ik->i", diff, np.linalg.inv(cov), diff)
        norm = np.sqrt((2 * np.pi) ** v * np.linalg.det(cov))
        vals = np.exp(-0.5 * expo) / norm
    else:
        raise ValueError(f"unknown reconstruction mode '{mode}'")
    return axes, vals.reshape((grid_res,) * v)
