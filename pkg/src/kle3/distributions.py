"""Bounded search domains and Boltzmann-softmax target distributions.

A target density p(s) over the search domain is built from a utility field
U(s) as p(s) = exp(c U(s)) / Z, where Z is a Monte-Carlo sample average of
the normalizing integral. Evaluation shifts by the max log-weight so the
softmax is invariant to constant offsets in U. Densities are evaluated
lazily at query points; grids appear only in tests and reconstructions.
"""

from dataclasses import dataclass, field

import numpy as np


class DegenerateDistributionError(RuntimeError):
    """All utilities were -inf; no density can be normalized."""


@dataclass(frozen=True)
class SearchDomain:
    """Axis-aligned box in R^v plus the state indices that project into it."""

    lower: np.ndarray
    upper: np.ndarray
    projection: np.ndarray = None  # state (and optionally action) indices

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("bounds must be 1-d arrays of equal length")
        if np.any(self.lower >= self.upper):
            raise ValueError("require lower < upper per coordinate")
        proj = np.arange(self.dim) if self.projection is None else np.asarray(self.projection, dtype=int)
        if len(proj) != self.dim:
            raise ValueError("projection length must equal the domain dimension")
        object.__setattr__(self, "projection", proj)

    @property
    def dim(self):
        return len(self.lower)

    @property
    def volume(self):
        return float(np.prod(self.upper - self.lower))

    def project(self, states):
        """Project states onto the domain coordinates and clamp to bounds.

        Returns (points, n_clamped); clamp events are counted, not silent.
        """
        pts = np.atleast_2d(np.asarray(states, dtype=float))[:, self.projection]
        clamped = np.clip(pts, self.lower, self.upper)
        n_clamped = int(np.sum(np.any(pts != clamped, axis=1)))
        return clamped, n_clamped

    def uniform(self, rng, count):
        """``count`` i.i.d. uniform points; deterministic given the stream."""
        if count < 1:
            raise ValueError("need at least one sample")
        return rng.uniform(self.lower, self.upper, size=(int(count), self.dim))

    def contains(self, points):
        pts = np.atleast_2d(points)
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)

    def grid(self, res):
        """Cell-center grid: (points (res^v, v), axes list, cell volume)."""
        axes = [np.linspace(lo, hi, res + 1)[:-1] + (hi - lo) / (2 * res)
                for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        return pts, axes, self.volume / res ** self.dim


def uniform_samples(domain, count, rng):
    return domain.uniform(rng, count)


@dataclass(frozen=True)
class SpatialDistribution:
    """Normalized density over a search domain, evaluated pointwise.

    ``log_weight`` maps points to c*U(s); ``log_norm`` is log of the
    normalizing constant (sample-average or analytic).
    """

    domain: SearchDomain
    log_weight: object
    log_norm: float
    normalization: str = "sample-average"
    meta: dict = field(default_factory=dict)

    def pdf(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.exp(np.asarray(self.log_weight(pts), dtype=float) - self.log_norm)


def boltzmann_softmax_distribution(utility, c, domain, normalization_samples=10_000, rng=None):
    """p(s) = exp(c U(s)) / Z with Z = vol * mean exp(c U) over uniform draws."""
    if c <= 0:
        raise ValueError("require c > 0")
    rng = np.random.default_rng(0) if rng is None else rng
    pts = domain.uniform(rng, normalization_samples)
    logw = c * np.asarray(utility(pts), dtype=float)
    shift = np.max(logw[np.isfinite(logw)]) if np.any(np.isfinite(logw)) else -np.inf
    if not np.isfinite(shift):
        raise DegenerateDistributionError("all utilities are -inf on the domain")
    log_norm = shift + np.log(np.mean(np.exp(logw - shift))) + np.log(domain.volume)
    return SpatialDistribution(domain, lambda p: c * np.asarray(utility(p), dtype=float),
                               log_norm, "sample-average")


def uniform_distribution(domain):
    """The flat density 1/volume (analytic normalization)."""
    return SpatialDistribution(domain, lambda p: np.zeros(len(np.atleast_2d(p))),
                               np.log(domain.volume), "analytic")


def gaussian_mixture_density(domain, means, sigmas, weights):
    """Mixture of isotropic Gaussians, analytically normalized.

    Suitable as a fixed coverage target; modes should sit well inside the
    domain so the off-domain mass is negligible.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    sigmas = np.asarray(sigmas, dtype=float)
    weights = np.asarray(weights, dtype=float)
    weights = weights / np.sum(weights)
    v = domain.dim

    def log_density(pts):
        pts = np.atleast_2d(pts)
        comps = np.empty((len(pts), len(weights)))
        for k, (mu, sg, w) in enumerate(zip(means, sigmas, weights)):
            d2 = np.sum((pts - mu) ** 2, axis=1) / sg**2
            comps[:, k] = np.log(w) - 0.5 * d2 - 0.5 * v * np.log(2 * np.pi * sg**2)
        top = np.max(comps, axis=1)
        return top + np.log(np.sum(np.exp(comps - top[:, None]), axis=1))

    return SpatialDistribution(domain, log_density, 0.0, "analytic",
                               meta={"means": means, "sigmas": sigmas, "weights": weights})


def ucb_target(gp, kappa, c, domain, normalization_samples=10_000, rng=None):
    """Softmax of the upper confidence bound mean + kappa * std.

    An unfitted GP yields a constant bound, hence the uniform prior.
    """
    if gp is None or gp.n_observations == 0:
        return uniform_distribution(domain)

    def utility(pts):
        mean, std = gp.predict(pts)
        return mean + kappa * std

    return boltzmann_softmax_distribution(utility, c, domain, normalization_samples, rng)


def variance_target(variance_fn, c, domain, normalization_samples=10_000, rng=None,
                    scalarize="mean-std"):
    """Softmax of the scalarized per-dimension model variance.

    ``variance_fn`` maps (N, v) query points to (N, d) diagonal variances;
    scalarization is the mean (default) or max of the per-dimension stds.
    """
    reduce = {"mean-std": np.mean, "max-std": np.max}[scalarize]

    def utility(pts):
        var = np.atleast_2d(np.asarray(variance_fn(pts), dtype=float))
        return reduce(np.sqrt(np.maximum(var, 0.0)), axis=1)

    return boltzmann_softmax_distribution(utility, c, domain, normalization_samples, rng)


def q_value_target(q_fn, c, domain, state_dim, control_dim,
                   normalization_samples=10_000, rng=None):
    """Softmax of an externally supplied Q over concatenated state-action points."""
    if domain.dim != state_dim + control_dim:
        raise ValueError(
            f"q_value_target needs a state-action domain of dimension "
            f"{state_dim + control_dim}, got {domain.dim}")
    return boltzmann_softmax_distribution(
        lambda pts: np.asarray(q_fn(pts), dtype=float), c, domain,
        normalization_samples, rng)
