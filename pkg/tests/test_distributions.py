import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kle3.bayesopt import GPConfig, GaussianProcess
from kle3.distributions import (
    DegenerateDistributionError,
    SearchDomain,
    boltzmann_softmax_distribution,
    gaussian_mixture_density,
    q_value_target,
    ucb_target,
    uniform_distribution,
    uniform_samples,
    variance_target,
)


def unit_square():
    return SearchDomain([0.0, 0.0], [1.0, 1.0])


def test_uniform_samples_bounds_and_determinism():
    dom = unit_square()
    a = uniform_samples(dom, 4, np.random.default_rng(7))
    b = uniform_samples(dom, 4, np.random.default_rng(7))
    assert a.shape == (4, 2)
    assert np.all((a >= 0) & (a <= 1))
    np.testing.assert_array_equal(a, b)


def test_uniform_samples_mean():
    dom = unit_square()
    pts = uniform_samples(dom, 100_000, np.random.default_rng(0))
    np.testing.assert_allclose(pts.mean(axis=0), [0.5, 0.5], atol=0.01)


def test_domain_projection_clamps_and_counts():
    dom = SearchDomain([-1.0], [1.0], projection=[0])
    pts, n = dom.project(np.array([[0.5, 9.0], [1.5, 0.0], [-3.0, 1.0]]))
    np.testing.assert_allclose(pts[:, 0], [0.5, 1.0, -1.0])
    assert n == 2


def test_domain_validation():
    with pytest.raises(ValueError):
        SearchDomain([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        SearchDomain([0.0], [1.0], projection=[0, 1])


def test_softmax_constant_utility_is_uniform():
    dom = unit_square()
    p = boltzmann_softmax_distribution(lambda pts: np.full(len(pts), 2.5), c=1.0,
                                       domain=dom, normalization_samples=4000,
                                       rng=np.random.default_rng(0))
    vals = p.pdf(dom.uniform(np.random.default_rng(1), 50))
    np.testing.assert_allclose(vals, 1.0, rtol=1e-9)


def test_softmax_small_c_approaches_uniform():
    dom = unit_square()
    p = boltzmann_softmax_distribution(lambda pts: pts[:, 0] * 10, c=1e-9,
                                       domain=dom, normalization_samples=4000,
                                       rng=np.random.default_rng(0))
    vals = p.pdf(dom.uniform(np.random.default_rng(1), 50))
    np.testing.assert_allclose(vals, 1.0, rtol=1e-6)


def test_softmax_two_point_hand_normalization():
    # discrete two-point check: exp(0) and exp(ln 2) normalize to 1/3, 2/3
    w = np.exp([0.0, np.log(2.0)])
    probs = w / w.sum()
    np.testing.assert_allclose(probs, [1 / 3, 2 / 3])


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=-50, max_value=50))
def test_softmax_shift_invariance(shift):
    dom = SearchDomain([0.0], [1.0])
    rng_pts = np.random.default_rng(3).uniform(0, 1, (20, 1))

    def u1(pts):
        return np.sin(3 * pts[:, 0])

    def u2(pts):
        return np.sin(3 * pts[:, 0]) + shift

    p1 = boltzmann_softmax_distribution(u1, 2.0, dom, 2000, np.random.default_rng(5))
    p2 = boltzmann_softmax_distribution(u2, 2.0, dom, 2000, np.random.default_rng(5))
    np.testing.assert_allclose(p1.pdf(rng_pts), p2.pdf(rng_pts), rtol=1e-10)


def test_softmax_monotone_in_utility():
    dom = SearchDomain([0.0], [1.0])
    p = boltzmann_softmax_distribution(lambda pts: pts[:, 0], 3.0, dom, 4000,
                                       np.random.default_rng(2))
    v = p.pdf(np.array([[0.2], [0.8]]))
    assert v[1] > v[0]


def test_softmax_degenerate_error():
    dom = SearchDomain([0.0], [1.0])
    with pytest.raises(DegenerateDistributionError):
        boltzmann_softmax_distribution(lambda pts: np.full(len(pts), -np.inf),
                                       1.0, dom, 100, np.random.default_rng(0))


def test_normalization_monte_carlo_check():
    dom = unit_square()
    p = boltzmann_softmax_distribution(lambda pts: np.cos(4 * pts[:, 0]) + pts[:, 1],
                                       2.0, dom, 10_000, np.random.default_rng(0))
    pts = dom.uniform(np.random.default_rng(9), 10_000)
    integral = np.mean(p.pdf(pts)) * dom.volume
    assert 0.9 <= integral <= 1.1
    assert np.all(p.pdf(pts) >= 0)


def test_ucb_target_empty_gp_uniform():
    dom = SearchDomain([-1.0], [1.0])
    p = ucb_target(GaussianProcess(GPConfig()), kappa=2.0, c=1.0, domain=dom)
    vals = p.pdf(np.linspace(-1, 1, 9)[:, None])
    np.testing.assert_allclose(vals, 0.5, rtol=1e-9)


def test_ucb_target_mode_near_observation():
    dom = SearchDomain([-1.0], [1.0])
    gp = GaussianProcess(GPConfig(length_scale=0.2, noise=0.01)).add(np.array([0.4]), 2.0)
    p = ucb_target(gp, kappa=1.0, c=3.0, domain=dom,
                   normalization_samples=4000, rng=np.random.default_rng(0))
    grid = np.linspace(-1, 1, 801)[:, None]
    mode = grid[np.argmax(p.pdf(grid))][0]
    assert abs(mode - 0.4) <= 0.2


def test_ucb_target_kappa_zero_is_mean_softmax():
    dom = SearchDomain([-1.0], [1.0])
    gp = GaussianProcess(GPConfig(length_scale=0.3, noise=0.05)).add(np.array([0.0]), 1.0)
    c = 2.0
    p = ucb_target(gp, kappa=0.0, c=c, domain=dom,
                   normalization_samples=4000, rng=np.random.default_rng(0))
    pts = np.linspace(-1, 1, 11)[:, None]
    mean, _ = gp.predict(pts)
    ratio = p.pdf(pts) / np.exp(c * mean)
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)


def test_variance_target_constant_uniform():
    dom = unit_square()
    p = variance_target(lambda pts: np.ones((len(pts), 3)), 2.0, dom,
                        4000, np.random.default_rng(0))
    vals = p.pdf(dom.uniform(np.random.default_rng(1), 40))
    np.testing.assert_allclose(vals, 1.0, rtol=1e-9)


def test_variance_target_octant_mass():
    dom = unit_square()

    def var_fn(pts):
        base = np.ones((len(pts), 2))
        hot = (pts[:, 0] > 0.5) & (pts[:, 1] > 0.5)
        base[hot] *= 4.0  # doubled std in the upper-right quadrant
        return base

    p = variance_target(var_fn, 3.0, dom, 8000, np.random.default_rng(0))
    pts = dom.uniform(np.random.default_rng(5), 40_000)
    dens = p.pdf(pts)
    quad_mass = {}
    for qx in (0, 1):
        for qy in (0, 1):
            mask = ((pts[:, 0] > 0.5) == qx) & ((pts[:, 1] > 0.5) == qy)
            quad_mass[(qx, qy)] = dens[mask].mean()
    hot = quad_mass.pop((1, 1))
    assert all(hot > v for v in quad_mass.values())


def test_variance_target_entropy_shrinks_with_c():
    dom = unit_square()

    def var_fn(pts):
        return (1.0 + pts[:, :1]) ** 2 * np.ones((len(pts), 2))

    pts = dom.uniform(np.random.default_rng(8), 20_000)
    ents = []
    for c in (1.0, 10.0):
        p = variance_target(var_fn, c, dom, 8000, np.random.default_rng(0))
        dens = p.pdf(pts)
        # H(p) = -int p log p estimated under the uniform proposal
        ents.append(-np.mean(dens * np.log(np.maximum(dens, 1e-300))) * dom.volume)
    assert ents[1] < ents[0]


def test_q_value_target_requires_state_action_domain():
    dom = SearchDomain([0.0], [1.0])
    with pytest.raises(ValueError):
        q_value_target(lambda pts: np.zeros(len(pts)), 1.0, dom,
                       state_dim=1, control_dim=1)


def test_q_value_target_concentrates_at_origin():
    dom = SearchDomain([-1.0, -1.0], [1.0, 1.0])
    p = q_value_target(lambda pts: -np.sum(pts**2, axis=1), c=20.0, domain=dom,
                       state_dim=1, control_dim=1,
                       normalization_samples=4000, rng=np.random.default_rng(0))
    grid, _, _ = dom.grid(41)
    mode = grid[np.argmax(p.pdf(grid))]
    assert np.linalg.norm(mode) <= 2.0 / 41 * 2


def test_q_value_target_constant_uniform():
    dom = SearchDomain([-1.0, -1.0], [1.0, 1.0])
    p = q_value_target(lambda pts: np.zeros(len(pts)), 1.0, dom, 1, 1,
                       normalization_samples=2000, rng=np.random.default_rng(0))
    np.testing.assert_allclose(p.pdf(dom.uniform(np.random.default_rng(2), 30)),
                               1.0 / dom.volume, rtol=1e-9)


def test_gaussian_mixture_density_normalized():
    dom = unit_square()
    p = gaussian_mixture_density(dom, [[0.3, 0.3], [0.7, 0.7]], [0.08, 0.08], [0.6, 0.4])
    pts, _, cell = dom.grid(80)
    assert abs(np.sum(p.pdf(pts)) * cell - 1.0) < 0.02


def test_uniform_distribution_value():
    dom = SearchDomain([-2.0, 0.0], [2.0, 1.0])
    p = uniform_distribution(dom)
    np.testing.assert_allclose(p.pdf([[0.0, 0.5]]), 1.0 / 4.0)
