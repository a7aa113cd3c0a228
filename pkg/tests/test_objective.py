import math

import numpy as np
import pytest

from manifold_lab.distribution import ManifoldSpec, ovl
from manifold_lab.models import TwoLayerParams, collapse
from manifold_lab.objective import (
    PopulationProxy,
    directional_loss_change,
    exact_moment,
    grad_decomposition,
    grad_theta,
    hessian_blocks,
    hessian_theta,
    logistic_loss,
    loss,
    loss_grad_hessian,
    loss_with_stderr,
    quadrature_expectation,
    sigmoid,
    sigmoid_var,
)

LN2 = math.log(2.0)


def fd_grad(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


# -- stable primitives ------------------------------------------------------

def test_logistic_loss_is_stable_at_extremes():
    u = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    out = logistic_loss(u)
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1000.0) and out[2] == pytest.approx(LN2) and out[-1] == 0.0
    assert np.allclose(sigmoid(u) + sigmoid(-u), 1.0)
    assert np.allclose(sigmoid_var(u[1:4]), sigmoid(u[1:4]) * sigmoid(-u[1:4]))


# -- loss -------------------------------------------------------------------

def test_loss_at_zero_is_ln2(anchor_proxy):
    assert loss(np.zeros(2), anchor_proxy) == pytest.approx(LN2, abs=1e-15)
    assert exact_moment(anchor_proxy.spec, "loss") == LN2


def test_loss_decays_to_zero_along_separating_ray(anchor_proxy):
    theta = np.array([0.0, 1.0])  # off-manifold direction separates every sample
    vals = [loss(t * theta, anchor_proxy) for t in (1, 2, 5, 10, 50, 200)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-30


def test_loss_matches_naive_sum(anchor_spec, rng):
    proxy = PopulationProxy.build(anchor_spec, 50, seed=3)
    theta = rng.standard_normal(2)
    naive = sum(math.log(1 + math.exp(-y * float(x @ theta))) for x, y in zip(proxy.x, proxy.y)) / 50
    assert loss(theta, proxy) == pytest.approx(naive, abs=1e-12)


# -- gradient ---------------------------------------------------------------

def test_gradient_at_zero_exact_moment(anchor_spec, anchor_proxy):
    assert np.allclose(exact_moment(anchor_spec, "grad"), [-0.25, -0.5], atol=1e-15)
    assert np.allclose(grad_theta(np.zeros(2), anchor_proxy), [-0.25, -0.5], atol=5e-3)


def test_gradient_matches_finite_differences(proxy6, rng):
    for _ in range(20):
        theta = rng.standard_normal(6)
        g = grad_theta(theta, proxy6)
        fd = fd_grad(lambda t: loss(t, proxy6), theta)
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-5


def test_gradient_vanishes_at_interior_optimum():
    from manifold_lab.optimizers import estimate_optimum

    spec = ManifoldSpec.default(sigma_ratio=2.0)
    proxy = PopulationProxy.build(spec, 20_000, seed=1)
    star = estimate_optimum(spec, proxy)
    assert np.linalg.norm(star) < 50
    assert np.linalg.norm(grad_theta(star, proxy)) <= 1e-8


def test_two_layer_gradient_is_taken_in_theta(proxy6, rng):
    p = TwoLayerParams(rng.standard_normal((12, 6)), rng.standard_normal(12))
    assert np.allclose(grad_theta(p, proxy6), grad_theta(collapse(p), proxy6), atol=0)


def test_dimension_mismatch_raises(anchor_proxy):
    with pytest.raises(ValueError):
        grad_theta(np.zeros(3), anchor_proxy)


# -- Hessian ----------------------------------------------------------------

def test_hessian_at_zero_is_quarter_second_moment(anchor_spec, anchor_proxy):
    h = hessian_theta(np.zeros(2), anchor_proxy)
    x = anchor_proxy.x
    assert np.allclose(h, 0.25 * x.T @ x / x.shape[0], atol=1e-15)
    exact = exact_moment(anchor_spec, "hessian")
    assert np.allclose(np.diag(exact), [0.145833333, 0.250625], atol=1e-8)
    assert np.allclose(h, exact, atol=5e-3)


def test_hessian_matches_finite_differences(proxy6, rng):
    for _ in range(20):
        theta = rng.standard_normal(6)
        h = hessian_theta(theta, proxy6)
        fd = np.column_stack([
            (grad_theta(theta + 1e-5 * e, proxy6) - grad_theta(theta - 1e-5 * e, proxy6)) / 2e-5
            for e in np.eye(6)
        ])
        assert np.linalg.norm(fd - h) / np.linalg.norm(h) < 1e-4


def test_hessian_symmetric_psd(proxy6, rng):
    h = hessian_theta(rng.standard_normal(6), proxy6)
    assert np.array_equal(h, h.T)
    assert np.linalg.eigvalsh(h).min() >= -1e-15


def test_loss_grad_hessian_agree_with_separate_calls(proxy6, rng):
    theta = rng.standard_normal(6)
    f, g, h = loss_grad_hessian(theta, proxy6)
    assert f == loss(theta, proxy6)
    assert np.allclose(g, grad_theta(theta, proxy6), atol=1e-16)
    assert np.allclose(h, hessian_theta(theta, proxy6), atol=1e-16)


def test_hessian_block_ratio_tracks_variance_ratio():
    rng = np.random.default_rng(0)
    grid = [np.zeros(2)] + [v / np.linalg.norm(v) * rng.uniform(0.5, 5) for v in rng.standard_normal((6, 2))]
    normalised = []
    for r in (2, 4, 8, 16):
        spec = ManifoldSpec.default(sigma_ratio=r)
        proxy = PopulationProxy.build(spec, 20_000, seed=0)
        # rescale the grid with the off-manifold coordinates so every spec sees
        # the same margins
        for theta in grid:
            th = np.array([theta[0], theta[1] / spec.sigma_off])
            h = hessian_theta(th, proxy)
            on, off = hessian_blocks(h, 1)
            normalised.append((off.max() / on.max()) / (spec.sigma_off**2 / spec.sigma_on**2))
    per_theta = np.array(normalised).reshape(4, len(grid))
    assert np.all(per_theta.max(axis=0) / per_theta.min(axis=0) < 3)


def test_hessian_sandwich_bounds():
    for r in (2, 8):
        spec = ManifoldSpec.default(sigma_ratio=r)
        proxy = PopulationProxy.build(spec, 20_000, seed=0)
        grid = [np.array([a, b]) for a in (-3, 0, 3) for b in (-4, 0, 4)]
        c = min(float(sigmoid_var(proxy.x @ t).min()) for t in grid)
        mean_sq = float(np.sum(proxy.x.mean(axis=0) ** 2))
        big = 1 + mean_sq / min(spec.sigma_on**2, spec.sigma_off**2)
        for t in grid:
            on, off = hessian_blocks(hessian_theta(t, proxy), 1)
            # mixture second moments include the class means on top of the variances
            ev_on, ev_off = on[0, 0], off[0, 0]
            assert c * spec.sigma_on**2 <= ev_on <= big * spec.sigma_on**2
            assert c * spec.sigma_off**2 <= ev_off <= big * spec.sigma_off**2 * 13


def test_loss_is_convex_along_random_segments(proxy6, rng):
    for _ in range(100):
        a, b = rng.standard_normal((2, 6)) * 3
        assert loss(0.5 * (a + b), proxy6) <= 0.5 * (loss(a, proxy6) + loss(b, proxy6)) + 1e-15


# -- quadrature oracle ------------------------------------------------------

def test_quadrature_anchors(anchor_spec):
    assert quadrature_expectation(np.zeros(2), anchor_spec, "loss") == pytest.approx(LN2, abs=1e-12)
    assert np.allclose(quadrature_expectation(np.zeros(2), anchor_spec, "grad"), [-0.25, -0.5], atol=1e-10)
    assert np.allclose(quadrature_expectation(np.zeros(2), anchor_spec, "hessian"),
                       exact_moment(anchor_spec, "hessian"), atol=1e-12)


def test_quadrature_agrees_with_proxy(anchor_spec, anchor_proxy, rng):
    for _ in range(5):
        theta = rng.standard_normal(2) * 2
        f, se = loss_with_stderr(theta, anchor_proxy)
        assert abs(f - quadrature_expectation(theta, anchor_spec, "loss")) < 4 * se


def test_quadrature_dimension_limit():
    spec = ManifoldSpec(3, 2, 2.0, 0.5, (1.0, 1.0), (-1.0, -1.0), 0.1)
    with pytest.raises(ValueError):
        quadrature_expectation(np.zeros(5), spec, "loss")


# -- gradient decomposition -------------------------------------------------

def test_decomposition_without_overlap_has_zero_overlap_term():
    spec = ManifoldSpec(1, 1, 2.0, 0.0, (1.0,), (-1.0,), 0.05)
    proxy = PopulationProxy.build(spec, 10_000, seed=1)
    dec = grad_decomposition(np.array([0.3, 0.2]), proxy)
    assert np.array_equal(dec.on_overlap, [0.0])


def test_decomposition_partitions_the_on_gradient(proxy6, rng):
    theta = rng.standard_normal(6)
    dec = grad_decomposition(theta, proxy6)
    g = grad_theta(theta, proxy6)
    assert np.allclose(dec.on_total, g[:3], atol=1e-12)
    assert np.allclose(dec.off_total, g[3:], atol=1e-12)


def test_decomposition_signs_and_magnitudes_at_zero(anchor_spec, anchor_proxy):
    nu, k, l = ovl(anchor_spec), anchor_spec.k, anchor_spec.l
    dec = grad_decomposition(np.zeros(2), anchor_proxy)
    assert -(1 - nu) * (l - k) / 2 < dec.on_separated[0] < 0
    assert 0 < dec.on_overlap[0] < nu * k / 2
    ratio = abs(dec.on_overlap[0] / dec.on_separated[0])
    target = nu * k / ((1 - nu) * (l - k))
    assert target / 2 < ratio < 2 * target


# -- directional changes ----------------------------------------------------

def test_directional_change_zero_for_identical_iterates(anchor_proxy):
    assert directional_loss_change([0.4, 0.3], [0.4, 0.3], anchor_proxy) == (0.0, 0.0, 0.0)


def test_directional_changes_negative_for_small_gd_step(anchor_spec, anchor_proxy):
    alpha = 0.1 / anchor_spec.sigma_on**2
    nxt = -alpha * grad_theta(np.zeros(2), anchor_proxy)
    d_on, d_off, d = directional_loss_change(np.zeros(2), nxt, anchor_proxy)
    assert d_on < 0 and d_off < 0 and d < 0


def test_off_changes_dominate_only_far_from_optimum():
    from manifold_lab.optimizers import OptimizerConfig, estimate_optimum, train

    spec = ManifoldSpec.default(sigma_ratio=8, k=0.0)
    proxy = PopulationProxy.build(spec, 20_000, seed=0)
    star = estimate_optimum(spec, proxy)
    traj = train(spec, proxy, OptimizerConfig.for_spec(spec, "gd", max_iter=400, grad_tol=0), theta_star=star)
    th = traj.theta
    changes = np.array([directional_loss_change(th[t], th[t + 1], proxy)[:2] for t in range(len(th) - 1)])
    dominated = np.abs(changes[:, 1]) > np.abs(changes[:, 0])
    far = np.asarray(traj.dist_off[:-1]) > 0.5 * traj.dist_off[0]
    # wherever the off block dominates, theta_off is still far from its optimum
    assert dominated.any()
    assert np.all(far[dominated] | (np.arange(dominated.size)[dominated] < 5))
