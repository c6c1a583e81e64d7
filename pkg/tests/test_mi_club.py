"""Behavior of the conditional model and the contrastive log-ratio penalty."""

import numpy as np
import pytest

from protodebias import autodiff as ad
from protodebias.club import (
    GaussianCondModel,
    club_penalty,
    estimate_bound,
    fit_conditional,
    fit_q_step,
    log_q,
)
from protodebias.errors import ContractViolation
from protodebias.nn import Adam


def _model(dim, seed=0, hidden=32):
    rng = np.random.default_rng(seed)
    return GaussianCondModel(rng, dim, hidden=hidden)


def _zero_weights(model):
    for p in model.params().values():
        p.data[...] = 0.0


def test_log_q_matches_direct_gaussian_density():
    model = _model(4, seed=1)
    rng = np.random.default_rng(2)
    zc = rng.normal(size=4)
    zs = rng.normal(size=4)
    mu, logvar = model.conditional_params(zs)
    var = np.exp(logvar)
    expected = -0.5 * np.sum((zc - mu) ** 2 / var + logvar + np.log(2 * np.pi))
    np.testing.assert_allclose(log_q(zc, zs, model), expected, rtol=1e-12)


def test_log_q_rejects_batches():
    model = _model(3)
    with pytest.raises(ContractViolation):
        log_q(np.zeros((2, 3)), np.zeros((2, 3)), model)


def test_penalty_single_sample_is_exactly_zero():
    model = _model(5, seed=3)
    rng = np.random.default_rng(4)
    out = club_penalty(rng.normal(size=(1, 5)), rng.normal(size=(1, 5)), model)
    assert out.item() == 0.0


def test_penalty_zero_for_condition_independent_q():
    # with constant conditional parameters every row of the pair matrix is
    # identical, so positive and negative terms cancel; in float64 the two
    # traversal orders can differ by a few ulps, hence the 1e-13 bound
    model = _model(6, seed=5)
    _zero_weights(model)
    rng = np.random.default_rng(6)
    out = club_penalty(rng.normal(size=(32, 6)), rng.normal(size=(32, 6)), model)
    assert abs(out.item()) <= 1e-13


def test_penalty_shape_contract():
    model = _model(3)
    with pytest.raises(ContractViolation):
        club_penalty(np.zeros((4, 3)), np.zeros((4, 2)), model)
    with pytest.raises(ContractViolation):
        club_penalty(np.zeros((0, 3)), np.zeros((0, 3)), model)


def test_estimate_bound_matches_graph_penalty_blocked():
    model = _model(4, seed=7)
    rng = np.random.default_rng(8)
    zc = rng.normal(size=(20, 4))
    zs = rng.normal(size=(20, 4))
    graph = club_penalty(zc, zs, model).item()
    np.testing.assert_allclose(estimate_bound(zc, zs, model, block=7), graph, atol=1e-10)
    np.testing.assert_allclose(estimate_bound(zc, zs, model, block=64), graph, atol=1e-10)


def test_fit_q_step_zero_lr_is_identity():
    model = _model(3, seed=9)
    opt = Adam(model.params(), lr=1e-3)
    before = {k: p.data.copy() for k, p in model.params().items()}
    rng = np.random.default_rng(10)
    fit_q_step(rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), model, opt, lr=0.0)
    for k, p in model.params().items():
        np.testing.assert_array_equal(p.data, before[k])


def test_q_nll_decreases_with_rare_upticks():
    rng = np.random.default_rng(11)
    zs = rng.normal(size=(256, 2))
    zc = 0.8 * zs + 0.3 * rng.normal(size=(256, 2))
    model = _model(2, seed=12)
    opt = Adam(model.params(), lr=1e-2)
    nlls = [fit_q_step(zc, zs, model, opt) for _ in range(100)]
    upticks = sum(1 for a, b in zip(nlls, nlls[1:]) if b > a + 1e-9)
    assert upticks <= 5
    assert nlls[-1] < nlls[0]


def test_fitted_mean_tracks_linear_generator():
    rng = np.random.default_rng(13)
    zs = rng.normal(size=(1500, 2))
    zc = 0.8 * zs + 0.2 * rng.normal(size=(1500, 2))
    model = fit_conditional(zc, zs, steps=600, lr=3e-3, seed=14)
    mu, _ = model.conditional_params(zs)
    slope = np.sum(mu * zs) / np.sum(zs * zs)
    assert abs(slope - 0.8) < 0.15


def test_bound_near_zero_for_independent_codes():
    rng = np.random.default_rng(15)
    zc = rng.normal(size=(2000, 1))
    zs = rng.normal(size=(2000, 1))
    model = fit_conditional(zc, zs, steps=800, lr=2e-3, seed=16)
    assert abs(estimate_bound(zc, zs, model)) <= 0.05


def test_bound_grows_with_correlation_and_exceeds_truth():
    # the converged estimate upper-bounds the true mutual information, with
    # a bias that grows with correlation; here we check ordering and the
    # upper-bound property, not closeness to the truth
    rng = np.random.default_rng(17)
    n = 3000
    bounds = {}
    for rho in (0.3, 0.7071):
        zs = rng.normal(size=(n, 1))
        zc = rho * zs + np.sqrt(1 - rho ** 2) * rng.normal(size=(n, 1))
        model = fit_conditional(zc, zs, steps=1000, lr=3e-3, seed=18)
        bounds[rho] = estimate_bound(zc, zs, model)
    true_mid = -0.5 * np.log(1 - 0.7071 ** 2)
    assert bounds[0.3] < bounds[0.7071]
    assert bounds[0.7071] > true_mid - 0.05


def test_penalty_gradient_passes_finite_differences():
    model = _model(3, seed=19)
    rng = np.random.default_rng(20)
    zc = ad.parameter(rng.normal(size=(4, 3)))
    zs = ad.parameter(rng.normal(size=(4, 3)))

    def build():
        return club_penalty(zc, zs, model)

    from test_autodiff import fd_check

    fd_check(build, [zc, zs], h=1e-6)
