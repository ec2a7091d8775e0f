import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from anisoebm.checks import rel_err
from anisoebm.covariance import (CovarianceError, DiagonalCovariance, Domain, GroupPartition,
                                 to_spectral)
from anisoebm.energymodel import QuadraticMixtureEnergy
from anisoebm.oracle import ExactGaussianEnergy, GaussianFieldPrior, GaussianScaleMixturePrior


def small_model(rng, d=6, G=2, m=2, hidden=16, depth=3):
    part = GroupPartition.halves(d, rng=rng) if G == 2 else GroupPartition(
        tuple(np.array_split(np.arange(d), G)))
    return QuadraticMixtureEnergy(part, m=m, hidden=hidden, depth=depth, embed_offset=1e-2,
                                  rng=rng)


def constant_model(part, a, b):
    """m components with t-independent coefficients: zero weights, biases only."""
    a, b = np.atleast_2d(a), np.atleast_1d(b)
    m, G = a.shape
    model = QuadraticMixtureEnergy(part, m=m, hidden=4, depth=2, rng=0)
    W0, b0, W1, b1 = model.params
    bias = np.concatenate([np.log(np.expm1(a)).reshape(-1), b])
    model.params = [np.zeros_like(W0), np.zeros_like(b0), np.zeros_like(W1), bias]
    return model


def group_phi(model, t):
    return model.partition.expand(np.asarray(t, dtype=float))


def test_single_quadratic_is_gaussian(rng):
    d, c = 6, 2.5
    part = GroupPartition.halves(d)
    model = constant_model(part, [[0.5 / c, 0.5 / c]], [0.5 * d * np.log(2 * np.pi * c)])
    y = rng.standard_normal((4, d))
    # constant coefficients ignore Phi, so this is the N(0, c I) energy of y itself
    expect = ExactGaussianEnergy(c, d).energy(y, np.zeros(d))
    np.testing.assert_allclose(model.energy(y, np.ones(d)), expect, rtol=1e-12)


def test_zero_input_energy(rng):
    model = small_model(rng)
    t = np.array([0.3, 4.0])
    _, b = model.coefficients(t)
    U = model.energy(np.zeros(6), group_phi(model, t))
    assert U == pytest.approx(-logsumexp(-b), rel=1e-13)


def test_energy_matches_direct_formula(rng):
    model = small_model(rng, m=3)
    y = rng.standard_normal((5, 6)) * 2
    t = np.array([0.05, 7.0])
    # independent path: explicit MLP loop and per-component sums
    h = np.log(t + model.embed_offset)
    for i, (W, b) in enumerate(model.layers):
        h = h @ W + b
        if i < model.depth - 1:
            h = np.tanh(h)
    a = np.log1p(np.exp(h[:6])).reshape(3, 2)
    b = h[6:]
    r2 = np.stack([np.sum(y[:, g] ** 2, axis=1) for g in model.partition.groups], axis=1)
    expect = -logsumexp(-(r2 @ a.T + b), axis=1)
    np.testing.assert_allclose(model.energy(y, group_phi(model, t)), expect, rtol=1e-12)


def test_positive_quadratic_coefficients(rng):
    model = small_model(rng)
    a, _ = model.coefficients(np.exp(rng.uniform(-5, 5, (50, 2))))
    assert np.all(a > 0)


def test_grad_input_examples(rng):
    model = small_model(rng)
    phi = group_phi(model, [0.5, 2.0])
    np.testing.assert_array_equal(model.grad_input(np.zeros(6), phi), 0.0)
    part = GroupPartition.halves(4)
    one = constant_model(part, [[0.3, 1.7]], [0.0])
    y = rng.standard_normal(4)
    np.testing.assert_allclose(one.grad_input(y, np.ones(4)), 2 * part.expand([0.3, 1.7]) * y,
                               rtol=1e-12)


def test_grad_input_finite_differences(rng):
    model = small_model(rng)
    for _ in range(10):
        t = np.exp(rng.uniform(np.log(1e-2), np.log(1e2), 2))
        phi = group_phi(model, t)
        y = rng.standard_normal(6) * np.sqrt(1 + t.mean())
        fd = np.array([(model.energy(y + e, phi) - model.energy(y - e, phi)) / 2e-6
                       for e in np.eye(6) * 1e-6])
        assert rel_err(model.grad_input(y, phi), fd) <= 1e-6


def test_grad_cov_finite_differences(rng):
    model = small_model(rng, G=3)
    for _ in range(10):
        t = np.exp(rng.uniform(np.log(1e-2), np.log(1e2), 3))
        y = rng.standard_normal(6) * 2
        fd = np.empty(3)
        for g in range(3):
            h = 1e-6 * (1 + t[g])
            up, dn = t.copy(), t.copy()
            up[g] += h
            dn[g] -= h
            fd[g] = (model.energy(y, group_phi(model, up)) - model.energy(y, group_phi(model, dn))) / (2 * h)
        assert rel_err(model.grad_cov(y, group_phi(model, t), model.partition), fd) <= 1e-5


def test_constant_coefficients_zero_grad_cov(rng):
    part = GroupPartition.halves(4)
    model = constant_model(part, [[0.3, 1.0], [2.0, 0.1]], [0.5, -0.2])
    gc = model.grad_cov(rng.standard_normal((3, 4)), np.full(4, 0.7), part)
    np.testing.assert_array_equal(gc, 0.0)


def test_per_coordinate_grad_cov_splits_groups(rng):
    model = small_model(rng)
    phi = group_phi(model, [0.4, 3.0])
    y = rng.standard_normal(6)
    per = model.grad_cov(y, phi)
    np.testing.assert_allclose(model.partition.reduce(per),
                               model.grad_cov(y, phi, model.partition), rtol=1e-12)


def test_varying_phi_within_group_rejected(rng):
    model = small_model(rng)
    with pytest.raises(CovarianceError):
        model.energy(np.zeros(6), np.linspace(0.1, 1.0, 6))


@given(st.integers(0, 2**31))
def test_interface_law(seed):
    rng = np.random.default_rng(seed)
    model = small_model(rng)
    phi = group_phi(model, np.exp(rng.uniform(-4, 4, 2)))
    y = rng.standard_normal(6) * 3
    S = DiagonalCovariance(phi, phi_max=1e3)
    np.testing.assert_allclose(model.posterior_mean(y, S) + S.apply(model.grad_input(y, S)), y,
                               rtol=1e-12, atol=1e-12)


def test_posterior_mean_zero_score_returns_input(rng):
    part = GroupPartition.halves(4)
    model = constant_model(part, [[1e-12, 1e-12]], [0.0])
    y = rng.standard_normal(4)
    np.testing.assert_allclose(model.posterior_mean(y, np.full(4, 1e-2)), y, rtol=1e-12)


def test_oracle_posterior_mean_is_wiener(rng):
    field = GaussianFieldPrior.power_law(4, 4)
    S = DiagonalCovariance(rng.uniform(0.1, 1.0, 16), Domain.SPECTRAL, (4, 4))
    y = field.sample(1, rng)[0]
    assert rel_err(field.posterior_mean(y, S), field.wiener_filter(y, S)) <= 1e-10


@given(st.integers(0, 2**31))
def test_within_group_permutation(seed):
    rng = np.random.default_rng(seed)
    model = small_model(rng)
    phi = group_phi(model, np.exp(rng.uniform(-4, 4, 2)))
    y = rng.standard_normal(6)
    perm = np.arange(6)
    g = model.partition.groups[0]
    perm[g] = rng.permutation(g)
    yp = y[perm]
    assert model.energy(yp, phi) == pytest.approx(model.energy(y, phi), rel=1e-13)
    np.testing.assert_allclose(model.grad_cov(yp, phi, model.partition),
                               model.grad_cov(y, phi, model.partition), rtol=1e-12)
    np.testing.assert_allclose(model.grad_input(yp, phi), model.grad_input(y, phi)[perm],
                               rtol=1e-12)


def test_scale_sanity_single_component(rng):
    part = GroupPartition.halves(4)
    y = rng.standard_normal(4)
    base = constant_model(part, [[0.3, 0.8]], [1.0]).grad_input(y, np.ones(4))
    scaled = constant_model(part, [[0.9, 2.4]], [1.0]).grad_input(y, np.ones(4))
    np.testing.assert_allclose(scaled, 3 * base, rtol=1e-12)


def test_spectral_covariance_uses_basis(rng):
    model = QuadraticMixtureEnergy(GroupPartition.halves(4), hidden=8, depth=2, rng=1)
    S = DiagonalCovariance(np.full(4, 0.5), Domain.SPECTRAL, (2, 2))
    y = rng.standard_normal(4)
    # uniform spectral phi: energy of the DCT coefficients
    assert model.energy(y, S) == pytest.approx(model.energy(to_spectral(y, (2, 2)), np.full(4, 0.5)))


def test_checkpoint_round_trip(rng):
    model = small_model(rng)
    rec = model.to_record({"steps": 3})
    back = QuadraticMixtureEnergy.from_record(rec)
    y = rng.standard_normal(6)
    phi = group_phi(model, [0.2, 2.0])
    assert back.energy(y, phi) == model.energy(y, phi)
    assert rec["metadata"]["steps"] == 3
    bad = dict(rec, format_version=99)
    with pytest.raises(ValueError):
        QuadraticMixtureEnergy.from_record(bad)


def test_initial_offsets_near_gaussian_scale(rng):
    model = QuadraticMixtureEnergy(GroupPartition.halves(10), rng=rng)
    _, b = model.coefficients(np.array([1.0, 1.0]))
    np.testing.assert_allclose(b, 0.5 * (10 / 2) * np.log(2 * np.pi), atol=1.0)


def test_batched_matches_loop(rng):
    model = small_model(rng)
    y = rng.standard_normal((3, 6))
    phi = group_phi(model, [0.3, 3.0])
    np.testing.assert_allclose(model.grad_cov(y, phi, model.partition)[1],
                               model.grad_cov(y[1], phi, model.partition), rtol=1e-13)
    np.testing.assert_allclose(model.energy_groups(y, np.array([0.3, 3.0])), model.energy(y, phi))


def test_gsm_oracle_shares_interface(rng):
    prior = GaussianScaleMixturePrior.two_scale(4)
    y = rng.standard_normal(4)
    S = DiagonalCovariance(np.full(4, 0.5))
    np.testing.assert_allclose(prior.posterior_mean(y, S), y - 0.5 * prior.grad_input(y, S))
