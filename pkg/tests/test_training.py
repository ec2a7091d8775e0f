import numpy as np
import pytest

from anisoebm.checks import rel_err, training_gradient_error
from anisoebm.covariance import GroupPartition
from anisoebm.energymodel import EnergyInterface, QuadraticMixtureEnergy
from anisoebm.gradengine import Tape
from anisoebm.oracle import ExactGaussianEnergy
from anisoebm.training import (METRICS_HEADER, Adam, Batch, DatasetSource, NonFiniteLossError,
                               TrainingConfig, a_csm_loss, a_csm_loss_energy, a_dsm_loss,
                               a_dsm_loss_energy, checkpoint_metadata, clip_by_global_norm,
                               loss_graph, train, warmup_lr)


class ZeroEnergy(EnergyInterface):
    def energy(self, y, Sigma):
        return np.zeros(np.shape(y)[:-1])

    def grad_input(self, y, Sigma):
        return np.zeros_like(np.asarray(y, dtype=float))

    def grad_cov(self, y, Sigma, partition=None):
        return np.zeros(len(partition)) if partition is not None else np.zeros(np.shape(y)[-1])


def gaussian_batch(rng, n, d, c=1.0, t=None, share=1):
    part = GroupPartition.halves(d)
    x = rng.standard_normal((n, d)) * np.sqrt(c)
    if t is None:
        return Batch.draw(x, part, rng, 1e-2, 1e2, share)
    tt = np.full((n, 2), float(t))
    v = rng.standard_normal((n, d))
    return Batch(x, x + np.sqrt(t) * v, tt, v, part)


def small_model(rng, d=4, hidden=8, depth=3, m=2):
    return QuadraticMixtureEnergy(GroupPartition.halves(d), m=m, hidden=hidden, depth=depth,
                                  embed_offset=1e-2, rng=rng)


def test_adsm_zero_when_clean_and_flat(rng):
    x = rng.standard_normal((5, 4))
    part = GroupPartition.halves(4)
    batch = Batch(x, x.copy(), np.ones((5, 2)), np.zeros((5, 4)), part)
    assert a_dsm_loss_energy(ZeroEnergy(), batch) == 0.0


def test_adsm_oracle_expectation(rng):
    # with the exact score y/(c+t) the per-sample loss has mean c/(c+t)
    c, t = 1.0, 1.0
    batch = gaussian_batch(rng, 20_000, 4, c, t)
    z = batch.y - batch.x
    per = np.sum(t / 4 * (batch.y / (c + t) - z / t) ** 2, axis=1)
    assert abs(per.mean() - c / (c + t)) <= 3 * per.std() / np.sqrt(per.size)
    assert a_dsm_loss_energy(ExactGaussianEnergy(c, 4), batch) == pytest.approx(per.mean())


def test_acsm_zero_for_exact_target(rng):
    batch = gaussian_batch(rng, 3, 4)

    class Target(ZeroEnergy):
        # grad_cov reproduces the per-sample target when fed the matching sample
        def grad_cov(self, y, Sigma, partition=None):
            i = int(np.argmin(np.abs(batch.y - y).sum(axis=1)))
            z2 = partition.reduce((batch.y[i] - batch.x[i]) ** 2)
            t = batch.t[i]
            return partition.sizes / (2 * t) - z2 / (2 * t * t)

    assert a_csm_loss_energy(Target(), batch) == pytest.approx(0.0, abs=1e-20)


def test_acsm_oracle_equals_conditional_variance(rng):
    c, d = 1.0, 4
    batch = gaussian_batch(rng, 20_000, d, c)
    part = batch.partition
    per = a_csm_loss_energy(ExactGaussianEnergy(c, d), batch, per_sample=True)
    # z | y is N(mu, s2) per coordinate; Var(||z_g||^2) = sum 2 s2^2 + 4 mu^2 s2
    t = part.expand(batch.t)
    s2 = c * t / (c + t)
    mu = t * batch.y / (c + t)
    var_z2 = part.reduce(2 * s2**2 + 4 * mu**2 * s2)
    analytic = np.sum(batch.t**2 / d**2 * var_z2 / (4 * batch.t**4), axis=1)
    diff = per - analytic
    assert abs(diff.mean()) <= 3 * diff.std() / np.sqrt(diff.size)


def test_loss_invariant_to_within_group_relabeling(rng):
    model = small_model(rng)
    batch = gaussian_batch(rng, 8, 4)
    perm = np.arange(4)
    g = batch.partition.groups[0]
    perm[g] = g[::-1]
    permuted = Batch(batch.x[:, perm], batch.y[:, perm], batch.t, batch.v[:, perm],
                     batch.partition)
    a = loss_graph(model, batch)[0].value
    b = loss_graph(model, permuted)[0].value
    assert float(a) == pytest.approx(float(b), rel=1e-13)


def test_graph_losses_match_energy_losses(rng):
    model = small_model(rng)
    batch = gaussian_batch(rng, 6, 4)
    assert a_dsm_loss(model, batch)[0] == pytest.approx(a_dsm_loss_energy(model, batch), rel=1e-10)
    assert a_csm_loss(model, batch)[0] == pytest.approx(a_csm_loss_energy(model, batch), rel=1e-10)


def test_shared_covariances_give_same_loss(rng):
    model = small_model(rng)
    batch = gaussian_batch(rng, 8, 4, share=4)
    flat = Batch(batch.x, batch.y, batch.t, batch.v, batch.partition, 1)
    a = loss_graph(model, batch, k1=1.0, k2=0.7)[0].value
    b = loss_graph(model, flat, k1=1.0, k2=0.7)[0].value
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def test_batch_validation(rng):
    part = GroupPartition.halves(4)
    x = np.zeros((4, 4))
    with pytest.raises(ValueError):
        Batch(x, x, np.ones((4, 3)), x, part)
    t = np.arange(8.0).reshape(4, 2) + 1
    with pytest.raises(ValueError):
        Batch(x, x, t, x, part, share=2)


def test_gradients_match_finite_differences(rng):
    assert training_gradient_error(rng) <= 1e-4


def test_gradients_with_shared_covariances(rng):
    model = small_model(rng)
    batch = gaussian_batch(rng, 8, 4, share=2)
    tape = Tape()
    total = loss_graph(model, batch, tape, k1=0.5, k2=2.0)[0]
    grad = np.concatenate([g.reshape(-1) for g in tape.backward(total)])
    flat0, probe, h = model.flat_params(), model.copy(), 1e-6
    fd = np.empty_like(flat0)
    for i in range(flat0.size):
        f = flat0.copy()
        f[i] += h
        probe.set_flat_params(f)
        up = float(loss_graph(probe, batch, k1=0.5, k2=2.0)[0].value)
        f[i] -= 2 * h
        probe.set_flat_params(f)
        fd[i] = (up - float(loss_graph(probe, batch, k1=0.5, k2=2.0)[0].value)) / (2 * h)
    assert rel_err(grad, fd) <= 1e-4


def test_zero_steps_leaves_model(rng):
    model = small_model(rng)
    res = train(model, TrainingConfig(steps=0), DatasetSource(np.zeros((3, 4))))
    assert res.trace == [] and res.steps == 0
    np.testing.assert_array_equal(res.model.flat_params(), model.flat_params())
    assert res.metrics_csv() == ",".join(METRICS_HEADER) + "\n"


def test_training_deterministic_and_metrics(rng):
    model = small_model(rng)
    data = DatasetSource(rng.standard_normal((200, 4)))
    cfg = TrainingConfig(batch_size=16, steps=30, log_every=10, seed=5, lr=1e-3, share=4)
    a, b = train(model, cfg, data), train(model, cfg, data)
    assert a.metrics_csv() == b.metrics_csv()
    assert len(a.trace) == 3 and a.trace[-1]["step"] == 30
    np.testing.assert_array_equal(a.model.flat_params(), b.model.flat_params())
    assert not np.array_equal(a.model.flat_params(), model.flat_params())


def test_checkpoint_callback(rng):
    model = small_model(rng)
    seen = []
    cfg = TrainingConfig(batch_size=8, steps=6, log_every=2, checkpoint_every=3)
    res = train(model, cfg, DatasetSource(rng.standard_normal((20, 4))),
                checkpoint=lambda step, m, trace: seen.append((step, len(trace))))
    assert seen == [(3, 1), (6, 3)]
    meta = checkpoint_metadata(cfg, res.steps, res.trace, tail=2)
    assert meta["steps"] == 6 and len(meta["trace_tail"]) == 2 and meta["config"]["share"] == 1


def test_non_finite_loss_reports_batch_seed(rng):
    data = np.full((10, 4), np.nan)
    with pytest.raises(NonFiniteLossError) as err:
        train(small_model(rng), TrainingConfig(batch_size=4, steps=2), DatasetSource(data))
    assert err.value.step == 0 and isinstance(err.value.batch_seed, int)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=10, share=3)
    with pytest.raises(ValueError):
        TrainingConfig(phi_min=2.0, phi_max=1.0)


def test_optimizer_pieces():
    grads, norm = clip_by_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(np.concatenate(grads), [0.6, 0.8])
    assert warmup_lr(0, 1.0, 4) == 0.25 and warmup_lr(10, 1.0, 4) == 1.0
    opt = Adam([np.zeros(2)])
    step = opt.step([np.zeros(2)], [np.array([1.0, -1.0])], 0.1)[0]
    np.testing.assert_allclose(step, [-0.1, 0.1], rtol=1e-6)


def test_oracle_is_lower_envelope(rng):
    c, d = 1.0, 4
    data = rng.standard_normal((2000, d))
    cfg = TrainingConfig(batch_size=64, steps=200, lr=1e-3, warmup=20, seed=1)
    model = train(small_model(rng, m=1), cfg, DatasetSource(data)).model
    batch = gaussian_batch(rng, 4000, d, c)
    trained = a_csm_loss_energy(model, batch, per_sample=True)
    oracle = a_csm_loss_energy(ExactGaussianEnergy(c, d), batch, per_sample=True)
    diff = trained - oracle
    assert trained.mean() >= oracle.mean() - 3 * diff.std() / np.sqrt(diff.size)


def test_weight_normalization_scaling(rng):
    # duplicating every coordinate leaves both weighted losses unchanged
    c = 1.0
    small = gaussian_batch(np.random.default_rng(1), 40_000, 4, c)
    dup = np.concatenate
    part8 = GroupPartition((np.array([0, 1, 4, 5]), np.array([2, 3, 6, 7])))
    big = Batch(dup([small.x, small.x], 1), dup([small.y, small.y], 1), small.t,
                dup([small.v, small.v], 1), part8)
    oracle4, oracle8 = ExactGaussianEnergy(c, 4), ExactGaussianEnergy(c, 8)
    assert a_dsm_loss_energy(oracle8, big) == pytest.approx(a_dsm_loss_energy(oracle4, small),
                                                            rel=1e-12)
    ratio = a_csm_loss_energy(oracle8, big) / a_csm_loss_energy(oracle4, small)
    assert ratio == pytest.approx(1.0, rel=1e-12)


@pytest.mark.slow
def test_single_gaussian_score_is_learned():
    c, d = 1.0, 4
    part = GroupPartition.halves(d)
    rng = np.random.default_rng(0)
    model = QuadraticMixtureEnergy(part, m=1, hidden=32, depth=3, embed_offset=1e-2, rng=1)
    cfg = TrainingConfig(batch_size=1024, share=64, steps=10_000, lr=1e-3, warmup=100, seed=2)
    trained = train(model, cfg, DatasetSource(rng.standard_normal((20_000, d)))).model
    grid = np.logspace(-2, 2, 9)
    score_err, cov_err = [], []
    for t1 in grid:
        for t2 in grid:
            t = np.array([t1, t2])
            phi = part.expand(t)
            y = rng.standard_normal((50, d)) * np.sqrt(c + phi)
            true = y / (c + phi)
            g = trained.grad_input(y, phi)
            score_err.append(np.linalg.norm(g - true, axis=1) / np.linalg.norm(true, axis=1))
            scale = part.sizes / (2 * (c + t))
            gc_true = scale - part.reduce(y * y) / (2 * (c + t) ** 2)
            cov_err.append(np.abs(trained.grad_cov(y, phi, part) - gc_true) / scale)
    assert np.median(score_err) <= 0.02
    assert np.median(cov_err) <= 0.1
