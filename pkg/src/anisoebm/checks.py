"""Invariant suites against the analytic oracles, reported as named checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .covariance import (GroupPartition, make_blur_covariance, make_box_covariance)
from .energymodel import QuadraticMixtureEnergy, as_covariance
from .gradengine import Tape
from .oracle import ExactGaussianEnergy, GaussianFieldPrior, GaussianScaleMixturePrior
from .sampling import linearized_mirror_step, mala_corrector_step, mala_log_alpha, mirror_step
from .training import Batch, loss_graph

SCOPES = ("grad", "fp_identity", "tweedie", "bregman", "mala")


@dataclass
class CheckResult:
    scope: str
    name: str
    measured: float
    tolerance: str
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.scope}:{self.name} measured={self.measured:.3e} tol={self.tolerance}"


def rel_err(a, b):
    """``||a - b|| / ||b||`` (absolute when ``b`` vanishes)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a - b))


def phi_step(phi):
    """Central-difference step for variances: relative, never crossing zero."""
    return np.minimum(1e-5 * (1.0 + phi), 0.5 * phi)


def fd_grad_y(energy, y, phi, h=None):
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    for i in range(y.size):
        hi = 1e-5 * (1.0 + abs(y[i])) if h is None else h
        e = np.zeros_like(y)
        e[i] = hi
        out[i] = (energy(y + e, phi) - energy(y - e, phi)) / (2 * hi)
    return out


def fd_grad_phi(energy, y, phi):
    phi = np.asarray(phi, dtype=float)
    out = np.empty_like(phi)
    steps = phi_step(phi)
    for i in range(phi.size):
        e = np.zeros_like(phi)
        e[i] = steps[i]
        out[i] = (energy(y, phi + e) - energy(y, phi - e)) / (2 * steps[i])
    return out


def fd_second_y(grad, y, phi):
    """Diagonal of the input Hessian by differencing an analytic gradient."""
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    for i in range(y.size):
        h = 1e-5 * (1.0 + abs(y[i]))
        e = np.zeros_like(y)
        e[i] = h
        out[i] = (grad(y + e, phi)[i] - grad(y - e, phi)[i]) / (2 * h)
    return out


def random_gsm_point(rng, d, lo=1e-6, hi=1e2):
    """Random (y, phi) with phi log-uniform on [lo, hi] and y drawn at that noise."""
    prior = GaussianScaleMixturePrior.two_scale(d)
    phi = np.exp(rng.uniform(np.log(lo), np.log(hi), size=d))
    y = prior.sample(1, rng)[0] + np.sqrt(phi) * rng.standard_normal(d)
    return prior, y, phi


def check_grad(rng, draws=20, d=6):
    out = []
    worst_y = worst_p = 0.0
    for _ in range(draws):
        prior, y, phi = random_gsm_point(rng, d)
        worst_y = max(worst_y, rel_err(prior.grad_input(y, phi), fd_grad_y(prior.energy, y, phi)))
        worst_p = max(worst_p, rel_err(prior.grad_cov(y, phi), fd_grad_phi(prior.energy, y, phi)))
    out.append(CheckResult("grad", "oracle_grad_y", worst_y, "<=1e-6", worst_y <= 1e-6))
    out.append(CheckResult("grad", "oracle_grad_phi", worst_p, "<=1e-6", worst_p <= 1e-6))
    worst = training_gradient_error(rng)
    out.append(CheckResult("grad", "training_losses", worst, "<=1e-4", worst <= 1e-4))
    return out


def training_gradient_error(rng, d=4, hidden=8, h=1e-6):
    """Worst relative error of tape gradients vs central differences, over both losses."""
    part = GroupPartition.halves(d, rng=rng)
    model = QuadraticMixtureEnergy(part, hidden=hidden, depth=3, embed_offset=1e-2, rng=rng)
    x = rng.standard_normal((8, d)) * 2.0
    batch = Batch.draw(x, part, rng, 1e-2, 1e2)
    flat0 = model.flat_params()
    worst = 0.0
    for k1, k2 in ((1.0, 0.0), (0.0, 1.0)):
        tape = Tape()
        total, _, _, _ = loss_graph(model, batch, tape, k1=k1, k2=k2)
        grad = np.concatenate([g.reshape(-1) for g in tape.backward(total)])
        fd = np.empty_like(flat0)
        probe = model.copy()
        for i in range(flat0.size):
            f = flat0.copy()
            f[i] += h
            probe.set_flat_params(f)
            up = loss_graph(probe, batch, k1=k1, k2=k2)[0].value
            f[i] -= 2 * h
            probe.set_flat_params(f)
            dn = loss_graph(probe, batch, k1=k1, k2=k2)[0].value
            fd[i] = (up - dn) / (2 * h)
        worst = max(worst, rel_err(grad, fd))
    return worst


def fp_residual(model, y, phi):
    """``grad_cov - 0.5 (d2U/dy2 - (dU/dy)^2)`` per coordinate, Hessian by differences."""
    g = model.grad_input(y, phi)
    lap = fd_second_y(model.grad_input, y, phi)
    return model.grad_cov(y, phi), 0.5 * (lap - g * g)


def check_fp_identity(rng, draws=20, d=6):
    worst = 0.0
    for _ in range(draws):
        prior, y, phi = random_gsm_point(rng, d)
        lhs, rhs = fp_residual(prior, y, phi)
        worst = max(worst, rel_err(lhs, rhs))
    return [CheckResult("fp_identity", "oracle_fokker_planck", worst, "<=1e-6", worst <= 1e-6)]


def check_tweedie(rng, draws=5):
    prior = GaussianFieldPrior.power_law(8, 8)
    worst = 0.0
    for _ in range(draws):
        s = int(rng.integers(1, 8))
        box = make_box_covariance(8, 8, s, float(np.exp(rng.uniform(-3, 2))),
                                  float(np.exp(rng.uniform(-5, -1))))
        blur = make_blur_covariance(8, 8, float(rng.uniform(0.3, 2.0)),
                                    float(np.exp(rng.uniform(-4, -1))))
        for S in (box, blur):
            y = prior.sample(1, rng)[0] + S.apply_sqrt(rng.standard_normal(64))
            worst = max(worst, rel_err(prior.posterior_mean(y, S), prior.wiener_filter(y, S)))
    return [CheckResult("tweedie", "field_wiener", worst, "<=1e-8", worst <= 1e-8)]


def bregman_ratio(t, grad, gamma):
    """Discrepancy ratio between the exact and linearized steps as gamma halves."""
    d1 = np.linalg.norm(mirror_step(t, grad, gamma) - linearized_mirror_step(t, grad, gamma))
    d2 = np.linalg.norm(mirror_step(t, grad, gamma / 2) - linearized_mirror_step(t, grad, gamma / 2))
    return float(d1 / d2)


def check_bregman(rng):
    prior, y, phi = random_gsm_point(rng, 8, 1e-2, 1e1)
    g = prior.grad_cov(y, phi)
    gamma = 0.05 / float(np.max(np.abs(phi * g)))
    ratio = bregman_ratio(phi, g, gamma)
    return [CheckResult("bregman", "second_order_ratio", ratio, "in [3.2, 4.8]",
                        3.2 <= ratio <= 4.8)]


def check_mala(rng, chains=2000, steps=50):
    gauss = ExactGaussianEnergy(1.0, 1)
    floor = as_covariance(np.full(1, 1e-9))
    la = float(mala_log_alpha(gauss, np.zeros(1), np.ones(1), floor, None, None, None, 0.15, eps=1.0))
    hand = -0.125  # -U(1) + U(0) + log q(0|1) - log q(1|0) = -0.5 - 0.125 + 0.5
    out = [CheckResult("mala", "hand_alpha", abs(la - hand), "<=1e-8", abs(la - hand) <= 1e-8)]
    prior = GaussianScaleMixturePrior.two_scale(1)
    x = prior.sample(chains, rng)
    acc = []
    for _ in range(steps):
        x, a = mala_corrector_step(prior, x, floor, None, None, None, 0.15, rng, eps=2.0)
        acc.append(np.mean(a))
    ks = stats.kstest(x[:, 0], prior.cdf)
    out.append(CheckResult("mala", "mixture_ks_pvalue", ks.pvalue, ">=0.01", ks.pvalue >= 0.01))
    rate = float(np.mean(acc))
    out.append(CheckResult("mala", "acceptance_rate", rate, "in (0, 1]", 0 < rate <= 1))
    return out


RUNNERS = {"grad": check_grad, "fp_identity": check_fp_identity, "tweedie": check_tweedie,
           "bregman": check_bregman, "mala": check_mala}


def run_checks(scopes, seed=0):
    rng = np.random.default_rng(seed)
    results = []
    for scope in scopes:
        if scope not in RUNNERS:
            raise KeyError(scope)
        results.extend(RUNNERS[scope](rng))
    return results
