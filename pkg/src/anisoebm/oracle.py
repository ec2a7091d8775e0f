"""Analytic priors with exact energies, scores and posterior means.

Two families:

* :class:`GaussianScaleMixturePrior` -- sum_i w_i N(0, s_i^2 I).  Isotropic,
  so any diagonal covariance (spatial or spectral) keeps every component
  diagonal after rotating ``y`` into the covariance basis.
* :class:`GaussianFieldPrior` -- stationary Gaussian field, diagonal in the
  DCT basis with variances ``c``.  Spectral covariances stay diagonal;
  spatial ones are handled with dense d x d algebra.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy.special import logsumexp, softmax

from .covariance import Domain, from_spectral, to_spectral
from .energymodel import EnergyInterface, as_covariance

LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class GaussianScaleMixturePrior(EnergyInterface):
    weights: np.ndarray
    variances: np.ndarray
    d: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        v = np.asarray(self.variances, dtype=float).reshape(-1)
        if w.size == 0 or w.size != v.size:
            raise ValueError("need matching, non-empty weights and variances")
        if np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("weights must be positive and sum to one")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "variances", v)

    @classmethod
    def two_scale(cls, d, sigmas=(1.0, 4.0)):
        s = np.asarray(sigmas, dtype=float)
        return cls(np.full(s.size, 1.0 / s.size), s**2, d)

    def sample(self, n, rng):
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        return rng.standard_normal((n, self.d)) * np.sqrt(self.variances[comp])[:, None]

    def _components(self, y, Sigma):
        y = np.asarray(y, dtype=float)
        Sigma = as_covariance(Sigma, y.shape[-1])
        yb = Sigma.to_basis(y)
        v = self.variances[:, None] + Sigma.phi[None, :]  # (m, d)
        quad = 0.5 * np.einsum("...j,ij->...i", yb * yb, 1.0 / v)
        norm = 0.5 * np.sum(LOG2PI + np.log(v), axis=-1)
        E = quad + norm - np.log(self.weights)  # component energies (..., m)
        return yb, v, E, Sigma

    def energy(self, y, Sigma):
        _, _, E, _ = self._components(y, Sigma)
        return -logsumexp(-E, axis=-1)

    def responsibilities(self, y, Sigma):
        _, _, E, _ = self._components(y, Sigma)
        return softmax(-E, axis=-1)

    def grad_input(self, y, Sigma):
        yb, v, E, Sigma = self._components(y, Sigma)
        p = softmax(-E, axis=-1)
        return Sigma.from_basis(np.einsum("...i,ij->...j", p, 1.0 / v) * yb)

    def grad_cov(self, y, Sigma, partition=None):
        yb, v, E, _ = self._components(y, Sigma)
        p = softmax(-E, axis=-1)
        inv = 1.0 / v
        per = 0.5 * np.einsum("...i,ij->...j", p, inv) - 0.5 * np.einsum(
            "...i,ij->...j", p, inv * inv) * yb * yb
        return per if partition is None else partition.reduce(per)

    def mixture_posterior_mean(self, y, Sigma):
        """E[x | y] from the component posteriors (no score involved)."""
        yb, v, E, Sigma = self._components(y, Sigma)
        p = softmax(-E, axis=-1)
        shrink = self.variances[:, None] / v
        return Sigma.from_basis(np.einsum("...i,ij->...j", p, shrink) * yb)

    def cdf(self, x):
        """Marginal CDF for d = 1."""
        from scipy.stats import norm

        x = np.asarray(x, dtype=float)[..., None]
        return np.sum(self.weights * norm.cdf(x / np.sqrt(self.variances)), axis=-1)

    def to_record(self):
        return {"kind": "gsm", "weights": self.weights.tolist(),
                "variances": self.variances.tolist(), "d": self.d}


class GaussianFieldPrior(EnergyInterface):
    """Zero-mean Gaussian field with DCT-domain variances ``c``."""

    def __init__(self, c, dims):
        c = np.asarray(c, dtype=float).reshape(-1)
        if np.any(~np.isfinite(c)) or np.any(c <= 0):
            raise ValueError("field variances must be positive and finite")
        self.c = c
        self.dims = tuple(int(n) for n in dims)
        if int(np.prod(self.dims)) != c.size:
            raise ValueError("dims do not match the number of variances")

    @classmethod
    def power_law(cls, height, width, amplitude=1.0, corner=0.15, exponent=2.0):
        """Smooth stationary field: c(f) = A / (1 + (|f| / corner)^2)^(exponent/2)."""
        fy = np.arange(height) / (2.0 * height)
        fx = np.arange(width) / (2.0 * width)
        f = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
        c = 1.0 / (1.0 + (f / corner) ** 2) ** (exponent / 2)
        c *= amplitude * height * width / c.sum()  # average pixel variance = amplitude
        return cls(c.reshape(-1), (height, width))

    @property
    def d(self):
        return self.c.size

    @cached_property
    def basis(self):
        """Rows are the spatial images of the DCT basis vectors."""
        return from_spectral(np.eye(self.d), self.dims)

    @cached_property
    def prior_cov(self):
        B = self.basis
        return B.T @ (self.c[:, None] * B)

    def sample(self, n, rng):
        z = rng.standard_normal((n, self.d)) * np.sqrt(self.c)
        return from_spectral(z, self.dims)

    def _spatial_factor(self, Sigma):
        K = self.prior_cov + np.diag(Sigma.phi)
        return scipy.linalg.cho_factor(K, lower=True), K

    def _check(self, y, Sigma):
        y = np.asarray(y, dtype=float)
        Sigma = as_covariance(Sigma, y.shape[-1])
        if Sigma.d != self.d:
            raise ValueError("covariance dimension does not match the field")
        if Sigma.domain is Domain.SPECTRAL and Sigma.dims != self.dims:
            raise ValueError("spectral covariance dims do not match the field")
        return y, Sigma

    def energy(self, y, Sigma):
        y, Sigma = self._check(y, Sigma)
        if Sigma.domain is Domain.SPECTRAL:
            v = self.c + Sigma.phi
            yb = to_spectral(y, self.dims)
            return 0.5 * np.sum(yb * yb / v, axis=-1) + 0.5 * np.sum(LOG2PI + np.log(v))
        cf, _ = self._spatial_factor(Sigma)
        sol = scipy.linalg.cho_solve(cf, np.atleast_2d(y).T).T.reshape(y.shape)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        return 0.5 * np.sum(y * sol, axis=-1) + 0.5 * (self.d * LOG2PI + logdet)

    def grad_input(self, y, Sigma):
        y, Sigma = self._check(y, Sigma)
        if Sigma.domain is Domain.SPECTRAL:
            yb = to_spectral(y, self.dims)
            return from_spectral(yb / (self.c + Sigma.phi), self.dims)
        cf, _ = self._spatial_factor(Sigma)
        return scipy.linalg.cho_solve(cf, np.atleast_2d(y).T).T.reshape(y.shape)

    def grad_cov(self, y, Sigma, partition=None):
        y, Sigma = self._check(y, Sigma)
        if Sigma.domain is Domain.SPECTRAL:
            v = self.c + Sigma.phi
            yb = to_spectral(y, self.dims)
            per = 0.5 / v - 0.5 * (yb / v) ** 2
        else:
            cf, K = self._spatial_factor(Sigma)
            Kinv = scipy.linalg.cho_solve(cf, np.eye(self.d))
            sol = (np.atleast_2d(y) @ Kinv).reshape(y.shape)
            per = 0.5 * np.diag(Kinv) - 0.5 * sol * sol
        return per if partition is None else partition.reduce(per)

    def wiener_filter(self, y, Sigma):
        """Closed-form posterior mean: c/(c+phi) in the DCT basis, or C (C+Sigma)^-1 y."""
        y, Sigma = self._check(y, Sigma)
        if Sigma.domain is Domain.SPECTRAL:
            yb = to_spectral(y, self.dims)
            return from_spectral(self.c / (self.c + Sigma.phi) * yb, self.dims)
        K = self.prior_cov + np.diag(Sigma.phi)
        # solve K^T z = C^T, so C K^-1 y = z^T y; avoids reusing the score path
        Z = np.linalg.solve(K, self.prior_cov)
        return np.atleast_2d(y) @ Z if y.ndim > 1 else Z.T @ y

    def posterior_cov(self, Sigma):
        """Posterior covariance of x given y (dense)."""
        Sigma = as_covariance(Sigma, self.d)
        if Sigma.domain is Domain.SPECTRAL:
            B = self.basis
            post = self.c * Sigma.phi / (self.c + Sigma.phi)
            return B.T @ (post[:, None] * B)
        C = self.prior_cov
        K = C + np.diag(Sigma.phi)
        return C - C @ np.linalg.solve(K, C)

    def log_posterior(self, x, y, Sigma):
        """Analytic log p(x | y, Sigma)."""
        Sigma = as_covariance(Sigma, self.d)
        mean = self.wiener_filter(y, Sigma)
        P = self.posterior_cov(Sigma)
        P = 0.5 * (P + P.T)
        cf = scipy.linalg.cho_factor(P, lower=True)
        r = np.asarray(x, dtype=float) - mean
        sol = scipy.linalg.cho_solve(cf, np.atleast_2d(r).T).T.reshape(r.shape)
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        return -0.5 * np.sum(r * sol, axis=-1) - 0.5 * (self.d * LOG2PI + logdet)

    def log_prior(self, x):
        xb = to_spectral(np.asarray(x, dtype=float), self.dims)
        return -0.5 * np.sum(xb * xb / self.c, axis=-1) - 0.5 * np.sum(LOG2PI + np.log(self.c))

    def to_record(self):
        return {"kind": "field", "dims": list(self.dims), "c": self.c.tolist()}


class ExactGaussianEnergy(EnergyInterface):
    """Isotropic N(0, c I) prior seen through noise: U = -log N(y; 0, (c + phi) I).

    Useful as a known-answer "model" (normalization self-test, loss oracles).
    """

    def __init__(self, c, d):
        self.c = float(c)
        self.d = int(d)

    def _v(self, y, Sigma):
        y = np.asarray(y, dtype=float)
        Sigma = as_covariance(Sigma, y.shape[-1])
        return Sigma.to_basis(y), self.c + Sigma.phi, Sigma

    def energy(self, y, Sigma):
        yb, v, _ = self._v(y, Sigma)
        return 0.5 * np.sum(yb * yb / v, axis=-1) + 0.5 * np.sum(LOG2PI + np.log(v))

    def grad_input(self, y, Sigma):
        yb, v, S = self._v(y, Sigma)
        return S.from_basis(yb / v)

    def grad_cov(self, y, Sigma, partition=None):
        yb, v, _ = self._v(y, Sigma)
        per = 0.5 / v - 0.5 * (yb / v) ** 2
        return per if partition is None else partition.reduce(per)


def prior_from_record(rec):
    kind = rec.get("kind")
    if kind == "gsm":
        return GaussianScaleMixturePrior(rec["weights"], rec["variances"], int(rec["d"]))
    if kind == "field":
        return GaussianFieldPrior(rec["c"], rec["dims"])
    if kind == "gaussian":
        return ExactGaussianEnergy(rec["c"], rec["d"])
    raise ValueError(f"unknown prior kind {kind!r}")
