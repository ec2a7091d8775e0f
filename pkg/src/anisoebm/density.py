"""Normalized log-densities from a trained energy, and blind covariance estimation.

The learned energy is only defined up to an additive constant.  At a large
covariance the noisy marginal is close to ``N(0, Sigma)``, whose entropy is
known, so matching the mean energy there fixes the constant.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .covariance import PHI_MIN, DiagonalCovariance
from .energymodel import EnergyInterface, as_covariance

LOG_2PI_E = np.log(2 * np.pi * np.e)
BLIND_HEADER = ("candidate_id", "param1", "param2", "log_density")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationRecord:
    """Offset ``c`` such that ``log p(y | Sigma) = -(U(y, Sigma) - c)``.

    Attributes:
        offset: the constant, in nats.
        sigma_cal: covariance the constant was estimated at.
        n: number of calibration draws.
        stderr: Monte Carlo standard error of ``offset``.
    """

    offset: float
    sigma_cal: DiagonalCovariance
    n: int
    stderr: float

    def __post_init__(self):
        if not np.isfinite(self.offset) or not np.isfinite(self.stderr) or not self.stderr > 0:
            raise CalibrationError("offset must be finite and stderr finite and positive")
        if np.any(self.sigma_cal.phi < 0):
            raise CalibrationError("calibration covariance must be non-negative")

    def to_record(self):
        return {"offset": self.offset, "n": self.n, "stderr": self.stderr,
                "sigma_cal": self.sigma_cal.phi.tolist(), "domain": self.sigma_cal.domain.value,
                "dims": list(self.sigma_cal.dims)}

    @classmethod
    def from_record(cls, rec):
        cov = DiagonalCovariance(rec["sigma_cal"], rec["domain"], tuple(rec["dims"]),
                                 phi_min=min(PHI_MIN, min(rec["sigma_cal"])),
                                 phi_max=max(1e3, max(rec["sigma_cal"])))
        return cls(float(rec["offset"]), cov, int(rec["n"]), float(rec["stderr"]))


def gaussian_entropy(Sigma: DiagonalCovariance):
    """Entropy of ``N(0, Sigma)`` in nats."""
    return 0.5 * (Sigma.d * LOG_2PI_E + Sigma.logdet())


def calibrate(model: EnergyInterface, Sigma_cal, n, rng, phi_max=None, batch=4096):
    """Estimate the offset at a large covariance.

    Draws ``y ~ N(0, Sigma_cal)`` and returns ``mean U(y, Sigma_cal)`` minus
    the Gaussian entropy.  ``phi_max`` is the largest trained variance; every
    calibration variance must be at least half of it (defaults to the
    largest entry of ``Sigma_cal``).  With ``n = 1`` the standard error falls
    back to ``sqrt(d / 2)``, the spread of a Gaussian energy.
    """
    if n < 1:
        raise CalibrationError("need at least one calibration draw")
    Sigma_cal = as_covariance(Sigma_cal)
    ref = float(np.max(Sigma_cal.phi)) if phi_max is None else float(phi_max)
    if np.any(Sigma_cal.phi < 0.5 * ref):
        raise CalibrationError(f"calibration covariance must be >= {0.5 * ref:g} everywhere")
    U = np.empty(n)
    for start in range(0, n, batch):
        k = min(batch, n - start)
        y = Sigma_cal.apply_sqrt(rng.standard_normal((k, Sigma_cal.d)))
        U[start:start + k] = model.energy(y, Sigma_cal)
    if not np.all(np.isfinite(U)):
        raise CalibrationError("non-finite energies during calibration")
    offset = float(U.mean() - gaussian_entropy(Sigma_cal))
    stderr = float(U.std(ddof=1) / np.sqrt(n)) if n > 1 else float(np.sqrt(Sigma_cal.d / 2))
    return NormalizationRecord(offset, Sigma_cal, int(n), max(stderr, np.finfo(float).tiny))


def log_density(model: EnergyInterface, record: NormalizationRecord, y, Sigma):
    """Normalized ``log p(y | Sigma)``."""
    return -(np.asarray(model.energy(y, Sigma)) - record.offset)


def _floor_cov(record, d, phi_min):
    like = record.sigma_cal
    if like.d != d:
        raise CalibrationError("record dimension does not match the input")
    return DiagonalCovariance(np.full(d, phi_min), like.domain, like.dims,
                              phi_min=min(phi_min, PHI_MIN), phi_max=max(like.phi_max, phi_min))


def log_prior(model: EnergyInterface, record: NormalizationRecord, x, phi_min=PHI_MIN):
    """``log p(x)`` as the normalized density at the floor covariance."""
    x = np.asarray(x, dtype=float)
    return log_density(model, record, x, _floor_cov(record, x.shape[-1], phi_min))


def log_likelihood(x, y, Sigma_meas):
    """``log N(y; x, Sigma_meas)`` for a diagonal covariance in its own basis."""
    Sigma_meas = as_covariance(Sigma_meas, np.shape(y)[-1])
    r = Sigma_meas.to_basis(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))
    return -0.5 * np.sum(r * r / Sigma_meas.phi, axis=-1) - 0.5 * (
        Sigma_meas.d * np.log(2 * np.pi) + Sigma_meas.logdet())


def log_posterior(model: EnergyInterface, record: NormalizationRecord, x, y, Sigma_meas,
                  phi_min=PHI_MIN):
    """Bayes rule: ``log p(x) + log p(y | x) - log p(y | Sigma_meas)``."""
    return (log_prior(model, record, x, phi_min) + log_likelihood(x, y, Sigma_meas)
            - log_density(model, record, y, Sigma_meas))


def blind_estimate(model: EnergyInterface, record: NormalizationRecord, y, candidates):
    """Pick the candidate covariance with the highest normalized density of ``y``.

    Returns ``(index, scores)``; ties go to the lowest index.
    """
    if len(candidates) == 0:
        raise ValueError("need at least one candidate covariance")
    y = np.asarray(y, dtype=float)
    scores = np.array([float(log_density(model, record, y, c)) for c in candidates])
    return int(np.argmax(scores)), scores


def blind_csv(scores, params):
    """Score table with one row per candidate; ``params`` holds (param1, param2) pairs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BLIND_HEADER)
    for i, (s, (p1, p2)) in enumerate(zip(scores, params)):
        w.writerow([i, repr(float(p1)), repr(float(p2)), repr(float(s))])
    return buf.getvalue()
