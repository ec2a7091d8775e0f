"""Predictor-corrector posterior sampling over any energy.

Iterates are batched: ``x`` may be a single vector ``(d,)`` or a stack of
independent chains ``(n, d)`` that share one covariance per level.  All
covariance arithmetic happens in the basis where the covariance is diagonal.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .covariance import (PHI_MIN, CovarianceSchedule, DiagonalCovariance, Domain, ScheduleError,
                         geometric_levels)
from .energymodel import EnergyInterface, as_covariance

GAP_FLOOR = 1e-8
MODES = ("fixed_geometric", "adaptive")
CORRECTORS = ("none", "ula", "mala")
DIAGNOSTICS_HEADER = ("level", "energy", "accept_rate", "mean_phi")


class SamplerParameterError(ValueError):
    pass


class SamplerTerminationError(RuntimeError):
    """Adaptive schedule did not reach the floor; carries the partial trajectory."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class SamplerConfig:
    """Sampler settings.

    Attributes:
        mode: ``fixed_geometric`` or ``adaptive``.
        T: number of predictor levels of the fixed schedule.
        corrector: ``none``, ``ula`` or ``mala``.
        n_steps: corrector iterations per level.
        r: step ratio of the corrector step-size rule.
        temperature: multiplies the injected predictor noise only.
        eta: adaptive covariance step size.
        floor: smallest variance, reached at the last level.
        end: variance the geometric levels head towards before the final
            jump to ``floor``; the adaptive mode stops once every variance is
            at or below it.
        begin: first geometric level; defaults to the largest measurement
            variance.
        corrector_eps: fixed corrector step; ``None`` uses the ratio rule.
        max_levels: adaptive level budget, ``10 * T`` when ``None``.
        retain_iterates: keep every iterate in the trajectory.
    """

    mode: str = "fixed_geometric"
    T: int = 600
    corrector: str = "none"
    n_steps: int = 1
    r: float = 0.15
    temperature: float = 0.9
    eta: float = 0.1
    floor: float = PHI_MIN
    end: float = 1e-4
    begin: float | None = None
    corrector_eps: float | None = None
    max_levels: int | None = None
    seed: int = 0
    retain_iterates: bool = False

    def __post_init__(self):
        if self.corrector is None:  # config files spell the string "none" bare
            self.corrector = "none"
        if self.mode not in MODES:
            raise SamplerParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.corrector not in CORRECTORS:
            raise SamplerParameterError(f"corrector must be one of {CORRECTORS}")
        if self.T < 1 or self.n_steps < 0:
            raise SamplerParameterError("need T >= 1 and n_steps >= 0")
        if not self.r > 0 or not self.eta > 0 or self.temperature < 0:
            raise SamplerParameterError("need r > 0, eta > 0 and temperature >= 0")
        if self.floor < PHI_MIN or not self.end > self.floor:
            raise SamplerParameterError("need floor >= phi_min and end > floor")
        if self.corrector_eps is not None and not self.corrector_eps > 0:
            raise SamplerParameterError("corrector_eps must be positive")

    @property
    def level_budget(self):
        return 10 * self.T if self.max_levels is None else int(self.max_levels)


@dataclass
class Trajectory:
    covariances: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    iterates: list | None = None

    def record(self, level, Sigma, x, energy, accept_rate):
        self.covariances.append(Sigma)
        self.diagnostics.append({"level": level, "energy": energy, "accept_rate": accept_rate,
                                 "mean_phi": float(np.mean(Sigma.phi))})
        if self.iterates is not None:
            self.iterates.append(np.array(x, copy=True))

    def phis(self):
        return np.stack([s.phi for s in self.covariances])

    def diagnostics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DIAGNOSTICS_HEADER)
        for row in self.diagnostics:
            acc = row["accept_rate"]
            w.writerow([row["level"], repr(float(row["energy"])),
                        "" if acc is None else repr(float(acc)), repr(row["mean_phi"])])
        return buf.getvalue()


# -- building blocks -------------------------------------------------------------


def _basis_diag_apply(Sigma: DiagonalCovariance, diag, v):
    """Multiply ``v`` by a covariance-basis diagonal that may contain zeros."""
    return Sigma.from_basis(Sigma.to_basis(v) * diag)


def predictor_step(model: EnergyInterface, x, Sigma_t, dSigma, rng, temperature=1.0):
    """One reverse step: ``x - dSigma grad_input + temperature sqrt(dSigma) v``.

    ``dSigma`` holds per-coordinate decrements in the basis of ``Sigma_t``.
    """
    x = np.asarray(x, dtype=float)
    Sigma_t = as_covariance(Sigma_t, x.shape[-1])
    dSigma = np.broadcast_to(np.asarray(dSigma, dtype=float), (Sigma_t.d,))
    if np.any(dSigma < 0):
        raise ScheduleError("covariance decrement must be non-negative")
    if not np.any(dSigma > 0):
        return x.copy()
    drift = _basis_diag_apply(Sigma_t, dSigma, model.grad_input(x, Sigma_t))
    noise = _basis_diag_apply(Sigma_t, np.sqrt(dSigma), rng.standard_normal(x.shape))
    return x - drift + temperature * noise


def guidance(x, y, Sigma_t: DiagonalCovariance, Sigma_T: DiagonalCovariance, mask=None):
    """Gradient and value of ``sum log N(y_j; x_j, Sigma_T,j - Sigma_t,j)``.

    Only coordinates (in the covariance basis) that are in ``mask`` and whose
    gap exceeds :data:`GAP_FLOOR` contribute.  ``y = None`` means no
    measurement: zero gradient and value.
    """
    x = np.asarray(x, dtype=float)
    if y is None:
        return np.zeros_like(x), np.zeros(x.shape[:-1])
    ok = _guided(Sigma_t, Sigma_T, mask)
    gap = Sigma_T.phi - Sigma_t.phi
    safe = np.where(ok, gap, 1.0)
    diff = Sigma_t.to_basis(np.asarray(y, dtype=float) - x)
    grad = np.where(ok, diff / safe, 0.0)
    loglik = np.sum(np.where(ok, -0.5 * diff * diff / safe - 0.5 * np.log(2 * np.pi * safe), 0.0),
                    axis=-1)
    return Sigma_t.from_basis(grad), loglik


def _guided(Sigma_t, Sigma_T, mask):
    gap = Sigma_T.phi - Sigma_t.phi
    if np.any(gap < -1e-12 * np.maximum(Sigma_T.phi, 1.0)):
        raise ScheduleError("Sigma_T must dominate Sigma_t coordinatewise")
    ok = gap > GAP_FLOOR
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    return ok


def update_mask(Sigma_t, y, Sigma_T, mask=None):
    """Covariance-basis coordinates the corrector moves (1.0) or holds (0.0).

    A coordinate whose gap to the measurement is at or below
    :data:`GAP_FLOOR` is pinned to ``y`` (its conditional is a point mass) and
    is held fixed; ``mask`` further restricts the moving set.  Without a
    measurement every coordinate in ``mask`` moves.
    """
    if y is None:
        m = np.ones(Sigma_t.d, dtype=bool)
    else:
        m = Sigma_T.phi - Sigma_t.phi > GAP_FLOOR
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    return m.astype(float)


def _sq_norm(v):
    return np.sum(v * v, axis=-1, keepdims=True)


def corrector_eps(G, m, r, z=None):
    """Ratio rule ``eps = 2 (r ||m z|| / ||m G||)^2``, one value per chain.

    Without ``z`` the expected norm ``sqrt(sum m)`` replaces ``||m z||`` so the
    step depends on the state only.  A vanishing gradient gives ``2 r^2``.
    """
    gz = _sq_norm(m * G)
    zz = np.full_like(gz, np.sum(m)) if z is None else _sq_norm(m * z)
    ratio = np.divide(zz, gz, out=np.ones_like(gz), where=gz > 0)
    return 2.0 * r * r * ratio


def _guided_gradient(model, x, y, Sigma_t, Sigma_T, mask):
    """Basis coordinates of the guided-energy gradient, and the log-likelihood."""
    g, loglik = guidance(x, y, Sigma_t, Sigma_T, mask)
    return Sigma_t.to_basis(model.grad_input(x, Sigma_t) - g), loglik


def _prepare(x, Sigma_t, Sigma_T):
    x = np.asarray(x, dtype=float)
    Sigma_t = as_covariance(Sigma_t, x.shape[-1])
    Sigma_T = Sigma_t if Sigma_T is None else as_covariance(Sigma_T, x.shape[-1])
    return x, Sigma_t, Sigma_T


def ula_corrector_step(model: EnergyInterface, x, Sigma_t, y, Sigma_T, mask, r, rng, eps=None):
    """Langevin step on ``p(x | Sigma_t) N(y; x, Sigma_T - Sigma_t)``.

    The update is ``x - (eps/2) [grad_input - guidance] + sqrt(eps) v`` on the
    moving coordinates (see :func:`update_mask`), computed in the covariance
    basis.  ``eps`` fixes the step; otherwise the ratio rule uses the drawn
    noise.
    """
    x, Sigma_t, Sigma_T = _prepare(x, Sigma_t, Sigma_T)
    m = update_mask(Sigma_t, y, Sigma_T, mask)
    G, _ = _guided_gradient(model, x, y, Sigma_t, Sigma_T, mask)
    z = rng.standard_normal(x.shape)
    e = corrector_eps(G, m, r, z) if eps is None else eps
    return x + Sigma_t.from_basis(m * (-0.5 * e * G + np.sqrt(e) * z))


def _log_q(xb_to, xb_from, G_from, e, m):
    """Log density of the masked Gaussian Langevin kernel (basis coordinates)."""
    k = np.sum(m)
    r = m * (xb_to - xb_from + 0.5 * e * G_from)
    return (-0.5 * _sq_norm(r) / e - 0.5 * k * np.log(2 * np.pi * e))[..., 0]


def mala_log_alpha(model, x, x_new, Sigma_t, y, Sigma_T, mask, r, eps=None):
    """Log acceptance ratio (before ``min(0, .)``) for a move ``x -> x_new``."""
    x, Sigma_t, Sigma_T = _prepare(x, Sigma_t, Sigma_T)
    x_new = np.asarray(x_new, dtype=float)
    m = update_mask(Sigma_t, y, Sigma_T, mask)
    G0, ll0 = _guided_gradient(model, x, y, Sigma_t, Sigma_T, mask)
    G1, ll1 = _guided_gradient(model, x_new, y, Sigma_t, Sigma_T, mask)
    if eps is None:
        e0, e1 = corrector_eps(G0, m, r), corrector_eps(G1, m, r)
    else:
        e0 = e1 = np.full(G0.shape[:-1] + (1,), float(eps))
    xb0, xb1 = Sigma_t.to_basis(x), Sigma_t.to_basis(x_new)
    lp0 = -model.energy(x, Sigma_t) + ll0
    lp1 = -model.energy(x_new, Sigma_t) + ll1
    return lp1 - lp0 + _log_q(xb0, xb1, G1, e1, m) - _log_q(xb1, xb0, G0, e0, m)


def mala_corrector_step(model: EnergyInterface, x, Sigma_t, y, Sigma_T, mask, r, rng, eps=None):
    """Metropolis-adjusted Langevin step; returns ``(x_next, accepted)``.

    The proposal uses the ratio rule with the expected noise norm, so the
    forward and reverse kernels are both state-dependent Gaussians.
    """
    x, Sigma_t, Sigma_T = _prepare(x, Sigma_t, Sigma_T)
    if eps is not None and not eps > 0:
        raise SamplerParameterError("MALA needs a positive step")
    m = update_mask(Sigma_t, y, Sigma_T, mask)
    G, _ = _guided_gradient(model, x, y, Sigma_t, Sigma_T, mask)
    e = corrector_eps(G, m, r) if eps is None else eps
    if np.any(np.asarray(e) <= 0):
        raise SamplerParameterError("degenerate proposal (zero step)")
    x_new = x + Sigma_t.from_basis(m * (-0.5 * e * G + np.sqrt(e) * rng.standard_normal(x.shape)))
    log_alpha = mala_log_alpha(model, x, x_new, Sigma_t, y, Sigma_T, mask, r, eps)
    accepted = np.log(rng.uniform(size=np.shape(log_alpha))) < log_alpha
    out = np.where(np.asarray(accepted)[..., None], x_new, x)
    return out, accepted


def adaptive_step(model: EnergyInterface, x, Sigma_t, eta, floor, partition=None):
    """Covariance decrement ``eta t^2 grad_cov`` clipped to ``[0, t - floor]``.

    With a ``partition`` the step is taken per group (one shared variance per
    group); otherwise per coordinate.  For batched ``x`` the covariance
    gradient is averaged over chains.
    """
    x = np.asarray(x, dtype=float)
    Sigma_t = as_covariance(Sigma_t, x.shape[-1])
    if partition is None:
        t = Sigma_t.phi
        gc = model.grad_cov(x, Sigma_t)
    else:
        t = Sigma_t.group_values(partition)
        gc = model.grad_cov(x, Sigma_t, partition)
    gc = np.asarray(gc).reshape(-1, t.size).mean(axis=0)
    step = np.clip(eta * t * t * gc, 0.0, np.maximum(t - floor, 0.0))
    return step if partition is None else partition.expand(step)


def mirror_step(t, grad, gamma):
    """Exact Bregman step for the ``-log det`` geometry: ``(1/t + gamma grad)^-1``."""
    return 1.0 / (1.0 / np.asarray(t, dtype=float) + gamma * np.asarray(grad, dtype=float))


def linearized_mirror_step(t, grad, gamma):
    t = np.asarray(t, dtype=float)
    return t - gamma * t * t * np.asarray(grad, dtype=float)


# -- full loop ----------------------------------------------------------------------


def fixed_schedule(Sigma_meas: DiagonalCovariance, config: SamplerConfig):
    """Covariances ``[Sigma_T, ..., Sigma_0]`` following ``min(Sigma_meas, level)``."""
    floor_cov = Sigma_meas.replace(np.minimum(Sigma_meas.phi, config.floor))
    if np.all(Sigma_meas.phi <= floor_cov.phi * (1 + 1e-12)):
        return [Sigma_meas]
    begin = float(np.max(Sigma_meas.phi)) if config.begin is None else config.begin
    levels = geometric_levels(begin, config.end, config.T) if begin > config.end else [begin]
    steps = [Sigma_meas.replace(np.minimum(Sigma_meas.phi, lv)) for lv in levels[:-1]]
    if not steps:
        steps = [Sigma_meas]
    steps.append(floor_cov)
    return steps


def _correct(model, x, Sigma, y, Sigma_meas, mask, config, rng):
    acc = []
    for _ in range(config.n_steps):
        if config.corrector == "ula":
            x = ula_corrector_step(model, x, Sigma, y, Sigma_meas, mask, config.r, rng,
                                   config.corrector_eps)
            acc.append(1.0)
        elif config.corrector == "mala":
            x, a = mala_corrector_step(model, x, Sigma, y, Sigma_meas, mask, config.r, rng,
                                       config.corrector_eps)
            acc.append(float(np.mean(a)))
    return x, (float(np.mean(acc)) if acc else None)


def _mean_energy(model, x, Sigma):
    return float(np.mean(model.energy(x, Sigma)))


def posterior_sample(model: EnergyInterface, y, Sigma_meas, config: SamplerConfig, rng=None,
                     mask=None, partition=None, schedule=None):
    """Sample ``p(x | y)`` for the measurement covariance ``Sigma_meas``.

    Starts at ``x = y`` and runs predictor steps down the schedule with
    ``n_steps`` corrector iterations per level.  ``partition`` selects grouped
    adaptive steps (required for grouped models).  An explicit ``schedule``
    (a :class:`CovarianceSchedule` starting at ``Sigma_meas``) overrides the
    geometric one in fixed mode.  Returns ``(x, trajectory)``.
    """
    y = np.asarray(y, dtype=float)
    Sigma_meas = as_covariance(Sigma_meas, y.shape[-1])
    rng = np.random.default_rng(config.seed) if rng is None else rng
    traj = Trajectory(iterates=[] if config.retain_iterates else None)
    x = y.copy()
    traj.record(0, Sigma_meas, x, _mean_energy(model, x, Sigma_meas), None)

    if config.mode == "fixed_geometric":
        if schedule is None:
            steps = fixed_schedule(Sigma_meas, config)
        else:
            steps = list(CovarianceSchedule(tuple(schedule)).steps)
            if not np.allclose(steps[0].phi, Sigma_meas.phi):
                raise ScheduleError("schedule must start at the measurement covariance")
        for level, (cur, nxt) in enumerate(zip(steps[:-1], steps[1:]), start=1):
            x = predictor_step(model, x, cur, cur.phi - nxt.phi, rng, config.temperature)
            x, acc = _correct(model, x, nxt, y, Sigma_meas, mask, config, rng)
            traj.record(level, nxt, x, _mean_energy(model, x, nxt), acc)
        return x, traj

    Sigma = Sigma_meas
    level = 0
    while np.any(Sigma.phi > config.end):
        if level >= config.level_budget:
            raise SamplerTerminationError(
                f"adaptive schedule did not reach {config.end:g} within {level} levels", traj)
        dS = adaptive_step(model, x, Sigma, config.eta, config.floor, partition)
        nxt = Sigma.replace(Sigma.phi - dS)
        x = predictor_step(model, x, Sigma, Sigma.phi - nxt.phi, rng, config.temperature)
        x, acc = _correct(model, x, nxt, y, Sigma_meas, mask, config, rng)
        level += 1
        traj.record(level, nxt, x, _mean_energy(model, x, nxt), acc)
        Sigma = nxt
    floor_cov = Sigma.replace(np.minimum(Sigma.phi, config.floor))
    if np.any(Sigma.phi > floor_cov.phi):
        x = predictor_step(model, x, Sigma, Sigma.phi - floor_cov.phi, rng, config.temperature)
        x, acc = _correct(model, x, floor_cov, y, Sigma_meas, mask, config, rng)
        traj.record(level + 1, floor_cov, x, _mean_energy(model, x, floor_cov), acc)
    return x, traj

