"""Dual score matching: A-DSM + A-CSM losses and the training loop.

Both losses use per-coordinate weights that already carry the 1/d and 1/d^2
dimension normalisation, so the combined objective is
``k1 * loss_adsm + k2 * loss_acsm`` with ``k1 = k2 = 1`` by default and
``k2 = 0`` for single (data-score only) training.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .covariance import GroupPartition, sample_phi_prior
from .energymodel import EnergyInterface, QuadraticMixtureEnergy
from .gradengine import DualNode, Tape, dual_affine, dual_tanh

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss_total", "loss_adsm", "loss_acsm", "grad_norm", "lr")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step, batch_seed, message="non-finite loss"):
        super().__init__(f"{message} at step {step} (batch seed {batch_seed})")
        self.step = step
        self.batch_seed = batch_seed


@dataclass
class TrainingConfig:
    batch_size: int = 512
    steps: int = 50_000
    lr: float = 1e-4
    warmup: int = 1_000
    clip_norm: float = 20.0
    phi_min: float = 1e-2
    phi_max: float = 1e2
    k1: float = 1.0
    k2: float = 1.0
    seed: int = 0
    log_every: int = 100
    share: int = 1
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size <= 0 or self.steps < 0 or self.warmup < 0 or self.log_every <= 0:
            raise ValueError("batch_size, log_every must be positive; steps, warmup non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.phi_min <= self.phi_max):
            raise ValueError("need 0 < phi_min <= phi_max")
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be non-negative")
        if self.share < 1 or self.batch_size % self.share:
            raise ValueError("share must be a positive divisor of batch_size")


@dataclass
class Batch:
    """Clean and noisy samples with per-sample group variances.

    ``y = x + sqrt(t_g) v`` coordinatewise, with ``v`` kept for audit.
    Consecutive runs of ``share`` samples carry the same ``t`` so the
    coefficient network only runs once per run.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    v: np.ndarray
    partition: GroupPartition
    share: int = 1

    def __post_init__(self):
        n, d = self.x.shape
        if self.y.shape != (n, d) or self.v.shape != (n, d):
            raise ValueError("x, y, v shapes differ")
        if self.t.shape != (n, len(self.partition)) or self.partition.d != d:
            raise ValueError("t must be (n, G) and match the partition")
        if n % self.share or np.any(self.t.reshape(-1, self.share, self.t.shape[1])
                                    != self.t[::self.share, None]):
            raise ValueError("t is not constant over runs of `share` samples")

    @classmethod
    def draw(cls, x, partition, rng, phi_min, phi_max, share=1):
        n, d = x.shape
        t = sample_phi_prior(d, rng, phi_min, phi_max, partition=partition, size=n // share)
        t = np.repeat(t, share, axis=0)
        v = rng.standard_normal((n, d))
        y = x + np.sqrt(partition.expand(t)) * v
        return cls(x, y, t, v, partition, share)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    def stats(self):
        """Per-group sufficient statistics (||y_g||^2, <y_g, z_g>, ||z_g||^2), z = y - x."""
        z = self.y - self.x
        red = self.partition.reduce
        return red(self.y * self.y), red(self.y * z), red(z * z)


# -- loss graph ---------------------------------------------------------------


def _coefficient_graph(tape, model, param_nodes, t, with_tangents):
    """Record the coefficient network; returns (a, b, da, db) nodes."""
    n, G = t.shape
    m, mG = model.m, model.m * G
    e = tape.const(model.embed(t))
    layers = list(zip(param_nodes[0::2], param_nodes[1::2]))
    if with_tangents:
        seeds = np.zeros((G, n, G))
        for g in range(G):
            seeds[g, :, g] = 1.0 / (t[:, g] + model.embed_offset)
        h = DualNode(e, tape.const(seeds))
        for i, (W, b) in enumerate(layers):
            h = dual_affine(h, W, b)
            if i < len(layers) - 1:
                h = dual_tanh(h)
        raw, draw = h.primal, h.tangent
    else:
        raw = e
        for i, (W, b) in enumerate(layers):
            raw = tape.record("affine", raw, W, b)
            if i < len(layers) - 1:
                raw = tape.record("tanh", raw)
        draw = None
    raw_a = tape.record("reshape", raw[:, :mG], shape=(n, m, G))
    a = tape.record("softplus", raw_a)
    b = raw[:, mG:]
    if draw is None:
        return a, b, None, None
    slope = tape.record("exp", -tape.record("softplus", -raw_a))
    da = tape.record("reshape", draw[:, :, :mG], shape=(G, n, m, G)) * slope
    db = draw[:, :, mG:]
    return a, b, da, db


def loss_graph(model: QuadraticMixtureEnergy, batch: Batch, tape=None, params=None,
               k1=1.0, k2=1.0):
    """Record the weighted dual objective on ``tape``.

    Returns ``(total, adsm, acsm, param_nodes)``; ``acsm`` is None when
    ``k2 == 0`` (the tangent pass is skipped entirely then).
    """
    tape = Tape() if tape is None else tape
    if params is None:
        params = [tape.param(p) for p in model.params]
    d, n, s, G, m = batch.d, batch.n, batch.share, len(batch.partition), model.m
    nt = n // s
    t = batch.t[::s]  # (nt, G), one row per run of shared covariances
    r2, yz, z2 = (v.reshape(nt, s, G) for v in batch.stats())
    want_cov = k2 > 0
    a, b, da, db = _coefficient_graph(tape, model, params, t, want_cov)

    a4 = tape.record("reshape", a, shape=(nt, 1, m, G))
    E = tape.record("sum", a4 * r2[:, :, None, :], axis=-1) + tape.record(
        "reshape", b, shape=(nt, 1, m))  # (nt, s, m)
    lse = tape.record("logsumexp", -E, axis=-1)  # = -U
    p = tape.record("exp", -E - tape.record("reshape", lse, shape=(nt, s, 1)))
    abar = tape.record("sum", tape.record("reshape", p, shape=(nt, s, m, 1)) * a4, axis=2)

    # sum_j (phi_j / d)(dU/dy_j - z_j/phi_j)^2 expanded per group
    t3 = t[:, None, :]
    dsm = (t3 / d) * (4.0 * abar * abar * r2 - 4.0 * abar * (yz / t3)) + z2 / (t3 * d)
    adsm = tape.record("sum", dsm) * (1.0 / n)
    total = adsm * k1

    acsm = None
    if want_cov:
        da5 = tape.record("reshape", da, shape=(G, nt, 1, m, G))
        dE = tape.record("sum", da5 * r2[None, :, :, None, :], axis=-1) + tape.record(
            "reshape", db, shape=(G, nt, 1, m))  # (G, nt, s, m)
        gc = tape.record("sum", dE * p, axis=-1)  # (G, nt, s)
        sizes = batch.partition.sizes[:, None, None]
        tg = t.T[:, :, None]
        target = sizes / (2.0 * tg) - np.moveaxis(z2, -1, 0) / (2.0 * tg * tg)
        resid = gc - target
        acsm = tape.record("sum", resid * resid * (tg * tg / d**2)) * (1.0 / n)
        total = total + acsm * k2
    return total, adsm, acsm, params


def a_dsm_loss(model, batch):
    """A-DSM loss value and its parameter gradients."""
    tape = Tape()
    _, adsm, _, _ = loss_graph(model, batch, tape, k1=1.0, k2=0.0)
    return float(adsm.value), tape.backward(adsm)


def a_csm_loss(model, batch):
    """A-CSM loss value and its parameter gradients (through the tangents)."""
    tape = Tape()
    _, _, acsm, _ = loss_graph(model, batch, tape, k1=0.0, k2=1.0)
    return float(acsm.value), tape.backward(acsm)


def a_dsm_loss_energy(model: EnergyInterface, batch: Batch):
    """A-DSM loss for any energy (no gradients); evaluates grad_input per group variance."""
    total = 0.0
    z = batch.y - batch.x
    for i in range(batch.n):
        phi = batch.partition.expand(batch.t[i])
        g = model.grad_input(batch.y[i], phi)
        total += np.sum(phi / batch.d * (g - z[i] / phi) ** 2)
    return total / batch.n


def a_csm_loss_energy(model: EnergyInterface, batch: Batch, per_sample=False):
    """Grouped A-CSM loss for any energy (no gradients)."""
    z2 = batch.partition.reduce((batch.y - batch.x) ** 2)
    sizes = batch.partition.sizes
    vals = np.empty(batch.n)
    for i in range(batch.n):
        t = batch.t[i]
        gc = model.grad_cov(batch.y[i], batch.partition.expand(t), batch.partition)
        target = sizes / (2 * t) - z2[i] / (2 * t * t)
        vals[i] = np.sum(t * t / batch.d**2 * (gc - target) ** 2)
    return vals if per_sample else float(vals.mean())


# -- optimisation ---------------------------------------------------------------


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def warmup_lr(step, base, warmup):
    if warmup <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup)


class DatasetSource:
    """Fixed pool of clean samples, batches drawn uniformly with replacement."""

    def __init__(self, data):
        self.data = np.asarray(data, dtype=float)

    def __call__(self, n, rng):
        return self.data[rng.integers(0, self.data.shape[0], size=n)]


@dataclass
class TrainingResult:
    model: QuadraticMixtureEnergy
    trace: list = field(default_factory=list)
    steps: int = 0
    seed: int = 0

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in self.trace:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in METRICS_HEADER[1:]])
        return buf.getvalue()


def train(model: QuadraticMixtureEnergy, config: TrainingConfig, source, callback=None,
          checkpoint=None):
    """Stochastic training with Adam, linear warmup and global-norm clipping.

    ``source(n, rng)`` returns ``n`` clean samples.  The input model is not
    modified; the trained copy is returned in the result.  ``callback(row)``
    sees every logged metrics row and ``checkpoint(step, model, trace)`` runs
    every ``config.checkpoint_every`` steps.
    """
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params, config.beta1, config.beta2, config.adam_eps)
    result = TrainingResult(model, [], 0, config.seed)
    for step in range(config.steps):
        batch_seed = int(rng.integers(2**63 - 1))
        brng = np.random.default_rng(batch_seed)
        x = source(config.batch_size, brng)
        batch = Batch.draw(x, model.partition, brng, config.phi_min, config.phi_max,
                           config.share)
        tape = Tape()
        total, adsm, acsm, _ = loss_graph(model, batch, tape, k1=config.k1, k2=config.k2)
        if not np.isfinite(total.value):
            raise NonFiniteLossError(step, batch_seed)
        grads = tape.backward(total)
        grads, gnorm = clip_by_global_norm(grads, config.clip_norm)
        if not np.isfinite(gnorm):
            raise NonFiniteLossError(step, batch_seed, "non-finite gradient")
        lr = warmup_lr(step, config.lr, config.warmup)
        model.params = opt.step(model.params, grads, lr)
        result.steps = step + 1
        if (step + 1) % config.log_every == 0:
            row = {
                "step": step + 1,
                "loss_total": float(total.value),
                "loss_adsm": float(adsm.value),
                "loss_acsm": float(acsm.value) if acsm is not None else 0.0,
                "grad_norm": gnorm,
                "lr": lr,
            }
            result.trace.append(row)
            log.debug("step %d loss %.6g", step + 1, row["loss_total"])
            if callback is not None:
                callback(row)
        if checkpoint is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            checkpoint(step + 1, model, result.trace)
    return result


def config_dict(config: TrainingConfig):
    return asdict(config)


def checkpoint_metadata(config: TrainingConfig, steps, trace, tail=5):
    """Run metadata stored with a checkpoint: steps, seed, config, last metrics rows."""
    return {"steps": int(steps), "seed": config.seed, "config": config_dict(config),
            "trace_tail": list(trace[-tail:])}
