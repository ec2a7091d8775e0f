"""Covariance-conditioned energy models.

``EnergyInterface`` is the capability set shared by the learned
:class:`QuadraticMixtureEnergy` and the analytic priors in
:mod:`anisoebm.oracle`: energy, input score, covariance score and the
anisotropic Tweedie denoiser ``y - Sigma grad_y U``.
"""

from __future__ import annotations

import abc

import numpy as np
from scipy.special import logsumexp, softmax

from .covariance import DiagonalCovariance, Domain, GroupPartition, PHI_MIN
from .gradengine import Tape, sigmoid, softplus, tangent_forward

FORMAT_VERSION = 1


def as_covariance(Sigma, d=None):
    """Accept a DiagonalCovariance or a bare spatial phi vector."""
    if isinstance(Sigma, DiagonalCovariance):
        return Sigma
    phi = np.asarray(Sigma, dtype=float)
    if d is not None and phi.size == 1:
        phi = np.full(d, float(phi.reshape(-1)[0]))
    return DiagonalCovariance(phi, Domain.SPATIAL, phi_min=min(PHI_MIN, phi.min()),
                              phi_max=max(1e3, phi.max()))


class EnergyInterface(abc.ABC):
    """U(y, Sigma) = -log p(y | Sigma) and its derivatives.

    ``y`` may carry leading batch axes; ``Sigma`` is shared across them.
    """

    @abc.abstractmethod
    def energy(self, y, Sigma):
        ...

    @abc.abstractmethod
    def grad_input(self, y, Sigma):
        ...

    @abc.abstractmethod
    def grad_cov(self, y, Sigma, partition=None):
        """dU/dphi per coordinate, or summed per group when ``partition`` is given.

        Coordinates refer to the basis in which ``Sigma`` is diagonal.
        """

    def posterior_mean(self, y, Sigma):
        Sigma = as_covariance(Sigma, np.shape(y)[-1])
        return np.asarray(y, dtype=float) - Sigma.apply(self.grad_input(y, Sigma))


class QuadraticMixtureEnergy(EnergyInterface):
    """Mixture of group-quadratics with coefficients from a tanh MLP.

    U(y, t) = -logsumexp_i(-sum_g a_i^g(e) r_g^2 - b_i(e)), with
    r_g^2 = ||y_g||^2, e_g = log(t_g + embed_offset) and a = softplus(raw).

    Args:
        partition: coordinate groups sharing one noise variance.
        m: number of mixture components.
        hidden: hidden width of the coefficient network.
        depth: number of affine layers.
        embed_offset: offset inside the log-variance embedding.
        rng: generator for the initial weights.
    """

    def __init__(self, partition: GroupPartition, m=2, hidden=256, depth=5,
                 embed_offset=PHI_MIN, rng=None, params=None):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.partition = partition
        self.m = int(m)
        self.hidden = int(hidden)
        self.depth = int(depth)
        self.embed_offset = float(embed_offset)
        G = len(partition)
        self.sizes = [G] + [self.hidden] * (self.depth - 1) + [self.m * (G + 1)]
        if params is None:
            params = self._init_params(np.random.default_rng(rng) if not isinstance(
                rng, np.random.Generator) else rng)
        self.params = [np.array(p, dtype=float) for p in params]
        self._check_shapes()

    # -- parameters -----------------------------------------------------------

    @property
    def G(self):
        return len(self.partition)

    @property
    def d(self):
        return self.partition.d

    def layer_shapes(self):
        return [(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]

    def _init_params(self, rng):
        params = []
        for i, (fan_in, fan_out) in enumerate(self.layer_shapes()):
            lim = fan_in ** -0.5
            W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            if i < self.depth - 1:
                b = rng.uniform(-lim, lim, size=fan_out)
            else:
                b = np.zeros(fan_out)
                b[self.m * self.G:] = 0.5 * (self.d / self.m) * np.log(2 * np.pi)
            params += [W, b]
        return params

    def _check_shapes(self):
        expect = []
        for a, b in self.layer_shapes():
            expect += [(a, b), (b,)]
        got = [p.shape for p in self.params]
        if got != expect:
            raise ValueError(f"parameter shapes {got} do not match architecture {expect}")

    @property
    def layers(self):
        return list(zip(self.params[0::2], self.params[1::2]))

    def flat_params(self):
        return np.concatenate([p.reshape(-1) for p in self.params])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        out, k = [], 0
        for p in self.params:
            out.append(flat[k:k + p.size].reshape(p.shape))
            k += p.size
        if k != flat.size:
            raise ValueError("flat parameter vector has the wrong length")
        self.params = out

    def copy(self):
        return QuadraticMixtureEnergy(self.partition, self.m, self.hidden, self.depth,
                                      self.embed_offset, params=[p.copy() for p in self.params])

    # -- coefficient network ---------------------------------------------------

    def embed(self, t):
        return np.log(np.asarray(t, dtype=float) + self.embed_offset)

    def raw_outputs(self, t):
        h = self.embed(t)
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < self.depth - 1:
                h = np.tanh(h)
        return h

    def coefficients(self, t):
        """Quadratic coefficients ``a`` (..., m, G) and offsets ``b`` (..., m)."""
        raw = self.raw_outputs(t)
        mG = self.m * self.G
        a = softplus(raw[..., :mG]).reshape(raw.shape[:-1] + (self.m, self.G))
        return a, raw[..., mG:]

    def coefficient_tangents(self, t):
        """Coefficients and their derivatives in each group variance.

        Returns ``a, b, da, db`` with ``da[k] = d a / d t_k`` (shape
        ``(G,) + a.shape``) from one tangent-augmented forward pass.
        """
        t = np.atleast_2d(np.asarray(t, dtype=float))
        n = t.shape[0]
        seeds = np.zeros((self.G, n, self.G))
        for g in range(self.G):
            seeds[g, :, g] = 1.0 / (t[:, g] + self.embed_offset)
        out = tangent_forward(self.layers, self.embed(t), seeds, tape=Tape())
        raw, draw = out.primal.value, out.tangent.value
        mG = self.m * self.G
        shape = (n, self.m, self.G)
        a = softplus(raw[:, :mG]).reshape(shape)
        da = (sigmoid(raw[:, :mG]) * draw[:, :, :mG]).reshape((self.G,) + shape)
        return a, raw[:, mG:], da, draw[:, :, mG:]

    # -- group statistics ------------------------------------------------------

    def _group_t(self, Sigma, d):
        if isinstance(Sigma, DiagonalCovariance):
            return Sigma.group_values(self.partition), Sigma
        t = np.asarray(Sigma, dtype=float)
        if t.shape[-1] == self.G:
            return t, None
        Sigma = as_covariance(t, d)
        return Sigma.group_values(self.partition), Sigma

    def _prepare(self, y, Sigma):
        y = np.asarray(y, dtype=float)
        t, cov = self._group_t(Sigma, y.shape[-1])
        yb = cov.to_basis(y) if cov is not None else y
        r2 = self.partition.reduce(yb * yb)
        return yb, t, r2, cov

    def component_energies(self, r2, t):
        a, b = self.coefficients(t)
        return np.einsum("...ig,...g->...i", a, r2) + b, a, b

    # -- interface ---------------------------------------------------------------

    def energy(self, y, Sigma):
        _, t, r2, _ = self._prepare(y, Sigma)
        E, _, _ = self.component_energies(r2, t)
        return -logsumexp(-E, axis=-1)

    def energy_groups(self, y, t):
        """Energy with per-sample group variances ``t`` (..., G) in the native basis."""
        y = np.asarray(y, dtype=float)
        E, _, _ = self.component_energies(self.partition.reduce(y * y), t)
        return -logsumexp(-E, axis=-1)

    def responsibilities(self, r2, t):
        E, a, b = self.component_energies(r2, t)
        return softmax(-E, axis=-1), a

    def grad_input(self, y, Sigma):
        yb, t, r2, cov = self._prepare(y, Sigma)
        p, a = self.responsibilities(r2, t)
        abar = np.einsum("...i,...ig->...g", p, a)
        g = 2.0 * self.partition.expand(abar) * yb
        return cov.from_basis(g) if cov is not None else g

    def grad_cov(self, y, Sigma, partition=None):
        """dU/dt_g for the model's own groups.

        The model is grouped, so per-coordinate requests (``partition=None``)
        split each group value evenly over its members.
        """
        _, t, r2, _ = self._prepare(y, Sigma)
        batch = r2.shape[:-1]
        r2f = r2.reshape(-1, self.G)
        tf = np.broadcast_to(t, batch + (self.G,)).reshape(-1, self.G)
        a, b, da, db = self.coefficient_tangents(tf)
        E = np.einsum("nig,ng->ni", a, r2f) + b
        p = softmax(-E, axis=-1)
        dE = np.einsum("knig,ng->kni", da, r2f) + db
        gc = np.einsum("ni,kni->nk", p, dE).reshape(batch + (self.G,))
        if partition is None:
            return self.partition.expand(gc / self.partition.sizes)
        if partition is self.partition or _same_partition(partition, self.partition):
            return gc
        return partition.reduce(self.partition.expand(gc / self.partition.sizes))

    def laplacian_groups(self, y, Sigma):
        """Per-group sums of d^2U/dy_j^2 and (dU/dy_j)^2, in closed form."""
        yb, t, r2, _ = self._prepare(y, Sigma)
        p, a = self.responsibilities(r2, t)
        sizes = self.partition.sizes
        # d^2U/dy_j^2 = sum_i p_i 2a_ig - Var_p(2 a_ig y_j); summing over j in g
        mean_a = np.einsum("...i,...ig->...g", p, a)
        mean_a2 = np.einsum("...i,...ig->...g", p, a * a)
        second = 2.0 * mean_a * sizes - 4.0 * (mean_a2 - mean_a**2) * r2
        grad_sq = 4.0 * mean_a**2 * r2
        return second, grad_sq

    # -- persistence -------------------------------------------------------------

    def to_record(self, metadata=None):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "quadratic_mixture",
            "m": self.m,
            "hidden": self.hidden,
            "depth": self.depth,
            "embed_offset": self.embed_offset,
            "partition": self.partition.to_record(),
            "layer_shapes": self.layer_shapes(),
            "params": self.flat_params().tolist(),
            "metadata": metadata or {},
        }

    @classmethod
    def from_record(cls, rec):
        if rec.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {rec.get('format_version')!r}")
        model = cls(GroupPartition(tuple(rec["partition"])), rec["m"], rec["hidden"],
                    rec["depth"], rec["embed_offset"], rng=0)
        if [tuple(s) for s in rec["layer_shapes"]] != model.layer_shapes():
            raise ValueError("checkpoint layer shapes do not match the architecture")
        model.set_flat_params(rec["params"])
        return model


def _same_partition(p, q):
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p.groups, q.groups))
