"""Diagonal covariance algebra, degradation-derived families and schedules.

Covariances are diagonal either in pixel space (``SPATIAL``) or in the
orthonormal type-II DCT basis (``SPECTRAL``).  Every variance lives in
``[phi_min, phi_max]``; a covariance "at the floor" (all entries equal to
``phi_min``) stands in for the noiseless case.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

PHI_MIN = 1e-9
PHI_MAX = 1e3


class CovarianceError(ValueError):
    """Invalid covariance parameters."""


class DimensionError(CovarianceError):
    pass


class SingularOperatorError(CovarianceError):
    pass


class ScheduleError(CovarianceError):
    pass


class Domain(str, enum.Enum):
    SPATIAL = "spatial"
    SPECTRAL = "spectral"


def _as_dims(dims, d):
    if dims is None:
        return (d,)
    dims = tuple(int(n) for n in dims)
    if int(np.prod(dims)) != d:
        raise DimensionError(f"dims {dims} do not match length {d}")
    return dims


def to_spectral(v, dims):
    """Orthonormal DCT-II of the trailing signal axis (reshaped to ``dims``)."""
    v = np.asarray(v, dtype=float)
    lead = v.shape[:-1]
    axes = tuple(range(-len(dims), 0))
    out = scipy.fft.dctn(v.reshape(lead + tuple(dims)), type=2, norm="ortho", axes=axes)
    return out.reshape(v.shape)


def from_spectral(v, dims):
    v = np.asarray(v, dtype=float)
    lead = v.shape[:-1]
    axes = tuple(range(-len(dims), 0))
    out = scipy.fft.idctn(v.reshape(lead + tuple(dims)), type=2, norm="ortho", axes=axes)
    return out.reshape(v.shape)


@dataclass(frozen=True)
class DiagonalCovariance:
    """Per-coordinate variances in a spatial or spectral basis.

    ``phi`` is clamped into ``[phi_min, phi_max]`` only by the factory
    functions; direct construction validates instead.
    """

    phi: np.ndarray
    domain: Domain = Domain.SPATIAL
    dims: tuple | None = None
    phi_min: float = PHI_MIN
    phi_max: float = PHI_MAX

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float).reshape(-1)
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "domain", Domain(self.domain))
        object.__setattr__(self, "dims", _as_dims(self.dims, phi.size))
        if not np.all(np.isfinite(phi)):
            raise CovarianceError("phi must be finite")
        # tolerate round-off from clamped arithmetic
        if np.any(phi < self.phi_min * (1 - 1e-12)) or np.any(phi > self.phi_max * (1 + 1e-12)):
            raise CovarianceError(
                f"phi outside [{self.phi_min:g}, {self.phi_max:g}]: "
                f"min {phi.min():g}, max {phi.max():g}"
            )

    @classmethod
    def clamped(cls, phi, domain=Domain.SPATIAL, dims=None, phi_min=PHI_MIN, phi_max=PHI_MAX):
        phi = np.clip(np.asarray(phi, dtype=float), phi_min, phi_max)
        return cls(phi, domain, dims, phi_min, phi_max)

    @classmethod
    def floor_like(cls, other: "DiagonalCovariance"):
        return cls(np.full(other.d, other.phi_min), other.domain, other.dims,
                   other.phi_min, other.phi_max)

    @property
    def d(self):
        return self.phi.size

    def replace(self, phi):
        return DiagonalCovariance.clamped(phi, self.domain, self.dims, self.phi_min, self.phi_max)

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.d:
            raise DimensionError(f"vector length {v.shape[-1]} != covariance dimension {self.d}")
        return v

    def to_basis(self, v):
        """Coordinates of ``v`` in the basis where this covariance is diagonal."""
        v = self._check(v)
        return to_spectral(v, self.dims) if self.domain is Domain.SPECTRAL else v

    def from_basis(self, v):
        v = self._check(v)
        return from_spectral(v, self.dims) if self.domain is Domain.SPECTRAL else v

    def _scale(self, v, s):
        if self.domain is Domain.SPECTRAL:
            return from_spectral(to_spectral(self._check(v), self.dims) * s, self.dims)
        return self._check(v) * s

    def apply_sqrt(self, v):
        return self._scale(v, np.sqrt(self.phi))

    def apply(self, v):
        return self._scale(v, self.phi)

    def apply_inv(self, v):
        return self._scale(v, 1.0 / self.phi)

    def logdet(self):
        return float(np.sum(np.log(self.phi)))

    def dense(self):
        """Explicit d x d matrix (small problems and tests only)."""
        if self.domain is Domain.SPATIAL:
            return np.diag(self.phi)
        basis = from_spectral(np.eye(self.d), self.dims)  # rows: basis vectors
        return basis.T @ (self.phi[:, None] * basis)

    def is_floor(self):
        return bool(np.all(self.phi <= self.phi_min * (1 + 1e-12)))

    def group_values(self, partition: "GroupPartition"):
        """Shared variance of each group; raises if a group is not constant."""
        vals = np.empty(len(partition))
        for g, idx in enumerate(partition.groups):
            v = self.phi[idx]
            if np.ptp(v) > 1e-12 * max(abs(v[0]), 1e-300):
                raise CovarianceError(f"phi varies within group {g}")
            vals[g] = v[0]
        return vals


@dataclass(frozen=True)
class GroupPartition:
    """Disjoint, covering, non-empty index groups over ``range(d)``."""

    groups: tuple
    d: int = field(init=False)

    def __post_init__(self):
        groups = tuple(np.asarray(g, dtype=int).reshape(-1) for g in self.groups)
        if not groups or any(g.size == 0 for g in groups):
            raise CovarianceError("partition groups must be non-empty")
        allidx = np.concatenate(groups)
        d = allidx.size
        if not np.array_equal(np.sort(allidx), np.arange(d)):
            raise CovarianceError("groups must be disjoint and cover 0..d-1")
        for g in groups:
            g.setflags(write=False)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "d", d)

    def __len__(self):
        return len(self.groups)

    @property
    def sizes(self):
        return np.array([g.size for g in self.groups])

    @property
    def labels(self):
        """Group id of every coordinate."""
        lab = np.empty(self.d, dtype=int)
        for g, idx in enumerate(self.groups):
            lab[idx] = g
        return lab

    def expand(self, values):
        """Broadcast per-group values (..., G) to per-coordinate (..., d)."""
        values = np.asarray(values, dtype=float)
        return values[..., self.labels]

    def reduce(self, per_coord):
        """Sum per-coordinate values (..., d) within each group -> (..., G)."""
        per_coord = np.asarray(per_coord, dtype=float)
        return np.stack([per_coord[..., idx].sum(axis=-1) for idx in self.groups], axis=-1)

    @classmethod
    def halves(cls, d, rng=None):
        """Two equal groups; a random split when ``rng`` is given."""
        perm = np.arange(d) if rng is None else rng.permutation(d)
        return cls((np.sort(perm[: d // 2]), np.sort(perm[d // 2:])))

    @classmethod
    def singletons(cls, d):
        return cls(tuple([i] for i in range(d)))

    def to_record(self):
        return [g.tolist() for g in self.groups]


def from_linear_operator(h_diag, sigma, eps=0.0, domain=Domain.SPATIAL, dims=None,
                         phi_min=PHI_MIN, phi_max=PHI_MAX):
    """Colored-noise covariance equivalent to ``y = H x + sigma v`` for diagonal H.

    The variance is ``sigma**2 / max(h, eps)**2`` per coordinate, clamped to
    the covariance bounds, so the nullspace of H receives noise ``phi_max``.
    """
    h = np.asarray(h_diag, dtype=float)
    if sigma <= 0:
        raise CovarianceError("sigma must be positive")
    if eps < 0:
        raise CovarianceError("eps must be non-negative")
    if np.any(h < 0):
        raise CovarianceError("operator gains must be non-negative")
    g = np.maximum(h, eps)
    if np.any(g == 0):
        raise SingularOperatorError("operator has zero gain and no stabilizer (eps = 0)")
    return DiagonalCovariance.clamped(sigma**2 / g**2, domain, dims, phi_min, phi_max)


def box_slices(height, width, s):
    top, left = (height - s) // 2, (width - s) // 2
    return slice(top, top + s), slice(left, left + s)


def box_mask(height, width, s):
    if s < 0 or s > min(height, width):
        raise DimensionError(f"box size {s} does not fit a {height}x{width} image")
    m = np.zeros((height, width), dtype=bool)
    rs, cs = box_slices(height, width, s)
    m[rs, cs] = True
    return m.reshape(-1)


def make_box_covariance(height, width, s, sigma_in, sigma_out, phi_min=PHI_MIN, phi_max=PHI_MAX):
    """Variance ``sigma_in**2`` inside a centered s x s box, ``sigma_out**2`` outside."""
    if sigma_in <= 0 or sigma_out <= 0:
        raise CovarianceError("noise levels must be positive")
    inside = box_mask(height, width, s)
    phi = np.where(inside, sigma_in**2, sigma_out**2)
    return DiagonalCovariance.clamped(phi, Domain.SPATIAL, (height, width), phi_min, phi_max)


def make_half_mask_covariance(height, width, sigma_in, sigma_out, phi_min=PHI_MIN, phi_max=PHI_MAX):
    """Noise ``sigma_in`` on the right half of the image (half-mask inpainting)."""
    phi = np.full((height, width), sigma_out**2)
    phi[:, width // 2:] = sigma_in**2
    return DiagonalCovariance.clamped(phi.reshape(-1), Domain.SPATIAL, (height, width), phi_min, phi_max)


def patch_partition(height, width, b):
    if b <= 0 or height % b or width % b:
        raise DimensionError(f"patch size {b} does not divide {height}x{width}")
    ids = np.arange(height * width).reshape(height, width)
    groups = []
    for r in range(0, height, b):
        for c in range(0, width, b):
            groups.append(ids[r:r + b, c:c + b].reshape(-1))
    return GroupPartition(tuple(groups))


def make_patch_grouped_covariance(height, width, b, per_patch_variances,
                                  phi_min=PHI_MIN, phi_max=PHI_MAX):
    """One variance per b x b patch; patches in row-major order."""
    part = patch_partition(height, width, b)
    v = np.asarray(per_patch_variances, dtype=float).reshape(-1)
    if v.size != len(part):
        raise DimensionError(f"expected {len(part)} patch variances, got {v.size}")
    cov = DiagonalCovariance.clamped(part.expand(v), Domain.SPATIAL, (height, width), phi_min, phi_max)
    return cov, part


def gaussian_blur_gains(height, width, std):
    """DCT-domain gains of a symmetric Gaussian blur (reflective boundary)."""
    fy = np.arange(height) / (2.0 * height)
    fx = np.arange(width) / (2.0 * width)
    gy = np.exp(-2.0 * (np.pi * std * fy) ** 2)
    gx = np.exp(-2.0 * (np.pi * std * fx) ** 2)
    return np.outer(gy, gx).reshape(-1)


def make_blur_covariance(height, width, blur_std, sigma, eps=1e-3, phi_min=PHI_MIN, phi_max=PHI_MAX):
    gains = gaussian_blur_gains(height, width, blur_std)
    return from_linear_operator(gains, sigma, eps, Domain.SPECTRAL, (height, width), phi_min, phi_max)


def make_superres_covariance(height, width, factor, sigma, eps=1e-3, phi_min=PHI_MIN, phi_max=PHI_MAX):
    """Ideal low-pass approximation of x``factor`` downsampling, diagonal in the DCT basis."""
    keep = np.zeros((height, width))
    keep[: max(1, height // factor), : max(1, width // factor)] = 1.0
    return from_linear_operator(keep.reshape(-1), sigma, eps, Domain.SPECTRAL, (height, width),
                                phi_min, phi_max)


def sample_phi_prior(d, rng, phi_min=PHI_MIN, phi_max=PHI_MAX, partition=None, size=None,
                     domain=Domain.SPATIAL, dims=None):
    """Log-uniform variances on ``[phi_min, phi_max]``.

    With a ``partition`` one value is drawn per group and shared.  With
    ``size`` the raw array of shape ``(size, G or d)`` is returned instead of
    a covariance object (the training loop uses this form).
    """
    if not (0 < phi_min <= phi_max):
        raise CovarianceError("need 0 < phi_min <= phi_max")
    k = d if partition is None else len(partition)
    shape = (k,) if size is None else (size, k)
    lo, hi = np.log(phi_min), np.log(phi_max)
    vals = np.exp(rng.uniform(lo, hi, size=shape)) if hi > lo else np.full(shape, phi_min)
    vals = np.clip(vals, phi_min, phi_max)
    if size is not None:
        return vals
    phi = vals if partition is None else partition.expand(vals)
    return DiagonalCovariance(phi, domain, dims, phi_min=min(phi_min, PHI_MIN), phi_max=max(phi_max, PHI_MAX))


@dataclass(frozen=True)
class CovarianceSchedule:
    """Sequence ``[Sigma_T, ..., Sigma_0]`` with per-coordinate monotonicity."""

    steps: tuple

    def __post_init__(self):
        steps = tuple(self.steps)
        if len(steps) < 1:
            raise ScheduleError("empty schedule")
        first = steps[0]
        for s in steps:
            if s.domain is not first.domain or s.dims != first.dims:
                raise ScheduleError("schedule steps must share domain and dims")
        for a, b in zip(steps[:-1], steps[1:]):
            if np.any(b.phi > a.phi * (1 + 1e-12)):
                raise ScheduleError("schedule is not non-increasing")
        object.__setattr__(self, "steps", steps)

    @property
    def T(self):
        return len(self.steps) - 1

    def __len__(self):
        return len(self.steps)

    def __getitem__(self, i):
        return self.steps[i]

    def __iter__(self):
        return iter(self.steps)

    def phis(self):
        return np.stack([s.phi for s in self.steps])


def geometric_levels(begin, end, T):
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (begin > end > 0):
        raise ScheduleError("need begin > end > 0")
    k = np.arange(T + 1)  # k = T - t
    return begin * (end / begin) ** (k / T)


def geometric_schedule(begin, end, T, template: DiagonalCovariance):
    """Geometric schedule from variance ``begin`` down to ``end`` in ``T`` steps.

    Each coordinate follows ``min(template, level_t)``: coordinates already
    below a level keep their template value, and a template at or above
    ``begin`` gives exactly the geometric levels.  The last step is the
    floor ``phi_min`` everywhere.
    """
    levels = geometric_levels(begin, end, T)
    steps = [template.replace(np.minimum(template.phi, lv)) for lv in levels[:-1]]
    steps.append(DiagonalCovariance.floor_like(template))
    return CovarianceSchedule(tuple(steps))


def ordered_group_schedule(template: DiagonalCovariance, partition: GroupPartition, order,
                           begin, end, steps_per_group):
    """Release groups one after another: each listed group descends
    geometrically while later groups stay at their template value.

    Groups not listed in ``order`` are left at the template until the final
    floor step.
    """
    levels = geometric_levels(begin, end, steps_per_group)
    phi = template.phi.copy()
    steps = [template]
    for g in order:
        idx = partition.groups[g]
        start = phi[idx].copy()
        for lv in levels[1:]:
            phi[idx] = np.minimum(start, lv)
            steps.append(template.replace(phi))
    steps.append(DiagonalCovariance.floor_like(template))
    return CovarianceSchedule(tuple(steps))
