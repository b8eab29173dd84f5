"""Discrete 2D Gaussian kernels, random kernel banks and grid inner products.

Grids are indexed ``[i, j]`` with ``i`` along axis 0 (rows) and ``j`` along
axis 1 (columns); the centre cell of a ``(2r+1) x (2r+1)`` grid is offset
``(0, 0)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SIGMA_FLOOR = 0.05
MASS_TOLERANCE = 0.01


class InvalidCovarianceError(ValueError):
    pass


class EmptyBankError(ValueError):
    pass


class GridShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Covariance2:
    """Symmetric 2x2 covariance in pixels squared."""

    xx: float
    yy: float
    xy: float = 0.0

    def __post_init__(self):
        if not self.is_spd():
            raise InvalidCovarianceError(
                f"covariance ({self.xx}, {self.yy}, {self.xy}) is not positive definite"
            )

    def is_spd(self) -> bool:
        vals = (self.xx, self.yy, self.xy)
        if not all(math.isfinite(v) for v in vals):
            return False
        return self.xx > 0 and self.yy > 0 and self.xx * self.yy - self.xy**2 > 0

    @classmethod
    def isotropic(cls, variance: float) -> "Covariance2":
        return cls(variance, variance, 0.0)

    @classmethod
    def from_sigmas(cls, sigma0: float, sigma1: float) -> "Covariance2":
        return cls(sigma0 * sigma0, sigma1 * sigma1, 0.0)

    @property
    def det(self) -> float:
        return self.xx * self.yy - self.xy**2

    @property
    def sigma_max(self) -> float:
        return math.sqrt(max(self.xx, self.yy))

    def matrix(self) -> np.ndarray:
        return np.array([[self.xx, self.xy], [self.xy, self.yy]], dtype=float)


def support_radius_for(cov: Covariance2) -> int:
    """Default half-width: ``max(1, ceil(3 * sigma_max))``."""
    return max(1, math.ceil(3.0 * cov.sigma_max - 1e-12))


@dataclass(frozen=True)
class KernelSpec:
    mean: tuple[float, float]
    cov: Covariance2
    support_radius: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mean", (float(self.mean[0]), float(self.mean[1])))
        if self.support_radius is None:
            object.__setattr__(self, "support_radius", support_radius_for(self.cov))
        elif int(self.support_radius) < 1:
            raise ValueError("support_radius must be >= 1")
        else:
            object.__setattr__(self, "support_radius", int(self.support_radius))


@dataclass(frozen=True)
class DiscreteKernel:
    weights: np.ndarray
    origin: tuple[int, int]

    @property
    def radius(self) -> int:
        return self.origin[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass(frozen=True)
class KernelBank:
    kernels: list[DiscreteKernel]
    specs: list[KernelSpec] = field(default_factory=list)

    def __post_init__(self):
        if not self.kernels:
            raise EmptyBankError("kernel bank is empty")
        shapes = {k.shape for k in self.kernels}
        if len(shapes) != 1:
            raise GridShapeError(f"bank grids differ in shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.kernels)

    @property
    def radius(self) -> int:
        return self.kernels[0].radius

    def matrix(self) -> np.ndarray:
        """Bank as an ``(n, (2r+1)**2)`` array of flattened grids."""
        return np.stack([k.weights.ravel() for k in self.kernels])


def gaussian_density(offsets0, offsets1, mean, cov: Covariance2) -> np.ndarray:
    """Bivariate normal pdf evaluated on broadcastable offset arrays."""
    d0 = np.asarray(offsets0, dtype=float) - mean[0]
    d1 = np.asarray(offsets1, dtype=float) - mean[1]
    det = cov.det
    # inverse of [[xx, xy], [xy, yy]]
    q = (cov.yy * d0 * d0 - 2.0 * cov.xy * d0 * d1 + cov.xx * d1 * d1) / det
    return np.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(det))


def make_gaussian_kernel(spec: KernelSpec) -> DiscreteKernel:
    """Sample ``N(x; mean, cov)`` on the integer offsets of the support window.

    Weights are not renormalised, so truncation mass is lost on purpose.
    """
    if not spec.cov.is_spd():
        raise InvalidCovarianceError("covariance is not positive definite")
    r = spec.support_radius
    ax = np.arange(-r, r + 1, dtype=float)
    w = gaussian_density(ax[:, None], ax[None, :], spec.mean, spec.cov)
    return DiscreteKernel(weights=w, origin=(r, r))


def sample_kernel_bank(
    count: int,
    base_sigma: float,
    sigma_perturb_range: tuple[float, float] = (-0.5, 0.5),
    rng_seed: int = 0,
    support_radius: int | None = None,
) -> KernelBank:
    """Draw ``count`` zero-mean axis-aligned kernels.

    Each axis gets standard deviation ``base_sigma + u`` with ``u`` uniform in
    ``sigma_perturb_range``, floored at ``SIGMA_FLOOR``. All kernels share one
    grid, sized by the 3-sigma rule for the largest possible sigma.
    """
    if count <= 0:
        raise EmptyBankError("count must be positive")
    lo, hi = float(sigma_perturb_range[0]), float(sigma_perturb_range[1])
    if lo > hi:
        raise ValueError("sigma_perturb_range must be (low, high) with low <= high")
    if base_sigma + lo <= SIGMA_FLOOR:
        raise ValueError(
            f"base_sigma + range low must exceed the floor {SIGMA_FLOOR}"
        )
    rng = np.random.default_rng(rng_seed)
    sigmas = np.maximum(base_sigma + rng.uniform(lo, hi, size=(count, 2)), SIGMA_FLOOR)
    if support_radius is None:
        support_radius = max(1, math.ceil(3.0 * (base_sigma + hi) - 1e-12))
    specs = [
        KernelSpec((0.0, 0.0), Covariance2.from_sigmas(s0, s1), support_radius)
        for s0, s1 in sigmas
    ]
    return KernelBank([make_gaussian_kernel(s) for s in specs], specs)


def kernel_inner_product(a, b) -> float:
    """Sum of elementwise products of two equally shaped grids."""
    wa = a.weights if isinstance(a, DiscreteKernel) else np.asarray(a, dtype=float)
    wb = b.weights if isinstance(b, DiscreteKernel) else np.asarray(b, dtype=float)
    if wa.shape != wb.shape:
        raise GridShapeError(f"grid shapes differ: {wa.shape} vs {wb.shape}")
    return float(np.sum(wa * wb))
