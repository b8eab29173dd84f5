"""PCA selection of a few representative Gaussians from a sampled kernel bank."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .kernels import (
    SIGMA_FLOOR,
    Covariance2,
    KernelBank,
    KernelSpec,
    kernel_inner_product,
    make_gaussian_kernel,
)

EIGEN_TOL = 1e-10


@dataclass(frozen=True)
class LowRankBasis:
    """K selected components of a kernel bank.

    ``grids[0]`` is the (unit-norm) bank mean when ``has_mean`` is set; the
    remaining grids are the principal directions, whose variances are
    ``eigenvalues``. ``covariances`` holds one moment-matched Gaussian per grid.
    """

    radius: int
    grids: np.ndarray
    eigenvalues: np.ndarray
    covariances: tuple[Covariance2, ...]
    logits: np.ndarray
    has_mean: bool = True

    @property
    def k(self) -> int:
        return len(self.covariances)

    @property
    def fused_weights(self) -> np.ndarray:
        return softmax_normalize(self.logits)

    @property
    def eigenvectors(self) -> np.ndarray:
        """Flattened principal directions, one per row."""
        start = 1 if self.has_mean else 0
        return self.grids[start:].reshape(len(self.grids) - start, -1)

    def to_dict(self) -> dict:
        return {
            "radius": self.radius,
            "has_mean": self.has_mean,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "covariances": [[c.xx, c.yy, c.xy] for c in self.covariances],
            "logits": [float(v) for v in self.logits],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LowRankBasis":
        """Rebuild from :meth:`to_dict`; grids become the matched Gaussians."""
        covs = tuple(Covariance2(*c) for c in d["covariances"])
        r = int(d["radius"])
        grids = np.stack([make_gaussian_kernel(KernelSpec((0, 0), c, r)).weights for c in covs])
        return cls(
            radius=r,
            grids=grids,
            eigenvalues=np.asarray(d["eigenvalues"], dtype=float),
            covariances=covs,
            logits=np.asarray(d["logits"], dtype=float),
            has_mean=bool(d.get("has_mean", True)),
        )


def softmax_normalize(logits) -> np.ndarray:
    w = np.asarray(logits, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("logits must be a non-empty vector")
    if not np.all(np.isfinite(w)):
        raise ValueError("logits must be finite")
    e = np.exp(w - w.max())
    return e / e.sum()


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def match_gaussian(grid: np.ndarray) -> Covariance2:
    """Axis-aligned Gaussian with the second moments of ``|grid|``."""
    g = np.abs(np.asarray(grid, dtype=float))
    r = (g.shape[0] - 1) // 2
    ax = np.arange(-r, r + 1, dtype=float)
    total = g.sum()
    floor = SIGMA_FLOOR**2
    if total <= 0:
        return Covariance2(floor, floor)
    w0 = g.sum(axis=1) / total
    w1 = g.sum(axis=0) / total
    m0, m1 = w0 @ ax, w1 @ ax
    v0 = w0 @ (ax - m0) ** 2
    v1 = w1 @ (ax - m1) ** 2
    return Covariance2(max(v0, floor), max(v1, floor))


def pca_select(bank: KernelBank, k_max: int, eigen_tol: float = EIGEN_TOL) -> LowRankBasis:
    """Keep the bank mean plus the leading principal directions.

    At most ``k_max`` components are returned in total; principal directions
    whose variance is not above ``eigen_tol`` times the largest are dropped.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if len(bank) < k_max:
        raise ValueError(f"bank has {len(bank)} kernels, fewer than k_max={k_max}")
    x = bank.matrix()
    n, d = x.shape
    size = 2 * bank.radius + 1
    mean = x.mean(axis=0)
    mean_norm = float(np.linalg.norm(mean))
    has_mean = mean_norm > eigen_tol

    if n >= 2:
        # singular values of the centred data give small eigenvalues to high
        # relative accuracy, unlike an eigensolver on the covariance matrix
        _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
        eig = s**2 / (n - 1)
    else:
        eig, vt = np.zeros(0), np.zeros((0, d))
    # centring a bank of identical kernels leaves rounding residue of order
    # eps * |mean|; variances at that level are noise, not directions
    noise = (64.0 * np.finfo(float).eps * mean_norm) ** 2
    keep = 0
    if eig.size and eig[0] > noise:
        keep = int(np.sum(eig > max(eigen_tol * eig[0], noise)))
    keep = min(keep, k_max - int(has_mean))

    grids = []
    if has_mean:
        grids.append(mean / mean_norm)
    grids.extend(_fix_sign(vt[i]) for i in range(keep))
    if not grids:
        raise ValueError("bank has neither a non-zero mean nor any variance")
    grids = np.stack(grids).reshape(-1, size, size)
    covs = tuple(match_gaussian(g) for g in grids)
    basis = LowRankBasis(
        radius=bank.radius,
        grids=grids,
        eigenvalues=eig[:keep].copy(),
        covariances=covs,
        logits=np.zeros(len(covs)),
        has_mean=has_mean,
    )
    return init_weights(basis, bank.radius)


def init_weights(basis: LowRankBasis, grid_radius: int) -> LowRankBasis:
    """Logit of each component = <G(cov_k), G(identity)> on the same grid."""
    if basis.k == 0:
        raise ValueError("basis is empty")
    ref = make_gaussian_kernel(KernelSpec((0, 0), Covariance2(1.0, 1.0), grid_radius))
    logits = np.array(
        [
            kernel_inner_product(make_gaussian_kernel(KernelSpec((0, 0), c, grid_radius)), ref)
            for c in basis.covariances
        ]
    )
    return replace(basis, logits=logits)


def basis_to_json(basis: LowRankBasis) -> str:
    return json.dumps(basis.to_dict(), indent=2)


def basis_from_json(text: str) -> LowRankBasis:
    return LowRankBasis.from_dict(json.loads(text))


def reconstruction_error(vectors: np.ndarray, basis_rows: np.ndarray, center=None) -> np.ndarray:
    """Per-row squared residual after projecting onto an orthonormal row basis."""
    v = np.asarray(vectors, dtype=float)
    if center is not None:
        v = v - center
    b = np.asarray(basis_rows, dtype=float).reshape(-1, v.shape[1])
    resid = v - (v @ b.T) @ b
    return np.einsum("ij,ij->i", resid, resid)


def isotropic_sigma(cov: Covariance2) -> float:
    """Geometric-mean standard deviation of an axis-aligned covariance."""
    return math.sqrt(math.sqrt(cov.xx * cov.yy))
