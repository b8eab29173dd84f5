"""Ground-truth density maps from point annotations, and annotation noise.

Points are ``(x, y)`` with ``x`` the column and ``y`` the row coordinate, in
pixels. Pixel ``(row h, col w)`` has its centre at ``(x=w, y=h)``.
"""
from __future__ import annotations

import csv
import math
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .kernels import MASS_TOLERANCE

DMAP_MAGIC = b"DMAPf32\n"


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class PointAnnotations:
    points: np.ndarray  # (n, 2) float, columns (x, y)
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        h, w = (int(v) for v in self.image_size)
        if h < 1 or w < 1:
            raise ValueError("image_size must be positive")
        object.__setattr__(self, "image_size", (h, w))

    def __len__(self):
        return len(self.points)

    def check_bounds(self):
        h, w = self.image_size
        x, y = self.points[:, 0], self.points[:, 1]
        bad = (x < 0) | (x >= w) | (y < 0) | (y >= h) | ~np.isfinite(x) | ~np.isfinite(y)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise OutOfBoundsError(
                f"point {i} at {tuple(self.points[i])} outside image of size {self.image_size}"
            )


@dataclass(frozen=True)
class DensityMap:
    values: np.ndarray
    beta: float

    @property
    def count(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class NoiseMoments:
    mean_map: np.ndarray
    var_map: np.ndarray
    gamma: float
    delta: float
    eps_std: float
    trials: int | None = None

    def standard_error(self) -> np.ndarray:
        """Standard error of a Monte-Carlo mean map."""
        if not self.trials:
            raise ValueError("standard error is only defined for Monte-Carlo moments")
        return np.sqrt(self.var_map / self.trials)


def support_radius(variance: float) -> int:
    return max(1, math.ceil(3.0 * math.sqrt(variance) - 1e-12))


def _splat(points, image_size, variance, scale=1.0, radius=None, out=None):
    """Accumulate ``scale * N(p; point, variance * I)`` into a map.

    Each kernel is evaluated only on the ``(2*radius + 1)**2`` pixels around
    the rounded point; pixels falling outside the image are dropped.
    """
    h, w = image_size
    if out is None:
        out = np.zeros((h, w), dtype=float)
    if radius is None:
        radius = support_radius(variance)
    norm = scale / (2.0 * math.pi * variance)
    for x, y in np.asarray(points, dtype=float).reshape(-1, 2):
        cx, cy = math.floor(x + 0.5), math.floor(y + 0.5)
        r0, r1 = max(cy - radius, 0), min(cy + radius + 1, h)
        c0, c1 = max(cx - radius, 0), min(cx + radius + 1, w)
        if r0 >= r1 or c0 >= c1:
            continue
        gy = np.exp(-((np.arange(r0, r1) - y) ** 2) / (2.0 * variance))
        gx = np.exp(-((np.arange(c0, c1) - x) ** 2) / (2.0 * variance))
        out[r0:r1, c0:c1] += norm * np.outer(gy, gx)
    return out


def generate_density_map(ann: PointAnnotations, beta: float) -> DensityMap:
    """Sum of isotropic Gaussians ``N(p; point, beta * I)`` at pixel centres."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    ann.check_bounds()
    return DensityMap(_splat(ann.points, ann.image_size, beta), float(beta))


def boundary_mass_loss(ann: PointAnnotations, beta: float) -> float:
    """Analytic Gaussian mass falling outside the image domain.

    The domain is ``[-0.5, W - 0.5] x [-0.5, H - 0.5]``, i.e. the union of
    pixel cells.
    """
    h, w = ann.image_size
    s = math.sqrt(beta)
    x, y = ann.points[:, 0], ann.points[:, 1]
    px = ndtr((w - 0.5 - x) / s) - ndtr((-0.5 - x) / s)
    py = ndtr((h - 0.5 - y) / s) - ndtr((-0.5 - y) / s)
    return float(np.sum(1.0 - px * py))


def mass_bound(ann: PointAnnotations, beta: float) -> float:
    """Allowed ``|sum(density) - N|``: 1% of N plus the boundary loss."""
    return MASS_TOLERANCE * len(ann) + boundary_mass_loss(ann, beta)


def perturb_annotations(
    ann: PointAnnotations, radius: float, rng_seed: int = 0, mode: str = "euclidean"
) -> PointAnnotations:
    """Move every point by a random displacement of length at most ``radius``.

    ``mode="euclidean"`` draws a uniform direction and a magnitude uniform in
    ``[0, radius]``; ``mode="axis"`` draws each coordinate offset uniformly in
    ``[-radius, radius]``. Results are clamped into the image.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0 or len(ann) == 0:
        return PointAnnotations(ann.points.copy(), ann.image_size)
    rng = np.random.default_rng(rng_seed)
    n = len(ann)
    if mode == "euclidean":
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        mag = rng.uniform(0.0, radius, size=n)
        delta = np.stack([mag * np.cos(theta), mag * np.sin(theta)], axis=1)
    elif mode == "axis":
        delta = rng.uniform(-radius, radius, size=(n, 2))
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    h, w = ann.image_size
    pts = ann.points + delta
    pts[:, 0] = np.clip(pts[:, 0], 0.0, np.nextafter(w, 0))
    pts[:, 1] = np.clip(pts[:, 1], 0.0, np.nextafter(h, 0))
    return PointAnnotations(pts, ann.image_size)


def analytic_noise_moments(ann: PointAnnotations, beta: float, eps_std: float) -> NoiseMoments:
    """Closed-form mean and variance of the density under Gaussian label error.

    With true centres ``D_i = labelled_i - eps_i`` and ``eps_i ~ N(0, s^2 I)``
    independent, each term has mean ``N(p; labelled_i, (beta + s^2) I)`` and
    second moment ``1/(2 pi gamma) N(p; labelled_i, delta I)`` with
    ``gamma = 2 beta`` and ``delta = beta/2 + s^2``.
    """
    if eps_std < 0:
        raise ValueError("eps_std must be non-negative")
    if not beta > 0:
        raise ValueError("beta must be positive")
    gamma = 2.0 * beta
    s2 = float(eps_std) ** 2
    delta = beta / 2.0 + s2
    mean_var = beta + s2
    mean_map = _splat(ann.points, ann.image_size, mean_var)
    if eps_std == 0:
        var_map = np.zeros_like(mean_map)
    else:
        radius = support_radius(mean_var)
        second = _splat(
            ann.points, ann.image_size, delta, scale=1.0 / (2.0 * math.pi * gamma), radius=radius
        )
        mean_sq = np.zeros_like(mean_map)
        for p in ann.points:
            m = _splat(p[None], ann.image_size, mean_var, radius=radius)
            mean_sq += m * m
        var_map = np.maximum(second - mean_sq, 0.0)
    return NoiseMoments(mean_map, var_map, gamma, delta, float(eps_std))


def monte_carlo_noise_moments(
    ann: PointAnnotations,
    beta: float,
    eps_std: float,
    trials: int,
    rng_seed: int = 0,
    truncate: bool = False,
) -> NoiseMoments:
    """Empirical pointwise mean and variance over ``trials`` noisy regenerations.

    By default every kernel is evaluated over the whole image, which is the
    model the closed form describes; ``truncate=True`` reproduces the 3-sigma
    windows of :func:`generate_density_map` instead.
    """
    if trials < 2:
        raise ValueError("trials must be >= 2")
    rng = np.random.default_rng(rng_seed)
    h, w = ann.image_size
    radius = None if truncate else h + w
    total = np.zeros((h, w))
    total_sq = np.zeros((h, w))
    for _ in range(trials):
        eps = rng.normal(0.0, eps_std, size=ann.points.shape) if eps_std > 0 else 0.0
        y = _splat(ann.points - eps, ann.image_size, beta, radius=radius)
        total += y
        total_sq += y * y
    mean = total / trials
    if eps_std == 0:
        var = np.zeros_like(mean)
    else:
        var = np.maximum((total_sq - trials * mean * mean) / (trials - 1), 0.0)
    return NoiseMoments(mean, var, 2.0 * beta, beta / 2.0 + eps_std**2, float(eps_std), trials)


def support_mask(ann: PointAnnotations, variance: float) -> np.ndarray:
    """Pixels within three standard deviations of any annotation."""
    h, w = ann.image_size
    rows, cols = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    limit = 9.0 * variance
    for x, y in ann.points:
        mask |= (cols - x) ** 2 + (rows - y) ** 2 <= limit
    return mask


def moment_agreement(
    mc: NoiseMoments, analytic: NoiseMoments, ann: PointAnnotations, beta: float, n_se: float = 3.0
) -> float:
    """Fraction of support pixels where the two mean maps differ by at most
    ``n_se`` Monte-Carlo standard errors.

    The support is the 3-sigma disc of the noisy mean around each point;
    beyond it the per-pixel sample mean is too skewed for a CLT bound.
    """
    mask = support_mask(ann, beta + analytic.eps_std**2)
    diff = np.abs(mc.mean_map - analytic.mean_map)[mask]
    return float(np.mean(diff <= n_se * mc.standard_error()[mask]))


# -- file formats -----------------------------------------------------------

def write_dmap(path, values) -> None:
    """Write a 2D map as ``DMAPf32\\n`` + u32 H + u32 W + float32 data (LE)."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError("only 2D maps can be written")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(DMAP_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != DMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:8]!r}")
    h, w = struct.unpack("<II", data[8:16])
    body = data[16:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {4 * h * w} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def write_annotations_csv(path, annotations: dict[str, np.ndarray]) -> None:
    """Write ``image_id,x,y`` rows; floats with 9 significant digits."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_id", "x", "y"])
        for image_id, pts in annotations.items():
            for x, y in np.asarray(pts, dtype=float).reshape(-1, 2):
                writer.writerow([image_id, f"{x:.9g}", f"{y:.9g}"])


def read_annotations_csv(path) -> dict[str, np.ndarray]:
    groups = defaultdict(list)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["image_id", "x", "y"]:
            raise ValueError(f"{path}: expected header image_id,x,y, got {reader.fieldnames}")
        for row in reader:
            groups[row["image_id"]].append((float(row["x"]), float(row["y"])))
    return {k: np.array(v, dtype=float).reshape(-1, 2) for k, v in groups.items()}
