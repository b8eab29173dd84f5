"""Low-rank Gaussian convolution layer.

The layer filters every input channel with the same spatial operator

    F = sum_k softmax(logits)_k * T_{mu_k}[ sum_j G(0, Sigma_j) ]

where ``T_mu`` is a (bilinear, for fractional ``mu``) translation, and then
mixes channels with a dense ``C_out x C_in`` matrix plus bias. The fast path
convolves once with the summed zero-mean kernel and applies ``K`` shifts;
the two oracles materialise every translated kernel and convolve directly.

All convolutions are true convolutions, ``Y[p] = sum_q K[q] X[p - q]``, with
zero "same" padding.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sfft

from .kernels import (
    SIGMA_FLOOR,
    Covariance2,
    KernelSpec,
    gaussian_density,
)
from .lowrank import LowRankBasis, softmax_normalize

MAX_ORACLE_KERNELS = 256
MAX_LRA_K = 32
MAX_ORACLE_SIZE = 64


class OracleSizeError(ValueError):
    pass


class ShapeError(ValueError):
    pass


# -- parameter maps ----------------------------------------------------------

def sigma_from_param(theta):
    """``0.05 + softplus(theta)``."""
    theta = np.asarray(theta, dtype=float)
    return SIGMA_FLOOR + np.logaddexp(0.0, theta)


def param_from_sigma(sigma):
    excess = np.maximum(np.asarray(sigma, dtype=float) - SIGMA_FLOOR, 1e-6)
    # inverse softplus, stable for large arguments
    return excess + np.log(-np.expm1(-excess))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def mean_grid(k: int, spacing: float = 4.0, lattice: bool = False) -> np.ndarray:
    """``k`` translation offsets on a centred square grid, filled row-major.

    With ``lattice=True`` every offset is a whole multiple of ``spacing``;
    grids with an even side then sit half a step off centre.
    """
    cols = math.ceil(math.sqrt(k))
    rows = math.ceil(k / cols)
    idx = np.arange(k)
    r, c = idx // cols, idx % cols
    if lattice:
        return np.stack([(r - (rows - 1) // 2) * spacing, (c - (cols - 1) // 2) * spacing], axis=1).astype(float)
    return np.stack([(r - (rows - 1) / 2) * spacing, (c - (cols - 1) / 2) * spacing], axis=1)


# -- layer -------------------------------------------------------------------

@dataclass
class GaussConvLayer:
    means: np.ndarray  # (K, 2) translation offsets, axis order (row, col)
    sigma_params: np.ndarray  # (K,) unconstrained
    logits: np.ndarray  # (K,)
    mix: np.ndarray  # (C_out, C_in)
    bias: np.ndarray  # (C_out,)
    grid_radius: int
    aspect: np.ndarray | None = None  # (K, 2) per-axis sigma multipliers
    train_means: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        k = len(self.means)
        self.sigma_params = np.asarray(self.sigma_params, dtype=float).reshape(k)
        self.logits = np.asarray(self.logits, dtype=float).reshape(k)
        self.mix = np.atleast_2d(np.asarray(self.mix, dtype=float))
        self.bias = np.asarray(self.bias, dtype=float).reshape(self.mix.shape[0])
        if self.aspect is None:
            self.aspect = np.ones((k, 2))
        self.aspect = np.asarray(self.aspect, dtype=float).reshape(k, 2)
        self.grid_radius = int(self.grid_radius)
        if k < 1:
            raise ValueError("layer needs at least one kernel")
        if self.grid_radius < 1:
            raise ValueError("grid_radius must be >= 1")
        if np.any(np.abs(self.means) > self.grid_radius + 1e-12):
            raise ValueError("translation offsets must lie within grid_radius")
        if np.any(self.aspect <= 0):
            raise ValueError("aspect multipliers must be positive")

    @property
    def k(self) -> int:
        return len(self.means)

    @property
    def c_in(self) -> int:
        return self.mix.shape[1]

    @property
    def c_out(self) -> int:
        return self.mix.shape[0]

    @property
    def sigmas(self) -> np.ndarray:
        return sigma_from_param(self.sigma_params)

    @property
    def axis_sigmas(self) -> np.ndarray:
        """(K, 2) per-axis standard deviations."""
        return self.sigmas[:, None] * self.aspect

    @property
    def fused_weights(self) -> np.ndarray:
        return softmax_normalize(self.logits)

    @property
    def margin(self) -> int:
        return int(math.ceil(np.abs(self.means).max())) + 1

    def covariances(self) -> list[Covariance2]:
        return [Covariance2.from_sigmas(s0, s1) for s0, s1 in self.axis_sigmas]

    def param_names(self) -> list[str]:
        names = ["sigma_params", "logits", "mix", "bias"]
        if self.train_means:
            names.append("means")
        return names

    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in self.param_names())

    def copy(self) -> "GaussConvLayer":
        return replace(
            self,
            means=self.means.copy(),
            sigma_params=self.sigma_params.copy(),
            logits=self.logits.copy(),
            mix=self.mix.copy(),
            bias=self.bias.copy(),
            aspect=self.aspect.copy(),
            meta=dict(self.meta),
        )

    def kernel_grids(self) -> np.ndarray:
        """(K, 2r+1, 2r+1) zero-mean kernels ``G(0, Sigma_j)``."""
        r = self.grid_radius
        ax = np.arange(-r, r + 1, dtype=float)
        s = self.axis_sigmas
        g0 = np.exp(-(ax[None, :] ** 2) / (2 * s[:, :1] ** 2))
        g1 = np.exp(-(ax[None, :] ** 2) / (2 * s[:, 1:] ** 2))
        norm = 1.0 / (2 * math.pi * s[:, 0] * s[:, 1])
        return norm[:, None, None] * g0[:, :, None] * g1[:, None, :]

    def kernel_sigma_derivs(self, grids=None) -> np.ndarray:
        """d G(0, Sigma_j) / d sigma_j for each kernel, same shape as the grids."""
        if grids is None:
            grids = self.kernel_grids()
        r = self.grid_radius
        ax = np.arange(-r, r + 1, dtype=float)
        s = self.axis_sigmas
        q = ax[None, :, None] ** 2 / s[:, 0, None, None] ** 2 + ax[None, None, :] ** 2 / s[:, 1, None, None] ** 2
        return grids * (q - 2.0) / self.sigmas[:, None, None]

    @classmethod
    def from_basis(
        cls,
        basis: LowRankBasis,
        c_in: int,
        c_out: int,
        means=None,
        grid_radius: int | None = None,
        mean_spacing: float = 4.0,
        rng=None,
        train_means: bool = False,
    ) -> "GaussConvLayer":
        """Layer whose kernels are the basis' moment-matched Gaussians."""
        rng = np.random.default_rng(rng)
        k = basis.k
        if means is None:
            means = mean_grid(k, mean_spacing)
        means = np.asarray(means, dtype=float)
        sig0 = np.array([math.sqrt(c.xx) for c in basis.covariances])
        sig1 = np.array([math.sqrt(c.yy) for c in basis.covariances])
        sigma = np.maximum(np.sqrt(sig0 * sig1), SIGMA_FLOOR + 1e-6)
        aspect = np.stack([sig0, sig1], axis=1) / np.sqrt(sig0 * sig1)[:, None]
        if grid_radius is None:
            grid_radius = max(basis.radius, int(math.ceil(np.abs(means).max())))
        mix = rng.normal(0.0, math.sqrt(2.0 / c_in), size=(c_out, c_in))
        return cls(
            means=means,
            sigma_params=param_from_sigma(sigma),
            logits=basis.logits.copy(),
            mix=mix,
            bias=np.zeros(c_out),
            grid_radius=grid_radius,
            aspect=aspect,
            train_means=train_means,
            meta={"eigenvalues": [float(v) for v in basis.eigenvalues], "has_mean": basis.has_mean},
        )


@dataclass
class LayerGradients:
    d_input: np.ndarray
    d_logits: np.ndarray
    d_sigma_params: np.ndarray
    d_means: np.ndarray
    d_mix: np.ndarray
    d_bias: np.ndarray

    def for_param(self, name: str) -> np.ndarray:
        return getattr(self, "d_" + name)


# -- helpers -----------------------------------------------------------------

def _as_feature_map(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeError(f"feature map must be C x H x W, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature map contains non-finite values")
    return x


def _mix(y_pre, mix, bias):
    return np.einsum("oi,...ihw->...ohw", mix, y_pre) + bias[:, None, None]


def _pad_spatial(x, pad):
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)])


def _bilinear_taps(mu):
    """Integer floor and the four ``((i, j), weight)`` taps of a shift."""
    fl = np.floor(np.asarray(mu, dtype=float)).astype(int)
    t = np.asarray(mu, dtype=float) - fl
    w0 = (1.0 - t[0], t[0])
    w1 = (1.0 - t[1], t[1])
    return fl, w0, w1


def shift_bilinear(map_, mu) -> np.ndarray:
    """Translate a 2D map by ``mu`` (rows, cols) with bilinear weights.

    ``out[p] = sum_{i,j in {0,1}} a_ij * map[p - floor(mu) - (i, j)]``;
    reads outside the map are zero.
    """
    m = np.asarray(map_, dtype=float)
    if m.ndim != 2:
        raise ShapeError("shift_bilinear expects a 2D map")
    mu = np.asarray(mu, dtype=float).reshape(2)
    h, w = m.shape
    if np.any(np.abs(mu) > min(h, w) / 2):
        raise ValueError(f"shift {tuple(mu)} too large for a {h}x{w} map")
    if not np.any(mu):
        return m.copy()
    pad = int(math.ceil(np.abs(mu).max())) + 1
    ext = np.pad(m, pad)
    return _shift_from_ext(ext[None], mu, pad, h, w)[0]


def _shift_from_ext(ext, mu, margin, h, w):
    """Shifted ``(C, h, w)`` view computed from a map padded by ``margin``."""
    fl, w0, w1 = _bilinear_taps(mu)
    out = np.zeros(ext.shape[:-2] + (h, w))
    for i in (0, 1):
        for j in (0, 1):
            a = w0[i] * w1[j]
            if a == 0.0:
                continue
            r0 = margin - fl[0] - i
            c0 = margin - fl[1] - j
            out += a * ext[..., r0 : r0 + h, c0 : c0 + w]
    return out


# -- oracles -----------------------------------------------------------------

def window_kernel(mean, cov: Covariance2, support_radius: int, grid_radius: int) -> np.ndarray:
    """Materialise ``G(mean, cov)`` on a ``(2*grid_radius+1)**2`` grid.

    Only offsets within ``support_radius`` of the rounded mean are filled, so
    an integer mean gives exactly the zero-mean window translated by it.
    """
    r = grid_radius
    ax = np.arange(-r, r + 1, dtype=float)
    c0 = math.floor(mean[0] + 0.5)
    c1 = math.floor(mean[1] + 0.5)
    if abs(c0) + support_radius > r or abs(c1) + support_radius > r:
        raise ValueError("grid too small for the kernel window")
    grid = np.zeros((2 * r + 1, 2 * r + 1))
    rows = slice(r + c0 - support_radius, r + c0 + support_radius + 1)
    cols = slice(r + c1 - support_radius, r + c1 + support_radius + 1)
    grid[rows, cols] = gaussian_density(ax[rows, None], ax[None, cols], mean, cov)
    return grid


def direct_conv(x: np.ndarray, kernel: np.ndarray, crop: bool = False) -> np.ndarray:
    """Same-size zero-padded convolution in the spatial domain.

    Each kernel row becomes a banded (Toeplitz) matrix acting along the
    width, so the sum over taps runs as one matrix product per row. The
    kernel's centre cell is offset ``(0, 0)``. With ``crop=True`` all-zero
    kernel rows are skipped.
    """
    c, h, w = x.shape
    kh, kw = kernel.shape
    rh, rw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (rh, rh), (rw, rw)))
    # tap (a, b) is offset q = (a - rh, b - rw) and reads X[p - q]
    cols = np.arange(w)
    band = np.zeros((kh, w + 2 * rw, w))
    for b in range(kw):
        band[:, cols + kw - 1 - b, cols] = kernel[:, b][:, None]
    rows = [a for a in range(kh) if kernel[a].any()] if crop else range(kh)
    out = np.zeros_like(x)
    for a in rows:
        r0 = kh - 1 - a
        out += xp[:, r0 : r0 + h, :] @ band[a]
    return out


def _check_oracle_size(x, n, limit, what):
    if n > limit:
        raise OracleSizeError(f"{what}: {n} kernels exceeds the oracle limit {limit}")
    if x.shape[1] > MAX_ORACLE_SIZE or x.shape[2] > MAX_ORACLE_SIZE:
        raise OracleSizeError(
            f"{what}: {x.shape[1]}x{x.shape[2]} exceeds the oracle limit {MAX_ORACLE_SIZE}"
        )


def forward_massive_oracle(x, specs: list[KernelSpec], mix, bias, weights=None) -> np.ndarray:
    """Sum of ``N`` independent Gaussian convolutions, then channel mixing.

    Every kernel is materialised on the shared bounding grid that covers all
    ``N`` windows and convolved densely. ``weights`` optionally scales each
    kernel (default 1).
    """
    x = _as_feature_map(x)
    if not specs:
        raise ValueError("need at least one kernel spec")
    _check_oracle_size(x, len(specs), MAX_ORACLE_KERNELS, "massive oracle")
    mix = np.atleast_2d(np.asarray(mix, dtype=float))
    bias = np.asarray(bias, dtype=float)
    if weights is None:
        weights = np.ones(len(specs))
    grid_r = max(
        s.support_radius + max(abs(math.floor(s.mean[0] + 0.5)), abs(math.floor(s.mean[1] + 0.5)))
        for s in specs
    )
    y = np.zeros_like(x)
    for wgt, s in zip(weights, specs):
        kern = window_kernel(s.mean, s.cov, s.support_radius, grid_r)
        y += wgt * direct_conv(x, kern)
    return _mix(y, mix, bias)


def lra_kernels(layer: GaussConvLayer, subpixel: str = "exact"):
    """All ``K*K`` translated kernels ``G(mu_k, Sigma_j)`` with their weights.

    ``subpixel="exact"`` evaluates the Gaussian at the translated mean;
    ``"bilinear"`` instead shifts the zero-mean grid with
    :func:`shift_bilinear`, which is what the fast path computes.
    """
    r = layer.grid_radius
    big = r + layer.margin
    zero_mean = layer.kernel_grids()
    covs = layer.covariances()
    fused = layer.fused_weights
    out = []
    for k in range(layer.k):
        mu = layer.means[k]
        for j in range(layer.k):
            if subpixel == "exact":
                kern = window_kernel(mu, covs[j], r, big)
            elif subpixel == "bilinear":
                kern = shift_bilinear(np.pad(zero_mean[j], big - r), mu)
            else:
                raise ValueError(f"unknown subpixel mode {subpixel!r}")
            out.append((fused[k], kern))
    return out


def forward_lra_oracle(x, layer: GaussConvLayer, subpixel: str = "exact") -> np.ndarray:
    """``sum_k w_k * sum_j G(mu_k, Sigma_j) * X`` by direct convolution."""
    x = _as_feature_map(x)
    if x.shape[0] != layer.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {layer.c_in}")
    _check_oracle_size(x, layer.k, MAX_LRA_K, "low-rank oracle")
    y = np.zeros_like(x)
    for wgt, kern in lra_kernels(layer, subpixel):
        y += wgt * direct_conv(x, kern, crop=True)
    return _mix(y, layer.mix, layer.bias)


def backward_massive_oracle(upstream, specs: list[KernelSpec], mix, weights=None) -> np.ndarray:
    """Input gradient of :func:`forward_massive_oracle` (the adjoint convolution).

    Exact for integer means, where flipping a window keeps it centred.
    """
    flipped = [KernelSpec((-s.mean[0], -s.mean[1]), s.cov, s.support_radius) for s in specs]
    mix_t = np.atleast_2d(np.asarray(mix, dtype=float)).T
    return forward_massive_oracle(upstream, flipped, mix_t, np.zeros(mix_t.shape[0]), weights)


def backward_lra_oracle(upstream, layer: GaussConvLayer) -> np.ndarray:
    """Input gradient of :func:`forward_lra_oracle`; exact for integer means."""
    adj = replace(layer.copy(), means=-layer.means, mix=layer.mix.T.copy(), bias=np.zeros(layer.c_in))
    return forward_lra_oracle(upstream, adj)


# -- fast path ---------------------------------------------------------------

def _shift_taps(means):
    """Per-kernel bilinear taps ``[(displacement, weight), ...]``.

    A shift by ``mu`` reads ``S[p - d]`` for the four integer displacements
    ``d = floor(mu) + (i, j)``. Zero-weight taps are kept so that the mean
    gradient can use them.
    """
    out = []
    for mu in means:
        fl, w0, w1 = _bilinear_taps(mu)
        out.append([((fl[0] + i, fl[1] + j), w0[i] * w1[j]) for i in (0, 1) for j in (0, 1)])
    return out


def _forward(x, layer: GaussConvLayer):
    """Fast path on ``(..., C, H, W)``; returns the output and a backward cache."""
    h, w = x.shape[-2:]
    r, m = layer.grid_radius, layer.margin
    grids = layer.kernel_grids()
    ksum = grids.sum(axis=0)
    pad = r + m
    xpad = _pad_spatial(x, pad)
    # circular FFT convolution on a size that holds the full linear result
    size = tuple(sfft.next_fast_len(n + 2 * r, real=True) for n in xpad.shape[-2:])
    x_hat = sfft.rfft2(xpad, s=size)
    k_hat = sfft.rfft2(ksum, s=size)
    full = sfft.irfft2(x_hat * k_hat, s=size)
    s_ext = full[..., 2 * r : xpad.shape[-2], 2 * r : xpad.shape[-1]]
    fused = layer.fused_weights
    taps = _shift_taps(layer.means)
    # neighbouring shifts share integer taps; merge before touching the maps
    coef = {}
    for f, kt in zip(fused, taps):
        for d, a in kt:
            if a != 0.0:
                coef[d] = coef.get(d, 0.0) + f * a
    y_pre = np.zeros(x.shape)
    for d, c in coef.items():
        y_pre += c * s_ext[_tap_slice(d, m, h, w)]
    y = _mix(y_pre, layer.mix, layer.bias)
    cache = {"x": x, "x_hat": x_hat, "k_hat": k_hat, "size": size, "grids": grids, "s_ext": s_ext, "taps": taps, "coef": coef, "y_pre": y_pre}
    return y, cache


def _tap_slice(d, margin, h, w):
    r0, c0 = margin - d[0], margin - d[1]
    return (Ellipsis, slice(r0, r0 + h), slice(c0, c0 + w))


def forward_fast(x, layer: GaussConvLayer) -> np.ndarray:
    """K zero-mean convolutions (summed), K bilinear shifts, channel mixing."""
    x = _as_feature_map(x)
    if x.shape[0] != layer.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {layer.c_in}")
    return _forward(x, layer)[0]


def _backward(cache, layer: GaussConvLayer, dy) -> LayerGradients:
    x, grids, s_ext = cache["x"], cache["grids"], cache["s_ext"]
    h, w = x.shape[-2:]
    lead = tuple(range(x.ndim - 3))
    r, m = layer.grid_radius, layer.margin
    fused = layer.fused_weights

    d_bias = dy.sum(axis=lead + (-2, -1))
    d_mix = np.einsum("aohw,aihw->oi", dy.reshape((-1,) + dy.shape[-3:]), cache["y_pre"].reshape((-1,) + x.shape[-3:]))
    d_pre = np.einsum("oi,...ohw->...ihw", layer.mix, dy)

    taps, coef = cache["taps"], cache["coef"]
    inner = {}

    def ip(d):
        if d not in inner:
            inner[d] = np.vdot(d_pre, s_ext[_tap_slice(d, m, h, w)])
        return inner[d]

    d_fused = np.array([sum(a * ip(d) for d, a in kt if a != 0.0) for kt in taps])
    d_logits = fused * (d_fused - fused @ d_fused)

    d_ext = np.zeros_like(s_ext)
    for d, c in coef.items():
        d_ext[_tap_slice(d, m, h, w)] += c * d_pre

    d_means = np.zeros((layer.k, 2))
    if layer.train_means:
        for k, kt in enumerate(taps):
            # taps are ordered (0,0), (0,1), (1,0), (1,1); weights factor as w0[i] * w1[j]
            (d00, _), (d01, _), (d10, _), (d11, _) = kt
            _, w0, w1 = _bilinear_taps(layer.means[k])
            g0 = w1[0] * (ip(d10) - ip(d00)) + w1[1] * (ip(d11) - ip(d01))
            g1 = w0[0] * (ip(d01) - ip(d00)) + w0[1] * (ip(d11) - ip(d10))
            d_means[k] = fused[k] * np.array([g0, g1])

    # adjoints of s_ext = valid part of xpad (*) ksum, as circular correlations
    size = cache["size"]
    g_full = np.zeros(d_ext.shape[:-2] + size)
    g_full[..., 2 * r : 2 * r + d_ext.shape[-2], 2 * r : 2 * r + d_ext.shape[-1]] = d_ext
    g_hat = sfft.rfft2(g_full)
    lead_all = tuple(range(g_hat.ndim - 2))
    cross = (g_hat * np.conj(cache["x_hat"])).sum(axis=lead_all)
    d_ksum = sfft.irfft2(cross, s=size)[: 2 * r + 1, : 2 * r + 1]
    d_xpad = sfft.irfft2(g_hat * np.conj(cache["k_hat"]), s=size)
    pad = r + m
    d_input = d_xpad[..., pad : pad + h, pad : pad + w]

    dg = layer.kernel_sigma_derivs(grids)
    d_sigma = np.einsum("kab,ab->k", dg, d_ksum)
    d_sigma_params = d_sigma * _sigmoid(layer.sigma_params)
    return LayerGradients(d_input, d_logits, d_sigma_params, d_means, d_mix, d_bias)


def backward(x, layer: GaussConvLayer, upstream) -> LayerGradients:
    """Reverse-mode gradients of :func:`forward_fast`.

    ``d_means`` is zero unless ``layer.train_means`` is set. At integer
    offsets the bilinear weights have a kink, and the right-sided derivative
    is returned.
    """
    x = _as_feature_map(x)
    if x.shape[0] != layer.c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, layer expects {layer.c_in}")
    dy = np.asarray(upstream, dtype=float)
    expected = (layer.c_out,) + x.shape[1:]
    if dy.shape != expected:
        raise ShapeError(f"upstream shape {dy.shape} != output shape {expected}")
    _, cache = _forward(x, layer)
    return _backward(cache, layer, dy)


def effective_filter(layer: GaussConvLayer) -> np.ndarray:
    """The single spatial kernel the layer applies to every input channel."""
    r = layer.grid_radius
    big = r + layer.margin
    ksum = np.pad(layer.kernel_grids().sum(axis=0), big - r)
    out = np.zeros_like(ksum)
    for f, mu in zip(layer.fused_weights, layer.means):
        out += f * shift_bilinear(ksum, mu)
    return out


# -- operation counts --------------------------------------------------------

def op_counts(c_in, c_out, h, w, n_kernels, k, kernel_h, kernel_w):
    """Multiply-accumulate counts (vanilla, low-rank, low-rank + shifts)."""
    base = c_in * c_out * h * w
    return (
        base * n_kernels * kernel_w * kernel_h,
        k * base * k * kernel_w * kernel_h,
        4 * k * base,
    )


def complexity_count(layer: GaussConvLayer, input_shape, n_kernels: int):
    """:func:`op_counts` for a layer applied to a ``(C_in, H, W)`` input."""
    _, h, w = input_shape
    size = 2 * layer.grid_radius + 1
    return op_counts(layer.c_in, layer.c_out, h, w, n_kernels, layer.k, size, size)


# -- serialization -----------------------------------------------------------

def _hex(a) -> list:
    return [float(v).hex() for v in np.asarray(a, dtype=float).ravel()]


def _unhex(values, shape) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=float).reshape(shape)


def layer_to_dict(layer: GaussConvLayer) -> dict:
    return {
        "kind": "gaussian",
        "grid_radius": layer.grid_radius,
        "k": layer.k,
        "c_in": layer.c_in,
        "c_out": layer.c_out,
        "means": _hex(layer.means),
        "sigma_params": _hex(layer.sigma_params),
        "aspect": _hex(layer.aspect),
        "logits": _hex(layer.logits),
        "mix": _hex(layer.mix),
        "bias": _hex(layer.bias),
        "train_means": layer.train_means,
        "eigen": layer.meta,
    }


def layer_from_dict(d: dict) -> GaussConvLayer:
    k, ci, co = int(d["k"]), int(d["c_in"]), int(d["c_out"])
    return GaussConvLayer(
        means=_unhex(d["means"], (k, 2)),
        sigma_params=_unhex(d["sigma_params"], (k,)),
        logits=_unhex(d["logits"], (k,)),
        mix=_unhex(d["mix"], (co, ci)),
        bias=_unhex(d["bias"], (co,)),
        grid_radius=int(d["grid_radius"]),
        aspect=_unhex(d["aspect"], (k, 2)),
        train_means=bool(d.get("train_means", False)),
        meta=dict(d.get("eigen", {})),
    )


def layer_to_json(layer: GaussConvLayer) -> str:
    return json.dumps(layer_to_dict(layer), indent=2)


def layer_from_json(text: str) -> GaussConvLayer:
    return layer_from_dict(json.loads(text))
