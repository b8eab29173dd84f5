"""Wall-clock and operation-count comparison of the three layer evaluations.

``vanilla`` convolves with N independent materialised kernels, ``lra`` with
the K*K translated basis kernels, and ``fast`` with K zero-mean kernels
followed by K bilinear shifts. The vanilla kernel set is the K*K (mean,
covariance) pairs of the low-rank layer, weighted by the fused weights, so
all three compute the same function when N = K*K.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import gconv
from .gconv import GaussConvLayer, OracleSizeError, complexity_count, mean_grid
from .kernels import KernelSpec, sample_kernel_bank
from .lowrank import pca_select

PARITY_TOL = 1e-8
VARIANTS = ("vanilla", "lra", "fast")


class BenchSizeError(ValueError):
    """The vanilla oracle would be too large; reduce N or the image size."""


class ParityError(RuntimeError):
    """Timed variants compute different outputs."""


@dataclass
class BenchConfig:
    image_size: int = 64
    channels_in: int = 4
    channels_out: int = 4
    n: int | None = None  # vanilla kernel count; defaults to K*K
    k: int = 16
    grid_radius: int | None = None
    repetitions: int = 5
    warmup_runs: int = 2
    base_sigma: float = 0.8
    sigma_range: tuple[float, float] = (-0.5, 0.5)
    mean_spacing: float = 2.0
    bank_size: int = 100
    seed: int = 0
    backward: bool = True

    def __post_init__(self):
        self.sigma_range = (float(self.sigma_range[0]), float(self.sigma_range[1]))

    @property
    def n_kernels(self) -> int:
        return self.k * self.k if self.n is None else int(self.n)

    def validate(self):
        if self.repetitions < 5:
            raise ValueError("repetitions must be >= 5")
        if self.warmup_runs < 2:
            raise ValueError("warmup_runs must be >= 2")
        if self.k < 1 or self.n_kernels < 1:
            raise ValueError("K and N must be positive")
        if self.n_kernels > gconv.MAX_ORACLE_KERNELS or self.image_size > gconv.MAX_ORACLE_SIZE:
            raise BenchSizeError(
                f"vanilla oracle limited to N <= {gconv.MAX_ORACLE_KERNELS} and "
                f"{gconv.MAX_ORACLE_SIZE}x{gconv.MAX_ORACLE_SIZE}; reduce N or image_size"
            )
        if self.k > gconv.MAX_LRA_K:
            raise BenchSizeError(f"low-rank oracle limited to K <= {gconv.MAX_LRA_K}")


@dataclass
class Timing:
    median: float
    iqr: float
    samples: list[float]


@dataclass
class BenchReport:
    config: dict
    forward: dict[str, Timing]
    backward: dict[str, Timing]
    op_counts: dict[str, int]
    predicted_ratios: dict[str, float]
    measured_ratios: dict[str, float]
    parity: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self) -> list[dict]:
        rows = []
        for direction, table in (("forward", self.forward), ("backward", self.backward)):
            for variant, t in table.items():
                rows.append(
                    {
                        "variant": variant,
                        "direction": direction,
                        "median_s": t.median,
                        "iqr_s": t.iqr,
                        "ops": self.op_counts[variant],
                    }
                )
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, ["variant", "direction", "median_s", "iqr_s", "ops"], lineterminator="\n")
            writer.writeheader()
            for row in self.csv_rows():
                writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})


def build_layer(cfg: BenchConfig) -> GaussConvLayer:
    bank = sample_kernel_bank(cfg.bank_size, cfg.base_sigma, cfg.sigma_range, rng_seed=cfg.seed)
    basis = pca_select(bank, cfg.k)
    if basis.k < cfg.k:
        raise ValueError(f"kernel bank only supports {basis.k} components, asked for K={cfg.k}")
    means = mean_grid(cfg.k, cfg.mean_spacing)
    return GaussConvLayer.from_basis(
        basis, cfg.channels_in, cfg.channels_out, means=means, grid_radius=cfg.grid_radius, rng=cfg.seed + 1
    )


def vanilla_specs(layer: GaussConvLayer, n: int):
    """``n`` kernels cycling through the layer's (mean, covariance) pairs."""
    covs = layer.covariances()
    fused = layer.fused_weights
    pairs = [
        (KernelSpec(tuple(layer.means[k]), covs[j], layer.grid_radius), fused[k])
        for k in range(layer.k)
        for j in range(layer.k)
    ]
    chosen = [pairs[i % len(pairs)] for i in range(n)]
    return [p[0] for p in chosen], np.array([p[1] for p in chosen])


def _time(fn, reps, warmup) -> Timing:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return Timing(float(med), float(q3 - q1), samples)


def run_bench(cfg: BenchConfig) -> BenchReport:
    """Parity check, then median timings of each variant after warmup."""
    cfg.validate()
    layer = build_layer(cfg)
    n = cfg.n_kernels
    specs, weights = vanilla_specs(layer, n)
    rng = np.random.default_rng(cfg.seed + 2)
    size = cfg.image_size
    x = rng.normal(size=(cfg.channels_in, size, size))
    dy = rng.normal(size=(cfg.channels_out, size, size))

    forward = {
        "vanilla": lambda: gconv.forward_massive_oracle(x, specs, layer.mix, layer.bias, weights),
        "lra": lambda: gconv.forward_lra_oracle(x, layer),
        "fast": lambda: gconv.forward_fast(x, layer),
    }
    backward = {
        "vanilla": lambda: gconv.backward_massive_oracle(dy, specs, layer.mix, weights),
        "lra": lambda: gconv.backward_lra_oracle(dy, layer),
        "fast": lambda: gconv.backward(x, layer, dy),
    }

    with threadpool_limits(limits=1):
        outs = {v: f() for v, f in forward.items()}
        parity = {"lra_vs_fast": float(np.abs(outs["lra"] - outs["fast"]).max())}
        same_set = n == layer.k * layer.k
        if same_set:
            parity["vanilla_vs_fast"] = float(np.abs(outs["vanilla"] - outs["fast"]).max())
        if cfg.backward:
            grads = {v: f() for v, f in backward.items()}
            grads["fast"] = grads["fast"].d_input
            parity["lra_vs_fast_backward"] = float(np.abs(grads["lra"] - grads["fast"]).max())
            if same_set:
                parity["vanilla_vs_fast_backward"] = float(np.abs(grads["vanilla"] - grads["fast"]).max())
        bad = {k: v for k, v in parity.items() if not v <= PARITY_TOL}
        if bad:
            raise ParityError(f"variants disagree before timing: {bad}")

        fwd = {v: _time(f, cfg.repetitions, cfg.warmup_runs) for v, f in forward.items()}
        bwd = {}
        if cfg.backward:
            bwd = {v: _time(f, cfg.repetitions, cfg.warmup_runs) for v, f in backward.items()}

    ops = complexity_count(layer, x.shape, n)
    op_counts = dict(zip(VARIANTS, (int(o) for o in ops)))
    predicted = {
        "vanilla/fast": op_counts["vanilla"] / op_counts["fast"],
        "vanilla/lra": op_counts["vanilla"] / op_counts["lra"],
        "lra/fast": op_counts["lra"] / op_counts["fast"],
    }
    measured = {
        "vanilla/fast": fwd["vanilla"].median / fwd["fast"].median,
        "vanilla/lra": fwd["vanilla"].median / fwd["lra"].median,
        "lra/fast": fwd["lra"].median / fwd["fast"].median,
    }
    conf = asdict(cfg)
    conf["n_kernels"] = n
    conf["layer_grid_radius"] = layer.grid_radius
    return BenchReport(conf, fwd, bwd, op_counts, predicted, measured, parity)


def fast_scaling(ks=(2, 4, 8, 16), image_size=64, channels=4, repetitions=5, warmup_runs=2, seed=0) -> dict:
    """Fast-path forward medians over K and their worst deviation from an
    affine least-squares fit (as a ratio >= 1)."""
    times = []
    with threadpool_limits(limits=1):
        for k in ks:
            cfg = BenchConfig(image_size, channels, channels, k=k, seed=seed)
            layer = build_layer(cfg)
            x = np.random.default_rng(seed).normal(size=(channels, image_size, image_size))
            times.append(_time(lambda: gconv.forward_fast(x, layer), repetitions, warmup_runs).median)
    ks_arr = np.asarray(ks, dtype=float)
    slope, icpt = np.polyfit(ks_arr, times, 1)
    fit = slope * ks_arr + icpt
    ratio = np.maximum(times / fit, fit / np.asarray(times))
    return {"k": list(ks), "median_s": times, "slope": float(slope), "intercept": float(icpt),
            "max_fit_ratio": float(ratio.max())}


__all__ = ["BenchConfig", "BenchReport", "BenchSizeError", "OracleSizeError", "ParityError", "fast_scaling", "run_bench"]
