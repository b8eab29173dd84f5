"""Desk-scale studies: rerun variance, annotation-noise robustness, and
effective-filter rendering."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .density import PointAnnotations, perturb_annotations
from .gconv import GaussConvLayer, effective_filter
from .net import (
    Dataset,
    ExperimentReport,
    Model,
    NetworkConfig,
    TrainingDivergedError,
    count_errors,
    default_config,
    metrics_from_errors,
    synthesize_dataset,
    train,
)

VARIANTS = ("standard", "gaussian")


@dataclass
class DataSpec:
    train_size: int = 100
    test_size: int = 40
    image_size: int = 64
    count_range: tuple[int, int] = (5, 80)
    beta: float = 4.0
    seed: int = 0

    def build(self) -> tuple[Dataset, Dataset]:
        kw = dict(size=self.image_size, count_range=self.count_range, beta=self.beta)
        return (
            synthesize_dataset(self.train_size, seed=self.seed, **kw),
            synthesize_dataset(self.test_size, seed=self.seed + 10_000, **kw),
        )


def _noisy_training_set(data: Dataset, radius: float, seed: int) -> Dataset:
    if radius == 0:
        return data
    size = data.images.shape[-2:]
    pts = [
        perturb_annotations(PointAnnotations(p, size), radius, rng_seed=seed * 100_003 + i).points
        for i, p in enumerate(data.points)
    ]
    return data.with_points(pts)


@dataclass
class TrainSpec:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 16


def _network_dict(net) -> dict:
    return net.to_dict() if isinstance(net, NetworkConfig) else dict(net)


# -- rerun variance ----------------------------------------------------------

@dataclass
class VarianceStudyConfig:
    replicas: int = 5
    replica_seeds: list[int] | None = None
    network: NetworkConfig = field(default_factory=default_config)
    data: DataSpec = field(default_factory=DataSpec)
    training: TrainSpec = field(default_factory=TrainSpec)
    noise_radius: float = 2.0
    noise_seed: int = 7
    density_window: int = 16
    quantiles: tuple[float, float] = (0.25, 0.75)
    thresholds: tuple[float, float] | None = None  # objects per pixel; overrides quantiles

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.data, dict):
            self.data = DataSpec(**self.data)
        if isinstance(self.training, dict):
            self.training = TrainSpec(**self.training)

    def seeds(self) -> list[int]:
        return list(self.replica_seeds) if self.replica_seeds is not None else list(range(self.replicas))

    def validate(self):
        if self.replicas < 5 and self.replica_seeds is None:
            raise ValueError("replicas must be >= 5")
        if len(self.seeds()) < 2:
            raise ValueError("need at least two replicas")
        lo, hi = self.thresholds if self.thresholds is not None else self.quantiles
        if not lo <= hi:
            raise ValueError("density thresholds must be ordered")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d


def region_masks(densities: np.ndarray, window: int, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """Low- and high-density pixel masks from box-filtered ground truth."""
    local = uniform_filter(densities, size=(1, window, window), mode="constant")
    lo, hi = thresholds
    return local <= lo, local >= hi


def run_variance_study(cfg: VarianceStudyConfig) -> ExperimentReport:
    """Train several replicas per variant and compare the spread of their counts."""
    cfg.validate()
    train_set, test_set = cfg.data.build()
    noisy = _noisy_training_set(train_set, cfg.noise_radius, cfg.noise_seed)
    local = uniform_filter(test_set.densities, size=(1, cfg.density_window, cfg.density_window), mode="constant")
    if cfg.thresholds is not None:
        thresholds = tuple(float(t) for t in cfg.thresholds)
    else:
        thresholds = tuple(float(v) for v in np.quantile(local, cfg.quantiles))
    low, high = region_masks(test_set.densities, cfg.density_window, thresholds)
    regions = {"whole": np.ones_like(low), "high": high, "low": low}

    results, rows, flags = {}, [], []
    for variant in VARIANTS:
        counts = {name: [] for name in regions}
        for seed in cfg.seeds():
            net_cfg = NetworkConfig.from_dict({**cfg.network.to_dict(), "conv_kind": variant, "seed": int(seed)})
            try:
                state, _ = train(net_cfg, noisy, cfg.training.epochs, cfg.training.lr, cfg.training.batch_size)
            except TrainingDivergedError as exc:
                flags.append({"variant": variant, "seed": int(seed), "error": str(exc)})
                continue
            pred = _predict_all(state.model, test_set)
            err = pred.sum(axis=(1, 2)) - test_set.counts
            mae, rmse = metrics_from_errors(err)
            rows.append({"variant": variant, "seed": int(seed), "mae": mae, "mse": rmse})
            for name, mask in regions.items():
                counts[name].append((pred * mask).sum(axis=(1, 2)))
        summary = {"replicas_used": len(counts["whole"])}
        for name, per_rep in counts.items():
            if len(per_rep) >= 2:
                reps = np.stack(per_rep)
                # variance is shift invariant; centring on one replica keeps
                # identical replicas at exactly zero
                var = np.var(reps - reps[0], axis=0, ddof=1)
                summary[f"mean_variance_{name}"] = float(var.mean())
            else:
                summary[f"mean_variance_{name}"] = None
        results[variant] = summary
    results["thresholds"] = list(thresholds)
    return ExperimentReport("variance", cfg.to_dict(), results, rows, flags)


def _predict_all(model: Model, data: Dataset, batch: int = 16) -> np.ndarray:
    return np.concatenate([model.predict_density(data.images[i : i + batch]) for i in range(0, len(data), batch)])


# -- annotation-noise robustness ---------------------------------------------

@dataclass
class RobustnessStudyConfig:
    ladder: list[float] = field(default_factory=lambda: [0, 1, 2, 4, 8])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    network: NetworkConfig = field(default_factory=default_config)
    data: DataSpec = field(default_factory=DataSpec)
    training: TrainSpec = field(default_factory=TrainSpec)

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.data, dict):
            self.data = DataSpec(**self.data)
        if isinstance(self.training, dict):
            self.training = TrainSpec(**self.training)

    def validate(self):
        if not self.ladder or self.ladder[0] != 0:
            raise ValueError("displacement ladder must start at 0")
        if list(self.ladder) != sorted(self.ladder):
            raise ValueError("displacement ladder must be ascending")
        if not self.seeds:
            raise ValueError("need at least one seed")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d


def curve_summary(rows: list[dict], variant: str, ladder) -> dict:
    """Mean and standard error of MAE per radius, degradation ratio, monotonicity."""
    means, ses = [], []
    for radius in ladder:
        vals = np.array([r["mae"] for r in rows if r["variant"] == variant and r["radius"] == radius])
        means.append(float(vals.mean()) if vals.size else math.nan)
        ses.append(float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0)
    monotone = all(
        means[i + 1] >= means[i] - max(ses[i], ses[i + 1]) for i in range(len(means) - 1)
    )
    return {
        "mae_mean": means,
        "mae_se": ses,
        "degradation": means[-1] / means[0] if means[0] > 0 else math.inf,
        "non_decreasing_within_se": bool(monotone),
    }


def run_robustness_study(cfg: RobustnessStudyConfig) -> ExperimentReport:
    """Train on displaced annotations, evaluate counts on clean test labels."""
    cfg.validate()
    train_set, test_set = cfg.data.build()
    rows, flags = [], []
    for radius in cfg.ladder:
        for seed in cfg.seeds:
            noisy = _noisy_training_set(train_set, radius, seed)
            for variant in VARIANTS:
                net_cfg = NetworkConfig.from_dict({**cfg.network.to_dict(), "conv_kind": variant, "seed": int(seed)})
                try:
                    state, _ = train(net_cfg, noisy, cfg.training.epochs, cfg.training.lr, cfg.training.batch_size)
                except TrainingDivergedError as exc:
                    flags.append({"variant": variant, "seed": int(seed), "radius": radius, "error": str(exc)})
                    continue
                mae, rmse = metrics_from_errors(count_errors(state.model, test_set))
                rows.append({"radius": radius, "variant": variant, "seed": int(seed), "mae": mae, "mse": rmse})
    results = {v: curve_summary(rows, v, cfg.ladder) for v in VARIANTS}
    return ExperimentReport("robustness", cfg.to_dict(), results, rows, flags)


# -- effective filters -------------------------------------------------------

def to_gray(img: np.ndarray) -> np.ndarray:
    """Min-max normalise to 8-bit; a constant image maps to zeros."""
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_effective_filters(model: Model, out_dir=None) -> list[np.ndarray]:
    """One 8-bit image per Gaussian layer of its effective spatial filter.

    Files ``filter_<column>_<layer>.pgm`` are written when ``out_dir`` is given.
    """
    images = []
    for ci, col in enumerate(model.columns):
        for li, layer in enumerate(col):
            if not isinstance(layer, GaussConvLayer):
                continue
            img = to_gray(effective_filter(layer))
            images.append(img)
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                write_pgm(Path(out_dir) / f"filter_{ci}_{li}.pgm", img)
    if not images:
        raise ValueError("model has no Gaussian layers")
    return images
