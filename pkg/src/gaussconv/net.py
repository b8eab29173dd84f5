"""Small multi-column counting networks with manual backpropagation.

Tensors are ``(batch, channels, H, W)`` float64 arrays. A model is a set of
columns of conv layers (each followed by ReLU and optional 2x max-pooling),
whose outputs are concatenated, optionally pyramid-pooled, fused by a 1x1
conv to one channel, and upsampled by nearest neighbour to the input size.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gconv
from .density import PointAnnotations, generate_density_map
from .gconv import GaussConvLayer, mean_grid
from .kernels import SIGMA_FLOOR, sample_kernel_bank
from .lowrank import pca_select

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


# -- configuration -----------------------------------------------------------

@dataclass
class LayerSpec:
    channels: int
    radius: int = 2
    k: int = 16
    sigma_range: tuple[float, float] = (-0.5, 0.5)
    pool: bool = False

    def __post_init__(self):
        self.sigma_range = (float(self.sigma_range[0]), float(self.sigma_range[1]))


@dataclass
class NetworkConfig:
    columns: list[list[LayerSpec]]
    conv_kind: str = "gaussian"
    fusion: bool = False
    seed: int = 0
    in_channels: int = 1
    mean_spacing: float = 1.0
    bank_size: int = 100
    density_scale: float = 100.0

    def __post_init__(self):
        self.columns = [
            [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in col] for col in self.columns
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["columns"] = [[asdict(s) for s in col] for col in self.columns]
        for col in d["columns"]:
            for s in col:
                s["sigma_range"] = list(s["sigma_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def with_kind(self, conv_kind: str) -> "NetworkConfig":
        return NetworkConfig.from_dict({**self.to_dict(), "conv_kind": conv_kind})

    def validate(self):
        if self.conv_kind not in ("standard", "gaussian"):
            raise ConfigError(f"conv_kind must be standard or gaussian, got {self.conv_kind!r}")
        if not self.columns or any(not col for col in self.columns):
            raise ConfigError("every column needs at least one layer")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        pools = {sum(s.pool for s in col) for col in self.columns}
        if len(pools) != 1:
            raise ConfigError("all columns must pool the same number of times")
        for col in self.columns:
            for s in col:
                if s.channels < 1 or s.radius < 0 or s.k < 1:
                    raise ConfigError(f"invalid layer spec {s}")
                if self.conv_kind == "gaussian" and s.radius < 1:
                    raise ConfigError("gaussian layers need radius >= 1")
                if self.conv_kind == "gaussian" and s.radius / 3.0 + s.sigma_range[0] <= SIGMA_FLOOR:
                    raise ConfigError(f"sigma_range {s.sigma_range} too wide for radius {s.radius}")

    @property
    def downsample(self) -> int:
        return 2 ** sum(s.pool for s in self.columns[0])


def default_config(conv_kind: str = "gaussian", seed: int = 0, width: int = 8) -> NetworkConfig:
    """Three columns of three layers. Large kernel counts and wide variance
    perturbations in the first two layers, few kernels afterwards."""
    wide, narrow = (-0.5, 0.5), (-0.1, 0.1)
    columns = []
    # a 5x5 grid only carries ~10 non-negligible components, so the K=16
    # layers need radius >= 3
    for radii, late_k in (((4, 3, 3), 4), ((3, 3, 2), 4), ((3, 3, 1), 2)):
        columns.append(
            [
                LayerSpec(width, radii[0], 16, wide, pool=True),
                LayerSpec(width, radii[1], 16, wide, pool=True),
                LayerSpec(width, radii[2], late_k, narrow, pool=False),
            ]
        )
    return NetworkConfig(columns=columns, conv_kind=conv_kind, seed=seed)


def tiny_config(conv_kind: str = "gaussian", seed: int = 0) -> NetworkConfig:
    """One column, two layers."""
    return NetworkConfig(
        columns=[[LayerSpec(4, 2, 4, (-0.5, 0.5), pool=True), LayerSpec(4, 1, 2, (-0.1, 0.1))]],
        conv_kind=conv_kind,
        seed=seed,
    )


# -- standard convolution ----------------------------------------------------

@dataclass
class StandardConvLayer:
    weight: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray  # (C_out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3] or self.weight.shape[2] % 2 == 0:
            raise ConfigError(f"weight must be C_out x C_in x k x k with odd k, got {self.weight.shape}")

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def radius(self):
        return (self.weight.shape[2] - 1) // 2

    def param_names(self):
        return ["weight", "bias"]

    def n_params(self):
        return self.weight.size + self.bias.size

    def to_dict(self):
        return {
            "kind": "standard",
            "shape": list(self.weight.shape),
            "weight": [float(v).hex() for v in self.weight.ravel()],
            "bias": [float(v).hex() for v in self.bias],
        }

    @classmethod
    def from_dict(cls, d):
        w = np.array([float.fromhex(v) for v in d["weight"]]).reshape(d["shape"])
        return cls(w, np.array([float.fromhex(v) for v in d["bias"]]))


def _std_forward(x, layer: StandardConvLayer):
    h, w = x.shape[-2:]
    r = layer.radius
    if r == 0:
        y = np.einsum("oi,bihw->bohw", layer.weight[:, :, 0, 0], x)
        return y + layer.bias[:, None, None], {"x": x}
    size = (h + 2 * r, w + 2 * r)
    xf = np.fft.rfft2(x, size)
    wf = np.fft.rfft2(layer.weight, size)
    full = np.fft.irfft2(np.einsum("bixy,oixy->boxy", xf, wf), size)
    y = full[..., r : r + h, r : r + w] + layer.bias[:, None, None]
    return y, {"x": x, "xf": xf, "wf": wf, "size": size}


def _std_backward(cache, layer: StandardConvLayer, dy):
    x = cache["x"]
    r = layer.radius
    d_bias = dy.sum(axis=(0, 2, 3))
    if r == 0:
        d_w = np.einsum("bohw,bihw->oi", dy, x)[:, :, None, None]
        d_x = np.einsum("oi,bohw->bihw", layer.weight[:, :, 0, 0], dy)
        return d_x, {"weight": d_w, "bias": d_bias}
    h, w = x.shape[-2:]
    size = cache["size"]
    full = np.zeros(dy.shape[:2] + size)
    full[..., r : r + h, r : r + w] = dy
    df = np.fft.rfft2(full)
    # correlations; zero padding to the full size keeps them alias-free
    d_x = np.fft.irfft2(np.einsum("boxy,oixy->bixy", df, np.conj(cache["wf"])), size)[..., :h, :w]
    k = 2 * r + 1
    d_w = np.fft.irfft2(np.einsum("boxy,bixy->oixy", df, np.conj(cache["xf"])), size)[..., :k, :k]
    return d_x, {"weight": d_w, "bias": d_bias}


# -- generic layer dispatch --------------------------------------------------

def layer_forward(x, layer):
    if isinstance(layer, GaussConvLayer):
        return gconv._forward(x, layer)
    return _std_forward(x, layer)


def layer_backward(cache, layer, dy):
    if isinstance(layer, GaussConvLayer):
        g = gconv._backward(cache, layer, dy)
        return g.d_input, {n: g.for_param(n) for n in layer.param_names()}
    return _std_backward(cache, layer, dy)


def layer_to_dict(layer):
    if isinstance(layer, GaussConvLayer):
        return gconv.layer_to_dict(layer)
    return layer.to_dict()


def layer_from_dict(d):
    if d["kind"] == "gaussian":
        return gconv.layer_from_dict(d)
    return StandardConvLayer.from_dict(d)


def _maxpool(x):
    b, c, h, w = x.shape
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], -1)[..., 0], idx


def _maxpool_backward(idx, dy, shape):
    b, c, h, w = shape
    blocks = np.zeros(dy.shape + (4,))
    np.put_along_axis(blocks, idx[..., None], dy[..., None], -1)
    return blocks.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def _block_mean(x, n):
    b, c, h, w = x.shape
    return x.reshape(b, c, n, h // n, n, w // n).mean(axis=(3, 5))


def _expand(x, h, w):
    n = x.shape[-1]
    return np.repeat(np.repeat(x, h // n, axis=-2), w // n, axis=-1)


PYRAMID_LEVELS = (1, 2)


# -- model -------------------------------------------------------------------

@dataclass
class Model:
    config: NetworkConfig
    columns: list[list]
    fusion: StandardConvLayer

    @property
    def layers(self) -> list:
        return [layer for col in self.columns for layer in col] + [self.fusion]

    def parameters(self):
        """``(layer, name)`` pairs of every trainable array, in fixed order."""
        return [(layer, n) for layer in self.layers for n in layer.param_names()]

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def forward(self, x):
        """Predicted density maps ``(B, H, W)`` (in scaled units) and a cache."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1] != self.config.in_channels:
            raise ConfigError(f"input has {x.shape[1]} channels, model expects {self.config.in_channels}")
        h, w = x.shape[-2:]
        f = self.config.downsample
        if h % (f * max(PYRAMID_LEVELS)) or w % (f * max(PYRAMID_LEVELS)):
            raise ConfigError(f"input size {h}x{w} must be divisible by {f * max(PYRAMID_LEVELS)}")
        caches, outs = [], []
        for col, specs in zip(self.columns, self.config.columns):
            a = x
            col_cache = []
            for layer, spec in zip(col, specs):
                z, c = layer_forward(a, layer)
                a = np.maximum(z, 0.0)
                pool_idx = None
                if spec.pool:
                    pre_shape = a.shape
                    a, pool_idx = _maxpool(a)
                else:
                    pre_shape = None
                col_cache.append((c, z, pool_idx, pre_shape))
            caches.append(col_cache)
            outs.append(a)
        feat = np.concatenate(outs, axis=1)
        fh, fw = feat.shape[-2:]
        if self.config.fusion:
            feat = np.concatenate([feat] + [_expand(_block_mean(feat, n), fh, fw) for n in PYRAMID_LEVELS], axis=1)
        small, fcache = _std_forward(feat, self.fusion)
        pred = _expand(small[:, 0], h, w)
        return pred, {"cols": caches, "fusion": fcache, "widths": [o.shape[1] for o in outs], "small": small.shape}

    def backward(self, cache, d_pred):
        """Gradients for :meth:`parameters`, in the same order."""
        b, _, fh, fw = cache["small"]
        h, w = d_pred.shape[-2:]
        d_small = d_pred.reshape(b, fh, h // fh, fw, w // fw).sum(axis=(2, 4))[:, None]
        d_feat, fgrads = _std_backward(cache["fusion"], self.fusion, d_small)
        if self.config.fusion:
            base = sum(cache["widths"])
            parts = np.split(d_feat, len(PYRAMID_LEVELS) + 1, axis=1)
            d_feat = parts[0].copy()
            for n, part in zip(PYRAMID_LEVELS, parts[1:]):
                summed = part.reshape(b, base, n, fh // n, n, fw // n).sum(axis=(3, 5))
                d_feat += _expand(summed / ((fh // n) * (fw // n)), fh, fw)
        grads = {}
        offsets = np.cumsum([0] + cache["widths"])
        for ci, (col, specs, col_cache) in enumerate(zip(self.columns, self.config.columns, cache["cols"])):
            d = d_feat[:, offsets[ci] : offsets[ci + 1]]
            for layer, spec, (c, z, pool_idx, pre_shape) in reversed(list(zip(col, specs, col_cache))):
                if spec.pool:
                    d = _maxpool_backward(pool_idx, d, pre_shape)
                d = d * (z > 0)
                d, g = layer_backward(c, layer, d)
                grads[id(layer)] = g
        grads[id(self.fusion)] = fgrads
        return [grads[id(layer)][n] for layer, n in self.parameters()]

    def predict_density(self, image) -> np.ndarray:
        pred, _ = self.forward(image)
        return pred / self.config.density_scale

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "columns": [[layer_to_dict(layer) for layer in col] for col in self.columns],
            "fusion": self.fusion.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "Model":
        return cls(
            config=NetworkConfig.from_dict(d["config"]),
            columns=[[layer_from_dict(x) for x in col] for col in d["columns"]],
            fusion=StandardConvLayer.from_dict(d["fusion"]),
        )


def _standard_layer(c_in, c_out, radius, rng):
    k = 2 * radius + 1
    std = math.sqrt(2.0 / (c_in * k * k))
    return StandardConvLayer(rng.normal(0.0, std, size=(c_out, c_in, k, k)), np.zeros(c_out))


def _gaussian_layer(c_in, spec: LayerSpec, cfg: NetworkConfig, rng):
    lo, hi = spec.sigma_range
    base = spec.radius / 3.0
    bank = sample_kernel_bank(
        cfg.bank_size, base, (lo, hi), rng_seed=int(rng.integers(2**31)), support_radius=spec.radius
    )
    basis = pca_select(bank, spec.k)
    # whole-pixel means: fractional ones would add a bilinear blur to every layer
    means = mean_grid(basis.k, cfg.mean_spacing, lattice=True)
    layer = GaussConvLayer.from_basis(basis, c_in, spec.channels, means=means, rng=int(rng.integers(2**31)))
    # unit DC gain for the spatial part so activations keep their scale
    layer.mix /= layer.kernel_grids().sum()
    return layer


def build_model(cfg: NetworkConfig) -> Model:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    columns = []
    for col in cfg.columns:
        c_in = cfg.in_channels
        layers = []
        for spec in col:
            if cfg.conv_kind == "gaussian":
                layers.append(_gaussian_layer(c_in, spec, cfg, rng))
            else:
                layers.append(_standard_layer(c_in, spec.channels, spec.radius, rng))
            c_in = spec.channels
        columns.append(layers)
    width = sum(col[-1].channels for col in cfg.columns)
    if cfg.fusion:
        width *= len(PYRAMID_LEVELS) + 1
    fusion = _standard_layer(width, 1, 0, rng)
    return Model(cfg, columns, fusion)


def save_model(model: Model, path) -> None:
    with open(path, "w") as f:
        json.dump(model.to_dict(), f)


def load_model(path) -> Model:
    with open(path) as f:
        return Model.from_dict(json.load(f))


# -- data --------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W)
    densities: np.ndarray  # (n, H, W), unscaled
    points: list  # per image (k, 2) arrays of (x, y)
    ids: list = field(default_factory=list)
    beta: float = 4.0

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"img{i:04d}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(p) for p in self.points], dtype=float)

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.images[idx], self.densities[idx], [self.points[i] for i in idx], [self.ids[i] for i in idx], self.beta
        )

    def with_points(self, points) -> "Dataset":
        """Same images, density targets regenerated from new annotations."""
        size = self.images.shape[-2:]
        dens = np.stack([generate_density_map(PointAnnotations(p, size), self.beta).values for p in points])
        return Dataset(self.images, dens, list(points), list(self.ids), self.beta)


def render_image(points, size, rng, noise_std=0.05):
    """Gaussian blobs of random width and brightness plus white noise."""
    h, w = size
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    img = np.zeros((h, w))
    for x, y in points:
        s = rng.uniform(1.0, 1.6)
        a = rng.uniform(0.8, 1.2)
        img += a * np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / (2 * s * s))
    return img + rng.normal(0.0, noise_std, size=(h, w))


def synthesize_dataset(
    n: int,
    size: int = 64,
    count_range=(5, 80),
    beta: float = 4.0,
    seed: int = 0,
    margin: float = 2.0,
    noise_std: float = 0.05,
) -> Dataset:
    """Random dot images with their point annotations and density targets."""
    lo, hi = int(count_range[0]), int(count_range[1])
    if n < 1 or lo < 0 or hi < lo:
        raise ValueError("need n >= 1 and 0 <= count_range[0] <= count_range[1]")
    rng = np.random.default_rng(seed)
    images, dens, points = [], [], []
    for _ in range(n):
        k = int(rng.integers(lo, hi + 1))
        pts = rng.uniform(margin, size - 1 - margin, size=(k, 2))
        images.append(render_image(pts, (size, size), rng, noise_std)[None])
        dens.append(generate_density_map(PointAnnotations(pts, (size, size)), beta).values)
        points.append(pts)
    return Dataset(np.stack(images), np.stack(dens), points, beta=beta)


# -- loss, metrics, optimizer -----------------------------------------------

def mse_density_loss(pred, target):
    """Mean squared error over pixels and its gradient ``2 (pred - target) / (H W)``.

    A stack of maps is scored as one mean over every entry.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def predict_count(model: Model, image) -> float:
    return float(model.predict_density(image).sum())


def count_errors(model: Model, dataset: Dataset, batch_size: int = 16) -> np.ndarray:
    preds = []
    for i in range(0, len(dataset), batch_size):
        preds.append(model.predict_density(dataset.images[i : i + batch_size]).sum(axis=(1, 2)))
    return np.concatenate(preds) - dataset.counts


def metrics_from_errors(err) -> tuple[float, float]:
    err = np.asarray(err, dtype=float)
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    assert rmse >= mae - 1e-9 * max(1.0, mae)
    return mae, rmse


def evaluate(model: Model, dataset: Dataset) -> tuple[float, float]:
    """(MAE, RMSE) of predicted counts; RMSE is reported as "MSE"."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    return metrics_from_errors(count_errors(model, dataset))


@dataclass
class TrainState:
    model: Model
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    loss_history: list = field(default_factory=list)


def adam_step(state: TrainState, grads) -> None:
    b1, b2 = ADAM_BETAS
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, ((layer, name), g) in enumerate(zip(state.model.parameters(), grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        p = getattr(layer, name)
        p -= state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + ADAM_EPS)


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    results: dict
    rows: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _snapshot(model: Model) -> Model:
    return Model.from_dict(model.to_dict())


def train(
    cfg: NetworkConfig,
    dataset: Dataset,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 16,
    test: Dataset | None = None,
    model: Model | None = None,
    schedule: str = "cosine",
):
    """Adam on the scaled per-pixel density MSE; returns (TrainState, report).

    Minibatch order is drawn from ``cfg.seed``. ``schedule="cosine"`` decays
    the step size from ``lr`` to zero over the run; ``"constant"`` keeps it.
    The per-epoch record holds the median per-image training loss (each image
    scored in its own minibatch, before the update) and the count MAE/RMSE on
    ``test`` (or the training set when no test set is given).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown schedule {schedule!r}")
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total_steps = max(1, epochs * steps_per_epoch)
    if model is None:
        model = build_model(cfg)
    params = model.parameters()
    state = TrainState(
        model=model,
        m=[np.zeros_like(getattr(l, n)) for l, n in params],
        v=[np.zeros_like(getattr(l, n)) for l, n in params],
        lr=lr,
    )
    rng = np.random.default_rng([cfg.seed, 1])
    scale = cfg.density_scale
    eval_set = test if test is not None else dataset
    epochs_log = []
    last_good = _snapshot(model)
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        image_losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            pred, cache = model.forward(dataset.images[idx])
            loss, d_pred = mse_density_loss(pred, dataset.densities[idx] * scale)
            if not math.isfinite(loss):
                state.model = last_good
                raise TrainingDivergedError(f"loss became {loss} at step {state.step}", state)
            diff = pred - dataset.densities[idx] * scale
            image_losses.extend(np.mean(diff * diff, axis=(1, 2)))
            grads = model.backward(cache, d_pred)
            if schedule == "cosine":
                state.lr = 0.5 * lr * (1.0 + math.cos(math.pi * state.step / total_steps))
            adam_step(state, grads)
            state.loss_history.append(loss)
        mae, rmse = evaluate(model, eval_set)
        if not (math.isfinite(mae) and math.isfinite(rmse)):
            state.model = last_good
            raise TrainingDivergedError(f"non-finite metrics after epoch {epoch}", state)
        last_good = _snapshot(model)
        epochs_log.append({"epoch": epoch + 1, "median_loss": float(np.median(image_losses)), "mae": mae, "mse": rmse})
    report = ExperimentReport(
        kind="train",
        config={
            "network": cfg.to_dict(),
            "epochs": epochs,
            "batch_size": batch_size,
            "optimizer": {"name": "adam", "lr": lr, "betas": list(ADAM_BETAS), "eps": ADAM_EPS, "schedule": schedule},
            "train_size": len(dataset),
            "eval_size": len(eval_set),
            "n_params": model.n_params(),
        },
        results={"final_mae": epochs_log[-1]["mae"] if epochs_log else None,
                 "final_mse": epochs_log[-1]["mse"] if epochs_log else None},
        rows=epochs_log,
    )
    return state, report
