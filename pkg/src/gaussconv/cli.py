"""Command-line entry point.

Every subcommand takes an optional JSON config (``--config``), flat
``--set key=value`` overrides (dotted keys reach nested objects, values are
parsed as JSON when possible), and an output directory. Each run writes
``manifest.json`` with the resolved config, artifact hashes and status.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, bench, experiments, net
from .density import (
    PointAnnotations,
    generate_density_map,
    perturb_annotations,
    read_annotations_csv,
    read_dmap,
    write_annotations_csv,
    write_dmap,
)

DEFAULTS = {
    "gen-data": {
        "train_size": 200,
        "test_size": 50,
        "image_size": 64,
        "count_range": [5, 80],
        "beta": 4.0,
        "seed": 0,
    },
    "train": {
        "data": None,
        "network": "default",
        "conv_kind": "gaussian",
        "seed": 0,
        "epochs": 30,
        "lr": 1e-3,
        "batch_size": 16,
        "schedule": "cosine",
        "noise_radius": 0.0,
    },
    "eval": {"data": None, "checkpoint": None, "split": "test"},
    "bench": {k: v for k, v in asdict(bench.BenchConfig()).items()},
    "study-variance": experiments.VarianceStudyConfig().to_dict(),
    "study-noise": experiments.RobustnessStudyConfig().to_dict(),
    "viz-filters": {"checkpoint": None},
}


class CommandError(RuntimeError):
    pass


# -- config handling ---------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    cfg = json.loads(json.dumps(config))
    for item in overrides:
        if "=" not in item:
            raise CommandError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise CommandError(f"override {key!r}: {p!r} is not an object")
            node = node[p]
        node[parts[-1]] = _parse_value(value)
    return cfg


def resolve_config(command: str, path, overrides, seed=None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if path:
        with open(path) as f:
            user = json.load(f)
        unknown = set(user) - set(cfg)
        if unknown:
            raise CommandError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(user)
    cfg = apply_overrides(cfg, overrides or [])
    if seed is not None and "seed" in cfg:
        cfg["seed"] = seed
    return cfg


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Tracks artifacts of one command and writes its manifest."""

    def __init__(self, command: str, config: dict, out: Path):
        self.command = command
        self.config = config
        self.out = out
        self.artifacts: list[Path] = []
        self.started = time.time()

    def path(self, rel) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(p)
        return p

    def write_json(self, rel, obj) -> Path:
        p = self.path(rel)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p

    def manifest(self, status: str, error: str | None = None) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        arts = {str(p.relative_to(self.out)): sha256(p) for p in self.artifacts if p.exists()}
        doc = {
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "artifacts": arts,
            "status": status,
            "error": error,
            "started": self.started,
            "finished": time.time(),
        }
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fields, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


# -- dataset directories -----------------------------------------------------

SPLITS = ("train", "test")


def write_dataset(root: Path, split: str, data: net.Dataset, run: Run) -> None:
    for img_id, img, dens in zip(data.ids, data.images, data.densities):
        write_dmap(run.path(f"{split}/images/{img_id}.dmap-input"), img[0])
        write_dmap(run.path(f"{split}/density/{img_id}.dmap"), dens)
    write_annotations_csv(run.path(f"{split}/annotations.csv"), dict(zip(data.ids, data.points)))


def load_dataset(root, split: str, beta: float | None = None) -> net.Dataset:
    """Read a split written by ``gen-data``; densities are regenerated from
    the annotations when ``beta`` is given, else read from the dumps."""
    base = Path(root) / split
    files = sorted((base / "images").glob("*.dmap-input"))
    if not files:
        raise CommandError(f"no images under {base / 'images'}")
    ann = read_annotations_csv(base / "annotations.csv")
    ids = [f.name[: -len(".dmap-input")] for f in files]
    images = np.stack([read_dmap(f)[None] for f in files])
    points = [ann.get(i, np.zeros((0, 2))) for i in ids]
    size = images.shape[-2:]
    if beta is None:
        dens = np.stack([read_dmap(base / "density" / f"{i}.dmap") for i in ids])
        meta = json.loads((Path(root) / "dataset.json").read_text())
        beta = meta["beta"]
    else:
        dens = np.stack([generate_density_map(PointAnnotations(p, size), beta).values for p in points])
    return net.Dataset(images, dens, points, ids, beta)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(cfg: dict, run: Run) -> None:
    lo, hi = cfg["count_range"]
    kw = dict(size=int(cfg["image_size"]), count_range=(int(lo), int(hi)), beta=float(cfg["beta"]))
    for split, n, seed in (("train", cfg["train_size"], cfg["seed"]), ("test", cfg["test_size"], cfg["seed"] + 10_000)):
        data = net.synthesize_dataset(int(n), seed=int(seed), **kw)
        write_dataset(run.out, split, data, run)
    run.write_json("dataset.json", {"beta": float(cfg["beta"]), "image_size": int(cfg["image_size"])})


def _network(cfg: dict) -> net.NetworkConfig:
    spec = cfg["network"]
    if spec == "default":
        return net.default_config(cfg["conv_kind"], cfg["seed"])
    if spec == "tiny":
        return net.tiny_config(cfg["conv_kind"], cfg["seed"])
    if isinstance(spec, dict):
        return net.NetworkConfig.from_dict({**spec, "conv_kind": cfg["conv_kind"], "seed": cfg["seed"]})
    raise CommandError(f"network must be 'default', 'tiny' or an object, got {spec!r}")


def _require(cfg, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise CommandError(f"missing required config: {', '.join(missing)}")


def cmd_train(cfg: dict, run: Run) -> None:
    _require(cfg, "data")
    train_set = load_dataset(cfg["data"], "train")
    test_set = load_dataset(cfg["data"], "test")
    if cfg["noise_radius"]:
        size = train_set.images.shape[-2:]
        pts = [
            perturb_annotations(PointAnnotations(p, size), cfg["noise_radius"], rng_seed=cfg["seed"] * 100_003 + i).points
            for i, p in enumerate(train_set.points)
        ]
        train_set = train_set.with_points(pts)
    net_cfg = _network(cfg)
    state, report = net.train(
        net_cfg, train_set, int(cfg["epochs"]), float(cfg["lr"]), int(cfg["batch_size"]), test=test_set,
        schedule=cfg["schedule"],
    )
    net.save_model(state.model, run.path("model.json"))
    run.write_json("report.json", report.to_dict())
    _write_rows(run.path("curve.csv"), ["epoch", "median_loss", "mae", "mse"], report.rows)


def cmd_eval(cfg: dict, run: Run) -> None:
    _require(cfg, "data", "checkpoint")
    model = net.load_model(cfg["checkpoint"])
    data = load_dataset(cfg["data"], cfg["split"])
    mae, rmse = net.evaluate(model, data)
    run.write_json("eval.json", {"mae": mae, "mse": rmse, "n_images": len(data), "split": cfg["split"]})


def cmd_bench(cfg: dict, run: Run) -> None:
    report = bench.run_bench(bench.BenchConfig(**cfg))
    run.write_json("bench.json", report.to_dict())
    report.write_csv(run.path("bench.csv"))


def cmd_study_variance(cfg: dict, run: Run) -> None:
    report = experiments.run_variance_study(experiments.VarianceStudyConfig(**cfg))
    run.write_json("variance_report.json", report.to_dict())
    _write_rows(run.path("variance_replicas.csv"), ["variant", "seed", "mae", "mse"], report.rows)


def cmd_study_noise(cfg: dict, run: Run) -> None:
    report = experiments.run_robustness_study(experiments.RobustnessStudyConfig(**cfg))
    run.write_json("noise_report.json", report.to_dict())
    _write_rows(run.path("noise_curve.csv"), ["radius", "variant", "seed", "mae", "mse"], report.rows)


def cmd_viz_filters(cfg: dict, run: Run) -> None:
    _require(cfg, "checkpoint")
    model = net.load_model(cfg["checkpoint"])
    run.out.mkdir(parents=True, exist_ok=True)
    experiments.export_effective_filters(model, run.out)
    for p in sorted(run.out.glob("filter_*.pgm")):
        run.artifacts.append(p)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "study-variance": cmd_study_variance,
    "study-noise": cmd_study_noise,
    "viz-filters": cmd_viz_filters,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaussconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = resolve_config(args.command, args.config, args.overrides, args.seed)
    except (CommandError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run = Run(args.command, cfg, out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, run)
    except Exception as exc:  # every failure must surface as a nonzero exit
        traceback.print_exc()
        try:
            run.manifest("error", f"{type(exc).__name__}: {exc}")
        except OSError:
            pass
        return 1
    run.manifest("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
