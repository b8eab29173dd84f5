import csv
import json

import numpy as np
import pytest

from gaussconv import bench, gconv
from gaussconv.bench import BenchConfig, BenchSizeError, ParityError, build_layer, fast_scaling, run_bench, vanilla_specs


def small(**kw):
    base = dict(image_size=24, channels_in=2, channels_out=2, k=4, repetitions=5, warmup_runs=2)
    base.update(kw)
    return BenchConfig(**base)


class TestConfig:
    @pytest.mark.parametrize(
        "kw,exc",
        [
            ({"repetitions": 4}, ValueError),
            ({"warmup_runs": 1}, ValueError),
            ({"n": 257}, BenchSizeError),
            ({"image_size": 65}, BenchSizeError),
            ({"k": 33}, BenchSizeError),
        ],
    )
    def test_rejects(self, kw, exc):
        with pytest.raises(exc):
            run_bench(small(**kw))

    def test_default_n_is_k_squared(self):
        assert BenchConfig(k=16).n_kernels == 256
        assert BenchConfig(k=4, n=10).n_kernels == 10


def test_vanilla_set_matches_layer():
    cfg = small()
    layer = build_layer(cfg)
    specs, weights = vanilla_specs(layer, 16)
    assert len(specs) == 16
    np.testing.assert_allclose(weights.sum(), layer.k * 1.0)
    x = np.random.default_rng(0).normal(size=(2, 24, 24))
    out = gconv.forward_massive_oracle(x, specs, layer.mix, layer.bias, weights)
    np.testing.assert_allclose(out, gconv.forward_fast(x, layer), atol=1e-10)


def test_report_schema(tmp_path):
    report = run_bench(small())
    for table in (report.forward, report.backward):
        assert set(table) == {"vanilla", "lra", "fast"}
        assert all(t.median > 0 and t.iqr >= 0 and len(t.samples) == 5 for t in table.values())
    assert report.measured_ratios["vanilla/fast"] == pytest.approx(
        report.forward["vanilla"].median / report.forward["fast"].median
    )
    layer = build_layer(small())
    assert tuple(report.op_counts.values()) == gconv.complexity_count(layer, (2, 24, 24), 16)
    assert all(v <= bench.PARITY_TOL for v in report.parity.values())
    assert json.loads(report.to_json())["config"]["n_kernels"] == 16
    report.write_csv(tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert len(rows) == 6 and {r["direction"] for r in rows} == {"forward", "backward"}


def test_parity_gate(monkeypatch):
    real = gconv.forward_fast
    monkeypatch.setattr(gconv, "forward_fast", lambda x, layer: real(x, layer) + 1e-6)
    with pytest.raises(ParityError):
        run_bench(small(backward=False))


def test_unequal_n_skips_vanilla_parity():
    report = run_bench(small(n=5, backward=False))
    assert "vanilla_vs_fast" not in report.parity and report.backward == {}


def test_degenerate_parity():
    report = run_bench(BenchConfig(k=1, backward=False))
    med = [t.median for t in report.forward.values()]
    assert max(med) <= 3 * min(med)
    assert report.op_counts["vanilla"] == report.op_counts["lra"]


def test_predicted_ratio_default():
    layer = build_layer(BenchConfig())
    assert layer.grid_radius == 4 and layer.k == 16
    v, l, f = gconv.complexity_count(layer, (4, 64, 64), 256)
    assert v / f == 324


def test_fast_path_scales_linearly_in_k():
    res = fast_scaling()
    assert res["k"] == [2, 4, 8, 16]
    assert res["max_fit_ratio"] <= 2.0
