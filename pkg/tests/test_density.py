import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaussconv.density import (
    DMAP_MAGIC,
    OutOfBoundsError,
    PointAnnotations,
    analytic_noise_moments,
    boundary_mass_loss,
    generate_density_map,
    mass_bound,
    moment_agreement,
    monte_carlo_noise_moments,
    perturb_annotations,
    read_annotations_csv,
    read_dmap,
    write_annotations_csv,
    write_dmap,
)


def random_points(rng, n, size):
    h, w = size
    return np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])


def test_empty_annotations():
    d = generate_density_map(PointAnnotations(np.zeros((0, 2)), (16, 16)), 4.0)
    assert d.count == 0 and not d.values.any()


def test_single_centred_point():
    d = generate_density_map(PointAnnotations([[32, 32]], (64, 64)), 4.0)
    assert 0.99 <= d.count <= 1.0


def test_two_point_midpoint():
    # points at x=30 and x=34 on row 32; the midpoint pixel gets two equal tails
    d = generate_density_map(PointAnnotations([[30, 32], [34, 32]], (64, 64)), 4.0)
    expect = 2 * math.exp(-4 / 8) / (2 * math.pi * 4)
    assert d.values[32, 32] == pytest.approx(expect, rel=1e-14)
    assert d.values[32, 32] == pytest.approx(0.0482661763150270, rel=1e-13)


def test_pixel_orientation():
    d = generate_density_map(PointAnnotations([[10, 3]], (16, 32)), 1.0)
    assert np.unravel_index(np.argmax(d.values), d.values.shape) == (3, 10)


def test_out_of_bounds():
    with pytest.raises(OutOfBoundsError):
        generate_density_map(PointAnnotations([[16, 2]], (16, 16)), 4.0)
    with pytest.raises(OutOfBoundsError):
        generate_density_map(PointAnnotations([[-0.1, 2]], (16, 16)), 4.0)
    with pytest.raises(ValueError):
        generate_density_map(PointAnnotations([[1, 2]], (16, 16)), 0.0)


@given(st.integers(0, 2**31), st.integers(0, 60), st.sampled_from([1.0, 4.0, 9.0]))
@settings(max_examples=40, deadline=None)
def test_mass_conservation(seed, n, beta):
    ann = PointAnnotations(random_points(np.random.default_rng(seed), n, (40, 48)), (40, 48))
    d = generate_density_map(ann, beta)
    assert abs(d.count - n) <= mass_bound(ann, beta)
    assert np.all(d.values >= 0)


@given(st.integers(0, 2**31), st.integers(0, 20), st.integers(0, 20))
@settings(max_examples=30, deadline=None)
def test_linearity(seed, n1, n2):
    rng = np.random.default_rng(seed)
    a, b = random_points(rng, n1, (32, 32)), random_points(rng, n2, (32, 32))
    both = generate_density_map(PointAnnotations(np.vstack([a, b]), (32, 32)), 4.0).values
    parts = generate_density_map(PointAnnotations(a, (32, 32)), 4.0).values
    parts = parts + generate_density_map(PointAnnotations(b, (32, 32)), 4.0).values
    np.testing.assert_allclose(both, parts, atol=1e-12, rtol=0)


def test_boundary_loss_corner():
    # a point on the corner pixel centre loses about three quarters of its mass
    ann = PointAnnotations([[0, 0]], (64, 64))
    loss = boundary_mass_loss(ann, 4.0)
    axis = 0.5 * (math.erf(63.5 / 2 / math.sqrt(2)) - math.erf(-0.5 / 2 / math.sqrt(2)))
    assert loss == pytest.approx(1 - axis**2, rel=1e-12)
    assert 0.6 < loss < 0.7


class TestPerturb:
    def test_zero_radius(self):
        ann = PointAnnotations([[1.5, 2.5], [3, 4]], (8, 8))
        np.testing.assert_array_equal(perturb_annotations(ann, 0).points, ann.points)

    def test_deterministic(self):
        ann = PointAnnotations(random_points(np.random.default_rng(0), 50, (32, 32)), (32, 32))
        a = perturb_annotations(ann, 3, rng_seed=9).points
        b = perturb_annotations(ann, 3, rng_seed=9).points
        assert a.tobytes() == b.tobytes()

    def test_magnitude_statistics(self):
        ann = PointAnnotations(np.full((10_000, 2), 500.0), (1000, 1000))
        moved = perturb_annotations(ann, 8, rng_seed=1).points
        dist = np.linalg.norm(moved - ann.points, axis=1)
        assert dist.max() <= 8
        assert dist.mean() == pytest.approx(4.0, abs=0.1)

    def test_clamped(self):
        ann = PointAnnotations(random_points(np.random.default_rng(2), 200, (10, 12)), (10, 12))
        moved = perturb_annotations(ann, 8, rng_seed=3)
        moved.check_bounds()

    def test_axis_mode_and_errors(self):
        ann = PointAnnotations(np.full((1000, 2), 50.0), (100, 100))
        moved = perturb_annotations(ann, 2, rng_seed=0, mode="axis").points
        assert np.abs(moved - 50).max() <= 2
        with pytest.raises(ValueError):
            perturb_annotations(ann, -1)
        with pytest.raises(ValueError):
            perturb_annotations(ann, 1, mode="polar")


class TestNoiseMoments:
    def test_zero_noise_reduces_to_map(self):
        ann = PointAnnotations(random_points(np.random.default_rng(4), 10, (24, 24)), (24, 24))
        m = analytic_noise_moments(ann, 4.0, 0.0)
        np.testing.assert_array_equal(m.mean_map, generate_density_map(ann, 4.0).values)
        assert not m.var_map.any()

    def test_peak_value(self):
        m = analytic_noise_moments(PointAnnotations([[32, 32]], (64, 64)), 4.0, 2.0)
        assert m.mean_map.max() == pytest.approx(1 / (16 * math.pi), rel=1e-14)
        assert m.mean_map.max() == pytest.approx(0.0198943678864869, rel=1e-13)
        assert m.gamma == 8.0 and m.delta == 6.0

    @given(st.floats(0, 5), st.floats(0, 5))
    def test_monotone_blur(self, a, b):
        ann = PointAnnotations([[16, 16]], (32, 32))
        lo, hi = sorted((a, b))
        assert analytic_noise_moments(ann, 4.0, hi).mean_map.max() <= analytic_noise_moments(ann, 4.0, lo).mean_map.max()

    def test_mean_mass(self):
        ann = PointAnnotations([[32, 32], [20, 40]], (64, 64))
        for s in (0.5, 1, 2, 4):
            m = analytic_noise_moments(ann, 4.0, s)
            assert m.mean_map.sum() == pytest.approx(2.0, abs=0.02)

    def test_variance_closed_form_single_point(self):
        # E[Y^2] - E[Y]^2 for one point, written directly
        s, beta = 1.5, 4.0
        ann = PointAnnotations([[16, 16]], (33, 33))
        m = analytic_noise_moments(ann, beta, s)
        r2 = 3.0**2 + 1.0**2  # pixel (row 17, col 19)
        second = math.exp(-r2 / (2 * (beta / 2 + s * s))) / (2 * math.pi * (beta / 2 + s * s)) / (2 * math.pi * 2 * beta)
        mean = math.exp(-r2 / (2 * (beta + s * s))) / (2 * math.pi * (beta + s * s))
        assert m.var_map[17, 19] == pytest.approx(second - mean * mean, rel=1e-12)

    def test_monte_carlo_zero_noise(self):
        ann = PointAnnotations([[5, 5]], (12, 12))
        mc = monte_carlo_noise_moments(ann, 4.0, 0.0, trials=5)
        assert not mc.var_map.any()
        with pytest.raises(ValueError):
            monte_carlo_noise_moments(ann, 4.0, 1.0, trials=1)

    def test_monte_carlo_variance_matches(self):
        ann = PointAnnotations([[12, 12]], (25, 25))
        mc = monte_carlo_noise_moments(ann, 4.0, 2.0, trials=4000, rng_seed=1)
        an = analytic_noise_moments(ann, 4.0, 2.0)
        peak = an.var_map.max()
        assert np.abs(mc.var_map - an.var_map).max() <= 0.1 * peak

    def test_monte_carlo_converges(self):
        ann = PointAnnotations([[12, 12]], (25, 25))
        an = analytic_noise_moments(ann, 4.0, 2.0).mean_map
        err = [
            np.abs(monte_carlo_noise_moments(ann, 4.0, 2.0, trials=t, rng_seed=0).mean_map - an).max()
            for t in (250, 4000)
        ]
        assert err[1] < err[0]

    @pytest.mark.parametrize("eps", [1.0, 2.0, 4.0])
    def test_agreement(self, eps):
        ann = PointAnnotations([[12.3, 14.6], [30.0, 20.2], [22.5, 36.1]], (48, 48))
        mc = monte_carlo_noise_moments(ann, 4.0, eps, trials=3000, rng_seed=11)
        an = analytic_noise_moments(ann, 4.0, eps)
        assert moment_agreement(mc, an, ann, 4.0) >= 0.99


class TestFiles:
    def test_dmap_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).random((5, 7)).astype(np.float32)
        write_dmap(tmp_path / "a.dmap", arr)
        raw = (tmp_path / "a.dmap").read_bytes()
        assert raw[:8] == DMAP_MAGIC and len(raw) == 16 + 4 * 35
        assert raw[8:16] == (5).to_bytes(4, "little") + (7).to_bytes(4, "little")
        np.testing.assert_array_equal(read_dmap(tmp_path / "a.dmap"), arr)

    def test_dmap_errors(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOTADMAP" + bytes(8))
        with pytest.raises(ValueError):
            read_dmap(tmp_path / "bad")
        (tmp_path / "short").write_bytes(DMAP_MAGIC + (2).to_bytes(4, "little") * 2 + bytes(4))
        with pytest.raises(ValueError):
            read_dmap(tmp_path / "short")
        with pytest.raises(ValueError):
            write_dmap(tmp_path / "x", np.zeros(3))

    def test_annotations_roundtrip(self, tmp_path):
        data = {"img_a": np.array([[1.25, 2.5], [3.0, 4.125]]), "img_b": np.array([[0.1, 0.2]])}
        write_annotations_csv(tmp_path / "ann.csv", data)
        assert (tmp_path / "ann.csv").read_text().splitlines()[0] == "image_id,x,y"
        back = read_annotations_csv(tmp_path / "ann.csv")
        assert back.keys() == data.keys()
        for k in data:
            np.testing.assert_allclose(back[k], data[k], rtol=1e-9)

    def test_annotations_bad_header(self, tmp_path):
        (tmp_path / "a.csv").write_text("id,x,y\n")
        with pytest.raises(ValueError):
            read_annotations_csv(tmp_path / "a.csv")
