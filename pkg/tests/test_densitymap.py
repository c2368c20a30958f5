import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iiao.densitymap import (AnnotationError, AnnotationSet, DensityMap, adaptive_sigmas, load_annotations,
                             load_csv, load_pgm, render_adaptive, render_fixed, save_csv, save_pgm,
                             to_target_grid)


def ann(points, w=64, h=48):
    return AnnotationSet("t", w, h, np.array(points, dtype=float).reshape(-1, 2))


# -- loading -------------------------------------------------------------------------

def test_load_json(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps({"w": 100, "h": 80, "points": [[10, 20]]}))
    a = load_annotations(p)
    assert (a.width, a.height, a.count) == (100, 80, 1)
    np.testing.assert_array_equal(a.points, [[10, 20]])


def test_load_empty_points(tmp_path):
    p = tmp_path / "a.json"
    p.write_text('{"w": 10, "h": 10, "points": []}')
    assert load_annotations(p).count == 0


def test_out_of_bounds_point_is_clamped(tmp_path):
    p = tmp_path / "a.json"
    p.write_text(json.dumps({"w": 100, "h": 80, "points": [[150, 20], [5, 5]]}))
    a = load_annotations(p)
    assert a.clamped == 1
    np.testing.assert_allclose(a.points[0], [99.999, 20])
    np.testing.assert_array_equal(a.points[1], [5, 5])


def test_load_csv_with_sidecar(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("x,y\n1.5,2\n3,4\n")
    (tmp_path / "b.dims.json").write_text('{"w": 10, "h": 12}')
    a = load_annotations(p)
    assert (a.width, a.height, a.count) == (10, 12, 2)


def test_csv_parse_error_names_line(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,y\n1,2\n3,oops\n")
    with pytest.raises(AnnotationError, match="line 3"):
        load_annotations(p, width=10, height=10)


def test_json_missing_field_named(tmp_path):
    p = tmp_path / "d.json"
    p.write_text('{"w": 10, "points": []}')
    with pytest.raises(AnnotationError, match="'h'"):
        load_annotations(p)


def test_negative_dimensions_rejected():
    with pytest.raises(AnnotationError):
        AnnotationSet("x", -5, 10, [])


# -- fixed kernels ---------------------------------------------------------------------

def test_fixed_center_point_has_unit_mass():
    for sigma in (0.3, 1.0, 4.0, 11.0):
        assert render_fixed(ann([[32, 24]]), sigma).values.sum() == pytest.approx(1.0, abs=1e-9)


def test_fixed_empty_is_zero():
    dm = render_fixed(ann([]), 4.0)
    assert dm.values.shape == (48, 64)
    assert not dm.values.any()


def _dense_oracle(x, y, sigma, w, h):
    """Gaussian evaluated over the whole grid, 4-sigma box mask, normalised to one."""
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if abs(j - x) <= 4 * sigma and abs(i - y) <= 4 * sigma:
                out[i, j] = math.exp(-((j - x) ** 2 + (i - y) ** 2) / (2 * sigma ** 2))
    return out / out.sum()


def test_fixed_corner_point_matches_dense_oracle():
    dm = render_fixed(ann([[0.4, 1.2]]), 4.0)
    assert dm.values.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(dm.values, _dense_oracle(0.4, 1.2, 4.0, 64, 48), atol=1e-14)


def test_fixed_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        render_fixed(ann([[1, 1]]), 0.0)


def test_tiny_sigma_keeps_mass_on_home_pixel():
    dm = render_fixed(ann([[10.5, 7.0]]), 1e-4)
    assert dm.values.sum() == pytest.approx(1.0)


# -- adaptive kernels -------------------------------------------------------------------

def test_adaptive_two_points():
    s = adaptive_sigmas(np.array([[10.0, 10.0], [20.0, 10.0]]), k=1, beta=0.3, sigma_min=0.0, sigma_max=100.0)
    np.testing.assert_allclose(s, [3.0, 3.0])


def test_adaptive_single_point_uses_sigma_max():
    np.testing.assert_array_equal(adaptive_sigmas(np.array([[5.0, 5.0]]), k=3, sigma_max=15.0), [15.0])


def _knn_oracle(points, k, beta):
    out = []
    for i, p in enumerate(points):
        d = sorted(math.dist(p, q) for j, q in enumerate(points) if j != i)
        out.append(beta * sum(d[:k]) / k)
    return np.array(out)


def test_adaptive_collinear_matches_brute_force():
    pts = np.array([[0.0, 5.0], [10.0, 5.0], [30.0, 5.0]])
    s = adaptive_sigmas(pts, k=2, beta=0.3, sigma_min=0.0, sigma_max=100.0)
    assert s[1] == pytest.approx(4.5)
    np.testing.assert_allclose(s, _knn_oracle(pts, 2, 0.3))


@given(st.integers(4, 40), st.integers(1, 3), st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_adaptive_matches_brute_force_random(n, k, seed):
    pts = np.random.default_rng(seed).uniform(0, 100, (n, 2))
    s = adaptive_sigmas(pts, k=k, beta=0.3, sigma_min=0.0, sigma_max=1e9)
    np.testing.assert_allclose(s, _knn_oracle(pts, k, 0.3), rtol=1e-12)


def test_adaptive_equal_spacing_reduces_to_fixed():
    # equilateral triangle: every nearest-neighbour distance is d
    d = 10.0
    pts = [[20, 20], [20 + d, 20], [20 + d / 2, 20 + d * math.sqrt(3) / 2]]
    a = ann(pts)
    np.testing.assert_allclose(render_adaptive(a, k=2, beta=0.3, sigma_min=0.1, sigma_max=50).values,
                               render_fixed(a, 0.3 * d).values, atol=1e-15)


@given(st.integers(0, 500), st.integers(0, 2**31), st.sampled_from(["fixed", "adaptive"]))
@settings(max_examples=40, deadline=None)
def test_count_conservation(n, seed, mode):
    rng = np.random.default_rng(seed)
    w, h = int(rng.integers(8, 200)), int(rng.integers(8, 200))
    a = AnnotationSet("r", w, h, rng.uniform([0, 0], [w, h], (n, 2)))
    dm = render_fixed(a, float(rng.uniform(0.5, 10))) if mode == "fixed" else render_adaptive(a)
    assert abs(dm.values.sum() - n) <= 1e-6 * max(n, 1)
    assert dm.values.min() >= 0


# -- target grid -------------------------------------------------------------------------

def test_target_grid_preserves_sum():
    rng = np.random.default_rng(0)
    v = rng.random((400, 400))
    v *= 57.0 / v.sum()
    g = to_target_grid(DensityMap(v))
    assert g.values.shape == (50, 50)
    assert g.values.sum() == pytest.approx(57.0, abs=1e-9)


def test_target_grid_zero_map():
    g = to_target_grid(DensityMap(np.zeros((400, 400))))
    assert g.values.shape == (50, 50) and not g.values.any()


def test_target_grid_impulse_lands_in_block():
    v = np.zeros((400, 400))
    v[8, 8] = 1.0
    g = to_target_grid(DensityMap(v)).values
    assert np.count_nonzero(g) == 1
    assert g[1, 1] == 1.0


def test_target_grid_rejects_indivisible():
    with pytest.raises(ValueError):
        to_target_grid(DensityMap(np.zeros((30, 32))))


@given(st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_target_grid_is_additive(seed):
    rng = np.random.default_rng(seed)
    # dyadic values keep every partial sum exact
    a = rng.integers(0, 2**20, (32, 48)) / 2**20
    b = rng.integers(0, 2**20, (32, 48)) / 2**20
    lhs = to_target_grid(DensityMap(a + b)).values
    rhs = to_target_grid(DensityMap(a)).values + to_target_grid(DensityMap(b)).values
    np.testing.assert_array_equal(lhs, rhs)


# -- export ---------------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    v = np.random.default_rng(1).random((7, 9)) * 1e-3
    save_csv(v, tmp_path / "m.csv")
    np.testing.assert_allclose(load_csv(tmp_path / "m.csv"), v, rtol=0, atol=1e-12)


def test_pgm_header_records_scale(tmp_path):
    v = np.array([[0.0, 0.5], [0.25, 2.0]])
    factor = save_pgm(v, tmp_path / "m.pgm")
    header = (tmp_path / "m.pgm").read_bytes()[:40].decode("ascii", "replace")
    assert f"# scale {factor!r}" in header
    back, f2 = load_pgm(tmp_path / "m.pgm")
    assert f2 == factor
    np.testing.assert_allclose(back, v, atol=1.0 / factor)
