"""Supervision-target checks: kernel widths, density mass, cross stamps."""

import math

import numpy as np
import pytest

from headcount.groundtruth import (
    PointAnnotationSet,
    adaptive_sigma,
    density_map,
    load_points,
    localization_map,
    save_points,
)


def sigma_oracle(pts, index, k, beta, lo, hi, default):
    pts = [tuple(p) for p in pts]
    others = [p for i, p in enumerate(pts) if i != index]
    if not others:
        return default
    ds = sorted(math.dist(pts[index], p) for p in others)
    mean_d = sum(ds[:k]) / min(k, len(ds))
    return min(max(beta * mean_d, lo), hi)


def density_oracle(pts, h, w, k=3, beta=0.3, trunc=4.0):
    """Full-grid loop evaluation with per-stamp renormalization."""
    out = np.zeros((h, w))
    for i, (cx, cy) in enumerate(pts):
        s = sigma_oracle(pts, i, k, beta, 1.0, 15.0, 4.0)
        g = np.zeros((h, w))
        for r in range(h):
            for c in range(w):
                if abs(c - cx) <= trunc * s and abs(r - cy) <= trunc * s:
                    g[r, c] = math.exp(
                        -((c - cx) ** 2 + (r - cy) ** 2) / (2 * s * s)
                    )
        out += g / g.sum()
    return out


class TestAdaptiveSigma:
    def test_single_point_default(self):
        assert adaptive_sigma([(5.0, 5.0)], 0) == 4.0

    def test_collinear_middle_point(self):
        pts = [(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)]
        assert adaptive_sigma(pts, 1, k=2, beta_sigma=0.3) == pytest.approx(3.0)
        # end point sees distances 10 and 20
        assert adaptive_sigma(pts, 0, k=2, beta_sigma=0.3) == pytest.approx(4.5)

    def test_coincident_points_clamp_floor(self):
        pts = [(7.0, 7.0), (7.0, 7.0)]
        assert adaptive_sigma(pts, 0) == 1.0

    def test_clamp_ceiling(self):
        pts = [(0.0, 0.0), (100.0, 0.0)]
        assert adaptive_sigma(pts, 0) == 15.0

    def test_fewer_neighbors_than_k(self):
        pts = [(0.0, 0.0), (0.0, 8.0)]
        # k=3 but only one neighbor exists
        assert adaptive_sigma(pts, 0, k=3) == pytest.approx(2.4)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            adaptive_sigma([(1.0, 1.0)], 1)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            adaptive_sigma([(1.0, 1.0)], 0, k=0)

    def test_matches_oracle_random_sets(self):
        rng = np.random.default_rng(101)
        for _ in range(10):
            m = int(rng.integers(2, 12))
            pts = rng.uniform(0, 50, size=(m, 2))
            for k in (1, 3, 5):
                for i in range(m):
                    got = adaptive_sigma(pts, i, k=k)
                    want = sigma_oracle(pts, i, k, 0.3, 1.0, 15.0, 4.0)
                    assert got == pytest.approx(want, abs=1e-12)


class TestDensityMap:
    def test_empty_set_zero_map(self):
        ann = PointAnnotationSet("e", 16, 16, [])
        d = density_map(ann)
        assert d.values.shape == (16, 16)
        assert d.values.sum() == 0.0

    def test_single_center_point(self):
        ann = PointAnnotationSet("c", 64, 64, [(32.0, 32.0)])
        d = density_map(ann)
        assert abs(d.count - 1.0) < 1e-9
        r, c = np.unravel_index(np.argmax(d.values), d.values.shape)
        assert (r, c) == (32, 32)

    def test_seven_points_sum(self):
        rng = np.random.default_rng(7)
        pts = [tuple(p) for p in rng.uniform(0, 128, size=(7, 2))]
        ann = PointAnnotationSet("s", 128, 128, pts)
        d = density_map(ann)
        assert abs(d.count - 7.0) < 1e-6

    def test_matches_full_grid_oracle(self):
        rng = np.random.default_rng(55)
        pts = [tuple(p) for p in rng.uniform(2, 30, size=(4, 2))]
        ann = PointAnnotationSet("o", 32, 32, pts)
        got = density_map(ann).values
        want = density_oracle(pts, 32, 32)
        assert np.max(np.abs(got - want)) < 1e-12

    @pytest.mark.parametrize("m,seed", [(1, 1), (5, 2), (40, 3), (120, 4)])
    def test_count_conservation(self, m, seed):
        rng = np.random.default_rng(seed)
        # include border-hugging points so clipping is exercised
        pts = [tuple(p) for p in rng.uniform(0, 94.9, size=(m, 2))]
        ann = PointAnnotationSet("cc", 95, 95, pts)
        d = density_map(ann)
        assert abs(d.count - m) <= 1e-6 * m
        assert d.values.min() >= 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        pts = [tuple(p) for p in rng.uniform(0, 60, size=(9, 2))]
        a = density_map(PointAnnotationSet("p", 64, 64, pts)).values
        perm = [pts[i] for i in rng.permutation(9)]
        b = density_map(PointAnnotationSet("p", 64, 64, perm)).values
        assert np.max(np.abs(a - b)) < 1e-12

    def test_integer_translation_equivariance(self):
        rng = np.random.default_rng(13)
        # keep all stamp windows interior before and after the shift
        pts = [tuple(p) for p in rng.uniform(25, 40, size=(5, 2))]
        moved = [(x + 5, y + 3) for x, y in pts]
        a = density_map(PointAnnotationSet("t", 80, 80, pts)).values
        b = density_map(PointAnnotationSet("t", 80, 80, moved)).values
        assert np.max(np.abs(a[22:60, 22:60] - b[25:63, 27:65])) < 1e-12


class TestLocalizationMap:
    def test_interior_point_cross(self):
        ann = PointAnnotationSet("i", 9, 9, [(4.0, 4.0)])
        v = localization_map(ann).values
        assert v.sum() == 5.0
        assert v[4, 4] == v[3, 4] == v[5, 4] == v[4, 3] == v[4, 5] == 1.0

    def test_corner_point_clipped(self):
        ann = PointAnnotationSet("k", 8, 8, [(0.0, 0.0)])
        v = localization_map(ann).values
        assert v.sum() == 3.0
        assert v[0, 0] == v[0, 1] == v[1, 0] == 1.0

    def test_two_points_one_pixel_apart(self):
        ann = PointAnnotationSet("n", 16, 16, [(7.0, 7.0), (8.0, 7.0)])
        v = localization_map(ann).values
        assert v.sum() == 8.0

    def test_rounds_half_up(self):
        ann = PointAnnotationSet("r", 32, 32, [(10.5, 20.5)])
        v = localization_map(ann).values
        assert v[21, 11] == 1.0
        assert v[21, 10] == 1.0 and v[20, 11] == 1.0
        assert v[19, 11] == 0.0

    def test_edge_rounding_stays_in_frame(self):
        ann = PointAnnotationSet("e", 10, 10, [(9.7, 9.7)])
        v = localization_map(ann).values
        assert v.sum() >= 1.0

    def test_positive_count_bounds(self):
        rng = np.random.default_rng(77)
        pts = [tuple(p) for p in rng.uniform(0, 63.9, size=(30, 2))]
        ann = PointAnnotationSet("b", 64, 64, pts)
        v = localization_map(ann).values
        assert set(np.unique(v)) <= {0.0, 1.0}
        assert len(pts) <= v.sum() <= 5 * len(pts)


class TestIngest:
    def test_csv_round_trip(self, tmp_path):
        mapping = {
            "img_a": [(1.25, 2.5), (30.0, 40.0)],
            "img_b": [(0.0, 0.0)],
        }
        path = tmp_path / "pts.csv"
        save_points(path, mapping)
        back = load_points(path)
        assert back == mapping

    def test_json_round_trip(self, tmp_path):
        mapping = {"img": [(5.5, 6.5)]}
        path = tmp_path / "pts.json"
        save_points(path, mapping)
        assert load_points(path) == mapping

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("image_id,col\na,1\n")
        with pytest.raises(ValueError):
            load_points(path)

    def test_out_of_bounds_point_rejected(self):
        with pytest.raises(ValueError):
            PointAnnotationSet("x", 10, 10, [(10.0, 3.0)])
        with pytest.raises(ValueError):
            PointAnnotationSet("x", 10, 10, [(3.0, -0.1)])
