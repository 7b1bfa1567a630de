"""Occlusion maps: sliding-window probability drops and the scalp readout."""

import warnings

import numpy as np
import pytest

from szdetect.imaging import GRID, grid_extent_for, nearest_pixel
from szdetect.occlusion import (NotPositiveBaseline, OcclusionMap,
                                argmax_position, covering_positions,
                                map_to_scalp, occluder_center_pixel,
                                occlusion_csv, occlusion_map, occlusion_svg)


def region_mean_predictor(row0, col0, size=4):
    """Probability driven by the mean of one pixel region: occluding that
    region with zeros lowers p(seizure), elsewhere changes nothing."""

    def predict(batch):
        region = batch[:, :, :, row0:row0 + size, col0:col0 + size]
        signal = region.mean(axis=(1, 2, 3, 4))
        p1 = 1.0 / (1.0 + np.exp(-signal))
        return np.stack([1.0 - p1, p1], axis=1)

    return predict


def constant_predictor(p1):
    def predict(batch):
        out = np.full((batch.shape[0], 2), 1.0 - p1)
        out[:, 1] = p1
        return out

    return predict


def hot_sequence(row0, col0, size=4, value=3.0):
    pixels = np.zeros((30, 3, GRID, GRID), dtype=np.float32)
    pixels[:, :, row0:row0 + size, col0:col0 + size] = value
    return pixels


class TestOcclusionMap:
    def test_grid_dimensions_default(self):
        omap = occlusion_map(constant_predictor(0.9),
                             np.zeros((30, 3, GRID, GRID)))
        assert omap.drops.shape == (7, 7)  # (16-4)//2 + 1

    @pytest.mark.parametrize("size,stride,expected",
                             [(4, 2, 7), (4, 4, 4), (8, 2, 5), (16, 1, 1),
                              (2, 3, 5)])
    def test_grid_dimensions_formula(self, size, stride, expected):
        omap = occlusion_map(constant_predictor(0.9),
                             np.zeros((30, 3, GRID, GRID)),
                             size=size, stride=stride)
        assert omap.drops.shape == (expected, expected)
        assert omap.drops.shape == ((GRID - size) // stride + 1,) * 2

    def test_drop_is_zero_where_patch_equals_fill(self):
        pixels = hot_sequence(0, 0, size=4)
        omap = occlusion_map(region_mean_predictor(0, 0), pixels,
                             size=4, stride=2, fill=0.0)
        # bottom-right occluders sit on all-zero pixels == fill: drop exactly 0
        assert omap.drops[6, 6] == 0.0
        assert omap.drops[0, 6] == 0.0
        assert omap.drops[0, 0] > 0.0

    def test_full_cover_occluder_equals_fill_response(self):
        rng = np.random.default_rng(0)
        pixels = rng.normal(size=(30, 3, GRID, GRID)).astype(np.float32)
        predict = region_mean_predictor(0, 0, size=GRID)
        omap = occlusion_map(predict, pixels, size=GRID, stride=1, fill=0.25)
        filled = np.full_like(pixels, 0.25)
        expected_drop = (predict(pixels[np.newaxis])[0, 1]
                         - predict(filled[np.newaxis])[0, 1])
        assert omap.drops.shape == (1, 1)
        assert omap.drops[0, 0] == pytest.approx(expected_drop, abs=1e-7)

    def test_localizes_discriminative_region(self):
        pixels = hot_sequence(6, 8, size=4)
        omap = occlusion_map(region_mean_predictor(6, 8), pixels)
        i, j = argmax_position(omap)
        assert (i * omap.stride, j * omap.stride) == (6, 8)
        # the winning occluder is centered on the hot region
        assert occluder_center_pixel(omap, i, j) == (7.5, 9.5)

    def test_negative_baseline_warns(self):
        with pytest.warns(NotPositiveBaseline):
            occlusion_map(constant_predictor(0.3),
                          np.zeros((30, 3, GRID, GRID)))
        omap = None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            omap = occlusion_map(constant_predictor(0.3),
                                 np.zeros((30, 3, GRID, GRID)))
        assert omap.baseline_was_positive is False

    def test_positive_baseline_no_warning(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            omap = occlusion_map(constant_predictor(0.8),
                                 np.zeros((30, 3, GRID, GRID)))
        assert omap.baseline_was_positive is True
        assert omap.baseline_prob == pytest.approx(0.8)

    def test_bad_geometry_rejected(self):
        pixels = np.zeros((30, 3, GRID, GRID))
        with pytest.raises(ValueError):
            occlusion_map(constant_predictor(0.9), pixels, size=0)
        with pytest.raises(ValueError):
            occlusion_map(constant_predictor(0.9), pixels, size=17)
        with pytest.raises(ValueError):
            occlusion_map(constant_predictor(0.9), pixels, stride=0)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        pixels = (hot_sequence(4, 4)
                  + 0.1 * rng.normal(size=(30, 3, GRID, GRID))
                  .astype(np.float32))
        a = occlusion_map(region_mean_predictor(4, 4), pixels)
        b = occlusion_map(region_mean_predictor(4, 4), pixels)
        np.testing.assert_array_equal(a.drops, b.drops)


def make_map(drops, size=4, stride=2, fill=0.0):
    drops = np.asarray(drops, dtype=np.float64)
    return OcclusionMap(drops=drops, occluder_size=size, stride=stride,
                        fill=fill, baseline_prob=0.9,
                        baseline_was_positive=True)


class TestCoveringPositions:
    def test_interior_pixel_covered_by_multiple_occluders(self):
        omap = make_map(np.zeros((7, 7)))
        # pixel (8, 8): occluders at offsets (6,6),(6,8),(8,6),(8,8) => i,j in {3,4}
        assert set(covering_positions(omap, 8, 8)) == {(3, 3), (3, 4),
                                                       (4, 3), (4, 4)}

    def test_corner_pixel_single_occluder(self):
        omap = make_map(np.zeros((7, 7)))
        assert covering_positions(omap, 0, 0) == [(0, 0)]

    def test_centers(self):
        omap = make_map(np.zeros((7, 7)))  # size 4: center offset (4-1)/2
        assert occluder_center_pixel(omap, 0, 0) == (1.5, 1.5)
        assert occluder_center_pixel(omap, 3, 1) == (7.5, 3.5)


class TestMapToScalp:
    def test_uniform_map_ties_sorted_by_name(self, layout):
        ranking = map_to_scalp(make_map(np.full((7, 7), 0.125)), layout)
        assert [name for name, _ in ranking] == sorted(layout.names)
        assert all(s == pytest.approx(0.125) for _, s in ranking)

    def test_single_hot_occluder_scores_only_covered_electrodes(self, layout):
        extent = grid_extent_for(layout)
        drops = np.zeros((7, 7))
        drops[3, 0] = 1.0  # covers pixel rows 6-9, cols 0-3
        ranking = dict(map_to_scalp(make_map(drops), layout))
        for name in layout.names:
            row, col = nearest_pixel(layout.positions2d[name], extent)
            covered = 6 <= row <= 9 and 0 <= col <= 3
            if covered:
                assert ranking[name] > 0.0, name
            else:
                assert ranking[name] == pytest.approx(0.0), name
        assert ranking["T7"] > 0.0

    def test_constant_shift_preserves_ranking(self, layout):
        rng = np.random.default_rng(2)
        drops = rng.normal(size=(7, 7))
        base = [name for name, _ in map_to_scalp(make_map(drops), layout)]
        shifted = [name for name, _ in
                   map_to_scalp(make_map(drops + 5.0), layout)]
        assert base == shifted

    def test_ranking_descends(self, layout):
        rng = np.random.default_rng(3)
        scores = [s for _, s in
                  map_to_scalp(make_map(rng.normal(size=(7, 7))), layout)]
        assert scores == sorted(scores, reverse=True)


class TestRenderers:
    def test_csv_matrix_layout(self):
        omap = make_map(np.arange(9.0).reshape(3, 3), size=8, stride=4)
        text = occlusion_csv(omap)
        lines = text.strip().split("\n")
        assert len(lines) == 4  # geometry header + one line per map row
        assert lines[0].startswith("#")
        assert "occluder_size=8" in lines[0]
        assert lines[1] == "0.000000,1.000000,2.000000"
        assert lines[3] == "6.000000,7.000000,8.000000"

    def test_svg_is_well_formed_and_names_electrodes(self, layout):
        svg = occlusion_svg(make_map(np.eye(7)), layout)
        assert svg.startswith("<svg") or svg.startswith("<?xml")
        assert "</svg>" in svg
        for name in ("T7", "CZ", "FP1"):
            assert name in svg
