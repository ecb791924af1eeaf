"""Polyline containers and raster footprints."""
import numpy as np
import pytest

from bevmap.geometry import BevConfig
from bevmap.maps import (
    CLASS_NAMES,
    DEFAULT_THICKNESS,
    Polyline,
    VectorMap,
    class_channel,
    map_equal,
    polyline_cells,
    polyline_equal,
    resolve_thickness,
    segment_cells,
)


def test_class_channels_skip_background():
    assert [class_channel(n) for n in CLASS_NAMES] == [1, 2, 3]
    with pytest.raises(ValueError):
        class_channel("sidewalk")


def test_polyline_validation():
    with pytest.raises(ValueError):
        Polyline("divider", [[0.0, 0.0]])
    with pytest.raises(ValueError):
        Polyline("divider", [[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        Polyline("kerb", [[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError):
        Polyline("divider", [[0.0, 0.0], [np.inf, 0.0]])
    p = Polyline("boundary", [[0, 0], [3, 4], [3, 5]])
    assert p.length == pytest.approx(6.0)


def test_vector_map_by_class():
    bev = BevConfig(0, 4, 0, 4, 1.0)
    vm = VectorMap(bev, [
        Polyline("divider", [[0, 0], [1, 0]]),
        Polyline("boundary", [[0, 1], [1, 1]]),
        Polyline("divider", [[0, 2], [1, 2]]),
    ])
    assert len(vm.by_class("divider")) == 2
    assert len(vm.by_class("ped_crossing")) == 0
    with pytest.raises(ValueError):
        vm.by_class("road")


def test_resolve_thickness():
    assert resolve_thickness(None, "ped_crossing") == DEFAULT_THICKNESS["ped_crossing"]
    assert resolve_thickness(5, "divider") == 5
    assert resolve_thickness({"divider": 7}, "divider") == 7
    with pytest.raises(ValueError):
        resolve_thickness(2, "divider")
    with pytest.raises(ValueError):
        resolve_thickness(-1, "divider")


def test_equality_helpers():
    a = Polyline("divider", [[0, 0], [1, 1]], 0.5)
    b = Polyline("divider", [[0, 0], [1, 1]], 0.5)
    c = Polyline("divider", [[0, 0], [1, 1]], 0.4)
    assert polyline_equal(a, b)
    assert not polyline_equal(a, c)
    bev = BevConfig(0, 2, 0, 2, 1.0)
    assert map_equal(VectorMap(bev, [a]), VectorMap(bev, [b]))
    assert not map_equal(VectorMap(bev, [a]), VectorMap(bev, [a, b]))


def _cells_oracle(bev, a, b, samples=20000):
    """Dense sampling oracle: every sampled position's closed cell box.

    Sampling cannot prove a cell is absent, so the test asserts the oracle
    set is a subset of the supercover and that every supercover cell is
    within half a cell diagonal of the segment.
    """
    t = np.linspace(0.0, 1.0, samples)
    xs = a[0] + t * (b[0] - a[0])
    ys = a[1] + t * (b[1] - a[1])
    r = np.floor((xs - bev.x_min) / bev.pitch).astype(int)
    c = np.floor((ys - bev.y_min) / bev.pitch).astype(int)
    keep = (r >= 0) & (r < bev.height) & (c >= 0) & (c < bev.width)
    return set(zip(r[keep].tolist(), c[keep].tolist()))


def _point_segment_dist(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
    return float(np.linalg.norm(a + t * ab - p))


@pytest.mark.parametrize("seed", range(8))
def test_segment_cells_against_sampling_oracle(seed):
    rng = np.random.default_rng(seed)
    bev = BevConfig(0.0, 8.0, 0.0, 6.0, 0.5)
    # nudge endpoints off exact gridlines so the oracle is unambiguous
    a = rng.uniform([0.3, 0.3], [7.7, 5.7]) + 1e-4
    b = rng.uniform([0.3, 0.3], [7.7, 5.7]) + 1e-4
    got = segment_cells(bev, a, b)
    got_set = set(got)
    assert len(got) == len(got_set), "cells listed twice"
    oracle = _cells_oracle(bev, a, b)
    assert oracle <= got_set
    # no false positives: each returned cell's center box touches the segment
    half_diag = bev.pitch * np.sqrt(2) / 2 + 1e-9
    for (r, c) in got:
        center = np.array(bev.cell_center(r, c))
        assert _point_segment_dist(center, np.asarray(a), np.asarray(b)) <= half_diag


def test_segment_cells_axis_aligned_run():
    bev = BevConfig(0.0, 6.0, 0.0, 6.0, 1.0)
    cells = segment_cells(bev, (0.5, 2.5), (4.5, 2.5))
    assert cells == [(0, 2), (1, 2), (2, 2), (3, 2), (4, 2)]


def test_segment_cells_exact_corner_touches_both_side_cells():
    bev = BevConfig(0.0, 4.0, 0.0, 4.0, 1.0)
    cells = segment_cells(bev, (0.5, 0.5), (2.5, 2.5))
    assert (0, 0) in cells and (2, 2) in cells
    # the diagonal passes exactly through the (1,1) lattice corner
    assert (1, 0) in cells and (0, 1) in cells


def test_segment_cells_outside_extent_empty():
    bev = BevConfig(0.0, 4.0, 0.0, 4.0, 1.0)
    assert segment_cells(bev, (6.0, 1.0), (8.0, 2.0)) == []


def test_segment_cells_clips_partially_outside():
    bev = BevConfig(0.0, 4.0, 0.0, 4.0, 1.0)
    cells = segment_cells(bev, (-2.0, 1.5), (2.5, 1.5))
    assert cells[0] == (0, 1)
    assert (2, 1) in cells
    assert all(0 <= r < 4 and 0 <= c < 4 for r, c in cells)


def test_segment_cells_traversal_is_connected():
    rng = np.random.default_rng(99)
    bev = BevConfig(0.0, 10.0, 0.0, 10.0, 0.25)
    for _ in range(20):
        a = rng.uniform(0.2, 9.8, size=2) + 1e-5
        b = rng.uniform(0.2, 9.8, size=2) + 1e-5
        cells = segment_cells(bev, a, b)
        for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
            assert abs(r0 - r1) + abs(c0 - c1) <= 2


def test_polyline_cells_first_visit_order_and_dedup():
    bev = BevConfig(0.0, 6.0, 0.0, 6.0, 1.0)
    # out-and-back along the same row revisits its own cells
    p = Polyline("divider", [[0.5, 0.5], [3.5, 0.5], [0.6, 0.5]])
    cells = polyline_cells(p, bev, thickness=1)
    assert cells == [(0, 0), (1, 0), (2, 0), (3, 0)]


def test_polyline_cells_thickness_dilates_chebyshev():
    bev = BevConfig(0.0, 7.0, 0.0, 7.0, 1.0)
    p = Polyline("divider", [[3.5, 1.5], [3.5, 5.5]])
    thin = set(polyline_cells(p, bev, thickness=1))
    thick = set(polyline_cells(p, bev, thickness=3))
    want = set()
    for (r, c) in thin:
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if 0 <= r + dr < 7 and 0 <= c + dc < 7:
                    want.add((r + dr, c + dc))
    assert thick == want


def test_polyline_cells_rejects_even_thickness():
    bev = BevConfig(0.0, 4.0, 0.0, 4.0, 1.0)
    p = Polyline("divider", [[0.5, 0.5], [2.5, 0.5]])
    with pytest.raises(ValueError):
        polyline_cells(p, bev, thickness=4)
