import numpy as np
import pytest
from hypothesis import given, strategies as st

from routewin.tensorlab import DimensionError, Tensor
from routewin.windowing import (Region, RegionShape, WindowGrid, build_index_table, candidate_offsets,
                                from_tokens, merge, partition, to_tokens)
from routewin.oracles import region_offsets


def test_pixel_lands_in_expected_window_slot():
    x = np.zeros((1, 4, 4))
    x[0, 2, 3] = 1.0
    win = partition(Tensor(x), 2).data
    assert win.shape == (2, 2, 1, 4)
    assert win[1, 1, 0, 1] == 1.0 and win.sum() == 1.0


def test_single_window_is_flattened_input(rng):
    x = rng.normal(size=(3, 4, 4))
    assert np.array_equal(partition(Tensor(x), 4).data[0, 0], x.reshape(3, 16))


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 999))
def test_partition_merge_roundtrip(k, s_h, s_w, c, seed):
    x = np.random.default_rng(seed).normal(size=(c, s_h * k, s_w * k))
    assert np.array_equal(merge(partition(Tensor(x), k), k, s_h * k, s_w * k).data, x)
    assert np.array_equal(from_tokens(to_tokens(Tensor(x), k), k, s_h * k, s_w * k).data, x)


def test_partition_is_bijection_on_positions():
    x = np.arange(6 * 8, dtype=float).reshape(1, 6, 8)
    vals = partition(Tensor(x), 2).data.ravel()
    assert sorted(vals) == list(range(48))


def test_merge_of_zeros_and_bad_shapes():
    assert not merge(Tensor(np.zeros((2, 2, 3, 4))), 2, 4, 4).data.any()
    with pytest.raises(DimensionError):
        merge(Tensor(np.zeros((2, 2, 3, 4))), 2, 6, 4)
    with pytest.raises(DimensionError):
        partition(Tensor(np.zeros((1, 5, 4))), 2)


def test_candidate_offsets_examples():
    assert candidate_offsets(RegionShape(Region.CROSS, 1)) == [(-1, 0), (0, -1), (0, 1), (1, 0)]
    rect = candidate_offsets(RegionShape(Region.RECTANGLE, 1))
    assert len(rect) == 8 and (0, 0) not in rect and rect == sorted(rect)
    cross2 = candidate_offsets(RegionShape(Region.CROSS, 2))
    assert len(cross2) == 8 and all(dy == 0 or dx == 0 for dy, dx in cross2)
    assert RegionShape(Region.CROSS, 2).count == 8 and RegionShape(Region.RECTANGLE, 2).count == 24


@pytest.mark.parametrize("kind", ["cross", "rectangle"])
@pytest.mark.parametrize("radius", [1, 2, 3])
def test_candidate_offsets_match_independent_enumeration(kind, radius):
    shape = RegionShape(kind, radius)
    assert candidate_offsets(shape) == region_offsets(kind, radius)
    assert candidate_offsets(shape) == candidate_offsets(shape)


def test_index_table_clamps_at_border():
    t = build_index_table(WindowGrid(1, 2, 2), RegionShape(Region.CROSS, 1))
    assert t[0, 0, 0] == 0  # (-1,0) from (0,0) clamps to itself


def test_index_table_interior_true_neighbours():
    grid = WindowGrid(1, 3, 3)
    t = build_index_table(grid, RegionShape(Region.CROSS, 1))
    assert list(t[1, 1]) == [grid.flat(0, 1), grid.flat(1, 0), grid.flat(1, 2), grid.flat(2, 1)]


def test_index_table_range_and_offsets_random():
    rng = np.random.default_rng(5)
    for _ in range(100):
        k = int(rng.integers(1, 4))
        grid = WindowGrid(k, k * int(rng.integers(1, 7)), k * int(rng.integers(1, 7)))
        shape = RegionShape(rng.choice(["cross", "rectangle"]), int(rng.integers(1, 4)))
        t = build_index_table(grid, shape)
        assert t.shape == (grid.s_h, grid.s_w, shape.count)
        assert t.min() >= 0 and t.max() < grid.count
        offs = region_offsets(shape.kind.value, shape.radius)
        for i in range(grid.s_h):
            for j in range(grid.s_w):
                for s, (dy, dx) in enumerate(offs):
                    want = grid.flat(min(max(i + dy, 0), grid.s_h - 1), min(max(j + dx, 0), grid.s_w - 1))
                    assert t[i, j, s] == want
                interior = min(i, j, grid.s_h - 1 - i, grid.s_w - 1 - j) >= shape.radius
                if interior:
                    assert len(set(t[i, j])) == shape.count


def test_window_grid_rejects_indivisible():
    with pytest.raises(DimensionError):
        WindowGrid(4, 6, 8)
    with pytest.raises(ValueError):
        RegionShape(Region.CROSS, 0)
