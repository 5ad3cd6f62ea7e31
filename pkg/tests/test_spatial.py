"""Radius search: grid-hash vs brute force, ordering, caps, fallback paths."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deformconv import spatial


def _tables_equal(a: spatial.NeighborTable, b: spatial.NeighborTable) -> bool:
    return (np.array_equal(a.starts, b.starts)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.offsets, b.offsets))


def _grid_table(positions, queries, r, cap, cell_size=None):
    index = spatial.build_index(positions, cell_size if cell_size else r)
    return spatial.radius_neighbors(index, queries, r, cap)


class TestWorkedExamples:
    def test_same_cell_membership(self):
        pos = np.array([[0.2, 0.2, 0.2], [0.9, 0.9, 0.9], [1.1, 0.0, 0.0]])
        index = spatial.build_index(pos, 1.0)
        cells = index.cells
        assert np.array_equal(cells[0], cells[1])
        assert not np.array_equal(cells[0], cells[2])

    def test_line_of_points(self):
        # points every 0.25 along x (exactly representable, so the left/right
        # pairs tie exactly); radius 0.55 reaches two on each side
        pos = np.stack([np.arange(9) * 0.25, np.zeros(9), np.zeros(9)], axis=1)
        table = _grid_table(pos, pos, 0.55, 10)
        mid, _ = table.neighbors_of(4)
        assert list(mid) == [4, 3, 5, 2, 6]  # self, then by distance, low index on ties
        assert table.counts[0] == 3  # endpoint sees self + two to the right

    def test_cap_one_keeps_self(self):
        pos = np.random.default_rng(0).uniform(-1, 1, (20, 3))
        table = _grid_table(pos, pos, 2.0, 1)
        assert np.all(table.counts == 1)
        assert np.array_equal(table.indices, np.arange(20))
        assert np.allclose(table.offsets, 0.0)

    def test_coincident_points_tie_break(self):
        pos = np.zeros((3, 3))
        table = _grid_table(pos, pos, 0.5, 2)
        # all distances zero: lower index wins
        for q in range(3):
            got = list(table.neighbors_of(q)[0])
            assert got == [0, 1]

    def test_boundary_distance_included(self):
        pos = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
        table = _grid_table(pos, pos, 0.5, 4)
        assert table.counts[0] == 2

    def test_offsets_are_query_minus_neighbor(self):
        pos = np.array([[0.0, 0.0, 0.0], [0.1, 0.2, -0.3]])
        table = _grid_table(pos, pos, 1.0, 4)
        nbrs, _ = table.neighbors_of(0)
        offs = table.offsets[table.starts[0]:table.starts[1]]
        for j, off in zip(nbrs, offs):
            assert np.array_equal(off, pos[0] - pos[j])


class TestGridEqualsBrute:
    @pytest.mark.parametrize("seed", range(8))
    def test_random_clouds(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 80))
        pos = rng.uniform(-1.5, 1.5, (m, 3))
        r = float(rng.uniform(0.2, 1.2))
        cap = int(rng.integers(1, 24))
        grid = _grid_table(pos, pos, r, cap)
        brute = spatial.brute_force_neighbors(pos, pos, r, cap)
        assert _tables_equal(grid, brute)

    @pytest.mark.parametrize("scale", [0.45, 1.0, 1.8])
    def test_cell_size_independent(self, scale):
        rng = np.random.default_rng(99)
        pos = rng.uniform(-1, 1, (60, 3))
        r = 0.5
        grid = _grid_table(pos, pos, r, 8, cell_size=r * scale)
        brute = spatial.brute_force_neighbors(pos, pos, r, 8)
        assert _tables_equal(grid, brute)

    def test_queries_not_inputs(self):
        rng = np.random.default_rng(7)
        pos = rng.uniform(-1, 1, (50, 3))
        q = rng.uniform(-1.2, 1.2, (17, 3))
        grid = _grid_table(pos, q, 0.6, 5)
        brute = spatial.brute_force_neighbors(pos, q, 0.6, 5)
        assert _tables_equal(grid, brute)
        assert grid.num_queries == 17

    def test_empty_neighborhoods(self):
        pos = np.zeros((3, 3))
        q = np.array([[10.0, 0.0, 0.0]])
        table = _grid_table(pos, q, 0.5, 4)
        assert table.counts[0] == 0
        assert table.num_pairs == 0

    def test_duplicates_heavy(self):
        rng = np.random.default_rng(3)
        base = rng.uniform(-0.5, 0.5, (10, 3))
        pos = base[rng.integers(0, 10, 64)]  # many exact duplicates
        grid = _grid_table(pos, pos, 0.4, 6)
        brute = spatial.brute_force_neighbors(pos, pos, 0.4, 6)
        assert _tables_equal(grid, brute)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 40),
           st.floats(0.1, 1.0), st.integers(1, 12))
    def test_property_equality(self, seed, m, r, cap):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-1, 1, (m, 3))
        grid = _grid_table(pos, pos, r, cap)
        brute = spatial.brute_force_neighbors(pos, pos, r, cap)
        assert _tables_equal(grid, brute)


class TestInvariants:
    def _table(self, seed=0, m=70, r=0.7, cap=9):
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-1, 1, (m, 3))
        return pos, _grid_table(pos, pos, r, cap)

    def test_counts_capped_and_radius_respected(self):
        pos, table = self._table()
        assert np.all(table.counts <= 9)
        d = np.linalg.norm(table.offsets, axis=1)
        assert np.all(d <= 0.7 + 1e-12)

    def test_sorted_by_distance_then_index(self):
        pos, table = self._table()
        d2 = np.einsum("ij,ij->i", table.offsets, table.offsets)
        for q in range(table.num_queries):
            s, e = table.starts[q], table.starts[q + 1]
            keys = list(zip(d2[s:e], table.indices[s:e]))
            assert keys == sorted(keys)

    def test_self_first_for_distinct_points(self):
        pos, table = self._table(seed=5)
        for q in range(table.num_queries):
            assert table.indices[table.starts[q]] == q

    def test_translation_stable_offsets(self):
        pos, table = self._table(seed=8)
        shifted = _grid_table(pos + np.array([3.0, -7.0, 11.0]),
                              pos + np.array([3.0, -7.0, 11.0]), 0.7, 9)
        assert np.array_equal(table.starts, shifted.starts)
        assert np.array_equal(table.indices, shifted.indices)
        assert np.allclose(table.offsets, shifted.offsets, atol=1e-12)


class TestFallbackPaths:
    def test_unpackable_extent_uses_dict(self):
        # coordinate extent far beyond the packed 2^62 budget
        pos = np.array([[0.0, 0.0, 0.0],
                        [2.1e6, 2.1e6, 2.1e6],
                        [0.0005, 0.0, 0.0]])
        index = spatial.build_index(pos, 0.001)
        assert not index.packable
        table = spatial.radius_neighbors(index, pos, 0.001, 4)
        brute = spatial.brute_force_neighbors(pos, pos, 0.001, 4)
        assert _tables_equal(table, brute)

    def test_oversized_window_per_query_path(self):
        rng = np.random.default_rng(12)
        pos = rng.uniform(-0.05, 0.05, (40, 3))
        index = spatial.build_index(pos, 0.001)  # window of (2r/cell)^3 cells >> 512
        table = spatial.radius_neighbors(index, pos, 0.04, 6)
        brute = spatial.brute_force_neighbors(pos, pos, 0.04, 6)
        assert _tables_equal(table, brute)


class TestValidation:
    def test_bad_radius(self):
        pos = np.zeros((2, 3))
        index = spatial.build_index(pos, 1.0)
        with pytest.raises(ValueError):
            spatial.radius_neighbors(index, pos, 0.0, 4)
        with pytest.raises(ValueError):
            spatial.radius_neighbors(index, pos, -1.0, 4)

    def test_bad_cap(self):
        pos = np.zeros((2, 3))
        index = spatial.build_index(pos, 1.0)
        with pytest.raises(ValueError):
            spatial.radius_neighbors(index, pos, 1.0, 0)

    def test_bad_cell_size(self):
        with pytest.raises(ValueError):
            spatial.build_index(np.zeros((2, 3)), 0.0)

    def test_bad_positions_shape(self):
        with pytest.raises(ValueError):
            spatial.build_index(np.zeros((2, 2)), 1.0)
