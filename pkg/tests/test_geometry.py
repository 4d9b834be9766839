from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homoglab.geometry import (Box, Cube, GeometryError, Grid, discretize, overlapping_cube,
                               overlapping_neighbors, subdivide, triadic_cube, trimmed_cube,
                               trimmed_volume_ratio)


def bounds(cube):
    return cube.lo.tolist(), cube.hi.tolist()


def test_triadic_cube_at_origin():
    assert bounds(triadic_cube(1, (0, 0))) == ([-1.5, -1.5], [1.5, 1.5])


def test_triadic_cube_rounds_to_nearest_anchor():
    c = triadic_cube(1, (4, 4))
    assert c.anchor == (3, 3)
    assert bounds(c) == ([1.5, 1.5], [4.5, 4.5])


def test_unit_cube_contains_point():
    assert bounds(triadic_cube(0, (0.2, -0.3))) == ([-0.5, -0.5], [0.5, 0.5])


@pytest.mark.parametrize("n,half", [(1, 1.0), (2, 4.0)])
def test_trimmed_cube_half_width(n, half):
    assert bounds(trimmed_cube(n, (0, 0))) == ([-half] * 2, [half] * 2)


def test_trimmed_scale_zero_rejected():
    with pytest.raises(GeometryError):
        trimmed_cube(0, (0, 0))


def test_adjacent_trimmed_cubes_are_unit_separated():
    a, b = trimmed_cube(1, (0, 0)), trimmed_cube(1, (3, 0))
    assert b.lo[0] - a.hi[0] == 1.0


def test_subdivide_unit_cubes():
    kids = subdivide(Cube(1, (0, 0)))
    assert len(kids) == 9
    assert sorted(k.anchor for k in kids) == [(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)]
    assert all(k.side == 1 for k in kids)


def test_subdivide_side_three_and_three_dims():
    assert all(k.side == 3 for k in subdivide(Cube(2, (0, 0))))
    assert len(subdivide(Cube(1, (0, 0, 0)))) == 27


def test_subdivide_rejects_trimmed():
    with pytest.raises(GeometryError):
        subdivide(trimmed_cube(1, (0, 0)))


def test_overlapping_cube_examples():
    assert bounds(overlapping_cube(1, (0, 0))) == ([-4.5, -4.5], [4.5, 4.5])
    c = overlapping_cube(0, (1, 0))
    assert c.anchor == (1, 0) and c.side == 3


def test_overlapping_neighbor_count():
    assert len(overlapping_neighbors(overlapping_cube(1, (0, 0)))) == 24


@pytest.mark.parametrize("cube,nodes,cells", [
    (Cube(1, (0, 0)), (7, 7), 36),
    (Cube(1, (0, 0), True), (5, 5), 16),
    (Cube(2, (0, 0)), (37, 37), None),
])
def test_discretize_counts(cube, nodes, cells):
    h = 0.25 if cube.n == 2 else 0.5
    g = discretize(cube, h)
    assert g.node_shape == nodes
    if cells is not None:
        assert g.n_cells == cells


@pytest.mark.parametrize("h", [0.3, 1.0, 1 / 3])
def test_discretize_rejects_misaligned_spacing(h):
    with pytest.raises(GeometryError):
        discretize(Cube(1, (0, 0)), h)


@given(st.integers(0, 3), st.integers(-20, 20), st.integers(-20, 20), st.integers(2, 3))
def test_children_volumes_sum_to_parent(n, a, b, d):
    parent = Cube(n + 1, (3 ** (n + 1) * a, 3 ** (n + 1) * b, 0)[:d])
    kids = subdivide(parent)
    assert sum(k.volume for k in kids) == parent.volume
    assert all(parent.box.contains_box(k.box) for k in kids)


@given(st.integers(1, 5), st.integers(0, 5), st.integers(1, 3))
def test_trimming_volume_bound(n, m, d):
    assert trimmed_volume_ratio(n, m, d) >= 1 - Fraction(d, 3**n)


@settings(max_examples=30)
@given(st.integers(0, 2), st.sampled_from([2, 4]), st.booleans())
def test_grid_nodes_lie_in_cube(n, per_unit, trimmed):
    if trimmed and n == 0:
        return
    cube = Cube(n, (0, 0), trimmed)
    g = discretize(cube, 1 / per_unit)
    assert np.all(cube.box.contains(g.node_coords))
    assert np.all(cube.box.contains(g.cell_centers, closed=False))


@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 3))
def test_triadic_cube_contains_point(x, y, n):
    c = triadic_cube(n, (x, y))
    assert c.box.contains(np.array([x, y]))
    assert all(a % 3**n == 0 for a in c.anchor)


def test_grid_requires_even_resolution():
    with pytest.raises(GeometryError):
        Grid(Box.from_bounds([0, 0], [1, 1]), 3)


def test_node_index_and_slices():
    g = discretize(Cube(1, (0, 0)), 0.5)
    sub = discretize(Cube(1, (0, 0), True), 0.5)
    assert g.node_index((0.0, 0.0)) == (3, 3)
    sl = g.slices_of(sub)
    assert np.array_equal(g.node_coords[sl], sub.node_coords)
    with pytest.raises(GeometryError):
        g.node_index((0.1, 0.0))
