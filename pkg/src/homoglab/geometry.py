"""Triadic cubes and the structured grids aligned with them.

Every coordinate that bounds a cube or a box is stored in half-units
(an integer equal to twice the coordinate), so trimming by a layer of
thickness 1/2 is exact integer arithmetic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid cube or grid requests."""


@dataclass(frozen=True)
class Box:
    """Open axis-aligned box ``prod_k (lo2[k]/2, hi2[k]/2)``."""

    lo2: tuple[int, ...]
    hi2: tuple[int, ...]

    def __post_init__(self):
        if len(self.lo2) != len(self.hi2):
            raise GeometryError("lo2 and hi2 must have the same length")
        if any(b <= a for a, b in zip(self.lo2, self.hi2)):
            raise GeometryError(f"empty box {self.lo2} .. {self.hi2}")

    @classmethod
    def from_bounds(cls, lo, hi) -> "Box":
        """Build from float bounds, which must be multiples of 1/2."""
        lo2, hi2 = [], []
        for a, b in zip(lo, hi):
            for v, out in ((a, lo2), (b, hi2)):
                v2 = 2 * Fraction(v).limit_denominator(1 << 20)
                if v2.denominator != 1:
                    raise GeometryError(f"bound {v} is not a multiple of 1/2")
                out.append(int(v2))
        return cls(tuple(lo2), tuple(hi2))

    @property
    def dim(self) -> int:
        return len(self.lo2)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lo2, dtype=float) / 2

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.hi2, dtype=float) / 2

    @property
    def sides(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2

    def contains_box(self, other: "Box") -> bool:
        return all(a <= c and d <= b for a, b, c, d in
                   zip(self.lo2, self.hi2, other.lo2, other.hi2))

    def contains(self, x, closed: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if closed:
            return np.all((x >= self.lo) & (x <= self.hi), axis=-1)
        return np.all((x > self.lo) & (x < self.hi), axis=-1)

    def shrink(self, margin2: int) -> "Box":
        """Remove a layer of thickness ``margin2/2`` from every face."""
        return Box(tuple(a + margin2 for a in self.lo2),
                   tuple(b - margin2 for b in self.hi2))

    def translate(self, shift) -> "Box":
        s2 = [int(2 * Fraction(s).limit_denominator(1 << 20)) for s in shift]
        return Box(tuple(a + s for a, s in zip(self.lo2, s2)),
                   tuple(b + s for b, s in zip(self.hi2, s2)))


@dataclass(frozen=True)
class Cube:
    """Triadic cube of scale ``n`` centered at ``anchor``.

    The untrimmed cube has side ``3**n``; the trimmed one has side
    ``3**n - 1``.  ``anchor`` is an integer point (on ``3**n Z^d`` for the
    cubes returned by :func:`triadic_cube`, on ``3**(n-1) Z^d`` for the
    overlapping family).
    """

    n: int
    anchor: tuple[int, ...]
    trimmed: bool = False

    def __post_init__(self):
        if self.n < 0:
            raise GeometryError("scale must be nonnegative")
        if self.trimmed and self.n == 0:
            raise GeometryError("trimmed cube of scale 0 is empty")

    @property
    def dim(self) -> int:
        return len(self.anchor)

    @property
    def side(self) -> int:
        return 3**self.n - (1 if self.trimmed else 0)

    @cached_property
    def box(self) -> Box:
        s = self.side
        return Box(tuple(2 * a - s for a in self.anchor),
                   tuple(2 * a + s for a in self.anchor))

    @property
    def volume(self) -> int:
        return self.side**self.dim

    @property
    def lo(self) -> np.ndarray:
        return self.box.lo

    @property
    def hi(self) -> np.ndarray:
        return self.box.hi

    @property
    def center(self) -> np.ndarray:
        return np.array(self.anchor, dtype=float)

    def untrimmed(self) -> "Cube":
        return Cube(self.n, self.anchor, False)

    def trim(self) -> "Cube":
        return Cube(self.n, self.anchor, True)


def _lattice_anchor(n: int, x) -> tuple[int, ...]:
    # nearest point of 3^n Z^d; ties (cube faces) go up
    s = 3**n
    x = np.asarray(x, dtype=float)
    return tuple(int(s * np.floor(xi / s + 0.5)) for xi in x)


def triadic_cube(n: int, x) -> Cube:
    """Return the triadic cube ``Q_n(x)`` of side ``3**n`` containing ``x``."""
    if n < 0:
        raise GeometryError("scale must be nonnegative")
    return Cube(n, _lattice_anchor(n, x))


def trimmed_cube(n: int, x) -> Cube:
    """Return ``Q_n(x)`` with a layer of thickness 1/2 removed from each face."""
    if n == 0:
        raise GeometryError("trimmed cube of scale 0 is empty")
    return triadic_cube(n, x).trim()


def subdivide(cube: Cube) -> list[Cube]:
    """Split an untrimmed cube of scale ``n >= 1`` into its ``3**d`` children."""
    if cube.trimmed:
        raise GeometryError("cannot subdivide a trimmed cube")
    if cube.n < 1:
        raise GeometryError("cannot subdivide a unit cube")
    s = 3 ** (cube.n - 1)
    return [Cube(cube.n - 1, tuple(a + s * k for a, k in zip(cube.anchor, ks)))
            for ks in itertools.product((-1, 0, 1), repeat=cube.dim)]


def overlapping_cube(n: int, x) -> Cube:
    """Cube of side ``3**(n+1)`` centered at the anchor of ``Q_n(x)``."""
    base = triadic_cube(n, x)
    return Cube(n + 1, base.anchor)


def overlapping_neighbors(cube: Cube) -> list[Cube]:
    """Members of the overlapping family intersecting ``cube`` (itself excluded).

    ``cube`` must be an overlapping cube, i.e. scale ``n + 1`` anchored on
    ``3**n Z^d``.
    """
    if cube.n < 1 or cube.trimmed:
        raise GeometryError("expected an untrimmed overlapping cube")
    s = 3 ** (cube.n - 1)
    out = []
    for ks in itertools.product(range(-2, 3), repeat=cube.dim):
        if any(ks):
            out.append(Cube(cube.n, tuple(a + s * k for a, k in zip(cube.anchor, ks))))
    return out


def trimmed_volume_ratio(n: int, m: int, d: int) -> Fraction:
    """Exact value of ``3**(d m) |Q_n°| / |Q_{n+m}|``."""
    return Fraction(3 ** (d * m) * (3**n - 1) ** d, 3 ** (d * (n + m)))


# --------------------------------------------------------------------------
# grids

_GAUSS = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


@dataclass(frozen=True)
class Grid:
    """Structured grid of spacing ``h`` on a box with half-integer bounds.

    Node ``i`` sits at ``lo + i*h``.  ``per_unit = 1/h`` is an even integer,
    so both integer and half-integer hyperplanes are grid lines.
    """

    box: Box
    per_unit: int

    def __post_init__(self):
        if self.per_unit <= 0 or self.per_unit % 2:
            raise GeometryError("1/h must be a positive even integer")

    @property
    def h(self) -> float:
        return 1.0 / self.per_unit

    @property
    def dim(self) -> int:
        return self.box.dim

    @cached_property
    def cells(self) -> tuple[int, ...]:
        return tuple((b - a) * self.per_unit // 2
                     for a, b in zip(self.box.lo2, self.box.hi2))

    @property
    def node_shape(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.cells)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def lo(self) -> np.ndarray:
        return self.box.lo

    def axes(self) -> list[np.ndarray]:
        return [self.lo[k] + self.h * np.arange(self.node_shape[k])
                for k in range(self.dim)]

    @cached_property
    def node_coords(self) -> np.ndarray:
        """Array of shape ``node_shape + (d,)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def cell_centers(self) -> np.ndarray:
        """Array of shape ``(n_cells, d)`` in C order of the cell multi-index."""
        axes = [self.lo[k] + self.h * (np.arange(self.cells[k]) + 0.5)
                for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @cached_property
    def unit_cells(self) -> np.ndarray:
        """Integer coefficient cell ``floor(x)`` of every fine cell."""
        return np.floor(self.cell_centers).astype(np.int64)

    @cached_property
    def gauss_points(self) -> np.ndarray:
        """Array ``(n_cells, 2**d, d)`` of tensor Gauss points."""
        offs = np.array(list(itertools.product(_GAUSS, repeat=self.dim)))
        corner = self.cell_centers - 0.5 * self.h
        return corner[:, None, :] + self.h * offs[None, :, :]

    @cached_property
    def connectivity(self) -> np.ndarray:
        """Node indices of the ``2**d`` corners of every cell, shape ``(n_cells, 2**d)``."""
        idx = np.meshgrid(*[np.arange(c) for c in self.cells], indexing="ij")
        idx = [i.ravel() for i in idx]
        cols = []
        for a in itertools.product((0, 1), repeat=self.dim):
            cols.append(np.ravel_multi_index([i + ak for i, ak in zip(idx, a)],
                                             self.node_shape))
        return np.stack(cols, axis=1)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.node_shape, dtype=bool)
        for k in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[k] = 0
            mask[tuple(sl)] = True
            sl[k] = -1
            mask[tuple(sl)] = True
        return mask

    def node_index(self, x) -> tuple[int, ...]:
        """Multi-index of the node at ``x`` (must lie exactly on a node)."""
        rel = (np.asarray(x, dtype=float) - self.lo) * self.per_unit
        idx = np.rint(rel).astype(int)
        if np.any(np.abs(rel - idx) > 1e-9) or np.any(idx < 0) or \
                np.any(idx >= np.array(self.node_shape)):
            raise GeometryError(f"{x} is not a node of this grid")
        return tuple(int(i) for i in idx)

    def slices_of(self, sub: "Grid") -> tuple[slice, ...]:
        """Node slices selecting ``sub`` inside this grid (nested grids only)."""
        if sub.per_unit != self.per_unit or not self.box.contains_box(sub.box):
            raise GeometryError("grid is not nested in this grid")
        start = self.node_index(sub.lo)
        return tuple(slice(s, s + n) for s, n in zip(start, sub.node_shape))


def discretize(region, h: float) -> Grid:
    """Structured grid of spacing ``h`` on a cube or box.

    ``1/h`` must be an even integer so that unit-cell boundaries and
    trimmed-cube boundaries are grid lines.
    """
    box = region.box if isinstance(region, Cube) else region
    inv = 1.0 / h
    m = int(round(inv))
    if abs(inv - m) > 1e-9 * max(1.0, inv) or m % 2 or m <= 0:
        raise GeometryError(f"spacing {h} is not the reciprocal of an even integer")
    return Grid(box, m)
