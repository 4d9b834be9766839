"""Cell problems on cubes: the free tilted energy and the affine Dirichlet energy.

``mu(U, q)`` is the minimum over all functions of the mean of
``L(Dw, x) - q.Dw`` on ``U``; ``nu(U, p)`` is the minimum of the mean of
``L(Dw, x)`` over functions equal to ``p.x`` on the boundary.  For the
quadratic family both minimizers depend linearly on the slope, so
:func:`quadratic_forms` gets every slope from ``d`` unit solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FieldRealization
from .geometry import Cube, Grid, discretize
from .solver import (Affine, DiscreteEnergy, Free, GridFunction, affine_function,
                     minimize, minimize_batch)


@dataclass
class CellProblemResult:
    """Value and minimizer of a cell problem.

    ``vector`` is the tilt ``q`` for ``kind == "mu"`` and the slope ``p``
    for ``kind == "nu"``; ``slope`` is the mean gradient of the minimizer.
    """

    cube: Cube
    kind: str
    vector: np.ndarray
    value: float
    minimizer: GridFunction | None
    slope: np.ndarray
    h: float
    seed: int | None = None

    def csv_header(self) -> list[str]:
        d = len(self.vector)
        return (["seed", "n", "trimmed", "kind"] + [f"v{k}" for k in range(d)]
                + ["value"] + [f"P{k}" for k in range(d)] + ["h"])

    def csv_row(self) -> list:
        return ([self.seed if self.seed is not None else "", self.cube.n,
                 int(self.cube.trimmed), self.kind]
                + [repr(float(v)) for v in self.vector] + [repr(float(self.value))]
                + [repr(float(v)) for v in self.slope] + [repr(float(self.h))])


def _grid(field: FieldRealization, cube: Cube, h: float) -> Grid:
    grid = discretize(cube, h)
    if not field.region.contains_box(grid.box):
        raise ValueError("cube is not inside the field region")
    return grid


def mu(field: FieldRealization, cube: Cube, q, h: float, tol: float | None = None,
       method: str = "direct") -> CellProblemResult:
    """Free-boundary tilted cell problem; the minimizer has mean zero."""
    q = np.asarray(q, dtype=float)
    grid = _grid(field, cube, h)
    energy = DiscreteEnergy(field, grid, q, Free())
    u = minimize(energy, tol, method)
    return CellProblemResult(cube, "mu", q, energy.value(u), u, u.mean_gradient(),
                             h, field.seed)


def nu(field: FieldRealization, cube: Cube, p, h: float, tol: float | None = None,
       method: str = "direct") -> CellProblemResult:
    """Affine-Dirichlet cell problem."""
    p = np.asarray(p, dtype=float)
    grid = _grid(field, cube, h)
    energy = DiscreteEnergy(field, grid, None, Affine(tuple(p)))
    v = minimize(energy, tol, method)
    return CellProblemResult(cube, "nu", p, energy.value(v), v, v.mean_gradient(),
                             h, field.seed)


def duality_gap(field: FieldRealization, cube: Cube, p, q, h: float) -> float:
    """``nu(U, p) - q.p - mu(U, q)``, nonnegative for every pair."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return nu(field, cube, p, h).value - float(q @ p) - mu(field, cube, q, h).value


@dataclass
class QuadraticForms:
    """Cell quantities of a quadratic-family cube for all slopes at once.

    ``nu(p) = p.N.p``, ``P(q) = M q`` and ``mu(q) = -q.M.q / 2``.
    ``unit_u[k]`` / ``unit_v[k]`` are the minimizers for ``q = e_k`` and
    ``p = e_k``.
    """

    cube: Cube
    h: float
    N: np.ndarray
    M: np.ndarray
    unit_u: list
    unit_v: list

    def nu(self, p) -> float:
        p = np.asarray(p, dtype=float)
        return float(p @ self.N @ p)

    def mu(self, q) -> float:
        q = np.asarray(q, dtype=float)
        return float(-0.5 * q @ self.M @ q)

    def slope(self, q) -> np.ndarray:
        return self.M @ np.asarray(q, dtype=float)

    def u(self, q) -> GridFunction:
        vals = sum(qk * uk.values for qk, uk in zip(q, self.unit_u))
        return GridFunction(self.unit_u[0].grid, vals, "u")

    def v(self, p) -> GridFunction:
        vals = sum(pk * vk.values for pk, vk in zip(p, self.unit_v))
        return GridFunction(self.unit_v[0].grid, vals, "v")


def quadratic_forms(field: FieldRealization, cube: Cube, h: float,
                    want: str = "both", tol: float | None = None) -> QuadraticForms:
    """Solve the ``d`` unit cell problems of each kind and return the forms.

    ``want`` is ``"both"``, ``"mu"`` or ``"nu"``; skipped forms are NaN.
    """
    if field.spec.kappa != 0:
        raise ValueError("quadratic forms need the quadratic family")
    grid = _grid(field, cube, h)
    d = grid.dim
    eye = np.eye(d)
    N = np.full((d, d), np.nan)
    M = np.full((d, d), np.nan)
    us, vs = [], []
    if want in ("both", "mu"):
        energies = [DiscreteEnergy(field, grid, eye[k], Free()) for k in range(d)]
        us = minimize_batch(energies, tol)
        M = np.column_stack([u.mean_gradient() for u in us])
        M = 0.5 * (M + M.T)
    if want in ("both", "nu"):
        energies = [DiscreteEnergy(field, grid, None, Affine(tuple(eye[k]))) for k in range(d)]
        vs = minimize_batch(energies, tol)
        asm = energies[0].assembly
        G = [v.gauss_gradients() for v in vs]
        A = asm.A[:, None]
        N = np.empty((d, d))
        for i in range(d):
            AG = np.einsum("cgkl,cgl->cgk", np.broadcast_to(A, G[i].shape + (d,)), G[i])
            for j in range(d):
                N[i, j] = np.mean(np.sum(AG * G[j], axis=-1))
        N = 0.5 * (N + N.T)
    return QuadraticForms(cube, h, N, M, us, vs)


# ---------------------------------------------------------------------------
# error functional


@dataclass
class ErrorFunctionalValue:
    cube: Cube
    p: np.ndarray
    mu_gap: float
    nu_gap: float
    flatness: float

    @property
    def value(self) -> float:
        return self.mu_gap + self.nu_gap + self.flatness


def error_functional(field: FieldRealization, cube: Cube, p, effective, h: float,
                     forms: QuadraticForms | None = None) -> ErrorFunctionalValue:
    """Combined energy and flatness error of the cell problems at slope ``p``.

    Sum of ``|Lbar(p) - mu(U, q) - p.q|`` with ``q = DLbar(p)``,
    ``|Lbar(p) - nu(U, p)|`` and ``|U|^(-2/d)`` times the mean squared
    distance of both minimizers from the affine function of slope ``p``
    (the free minimizer is compared with ``p.(x - x_U)``, ``x_U`` the cube
    center).  ``effective`` is an :class:`~homoglab.effective.EffectiveModel`.
    """
    p = np.asarray(p, dtype=float)
    Lbar = effective.Lbar(p)
    q = effective.gradient(p)
    if forms is not None:
        mu_val, nu_val = forms.mu(q), forms.nu(p)
        u, v = forms.u(q), forms.v(p)
    else:
        r_mu = mu(field, cube, q, h)
        r_nu = nu(field, cube, p, h)
        mu_val, nu_val, u, v = r_mu.value, r_nu.value, r_mu.minimizer, r_nu.minimizer
    grid = v.grid
    lp = affine_function(grid, p)
    lpc = affine_function(grid, p, center=cube.center)
    flat = ((v - lp).mean_square() + (u - lpc).mean_square()) / cube.box.volume ** (2 / grid.dim)
    return ErrorFunctionalValue(cube, p, abs(Lbar - mu_val - float(p @ q)),
                                abs(Lbar - nu_val), flat)


# ---------------------------------------------------------------------------
# ensemble members


def field_for(params: dict, seed: int, region_cube: Cube) -> FieldRealization:
    from .field import LagrangianSpec, sample_field
    spec = params["spec"]
    if isinstance(spec, dict):
        spec = LagrangianSpec.from_dict(spec)
    return sample_field(spec, seed, region_cube.box)


def cell_member(params: dict, seed: int, index: int) -> dict:
    """One cell problem on ``Q_n(0)`` (or its trimmed version)."""
    n = int(params["n"])
    cube = Cube(n, (0,) * int(params["spec"]["dimension"]), bool(params.get("trimmed", False)))
    field = field_for(params, seed, cube.untrimmed())
    fn = mu if params["kind"] == "mu" else nu
    res = fn(field, cube, params["vector"], float(params["h"]))
    out = {"value": res.value}
    out.update({f"P{k}": v for k, v in enumerate(res.slope)})
    return out


def monotonicity_member(params: dict, seed: int, index: int) -> dict:
    """``nu(Q_n, p)`` and ``mu(Q_n, q)`` across scales on one realization.

    Also reports the discrete additivity excesses against the ``3^d``
    children, ``nu(parent) - avg nu(children)`` and
    ``avg mu(children) - mu(parent)``, both of which must be <= 0.
    """
    scales = sorted(int(n) for n in params["scales"])
    d = int(params["spec"]["dimension"])
    h = float(params["h"])
    p, q = params["p"], params["q"]
    top = Cube(scales[-1], (0,) * d)
    field = field_for(params, seed, top)
    out = {}
    for n in scales:
        cube = Cube(n, (0,) * d)
        nv = nu(field, cube, p, h).value
        mv = mu(field, cube, q, h).value
        out[f"nu_{n}"] = nv
        out[f"mu_{n}"] = mv
        if n >= 1 and params.get("additivity", True):
            from .geometry import subdivide
            kids = subdivide(cube)
            out[f"nu_excess_{n}"] = nv - np.mean([nu(field, c, p, h).value for c in kids])
            out[f"mu_excess_{n}"] = np.mean([mu(field, c, q, h).value for c in kids]) - mv
    return out
