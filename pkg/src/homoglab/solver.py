"""Finite element minimization of cellwise convex energies on structured grids.

Trial functions are continuous multilinear (Q1) on the fine cells.  Energies
are integrated with the tensor two-point Gauss rule, which is exact for the
quadratic family (coefficients are constant on every fine cell).  All
energies are reported as averages over the domain.

The nodal residual used for stopping is ``h**(1-d)`` times the gradient of
the integrated energy with respect to nodal values, which is O(1) per node
independently of ``h``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .field import FieldRealization, density, density_grad, density_hess
from .geometry import Grid

_GP = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


class SolverError(RuntimeError):
    """Minimization failed; ``residuals`` and ``energies`` hold the history."""

    def __init__(self, msg, residuals=(), energies=()):
        super().__init__(msg)
        self.residuals = list(residuals)
        self.energies = list(energies)


@lru_cache(maxsize=None)
def reference_element(d: int):
    """Shape values ``phi (Q, 2^d)`` and reference gradients ``B (Q, d, 2^d)``.

    Gauss points and local vertices are both enumerated with
    ``itertools.product`` in C order, matching :attr:`Grid.connectivity`.
    """
    pts = np.array(list(itertools.product(_GP, repeat=d)))
    verts = np.array(list(itertools.product((0, 1), repeat=d)))
    nq, nv = len(pts), len(verts)
    phi = np.ones((nq, nv))
    B = np.ones((nq, d, nv))
    for g, x in enumerate(pts):
        for a, v in enumerate(verts):
            fac = np.where(v == 1, x, 1 - x)
            phi[g, a] = np.prod(fac)
            for k in range(d):
                B[g, k, a] = (2 * v[k] - 1) * np.prod(np.delete(fac, k))
    return phi, B


# ---------------------------------------------------------------------------
# grid functions


@dataclass
class SolveInfo:
    iterations: int = 0
    residuals: list = dc_field(default_factory=list)
    energies: list = dc_field(default_factory=list)
    method: str = ""


@dataclass
class GridFunction:
    """Nodal values of a continuous Q1 function on ``grid``."""

    grid: Grid
    values: np.ndarray
    role: str = "generic"
    info: SolveInfo | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.node_shape)

    @classmethod
    def from_function(cls, grid: Grid, fn, role: str = "generic") -> "GridFunction":
        return cls(grid, fn(grid.node_coords), role)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def local(self) -> np.ndarray:
        """Corner values per cell, shape ``(n_cells, 2^d)``."""
        return self.flat[self.grid.connectivity]

    def gauss_values(self) -> np.ndarray:
        phi, _ = reference_element(self.grid.dim)
        return self.local() @ phi.T

    def gauss_gradients(self) -> np.ndarray:
        """Gradients at Gauss points, shape ``(n_cells, Q, d)``."""
        _, B = reference_element(self.grid.dim)
        return np.einsum("gka,ca->cgk", B, self.local()) * self.grid.per_unit

    def cell_gradients(self) -> np.ndarray:
        """Cell averages of the gradient, shape ``(n_cells, d)``."""
        return self.gauss_gradients().mean(axis=1)

    def mean(self) -> float:
        return float(self.gauss_values().mean())

    def mean_gradient(self) -> np.ndarray:
        return self.gauss_gradients().mean(axis=(0, 1))

    def mean_square(self) -> float:
        return float(np.mean(self.gauss_values() ** 2))

    def mean_square_gradient(self) -> float:
        return float(np.mean(np.sum(self.gauss_gradients() ** 2, axis=-1)))

    def restrict(self, sub: Grid, role: str | None = None) -> "GridFunction":
        return GridFunction(sub, self.values[self.grid.slices_of(sub)].copy(),
                            role or self.role)

    def __add__(self, other):
        if isinstance(other, GridFunction):
            other = other.values
        return GridFunction(self.grid, self.values + other, "generic")

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            other = other.values
        return GridFunction(self.grid, self.values - other, "generic")

    def __mul__(self, other):
        if isinstance(other, GridFunction):
            other = other.values
        return GridFunction(self.grid, self.values * other, "generic")

    __rmul__ = __mul__


def affine_function(grid: Grid, p, offset: float = 0.0, center=None) -> GridFunction:
    """``x -> p.(x - center) + offset`` sampled at the nodes."""
    x = grid.node_coords
    if center is not None:
        x = x - np.asarray(center, dtype=float)
    return GridFunction(grid, x @ np.asarray(p, dtype=float) + offset)


# ---------------------------------------------------------------------------
# boundary regimes


@dataclass(frozen=True)
class Free:
    """No boundary condition; the minimizer is normalized to mean zero."""


@dataclass(frozen=True)
class Affine:
    """Boundary values ``p.x``."""
    p: tuple


@dataclass(frozen=True, eq=False)
class Dirichlet:
    """Boundary values from a callable on node coordinates or a nodal array."""
    g: object


@dataclass(frozen=True)
class Periodic:
    """Periodic on the grid box (opposite faces identified), mean zero."""


# ---------------------------------------------------------------------------
# assembly


class Assembly:
    """Cached element data for one (field, grid) pair."""

    def __init__(self, field: FieldRealization, grid: Grid):
        if not field.region.contains_box(grid.box):
            raise ValueError("grid box is not inside the field region")
        self.field = field
        self.grid = grid
        self.kappa = field.spec.kappa
        phase = field.phase_index(grid.unit_cells)
        self.A = field.spec.phase_array[phase]
        self.c = field.mark(grid.unit_cells)
        self.phi, self.B = reference_element(grid.dim)
        self.w = 1.0 / self.B.shape[0]

    @property
    def quadratic(self) -> bool:
        return self.kappa == 0 or not np.any(self.c)

    def gradients(self, u: np.ndarray) -> np.ndarray:
        loc = u[self.grid.connectivity]
        return np.einsum("gka,ca->cgk", self.B, loc) * self.grid.per_unit

    def energy(self, u: np.ndarray, q: np.ndarray) -> float:
        Du = self.gradients(u)
        A = self.A[:, None]
        c = self.c[:, None]
        val = density(A, c, self.kappa, Du) - Du @ q
        return float(val.mean())

    def residual(self, u: np.ndarray, q: np.ndarray) -> np.ndarray:
        Du = self.gradients(u)
        G = density_grad(self.A[:, None], self.c[:, None], self.kappa, Du) - q
        loc = self.w * np.einsum("cgk,gka->ca", G, self.B)
        return np.bincount(self.grid.connectivity.ravel(), loc.ravel(),
                           minlength=self.grid.n_nodes)

    def _scatter(self, Ke: np.ndarray) -> sp.csr_matrix:
        conn = self.grid.connectivity
        nv = conn.shape[1]
        rows = np.repeat(conn, nv, axis=1).ravel()
        cols = np.tile(conn, (1, nv)).ravel()
        n = self.grid.n_nodes
        return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))

    @cached_property
    def _pair_tensor(self) -> np.ndarray:
        # K[k, l, a, b] = sum_g w B[g,k,a] B[g,l,b]
        return self.w * np.einsum("gka,glb->klab", self.B, self.B)

    def stiffness(self, u: np.ndarray | None = None) -> sp.csr_matrix:
        """``h**(2-d)`` times the Hessian of the integrated energy."""
        if self.quadratic or u is None:
            Ke = np.einsum("ckl,klab->cab", 2 * self.A, self._pair_tensor)
            return self._scatter(Ke)
        Du = self.gradients(u)
        H = density_hess(self.A[:, None], self.c[:, None], self.kappa, Du)
        Ke = self.w * np.einsum("gka,cgkl,glb->cab", self.B, H, self.B)
        return self._scatter(Ke)

    @cached_property
    def quadratic_stiffness(self) -> sp.csr_matrix:
        return self.stiffness(None)


@dataclass(eq=False)
class DiscreteEnergy:
    """``w -> mean over U of L(Dw, x) - q.Dw`` on a grid with a boundary regime."""

    field: FieldRealization
    grid: Grid
    q: tuple | None = None
    regime: object = dc_field(default_factory=Free)

    def __post_init__(self):
        d = self.grid.dim
        self.q = np.zeros(d) if self.q is None else np.asarray(self.q, dtype=float)
        if self.q.shape != (d,):
            raise ValueError("tilt has the wrong dimension")

    @cached_property
    def assembly(self) -> Assembly:
        return Assembly(self.field, self.grid)

    def value(self, u) -> float:
        u = u.flat if isinstance(u, GridFunction) else np.ravel(u)
        return self.assembly.energy(u, self.q)

    def residual(self, u) -> np.ndarray:
        u = u.flat if isinstance(u, GridFunction) else np.ravel(u)
        return self.assembly.residual(u, self.q)

    # -- degrees of freedom --------------------------------------------------

    @cached_property
    def dofs(self):
        """``(T, u_fixed, pinned)`` with admissible ``u = T @ x + u_fixed``."""
        grid = self.grid
        n = grid.n_nodes
        reg = self.regime
        if isinstance(reg, Free):
            T = sp.identity(n, format="csr")[:, 1:]
            return T, np.zeros(n), True
        if isinstance(reg, Periodic):
            idx = np.indices(grid.node_shape)
            red_shape = tuple(c for c in grid.cells)
            red = np.ravel_multi_index([i % c for i, c in zip(idx, red_shape)], red_shape).ravel()
            T = sp.csr_matrix((np.ones(n), (np.arange(n), red)), shape=(n, int(np.prod(red_shape))))
            return T[:, 1:], np.zeros(n), True
        bnd = grid.boundary_mask.ravel()
        interior = np.flatnonzero(~bnd)
        T = sp.csr_matrix((np.ones(len(interior)), (interior, np.arange(len(interior)))),
                          shape=(n, len(interior)))
        fixed = np.zeros(n)
        if isinstance(reg, Affine):
            fixed[bnd] = (grid.node_coords.reshape(n, -1) @ np.asarray(reg.p, float))[bnd]
        elif isinstance(reg, Dirichlet):
            g = reg.g
            if isinstance(g, GridFunction):
                vals = g.flat
            elif callable(g):
                vals = np.ravel(g(grid.node_coords))
            else:
                vals = np.ravel(np.asarray(g, dtype=float))
            if vals.size != n:
                raise ValueError("boundary data has the wrong size")
            fixed[bnd] = vals[bnd]
        else:
            raise TypeError(f"unknown boundary regime {reg!r}")
        return T, fixed, False

    def normalize(self, u: np.ndarray) -> np.ndarray:
        if isinstance(self.regime, (Free, Periodic)):
            return u - GridFunction(self.grid, u).mean()
        return u


def _role_for(energy: DiscreteEnergy) -> str:
    return "u" if isinstance(energy.regime, (Free, Periodic)) else \
        "v" if isinstance(energy.regime, Affine) else "generic"


class _LinearSolver:
    def __init__(self, K: sp.spmatrix, method: str, tol: float):
        self.method = method
        self.K = K.tocsc()
        self.tol = tol
        if method == "direct":
            self.lu = spla.splu(self.K, permc_spec="MMD_AT_PLUS_A")
        elif method == "cg":
            diag = self.K.diagonal()
            self.M = sp.diags(1.0 / diag)
        else:
            raise ValueError(f"unknown linear method {method!r}")

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.method == "direct":
            return self.lu.solve(b)
        if b.ndim == 2:
            return np.column_stack([self.solve(col) for col in b.T])
        x, info = spla.cg(self.K, b, rtol=min(1e-3 * self.tol, 1e-12), atol=0.0,
                          M=self.M, maxiter=20 * len(b))
        if info != 0:
            raise SolverError(f"conjugate gradients did not converge (info={info})")
        return x


def default_tol(energy: DiscreteEnergy) -> float:
    return 1e-10 if energy.assembly.quadratic else 1e-8


def minimize(energy: DiscreteEnergy, tol: float | None = None, method: str = "direct",
             max_iter: int = 50, initial: GridFunction | None = None) -> GridFunction:
    """Minimize ``energy`` over its admissible set.

    The quadratic family converges in one Newton step (a linear solve,
    direct or conjugate gradients); the perturbed family uses damped Newton
    with Armijo backtracking.  Free and periodic minimizers are returned
    with integral mean zero.
    """
    if tol is None:
        tol = default_tol(energy)
    if tol <= 0:
        raise ValueError("tol must be positive")
    asm = energy.assembly
    grid = energy.grid
    T, fixed, _ = energy.dofs
    Tt = T.T.tocsr()
    nfree = T.shape[1]
    scale = tol * (1 + np.linalg.norm(energy.q) + energy.field.spec.K0) * np.sqrt(grid.n_nodes)
    h = grid.h

    if initial is not None:
        x = np.asarray(sp.linalg.lsqr(T, initial.flat - fixed)[0]) if nfree else np.zeros(0)
    else:
        x = np.zeros(nfree)
    u = T @ x + fixed
    info = SolveInfo(method=method)
    E = asm.energy(u, energy.q)
    info.energies.append(E)
    lin = None
    for it in range(max_iter + 1):
        r = Tt @ asm.residual(u, energy.q)
        rn = float(np.linalg.norm(r))
        info.residuals.append(rn)
        if rn <= scale:
            info.iterations = it
            out = GridFunction(grid, energy.normalize(u), _role_for(energy), info)
            return out
        if it == max_iter:
            break
        if lin is None or not asm.quadratic:
            K = Tt @ asm.stiffness(u) @ T
            lin = _LinearSolver(K, method, tol)
        dx = -h * lin.solve(r)
        du = T @ dx
        slope = float(asm.residual(u, energy.q) @ du) / (h * grid.n_cells)
        t = 1.0
        while True:
            u_new = u + t * du
            E_new = asm.energy(u_new, energy.q)
            if E_new <= E + 1e-4 * t * slope:
                break
            # near the minimum the energy stagnates at roundoff; accept if the residual drops
            if abs(E_new - E) <= 1e-13 * (1 + abs(E)):
                r_new = np.linalg.norm(Tt @ asm.residual(u_new, energy.q))
                if r_new < rn:
                    break
            t *= 0.5
            if t < 1e-12:
                raise SolverError("line search failed", info.residuals, info.energies)
        x = x + t * dx
        u = u_new
        E = E_new
        info.energies.append(E)
    raise SolverError(f"no convergence after {max_iter} iterations "
                      f"(residual {info.residuals[-1]:.3e} > {scale:.3e})",
                      info.residuals, info.energies)


# ---------------------------------------------------------------------------
# periodic solves


class PeriodicPoissonError(ValueError):
    pass


def _periodic_nodes(rhs, h):
    if isinstance(rhs, GridFunction):
        vals = rhs.values[tuple(slice(0, -1) for _ in range(rhs.grid.dim))]
        return vals, rhs.grid.h, rhs.grid
    if h is None:
        raise ValueError("spacing h is required for array input")
    return np.asarray(rhs, dtype=float), float(h), None


def laplacian_symbol(shape, h: float) -> np.ndarray:
    """Eigenvalues of the periodic (2d+1)-point negative Laplacian."""
    lam = np.zeros(shape)
    for k, n in enumerate(shape):
        th = 2 * np.pi * np.fft.fftfreq(n)
        s = [1] * len(shape)
        s[k] = n
        lam = lam + ((2 - 2 * np.cos(th)) / h**2).reshape(s)
    return lam


def periodic_laplacian(w: np.ndarray, h: float) -> np.ndarray:
    """Apply the periodic (2d+1)-point negative Laplacian in real space."""
    out = 2 * w.ndim * w
    for k in range(w.ndim):
        out = out - np.roll(w, 1, axis=k) - np.roll(w, -1, axis=k)
    return out / h**2


def solve_periodic_poisson(rhs, h: float | None = None):
    """Solve ``-Lap_h w = rhs`` on a periodic grid; the result has mean zero.

    ``rhs`` is an array of distinct periodic nodes (spacing ``h``) or a
    :class:`GridFunction` whose last node along each axis duplicates the
    first.  The output has the same form as the input.
    """
    vals, h, grid = _periodic_nodes(rhs, h)
    mean = vals.mean()
    if abs(mean) > 1e-10 * max(1.0, np.abs(vals).max()):
        raise PeriodicPoissonError(f"right-hand side has nonzero mean {mean:.3e}")
    lam = laplacian_symbol(vals.shape, h)
    lam.flat[0] = 1.0
    what = np.fft.fftn(vals - mean) / lam
    what.flat[0] = 0.0
    w = np.fft.ifftn(what).real
    if grid is None:
        return w
    full = np.pad(w, [(0, 1)] * w.ndim, mode="wrap")
    return GridFunction(grid, full, "w")


def _gradient_symbols(shape, h):
    d = len(shape)
    th = np.meshgrid(*[2 * np.pi * np.fft.fftfreq(n) for n in shape], indexing="ij")
    e = [np.exp(1j * t) for t in th]
    syms = []
    for k in range(d):
        s = (e[k] - 1) / h
        for m in range(d):
            if m != k:
                s = s * (1 + e[m]) / 2
        syms.append(s)
    return np.stack(syms)


def periodic_cell_gradient(w: np.ndarray, h: float) -> np.ndarray:
    """Cell-average Q1 gradient of periodic nodal values, shape ``shape + (d,)``.

    Cell ``i`` spans nodes ``i .. i+1`` along each axis.
    """
    d = w.ndim
    out = np.zeros(w.shape + (d,))
    for k in range(d):
        diff = (np.roll(w, -1, axis=k) - w) / h
        for m in range(d):
            if m != k:
                diff = 0.5 * (diff + np.roll(diff, -1, axis=m))
        out[..., k] = diff
    return out


def periodic_helmholtz(f: np.ndarray, h: float):
    """Split a periodic cell field into mean, gradient and curl parts.

    Returns ``(fbar, w, S)`` with ``w`` nodal (mean zero), ``S`` nodal and
    antisymmetric (shape ``shape + (d, d)``), such that

        f = fbar + grad w - div S,   (div S)_i = sum_j grad_j S_ij

    where ``grad`` is :func:`periodic_cell_gradient`.  The identity is exact
    when every axis has an odd number of nodes; with an even count the
    checkerboard mode of ``f`` is not representable and is left over.
    """
    shape = f.shape[:-1]
    d = f.shape[-1]
    a = _gradient_symbols(shape, h)
    F = np.stack([np.fft.fftn(f[..., k]) for k in range(d)])
    fbar = np.array([f[..., k].mean() for k in range(d)])
    a2 = np.sum(np.abs(a) ** 2, axis=0)
    ok = a2 > 1e-12 * a2.max()
    inv = np.where(ok, 1.0 / np.where(ok, a2, 1.0), 0.0)
    W = np.sum(np.conj(a) * F, axis=0) * inv
    w = np.fft.ifftn(W).real
    S = np.zeros(shape + (d, d))
    for i in range(d):
        for j in range(i + 1, d):
            Sij = (np.conj(a[i]) * F[j] - np.conj(a[j]) * F[i]) * inv
            S[..., i, j] = np.fft.ifftn(Sij).real
            S[..., j, i] = -S[..., i, j]
    return fbar, w, S


def periodic_divergence(S: np.ndarray, h: float) -> np.ndarray:
    """Row divergence of a nodal matrix field, as a cell field."""
    d = S.shape[-1]
    out = np.zeros(S.shape[:-2] + (d,))
    for i in range(d):
        for j in range(d):
            out[..., i] += periodic_cell_gradient(S[..., i, j], h)[..., j]
    return out


def minimize_batch(energies: list, tol: float | None = None,
                   method: str = "direct") -> list:
    """Minimize several quadratic energies that differ only in tilt or boundary data.

    All energies must share the field, grid and regime type; the system
    matrix is factorized once.  Falls back to :func:`minimize` per energy
    for the perturbed family.
    """
    if not energies:
        return []
    first = energies[0]
    same = all(e.field is first.field and e.grid == first.grid
               and type(e.regime) is type(first.regime) for e in energies)
    if not same or not first.assembly.quadratic:
        return [minimize(e, tol, method) for e in energies]
    asm = first.assembly
    for e in energies[1:]:
        e.__dict__["assembly"] = asm
    if tol is None:
        tol = default_tol(first)
    grid = first.grid
    h = grid.h
    T, _, _ = first.dofs
    Tt = T.T.tocsr()
    lin = _LinearSolver(Tt @ asm.quadratic_stiffness @ T, method, tol)
    fixed = [e.dofs[1] for e in energies]
    R = np.column_stack([Tt @ asm.residual(f, e.q) for f, e in zip(fixed, energies)])
    X = -h * lin.solve(R)
    if X.ndim == 1:
        X = X[:, None]
    out = []
    for j, e in enumerate(energies):
        u = T @ X[:, j] + fixed[j]
        info = SolveInfo(method=method, iterations=1)
        info.energies = [asm.energy(fixed[j], e.q)]
        scale = tol * (1 + np.linalg.norm(e.q) + e.field.spec.K0) * np.sqrt(grid.n_nodes)
        for _ in range(3):
            r = Tt @ asm.residual(u, e.q)
            info.residuals.append(float(np.linalg.norm(r)))
            info.energies.append(asm.energy(u, e.q))
            if info.residuals[-1] <= scale:
                break
            u = u + T @ (-h * lin.solve(r))
            info.iterations += 1
        else:
            raise SolverError("batched solve did not reach tolerance",
                              info.residuals, info.energies)
        out.append(GridFunction(grid, e.normalize(u), _role_for(e), info))
    return out
