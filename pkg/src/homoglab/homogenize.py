"""Dirichlet-problem homogenization errors and multiscale constructions.

Everything here works in microscopic units: a macroscopic problem on a
unit cube with oscillation scale ``eps = 3**-n`` is solved on ``Q_n`` with
boundary data ``G(y) = g(eps y) / eps``; macroscopic errors are recovered
by the scalings ``u_eps(x) = eps U(x / eps)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cell import field_for, mu
from .field import FieldRealization, LagrangianSpec, sample_field
from .geometry import Box, Cube, Grid, GeometryError, discretize
from .solver import (Affine, Dirichlet, DiscreteEnergy, GridFunction, affine_function,
                     minimize, minimize_batch, periodic_divergence, periodic_cell_gradient,
                     periodic_helmholtz)

DELTA = 1.0 / 14.0


class HomogenizationRangeError(ValueError):
    """Boundary data slopes leave the range covered by the effective model."""


# ---------------------------------------------------------------------------
# boundary data


@dataclass(frozen=True)
class BoundaryData:
    """Closed-form macroscopic boundary datum on the unit cube ``(-1/2, 1/2)^d``.

    kinds: ``affine`` (``p``), ``quadratic`` (``p``, ``B``: ``p.x + x.B.x/2``),
    ``sinusoidal`` (``amplitude``, ``k``: ``amplitude * sin(2 pi k.x)``).
    """

    kind: str
    params: dict

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pr = self.params
        if self.kind == "affine":
            return x @ np.asarray(pr["p"], float)
        if self.kind == "quadratic":
            B = np.asarray(pr.get("B", np.eye(x.shape[-1])), float)
            p = np.asarray(pr.get("p", np.zeros(x.shape[-1])), float)
            return x @ p + 0.5 * np.einsum("...i,ij,...j->...", x, B, x)
        if self.kind == "sinusoidal":
            k = np.asarray(pr["k"], float)
            return float(pr.get("amplitude", 1.0)) * np.sin(2 * np.pi * (x @ k))
        raise ValueError(f"unknown boundary datum {self.kind!r}")

    def slope_bound(self, d: int) -> float:
        """Upper bound of ``|Dg|`` on the unit cube."""
        pr = self.params
        if self.kind == "affine":
            return float(np.linalg.norm(pr["p"]))
        if self.kind == "quadratic":
            B = np.asarray(pr.get("B", np.eye(d)), float)
            p = np.asarray(pr.get("p", np.zeros(d)), float)
            return float(np.linalg.norm(p) + np.linalg.norm(B, 2) * 0.5 * math.sqrt(d))
        k = np.asarray(pr["k"], float)
        return float(abs(pr.get("amplitude", 1.0)) * 2 * np.pi * np.linalg.norm(k))

    def data_bound(self, d: int) -> float:
        """``sup |g| + sup |Dg|`` on the unit cube (a W^{1,inf} bound)."""
        corners = np.array(np.meshgrid(*[[-0.5, 0.0, 0.5]] * d, indexing="ij")).reshape(d, -1).T
        sup_g = float(np.max(np.abs(self(corners))))
        if self.kind == "sinusoidal":
            sup_g = abs(float(self.params.get("amplitude", 1.0)))
        elif self.kind == "quadratic":
            sup_g += 0.125 * d * float(np.linalg.norm(np.asarray(self.params.get("B", np.eye(d))), 2))
        return sup_g + self.slope_bound(d)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": {k: np.asarray(v).tolist() if not
                                              isinstance(v, (int, float)) else v
                                              for k, v in self.params.items()}}


@dataclass
class DirichletExperiment:
    spec: LagrangianSpec
    g: BoundaryData
    levels: list                  # eps = 3**-n for n in levels
    samples: int
    Abar: np.ndarray              # effective quadratic form used for u_hom
    effective_radius: float = np.inf

    @property
    def eps(self) -> list:
        return [3.0**-n for n in self.levels]

    @property
    def M(self) -> float:
        return self.g.data_bound(self.spec.dimension)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "g": self.g.to_dict(),
                "levels": [int(n) for n in self.levels], "samples": self.samples,
                "Abar": np.asarray(self.Abar).tolist(),
                "effective_radius": None if not np.isfinite(self.effective_radius)
                else self.effective_radius}


def constant_field(A, region: Box) -> FieldRealization:
    """Deterministic single-phase quadratic field ``L(p) = p.A.p``."""
    A = np.asarray(A, dtype=float)
    spec = LagrangianSpec(A.shape[0], "quadratic", (A,), (1.0,),
                          Lambda=float(np.linalg.eigvalsh(A)[-1]))
    return sample_field(spec, 0, region)


def micro_problem(field: FieldRealization, n: int, g: BoundaryData, h: float):
    """Heterogeneous minimizer on ``Q_n`` with data ``3**n g(3**-n y)``."""
    eps = 3.0**-n
    cube = Cube(n, (0,) * field.dim)
    grid = discretize(cube, h)
    data = lambda y: g(eps * y) / eps  # noqa: E731
    energy = DiscreteEnergy(field, grid, None, Dirichlet(data))
    return minimize(energy), energy


def dirichlet_level(field: FieldRealization, n: int, g: BoundaryData, Abar, h: float) -> dict:
    """Errors between heterogeneous and homogenized solutions at ``eps = 3**-n``."""
    eps = 3.0**-n
    u_eps, e_het = micro_problem(field, n, g, h)
    hom = constant_field(Abar, e_het.grid.box)
    e_hom = DiscreteEnergy(hom, e_het.grid, None, e_het.regime)
    u_hom = minimize(e_hom)
    diff = u_eps - u_hom
    return {
        "l2_error": eps**2 * diff.mean_square(),
        "linf_error": eps * float(np.max(np.abs(diff.values))),
        "energy_gap": abs(e_het.value(u_eps) - e_hom.value(u_hom)),
        "u_eps": u_eps, "u_hom": u_hom, "energy_het": e_het, "energy_hom": e_hom,
    }


def dirichlet_member(params: dict, seed: int, index: int) -> dict:
    spec = LagrangianSpec.from_dict(params["spec"])
    g = BoundaryData(params["g"]["kind"], params["g"]["params"])
    levels = sorted(int(n) for n in params["levels"])
    h = float(params["h"])
    Abar = np.asarray(params["Abar"], float)
    field = field_for(params, seed, Cube(levels[-1], (0,) * spec.dimension))
    out = {}
    for n in levels:
        t0 = time.perf_counter()
        r = dirichlet_level(field, n, g, Abar, h)
        out[f"runtime_ms_{n}"] = 1e3 * (time.perf_counter() - t0)
        out[f"l2_{n}"] = r["l2_error"]
        out[f"linf_{n}"] = r["linf_error"]
        out[f"egap_{n}"] = r["energy_gap"]
    return out


@dataclass
class DirichletTable:
    eps: np.ndarray
    l2_mean: np.ndarray
    l2_se: np.ndarray
    linf_mean: np.ndarray
    energy_gap_mean: np.ndarray
    fit: object
    stats: object

    def csv(self) -> str:
        """Long-form rows ``epsilon,sample,l2_error,linf_error,energy_gap``."""
        lines = ["epsilon,sample,l2_error,linf_error,energy_gap"]
        levels = [int(round(-math.log(e, 3))) for e in self.eps]
        for r in self.stats.ok_rows:
            for e, n in zip(self.eps, levels):
                lines.append(f"{e!r},{r['member']},{r[f'l2_{n}']!r},{r[f'linf_{n}']!r},"
                             f"{r[f'egap_{n}']!r}")
        return "\n".join(lines) + "\n"

    def timing_csv(self) -> str:
        """Rows ``epsilon,sample,runtime_ms``; wall-clock, so not reproducible."""
        lines = ["epsilon,sample,runtime_ms"]
        for r in self.stats.ok_rows:
            for e in self.eps:
                n = int(round(-math.log(e, 3)))
                lines.append(f"{e!r},{r['member']},{r[f'runtime_ms_{n}']:.3f}")
        return "\n".join(lines) + "\n"


def dirichlet_error(experiment: DirichletExperiment, h: float, seed: int,
                    workers: int = 1) -> DirichletTable:
    """Ensemble of heterogeneous vs homogenized Dirichlet solutions per eps."""
    from .effective import fit_rate
    from .harness import EnsembleTask, run_ensemble

    d = experiment.spec.dimension
    if experiment.g.slope_bound(d) > experiment.effective_radius:
        raise HomogenizationRangeError("boundary slopes exceed the effective model's range")
    params = experiment.to_dict()
    params["h"] = h
    st = run_ensemble(EnsembleTask("dirichlet", params, experiment.samples, seed, workers))
    levels = sorted(int(n) for n in experiment.levels)
    l2 = np.array([st.mean[f"l2_{n}"] for n in levels])
    l2se = np.array([st.stderr[f"l2_{n}"] for n in levels])
    linf = np.array([st.mean[f"linf_{n}"] for n in levels])
    eg = np.array([st.mean[f"egap_{n}"] for n in levels])
    fit = None
    if len(levels) >= 3 and np.all(l2 > 0):
        fit = fit_rate([(3.0**n, v) for n, v in zip(levels, l2)])
    return DirichletTable(np.array([3.0**-n for n in levels]), l2, l2se, linf, eg, fit, st)


# ---------------------------------------------------------------------------
# coarsening


def _cell_means(u: GridFunction) -> np.ndarray:
    return u.local().mean(axis=1).reshape(u.grid.cells)


def _box_sums(table: np.ndarray, lo: np.ndarray, width: int) -> np.ndarray:
    """Sums of ``table`` over boxes ``[lo, lo + width)`` via summed-area tables."""
    d = table.ndim
    S = table
    for k in range(d):
        S = np.cumsum(S, axis=k)
    S = np.pad(S, [(1, 0)] * d)
    total = np.zeros(lo.shape[:-1])
    for corner in np.ndindex(*([2] * d)):
        idx = tuple(lo[..., k] + width * corner[k] for k in range(d))
        sign = (-1) ** (d - sum(corner))
        total = total + sign * S[idx]
    return total


def coarsen(u: GridFunction, n: int, V: Box) -> GridFunction:
    """Sliding average of ``u`` over ``y + Q_n`` at every node ``y`` of ``V``.

    ``V`` must keep a distance of at least ``3**n`` from the boundary of the
    grid box.
    """
    grid = u.grid
    side = 3**n
    if not grid.box.shrink(2 * side).contains_box(V):
        raise GeometryError("coarsening region too close to the boundary")
    sub = Grid(V, grid.per_unit)
    half = side * grid.per_unit // 2
    start = np.array(grid.node_index(sub.lo))
    idx = np.indices(sub.node_shape).reshape(grid.dim, -1).T + start
    lo = idx - half
    sums = _box_sums(_cell_means(u), lo, 2 * half)
    vals = sums / (2 * half) ** grid.dim
    return GridFunction(sub, vals.reshape(sub.node_shape), "xi")


# ---------------------------------------------------------------------------
# partition of unity and cutoffs


def smoothed_indicator(t: np.ndarray, half_width: float, smoothing: float) -> np.ndarray:
    """Indicator of ``[-half_width, half_width]`` convolved with a raised-cosine bump.

    Translates by ``2 * half_width`` sum to one exactly in exact arithmetic.
    """
    s = float(smoothing)

    def cdf(x):
        x = np.clip(x, -s / 2, s / 2)
        return (x + s / 2) / s + np.sin(2 * np.pi * x / s) / (2 * np.pi)

    return cdf(t + half_width) - cdf(t - half_width)


def partition_weights(x: np.ndarray, centers: np.ndarray, side: float,
                      smoothing: float) -> np.ndarray:
    """Weights ``psi(x - z)`` for points ``x (P, d)`` and centers ``z (Z, d)``.

    Renormalized so that the weights of every point sum to one over all
    lattice centers with nonzero weight (``centers`` must include them all).
    """
    w = np.ones((x.shape[0], centers.shape[0]))
    for k in range(x.shape[1]):
        w *= smoothed_indicator(x[:, None, k] - centers[None, :, k], side / 2, smoothing)
    tot = w.sum(axis=1, keepdims=True)
    return np.divide(w, tot, out=np.zeros_like(w), where=tot > 0)


def lattice_centers(box: Box, spacing: int, reach: float) -> np.ndarray:
    """Points of ``spacing * Z^d`` within ``reach`` (sup norm) of ``box``."""
    axes = []
    for lo, hi in zip(box.lo, box.hi):
        a = math.ceil((lo - reach) / spacing)
        b = math.floor((hi + reach) / spacing)
        axes.append(spacing * np.arange(a, b + 1))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1).astype(float)


def box_cutoff(x: np.ndarray, half_width: float, ramp: float) -> np.ndarray:
    """``clip((half_width - |x|_inf) / ramp, 0, 1)``; Lipschitz constant ``1/ramp``."""
    r = np.max(np.abs(x), axis=-1)
    if half_width <= 0:
        return np.zeros(r.shape)
    return np.clip((half_width - r) / ramp, 0.0, 1.0)


def allowed_half_width(big_half: float, n: int) -> float:
    """Half-width of the union of ``z + Q_n`` (``z`` on ``3**n Z^d``) whose
    neighborhoods ``z + Q_{n+1}`` fit inside the centered cube of half-width
    ``big_half``; zero when there is none."""
    s = 3**n
    zmax = math.floor((big_half - 1.5 * s) / s + 1e-12)
    if zmax < 0:
        return 0.0
    return zmax * s + s / 2


# ---------------------------------------------------------------------------
# Helmholtz projection


@dataclass
class PatchingArtifacts:
    fbar: np.ndarray
    w: np.ndarray
    S: np.ndarray
    h: float
    residual: float
    f: np.ndarray | None = None
    psi_sum_error: float | None = None
    xi: np.ndarray | None = None
    zeta: np.ndarray | None = None
    extras: dict = dc_field(default_factory=dict)

    @property
    def skew_error(self) -> float:
        return float(np.max(np.abs(self.S + np.swapaxes(self.S, -1, -2))))


def helmholtz_project(f: np.ndarray, h: float) -> PatchingArtifacts:
    """Split a periodic cellwise field ``f (shape + (d,))`` as ``fbar + Dw - div S``.

    Cell ``i`` of the periodic grid spans nodes ``i .. i+1``; ``w`` and ``S``
    are nodal.  The reconstruction residual is measured and returned.
    """
    f = np.asarray(f, dtype=float)
    fbar, w, S = periodic_helmholtz(f, h)
    recon = fbar + periodic_cell_gradient(w, h) - periodic_divergence(S, h)
    res = float(np.max(np.abs(recon - f))) if f.size else 0.0
    return PatchingArtifacts(fbar, w, S, h, res, f=f)


# ---------------------------------------------------------------------------
# patching


@dataclass
class PatchReport:
    n: int
    q: np.ndarray
    Pbar: np.ndarray
    candidate_energy: float      # mean of L(Pbar + Dv) over the trimmed cube
    nu_value: float              # nu(Q_2n°, Pbar) on the same grid
    mu_value: float              # mu(Q_n, q) of the same realization
    reconstruction_residual: float
    candidate: GridFunction
    artifacts: PatchingArtifacts

    @property
    def admissibility_slack(self) -> float:
        return self.candidate_energy - self.nu_value

    @property
    def gap(self) -> float:
        return self.candidate_energy - float(self.q @ self.Pbar) - self.mu_value


def patch_candidate(field: FieldRealization, n: int, Pbar, q, h: float,
                    smoothing: float | None = None, xi_ramp: float | None = None,
                    compute_nu: bool = True) -> PatchReport:
    """Stitch free minimizers on overlapping cubes into a Dirichlet candidate.

    The stitched field ``f = zeta * sum_z psi(x - z) (Du(x, z + Q_{n+1}) - Pbar)``
    over ``z`` in ``3**n Z^d`` is split by :func:`helmholtz_project`; the
    candidate ``v = xi * w`` vanishes on the boundary of the trimmed cube
    ``Q_{2n}°``, so ``Pbar.x + v`` is admissible there.
    """
    d = field.dim
    Pbar = np.asarray(Pbar, dtype=float)
    q = np.asarray(q, dtype=float)
    big = Cube(2 * n, (0,) * d)
    grid = discretize(big, h)
    s = 3**n
    smoothing = float(s if smoothing is None else smoothing)
    big_half = 3 ** (2 * n) / 2
    zeta_half = allowed_half_width(big_half, n)
    xi_half = allowed_half_width(big_half - 0.5, n)
    xi_ramp = 3 ** (2 * n / (1 + DELTA)) if xi_ramp is None else xi_ramp

    cells = grid.cell_centers
    zeta = box_cutoff(cells, zeta_half, s)
    active = zeta > 0
    f = np.zeros((grid.n_cells, d))
    if np.any(active):
        reach = s / 2 + smoothing / 2
        centers = lattice_centers(Box.from_bounds(-np.full(d, zeta_half), np.full(d, zeta_half)),
                                  s, reach)
        xa = cells[active]
        W = partition_weights(xa, centers, s, smoothing)
        acc = np.zeros((xa.shape[0], d))
        for j, z in enumerate(centers):
            sel = W[:, j] > 0
            if not np.any(sel):
                continue
            cube = Cube(n + 1, tuple(int(round(c)) for c in z))
            u = mu(field, cube, q, h).minimizer
            G = u.cell_gradients().reshape(tuple(u.grid.cells) + (d,))
            idx = np.floor((xa[sel] - u.grid.lo) * grid.per_unit).astype(int)
            Du = G[tuple(idx.T)]
            acc[sel] += W[sel, j][:, None] * (Du - Pbar)
        f[active] = zeta[active][:, None] * acc

    # periodic embedding with an odd number of nodes per axis (one padding cell)
    shape = tuple(c + 1 for c in grid.cells)
    fp = np.zeros(shape + (d,))
    fp[tuple(slice(0, c) for c in grid.cells)] = f.reshape(tuple(grid.cells) + (d,))
    art = helmholtz_project(fp, grid.h)
    w_nodes = art.w[tuple(slice(0, m) for m in grid.node_shape)]
    xi = box_cutoff(grid.node_coords, xi_half, xi_ramp)
    v = GridFunction(grid, xi * w_nodes, "v")

    tgrid = discretize(big.trim(), h)
    vt = v.restrict(tgrid)
    if np.max(np.abs(vt.values[tgrid.boundary_mask])) > 0:
        raise GeometryError("candidate does not vanish on the trimmed boundary")
    energy = DiscreteEnergy(field, tgrid, None, Affine(tuple(Pbar)))
    cand = energy.value(affine_function(tgrid, Pbar) + vt)
    nu_val = energy.value(minimize(energy)) if compute_nu else float("nan")
    mu_val = mu(field, Cube(n, (0,) * d), q, h).value
    art.xi = xi
    art.zeta = zeta
    node_pts = grid.node_coords.reshape(-1, d)
    cen = lattice_centers(grid.box, s, s / 2 + smoothing / 2)
    psum = partition_weights(node_pts, cen, s, smoothing).sum(axis=1)
    art.psi_sum_error = float(np.max(np.abs(psum - 1)))
    return PatchReport(n, q, Pbar, cand, nu_val, mu_val, art.residual, vt, art)


def patching_member(params: dict, seed: int, index: int) -> dict:
    spec = LagrangianSpec.from_dict(params["spec"])
    n = int(params["n"])
    d = spec.dimension
    region = Cube(2 * n + 1, (0,) * d)
    field = field_for(params, seed, region)
    rep = patch_candidate(field, n, params["Pbar"], params["q"], float(params["h"]))
    return {"candidate": rep.candidate_energy, "nu": rep.nu_value, "mu": rep.mu_value,
            "slack": rep.admissibility_slack, "gap": rep.gap,
            "residual": rep.reconstruction_residual}


# ---------------------------------------------------------------------------
# two-sided energy comparison


@dataclass
class SandwichReport:
    het_min: float        # heterogeneous energy of the heterogeneous minimizer
    het_candidate: float  # heterogeneous energy of the modified homogenized solution
    hom_min: float
    hom_candidate: float

    @property
    def holds(self) -> bool:
        tol = 1e-10
        return (self.het_candidate >= self.het_min - tol * (1 + abs(self.het_min))
                and self.hom_candidate >= self.hom_min - tol * (1 + abs(self.hom_min)))


def energy_sandwich(field: FieldRealization, u_eps: GridFunction, u_hom: GridFunction,
                    Abar, n: int, m: int = 0) -> SandwichReport:
    """Compare minimizers with candidates built from the other problem.

    ``u_tilde = eta * xi + (1 - eta) u_eps`` with ``xi`` the ``3**n``
    coarsening of ``u_eps`` is tested in the homogenized energy;
    ``u_hom_tilde = eta * v_tilde + (1 - eta) u_hom`` is tested in the
    heterogeneous one, where ``v_tilde`` glues Dirichlet cell solutions on
    ``z + Q_{m+2}`` with the local slope and value of ``u_hom`` through a
    partition of unity on ``3**m Z^d``.  ``eta`` is one on ``V°`` and zero
    outside ``V`` with slope ``3**-l``, ``l = ceil((m + n)/2)``.
    """
    grid = u_eps.grid
    d = grid.dim
    h = grid.h
    l = math.ceil((m + n) / 2)
    V = grid.box.shrink(2 * 3**n)
    Vdist = (V.sides.min() / 2)
    if Vdist <= 3**l:
        raise GeometryError("domain too small for the chosen mesoscales")
    sub = Grid(V, grid.per_unit)
    sl = grid.slices_of(sub)
    x = grid.node_coords
    eta = box_cutoff(x - V.center, V.sides.min() / 2, 3**l)
    xi = coarsen(u_eps, n, V)
    xi_full = u_eps.values.copy()
    xi_full[sl] = xi.values
    u_tilde = GridFunction(grid, eta * xi_full + (1 - eta) * u_eps.values)

    # glued local solutions
    s = 3**m
    cen = lattice_centers(V, s, s / 2 + s / 2)
    G_hom = u_hom.gauss_gradients().mean(axis=1)
    pts = x.reshape(-1, d)
    inside = eta.ravel() > 0
    W = partition_weights(pts[inside], cen, s, s)
    v_acc = np.zeros(inside.sum())
    for j, z in enumerate(cen):
        sel = W[:, j] > 0
        if not np.any(sel):
            continue
        cube = Cube(m + 2, tuple(int(round(c)) for c in z))
        zi = grid.node_index(z)
        cidx = np.clip(np.floor((z - grid.lo) * grid.per_unit).astype(int), 0,
                       np.array(grid.cells) - 1)
        p = G_hom[np.ravel_multi_index(tuple(cidx), grid.cells)]
        cg = discretize(cube, h)
        if not field.region.contains_box(cg.box):
            raise GeometryError("mesoscopic cube leaves the field region")
        vs = minimize_batch([DiscreteEnergy(field, cg, None, Affine(tuple(e)))
                             for e in np.eye(d)])
        vz = sum(pk * vk.values for pk, vk in zip(p, vs)) - float(p @ z) + u_hom.values[zi]
        idx = np.rint((pts[inside][sel] - cg.lo) * grid.per_unit).astype(int)
        v_acc[sel] += W[sel, j] * vz[tuple(idx.T)]
    v_tilde = np.zeros(grid.n_nodes)
    v_tilde[inside] = v_acc
    v_tilde = v_tilde.reshape(grid.node_shape)
    u_hom_tilde = GridFunction(grid, eta * v_tilde + (1 - eta) * u_hom.values)

    g_vals = u_eps.values
    e_het = DiscreteEnergy(field, grid, None, Dirichlet(g_vals))
    e_hom = DiscreteEnergy(constant_field(Abar, grid.box), grid, None, Dirichlet(g_vals))
    return SandwichReport(e_het.value(u_eps), e_het.value(u_hom_tilde),
                          e_hom.value(u_hom), e_hom.value(u_tilde))


# ---------------------------------------------------------------------------
# sup-norm interpolation


@dataclass
class InterpolationBound:
    sup: float
    l2_integral: float
    holder: float
    bound: float
    gamma: float

    @property
    def holds(self) -> bool:
        return self.sup <= self.bound * (1 + 1e-6)


def holder_seminorm(x: np.ndarray, v: np.ndarray, gamma: float, chunk: int = 2048) -> float:
    best = 0.0
    for a in range(0, len(v), chunk):
        dx = np.linalg.norm(x[a:a + chunk, None, :] - x[None, :, :], axis=-1)
        dv = np.abs(v[a:a + chunk, None] - v[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dx > 0, dv / dx**gamma, 0.0)
        best = max(best, float(ratio.max()))
    return best


def linfty_interpolate(u_diff: GridFunction, r: float, gamma: float = 0.5,
                       center=None) -> InterpolationBound:
    """Sup of ``u_diff`` on ``B_r`` next to its L2/Hoelder interpolation bound.

    With ``k`` the discrete ``gamma``-Hoelder seminorm over node pairs and
    ``I`` the node-quadrature integral of ``u^2`` over the ball, the bound is
    ``max(C1 * I**(gamma/(2 gamma+d)) * k**(d/(2 gamma+d)), 2**(1+d/2) * sqrt(I/|B_r|))``
    with ``C1 = (2**(d+2+d/gamma) / omega_d)**(gamma/(2 gamma+d))``.  The
    second term covers balls on which ``u`` cannot drop to half its maximum.
    """
    grid = u_diff.grid
    d = grid.dim
    c = grid.box.center if center is None else np.asarray(center, float)
    pts = grid.node_coords.reshape(-1, d)
    inb = np.linalg.norm(pts - c, axis=1) <= r + 1e-12
    if not np.any(inb):
        raise GeometryError("ball contains no grid nodes")
    x = pts[inb]
    v = u_diff.flat[inb]
    sup = float(np.max(np.abs(v)))
    I = float(np.sum(v * v)) * grid.h**d
    k = holder_seminorm(x, v, gamma)
    omega = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    vol = omega * r**d
    e = gamma / (2 * gamma + d)
    C1 = (2 ** (d + 2 + d / gamma) / omega) ** e
    bound = max(C1 * I**e * k ** (d / (2 * gamma + d)), 2 ** (1 + d / 2) * math.sqrt(I / vol))
    return InterpolationBound(sup, I, k, bound, gamma)
