"""Oscillation, flatness and quenched Lipschitz diagnostics of minimizers.

The oscillation over a discrete ball is ``max - min`` over the grid nodes
within Euclidean distance ``r`` of the center.  Flatness is
``inf_p (1/r) osc(u - p.x)``; the infimum of a max-minus-min of affine
functions of ``p`` is a linear program, solved exactly with HiGHS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .field import FieldRealization, LagrangianSpec, sample_field
from .geometry import Box, GeometryError, discretize
from .solver import Dirichlet, DiscreteEnergy, GridFunction, minimize


def _ball(u: GridFunction, center, r: float):
    grid = u.grid
    c = np.asarray(center, dtype=float)
    if np.any(c - r < grid.box.lo - 1e-12) or np.any(c + r > grid.box.hi + 1e-12):
        raise GeometryError(f"ball of radius {r} leaves the grid")
    x = grid.node_coords.reshape(-1, grid.dim)
    inside = np.sum((x - c) ** 2, axis=1) <= r * r * (1 + 1e-12)
    return x[inside] - c, u.flat[inside]


def oscillation(u: GridFunction, center, r: float) -> float:
    _, v = _ball(u, center, r)
    return float(v.max() - v.min())


def best_affine_oscillation(x: np.ndarray, v: np.ndarray) -> tuple[float, np.ndarray]:
    """``min_p osc(v - p.x)`` and a minimizing slope."""
    d = x.shape[1]
    if len(v) <= 1:
        return 0.0, np.zeros(d)
    # variables (p, top, bottom); minimize top - bottom
    cost = np.concatenate([np.zeros(d), [1.0, -1.0]])
    ones = np.ones((len(v), 1))
    A = np.vstack([np.hstack([-x, -ones, np.zeros_like(ones)]),
                   np.hstack([x, np.zeros_like(ones), ones])])
    b = np.concatenate([-v, v])
    res = linprog(cost, A_ub=A, b_ub=b, bounds=[(None, None)] * (d + 2), method="highs")
    if not res.success:  # pragma: no cover - the LP is always feasible and bounded
        raise RuntimeError(f"flatness LP failed: {res.message}")
    p = res.x[:d]
    w = v - x @ p
    return float(w.max() - w.min()), p


def flatness(u: GridFunction, center, r: float) -> tuple[float, np.ndarray]:
    """``(1/r) inf_p osc_{B_r}(u - p.x)`` and the minimizing ``p``."""
    x, v = _ball(u, center, r)
    val, p = best_affine_oscillation(x, v)
    return val / r, p


@dataclass
class OscillationProfile:
    center: np.ndarray
    radii: np.ndarray
    osc: np.ndarray
    flatness: np.ndarray
    p_star: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        return self.osc / self.radii

    def y_surrogate(self, bound: float) -> float:
        """Smallest tested radius from which on ``osc / r <= bound`` at every
        larger tested radius; ``inf`` if the largest radius fails."""
        ok = self.normalized <= bound
        y = math.inf
        for r, good in zip(self.radii[::-1], ok[::-1]):
            if not good:
                break
            y = float(r)
        return y


def oscillation_profile(u: GridFunction, center, radii) -> OscillationProfile:
    c = np.asarray(center, dtype=float)
    radii = np.asarray(sorted(float(r) for r in radii))
    osc, flat, ps = [], [], []
    for r in radii:
        x, v = _ball(u, c, r)
        osc.append(float(v.max() - v.min()))
        f, p = best_affine_oscillation(x, v)
        flat.append(f / r)
        ps.append(p)
    return OscillationProfile(c, radii, np.array(osc), np.array(flat), np.array(ps))


def improvement_of_flatness_check(v: GridFunction, r: float, theta: float,
                                  center=None, atol: float = 1e-12) -> tuple[bool, float]:
    """Whether ``flatness(theta r) <= flatness(r) / 2``, with the ratio.

    An (numerically) affine ``v`` has zero flatness at both radii; the
    ratio is then reported as 0 and the check passes.
    """
    if not 0 < theta <= 0.5:
        raise ValueError("theta must lie in (0, 1/2]")
    c = v.grid.box.center if center is None else center
    big, _ = flatness(v, c, r)
    small, _ = flatness(v, c, theta * r)
    scale = atol * max(1.0, float(np.max(np.abs(v.values))))
    if big <= scale:
        return True, 0.0
    ratio = small / big
    return bool(ratio <= 0.5), float(ratio)


def caccioppoli_ratio(u: GridFunction, center, radii, M: float) -> float:
    """``max_r mean_{B_r} |Du|^2 / M^2`` over the given radii (cells by center)."""
    grid = u.grid
    c = np.asarray(center, dtype=float)
    g2 = np.sum(u.cell_gradients() ** 2, axis=1)
    dist2 = np.sum((grid.cell_centers - c) ** 2, axis=1)
    best = 0.0
    for r in radii:
        sel = dist2 <= r * r
        if np.any(sel):
            best = max(best, float(g2[sel].mean()) / M**2)
    return best


# ---------------------------------------------------------------------------
# local minimizers and the quenched experiment


def dyadic_radii(R: float, smallest: float = 2.0) -> list:
    """``smallest * 2**k`` up to ``R/2``, plus ``R/2`` itself."""
    out = []
    r = smallest
    while r < R / 2 - 1e-12:
        out.append(r)
        r *= 2
    out.append(R / 2)
    return out


def boundary_datum(p, R: float):
    """``g(x) = p.x + 0.1 |x|^2 / R``."""
    p = np.asarray(p, dtype=float)
    return lambda x: x @ p + 0.1 * np.sum(x * x, axis=-1) / R


def local_minimizer(field: FieldRealization, R: float, p, h: float) -> GridFunction:
    """Minimizer on ``(-R, R)^d`` with data ``p.x + 0.1 |x|^2 / R``."""
    d = field.dim
    box = Box.from_bounds([-R] * d, [R] * d)
    grid = discretize(box, h)
    energy = DiscreteEnergy(field, grid, None, Dirichlet(boundary_datum(p, R)))
    return minimize(energy)


def data_bound(field: FieldRealization, u: GridFunction, R: float) -> float:
    """``K0 + (1/R) (mean u^2)^(1/2)`` over the domain."""
    return field.spec.K0 + math.sqrt(u.mean_square()) / R


def regularity_member(params: dict, seed: int, index: int) -> dict:
    spec = LagrangianSpec.from_dict(params["spec"])
    R = float(params["R"])
    h = float(params["h"])
    d = spec.dimension
    p = params.get("p", [1.0] + [0.0] * (d - 1))
    radii = params.get("radii") or dyadic_radii(R)
    field = sample_field(spec, seed, Box.from_bounds([-R] * d, [R] * d))
    u = local_minimizer(field, R, p, h)
    M = data_bound(field, u, R)
    prof = oscillation_profile(u, np.zeros(d), radii)
    out = {"M": M, "max_normalized_osc": float(prof.normalized.max()),
           "max_ratio": float(prof.normalized.max() / M),
           "Y": prof.y_surrogate(float(params.get("C_Y", 1.0)) * M),
           "caccioppoli": caccioppoli_ratio(u, np.zeros(d), radii, M)}
    for k, r in enumerate(prof.radii):
        out[f"osc_{k}"] = prof.osc[k]
        out[f"flat_{k}"] = prof.flatness[k]
        for j in range(d):
            out[f"p{j}_{k}"] = prof.p_star[k, j]
    return out


@dataclass
class QuenchedTable:
    R: float
    radii: list
    Y: np.ndarray
    max_ratio: np.ndarray
    tail: object
    stats: object

    def fraction_below(self, threshold: float) -> float:
        return float(np.mean(self.max_ratio <= threshold))

    def csv(self) -> str:
        """Long-form rows ``seed,R,r,osc,flatness,p_star...``."""
        d = sum(1 for c in self.stats.columns if c.startswith("p") and c.endswith("_0"))
        head = "seed,R,r,osc,flatness," + ",".join(f"p_star{j}" for j in range(d))
        lines = [head]
        for row in self.stats.ok_rows:
            for k, r in enumerate(self.radii):
                vals = [row[f"osc_{k}"], row[f"flat_{k}"]] + [row[f"p{j}_{k}"] for j in range(d)]
                lines.append(f"{row['seed']},{self.R!r},{float(r)!r}," +
                             ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"


def quenched_lipschitz_experiment(spec: LagrangianSpec, R_list, N: int, h: float, seed: int,
                                  p=None, C_Y: float = 1.0, workers: int = 1) -> list:
    """Empirical ``Y`` surrogates and their tails, one table per ``R``."""
    from .harness import EnsembleTask, run_ensemble, tail_diagnostic

    if N < 20:
        raise ValueError("the quenched experiment needs N >= 20")
    d = spec.dimension
    p = [1.0] + [0.0] * (d - 1) if p is None else list(p)
    tables = []
    for R in R_list:
        radii = dyadic_radii(R)
        params = {"spec": spec.to_dict(), "R": R, "h": h, "p": p, "radii": radii, "C_Y": C_Y}
        st = run_ensemble(EnsembleTask("regularity", params, N, seed, workers))
        Y = st.column("Y")
        tail = tail_diagnostic(np.where(np.isfinite(Y), Y, 2 * R), radii)
        tables.append(QuenchedTable(R, radii, Y, st.column("max_ratio"), tail, st))
    return tables
