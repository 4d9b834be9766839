"""Effective Lagrangian tables estimated from cell-problem ensembles.

The model stores, on axis-aligned lattices, the effective energy
``Lbar(p)`` (from the Dirichlet problems on the largest cube), the
effective tilted energy ``mubar(q)`` (from the free problems), the mean
slope ``Pbar(q)`` on trimmed cubes, and per-scale ensemble means.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import stats
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp

from .cell import error_functional, field_for, mu, nu, quadratic_forms
from .field import LagrangianSpec
from .geometry import Cube
from .harness import EnsembleTask, run_ensemble


class RangeError(ValueError):
    """Slope outside the tabulated lattice."""


class RangeWarning(UserWarning):
    """Maximizer of a discrete Legendre transform sits on the lattice boundary."""


class BudgetError(RuntimeError):
    """Requested scales exceed the node budget; ``partial`` holds completed scales."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


def lattice_axis(radius: float, spacing: float) -> np.ndarray:
    m = int(round(radius / spacing))
    if abs(m * spacing - radius) > 1e-9 * max(1.0, radius):
        raise ValueError("radius must be a multiple of the spacing")
    return spacing * np.arange(-m, m + 1)


def lattice_points(axis: np.ndarray, d: int) -> np.ndarray:
    """All lattice points, shape ``(len(axis)**d, d)``, C order."""
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class EffectiveModel:
    """Tabulated effective quantities.

    Tables have shape ``(len(axis),) * d``; ``Pbar`` has an extra trailing
    axis of length ``d``.
    """

    d: int
    p_axis: np.ndarray
    q_axis: np.ndarray
    Lbar_table: np.ndarray
    Lbar_se: np.ndarray
    mu_table: np.ndarray
    mu_se: np.ndarray
    Pbar_table: np.ndarray
    Lambda: float
    provenance: dict = dc_field(default_factory=dict)
    per_scale: dict = dc_field(default_factory=dict)

    @property
    def dp(self) -> float:
        return float(self.p_axis[1] - self.p_axis[0])

    @property
    def dq(self) -> float:
        return float(self.q_axis[1] - self.q_axis[0])

    @property
    def p_points(self) -> np.ndarray:
        return lattice_points(self.p_axis, self.d)

    @property
    def q_points(self) -> np.ndarray:
        return lattice_points(self.q_axis, self.d)

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_quadratic(cls, A, p_radius=2.0, q_radius=2.0, spacing=0.25,
                       q_spacing=None, Lambda=None, provenance=None) -> "EffectiveModel":
        """Exact tables of ``Lbar(p) = p.A.p``, ``mubar(q) = -q.A^-1.q/4``."""
        A = np.asarray(A, dtype=float)
        d = A.shape[0]
        pa = lattice_axis(p_radius, spacing)
        qa = lattice_axis(q_radius, q_spacing or spacing)
        P = lattice_points(pa, d)
        Q = lattice_points(qa, d)
        Ainv = np.linalg.inv(A)
        shp_p = (len(pa),) * d
        shp_q = (len(qa),) * d
        L = np.einsum("ni,ij,nj->n", P, A, P).reshape(shp_p)
        M = -0.25 * np.einsum("ni,ij,nj->n", Q, Ainv, Q).reshape(shp_q)
        Pb = (0.5 * Q @ Ainv.T).reshape(shp_q + (d,))
        lam = float(np.linalg.eigvalsh(A)[-1]) if Lambda is None else Lambda
        return cls(d, pa, qa, L, np.zeros(shp_p), M, np.zeros(shp_q), Pb, lam,
                   provenance or {"source": "quadratic form", "A": A.tolist()})

    # -- evaluation ---------------------------------------------------------

    def _interp(self, axis, table, x):
        x = np.asarray(x, dtype=float)
        lo, hi = axis[0], axis[-1]
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            raise RangeError(f"point {x} outside the tabulated range [{lo}, {hi}]")
        f = RegularGridInterpolator([axis] * self.d, table, method="linear")
        out = f(np.clip(x, lo, hi).reshape(-1, self.d))
        return out.reshape(x.shape[:-1] + table.shape[self.d:])

    def Lbar(self, p) -> float | np.ndarray:
        out = self._interp(self.p_axis, self.Lbar_table, p)
        return float(out) if np.ndim(out) == 0 else out

    def mubar(self, q) -> float | np.ndarray:
        out = self._interp(self.q_axis, self.mu_table, q)
        return float(out) if np.ndim(out) == 0 else out

    def Pbar(self, q) -> np.ndarray:
        return self._interp(self.q_axis, self.Pbar_table, q)

    def gradient(self, p) -> np.ndarray:
        return effective_gradient(self, p)

    def quadratic_fit(self) -> np.ndarray:
        """Least-squares symmetric ``A`` with ``Lbar(p) ~ p.A.p`` on the lattice."""
        P = self.p_points
        pairs = [(i, j) for i in range(self.d) for j in range(i, self.d)]
        X = np.column_stack([P[:, i] * P[:, j] * (1 if i == j else 2) for i, j in pairs])
        coef, *_ = np.linalg.lstsq(X, self.Lbar_table.ravel(), rcond=None)
        A = np.zeros((self.d, self.d))
        for c, (i, j) in zip(coef, pairs):
            A[i, j] = A[j, i] = c
        return A

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "d": self.d, "p_axis": self.p_axis.tolist(), "q_axis": self.q_axis.tolist(),
            "Lbar": self.Lbar_table.tolist(), "Lbar_stderr": self.Lbar_se.tolist(),
            "mubar": self.mu_table.tolist(), "mubar_stderr": self.mu_se.tolist(),
            "Pbar": self.Pbar_table.tolist(), "lambda": self.Lambda,
            "provenance": self.provenance, "per_scale": self.per_scale,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "EffectiveModel":
        a = np.asarray
        return cls(int(obj["d"]), a(obj["p_axis"], float), a(obj["q_axis"], float),
                   a(obj["Lbar"], float), a(obj["Lbar_stderr"], float),
                   a(obj["mubar"], float), a(obj["mubar_stderr"], float),
                   a(obj["Pbar"], float), float(obj["lambda"]),
                   obj.get("provenance", {}), obj.get("per_scale", {}))

    @classmethod
    def from_json(cls, text: str) -> "EffectiveModel":
        return cls.from_dict(json.loads(text))

    def scale_csv(self) -> str:
        """Per-scale ensemble means of the axis quantities, one row per scale."""
        lines = ["n,quantity,mean,stderr"]
        for n in sorted(self.per_scale, key=int):
            for name, (m, se) in sorted(self.per_scale[n].items()):
                lines.append(f"{n},{name},{m!r},{se!r}")
        return "\n".join(lines) + "\n"


def effective_gradient(model: EffectiveModel, p) -> np.ndarray:
    """Central difference of the interpolated ``Lbar`` with the lattice step."""
    p = np.asarray(p, dtype=float)
    step = model.dp
    lo, hi = model.p_axis[0], model.p_axis[-1]
    if np.any(p - step < lo - 1e-12) or np.any(p + step > hi + 1e-12):
        raise RangeError(f"slope {p} too close to the lattice boundary for a central difference")
    g = np.empty(model.d)
    for k in range(model.d):
        e = np.zeros(model.d)
        e[k] = step
        g[k] = (model.Lbar(p + e) - model.Lbar(p - e)) / (2 * step)
    return g


# ---------------------------------------------------------------------------
# estimation


def _forms_to_row(prefix, forms_N, forms_M, d):
    out = {}
    for i in range(d):
        for j in range(i, d):
            if forms_N is not None:
                out[f"{prefix}N{i}{j}"] = forms_N[i, j]
            if forms_M is not None:
                out[f"{prefix}M{i}{j}"] = forms_M[i, j]
    return out


def _sym_from_row(row, key, d):
    A = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            A[i, j] = A[j, i] = row[f"{key}{i}{j}"]
    return A


def effective_member(params: dict, seed: int, index: int) -> dict:
    """Cell quantities of one realization at every requested scale.

    Quadratic family: the forms ``N`` (untrimmed, Dirichlet) and ``M``
    (untrimmed and trimmed, free) per scale.  Perturbed family: values at
    every lattice point.
    """
    spec = LagrangianSpec.from_dict(params["spec"])
    d = spec.dimension
    scales = sorted(int(n) for n in params["scales"])
    h = float(params["h"])
    field = field_for(params, seed, Cube(scales[-1], (0,) * d))
    out = {}
    for n in scales:
        cube = Cube(n, (0,) * d)
        if spec.kappa == 0:
            F = quadratic_forms(field, cube, h)
            out.update(_forms_to_row(f"n{n}_", F.N, F.M, d))
            if n >= 1:
                Ft = quadratic_forms(field, cube.trim(), h, want="mu")
                out.update(_forms_to_row(f"n{n}_trim_", None, Ft.M, d))
        else:
            for i, p in enumerate(params["p_points"]):
                out[f"n{n}_nu_{i}"] = nu(field, cube, p, h).value
            for i, q in enumerate(params["q_points"]):
                out[f"n{n}_mu_{i}"] = mu(field, cube, q, h).value
                if n >= 1:
                    P = mu(field, cube.trim(), q, h).slope
                    for k in range(d):
                        out[f"n{n}_P{k}_{i}"] = P[k]
    return out


def _mean_se(values: np.ndarray):
    """Columnwise mean and standard error over axis 0 (exactly rounded sums)."""
    N = values.shape[0]
    flat = values.reshape(N, -1)
    mean = np.array([math.fsum(c) / N for c in flat.T])
    if N > 1:
        var = np.array([math.fsum((c - m) ** 2) / (N - 1) for c, m in zip(flat.T, mean)])
        se = np.sqrt(var / N)
    else:
        se = np.zeros_like(mean)
    return mean.reshape(values.shape[1:]), se.reshape(values.shape[1:])


def node_count(n: int, h: float, d: int) -> int:
    return int(round(3**n / h + 1)) ** d


def estimate_effective(spec: LagrangianSpec, p_axis, q_axis, scales, samples: int, h: float,
                       seed: int, workers: int = 1, max_nodes: int = 4_000_000,
                       return_stats: bool = False):
    """Monte Carlo estimate of the effective tables.

    Every member uses one realization for all scales (nested cubes centered
    at the origin).  The largest scale fills the tables; every scale's
    ensemble means along the coordinate directions are kept in
    ``per_scale``.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    d = spec.dimension
    p_axis = np.asarray(p_axis, dtype=float)
    q_axis = np.asarray(q_axis, dtype=float)
    scales = sorted(int(n) for n in scales)
    ok = [n for n in scales if node_count(n, h, d) <= max_nodes]
    if len(ok) < len(scales):
        partial = None
        if ok:
            partial = estimate_effective(spec, p_axis, q_axis, ok, samples, h, seed,
                                         workers, max_nodes)
        raise BudgetError(f"scales {sorted(set(scales) - set(ok))} exceed {max_nodes} nodes",
                          partial)
    P = lattice_points(p_axis, d)
    Q = lattice_points(q_axis, d)
    params = {"spec": spec.to_dict(), "scales": scales, "h": h}
    if spec.kappa != 0:
        params["p_points"] = P.tolist()
        params["q_points"] = Q.tolist()
    st = run_ensemble(EnsembleTask("effective", params, samples, seed, workers))
    rows = st.ok_rows
    shp_p = (len(p_axis),) * d
    shp_q = (len(q_axis),) * d
    per_scale = {}
    tables = {}
    eye = np.eye(d)
    for n in scales:
        if spec.kappa == 0:
            Ns = [_sym_from_row(r, f"n{n}_N", d) for r in rows]
            Ms = [_sym_from_row(r, f"n{n}_M", d) for r in rows]
            nu_vals = np.array([np.einsum("ni,ij,nj->n", P, N, P) for N in Ns])
            mu_vals = np.array([-0.5 * np.einsum("ni,ij,nj->n", Q, M, Q) for M in Ms])
            if n >= 1:
                Mt = [_sym_from_row(r, f"n{n}_trim_M", d) for r in rows]
                P_vals = np.array([Q @ M.T for M in Mt])
            else:
                P_vals = np.array([Q @ M.T for M in Ms])
        else:
            nu_vals = np.array([[r[f"n{n}_nu_{i}"] for i in range(len(P))] for r in rows])
            mu_vals = np.array([[r[f"n{n}_mu_{i}"] for i in range(len(Q))] for r in rows])
            if n >= 1:
                P_vals = np.array([[[r[f"n{n}_P{k}_{i}"] for k in range(d)]
                                    for i in range(len(Q))] for r in rows])
            else:
                P_vals = np.full((len(rows), len(Q), d), np.nan)
        nu_m, nu_se = _mean_se(nu_vals)
        mu_m, mu_se = _mean_se(mu_vals)
        P_m, _ = _mean_se(P_vals)
        tables[n] = (nu_m.reshape(shp_p), nu_se.reshape(shp_p),
                     mu_m.reshape(shp_q), mu_se.reshape(shp_q), P_m.reshape(shp_q + (d,)))
        entry = {}
        for k in range(d):
            for name, axis, m, se in (("nu", p_axis, nu_m, nu_se), ("mu", q_axis, mu_m, mu_se)):
                pts = P if name == "nu" else Q
                ax_step = axis[1] - axis[0]
                target = eye[k] * min(1.0, axis[-1])
                j = int(np.argmin(np.sum((pts - target) ** 2, axis=1)))
                if np.allclose(pts[j], target, atol=ax_step / 2):
                    entry[f"{name}_e{k}"] = (float(m[j]), float(se[j]))
        per_scale[str(n)] = entry
    top = scales[-1]
    nu_t, nu_se_t, mu_t, mu_se_t, P_t = tables[top]
    prov = {"scales": scales, "samples": samples, "completed": len(rows), "h": h,
            "seed": seed, "failures": len(st.failures)}
    model = EffectiveModel(d, p_axis, q_axis, nu_t, nu_se_t, mu_t, mu_se_t, P_t,
                           spec.Lambda, prov, per_scale)
    model.scale_tables = tables
    return (model, st) if return_stats else model


# ---------------------------------------------------------------------------
# duality


@dataclass
class DualityResiduals:
    """``Lbar(p) - max_q (p.q + mubar(q))`` and ``mubar(q) + max_p (p.q - Lbar(p))``."""

    primal: np.ndarray
    dual: np.ndarray
    primal_boundary: np.ndarray
    dual_boundary: np.ndarray
    budget: np.ndarray
    maximizers: np.ndarray

    def within_budget(self, interior_only: bool = True) -> bool:
        ok = np.abs(self.primal) <= self.budget
        if interior_only:
            ok = ok | self.primal_boundary
        return bool(np.all(ok))


def dual_check(model: EffectiveModel, warn: bool = True) -> DualityResiduals:
    d = model.d
    P = model.p_points
    Q = model.q_points
    L = model.Lbar_table.ravel()
    M = model.mu_table.ravel()
    S = P @ Q.T
    vals = S + M[None, :]
    jq = np.argmax(vals, axis=1)
    primal = L - vals[np.arange(len(P)), jq]
    qmax = Q[jq]
    qb = np.any(np.isclose(np.abs(qmax), model.q_axis[-1]), axis=1)
    vals2 = S - L[:, None]
    jp = np.argmax(vals2, axis=0)
    dual = M + vals2[jp, np.arange(len(Q))]
    pb = np.any(np.isclose(np.abs(P[jp]), model.p_axis[-1]), axis=1)
    if warn and np.any(qb):
        warnings.warn(f"{int(qb.sum())} slopes have their maximizing tilt on the lattice "
                      "boundary; enlarge the tilt lattice", RangeWarning, stacklevel=2)
    se = model.Lbar_se.ravel() + model.mu_se.ravel()[jq]
    budget = model.Lambda * model.dq**2 / 4 + 3 * se
    shp_p = model.Lbar_table.shape
    shp_q = model.mu_table.shape
    return DualityResiduals(primal.reshape(shp_p), dual.reshape(shp_q), qb.reshape(shp_p),
                            pb.reshape(shp_q), budget.reshape(shp_p), qmax.reshape(shp_p + (d,)))


def second_differences(model: EffectiveModel) -> list:
    """Axis second differences of the ``Lbar`` table divided by ``dp**2``."""
    out = []
    for k in range(model.d):
        T = np.moveaxis(model.Lbar_table, k, 0)
        out.append(np.moveaxis((T[2:] - 2 * T[1:-1] + T[:-2]) / model.dp**2, 0, k))
    return out


# ---------------------------------------------------------------------------
# rates


@dataclass
class RateFit:
    scales: np.ndarray
    values: np.ndarray
    alpha: float
    ci: tuple
    residual: float
    intercept: float

    @property
    def ci_excludes_zero(self) -> bool:
        return self.ci[0] > 0 or self.ci[1] < 0


def fit_rate(series, confidence: float = 0.95) -> RateFit:
    """Fit ``quantity ~ C * scale**(-alpha)`` by least squares in log-log.

    ``series`` is a sequence of ``(scale, quantity)`` pairs with scale
    ``3**n`` or ``1/epsilon``.  The interval uses the t distribution with
    ``len(series) - 2`` degrees of freedom.
    """
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 3:
        raise ValueError("fit_rate needs at least three (scale, quantity) points")
    s, v = arr[:, 0], arr[:, 1]
    if np.any(v <= 0) or np.any(s <= 0):
        raise ValueError("scales and quantities must be positive")
    x, y = np.log(s), np.log(v)
    res = stats.linregress(x, y)
    alpha = -res.slope
    fitted = res.intercept + res.slope * x
    resid = float(np.sqrt(np.mean((y - fitted) ** 2)))
    if np.allclose(y, fitted, rtol=0, atol=1e-12):
        alpha = -float(np.polyfit(x, y, 1)[0])
        ci = (alpha, alpha)
        resid = 0.0
    else:
        t = stats.t.ppf(0.5 + confidence / 2, len(s) - 2)
        ci = (alpha - t * res.stderr, alpha + t * res.stderr)
    return RateFit(s, v, float(alpha), (float(ci[0]), float(ci[1])), resid, float(res.intercept))


# ---------------------------------------------------------------------------
# variance of the mean slope on trimmed cubes


def variance_member(params: dict, seed: int, index: int) -> dict:
    """``P(Q_n°, q)`` for each n and ``mu(Q_n°, q)`` for each n and n+1."""
    spec = LagrangianSpec.from_dict(params["spec"])
    d = spec.dimension
    ns = sorted(int(n) for n in params["scales"])
    needed = sorted(set(ns) | {n + 1 for n in ns})
    h = float(params["h"])
    q = np.asarray(params["q"], dtype=float)
    field = field_for(params, seed, Cube(needed[-1], (0,) * d))
    out = {}
    for n in needed:
        cube = Cube(n, (0,) * d, True)
        if spec.kappa == 0:
            F = quadratic_forms(field, cube, h, want="mu")
            P, m = F.slope(q), F.mu(q)
        else:
            r = mu(field, cube, q, h)
            P, m = r.slope, r.value
        out[f"mu_{n}"] = m
        for k in range(d):
            out[f"P{k}_{n}"] = P[k]
    return out


@dataclass
class VarianceDecayTable:
    scales: list
    variance: np.ndarray
    mu_mean: np.ndarray
    mu_next_mean: np.ndarray
    bound: np.ndarray
    C: float
    stats: object = None

    @property
    def decreasing(self) -> bool:
        return bool(np.all(np.diff(self.variance) < 0))

    @property
    def bounded(self) -> bool:
        return bool(np.all(self.variance <= self.bound * (1 + 1e-12)))


def variance_decay(spec: LagrangianSpec, q, scales, N: int, h: float, seed: int,
                   workers: int = 1) -> VarianceDecayTable:
    """Variance of the mean slope on trimmed cubes next to its energy bound.

    The bound at scale n is ``C * (E mu(Q_{n+1}°) - E mu(Q_n°) + (K0+|q|)^2 3^-n)``
    with ``C`` chosen so that it is attained at the smallest scale.
    """
    if N < 10:
        raise ValueError("variance decay needs at least ten samples")
    q = np.asarray(q, dtype=float)
    scales = sorted(int(n) for n in scales)
    params = {"spec": spec.to_dict(), "scales": scales, "h": h, "q": q.tolist()}
    st = run_ensemble(EnsembleTask("variance", params, N, seed, workers))
    d = spec.dimension
    K = (spec.K0 + np.linalg.norm(q)) ** 2
    var, m0, m1, base = [], [], [], []
    for n in scales:
        P = np.column_stack([st.column(f"P{k}_{n}") for k in range(d)])
        var.append(float(np.trace(np.atleast_2d(np.cov(P, rowvar=False)))))
        m0.append(st.mean[f"mu_{n}"])
        m1.append(st.mean[f"mu_{n + 1}"])
        base.append(m1[-1] - m0[-1] + K * 3.0**-n)
    var = np.array(var)
    base = np.array(base)
    C = var[0] / base[0] if base[0] > 0 else 0.0
    return VarianceDecayTable(scales, var, np.array(m0), np.array(m1), C * base, C, st)


def log_mgf(samples, s: float) -> float:
    """Empirical ``log E exp(s (X - mean X))``."""
    x = np.asarray(samples, dtype=float)
    return float(logsumexp(s * (x - x.mean())) - np.log(x.size))


# ---------------------------------------------------------------------------
# error functional across scales


def error_member(params: dict, seed: int, index: int) -> dict:
    """Error functional on ``Q_n(0)`` for each scale of one realization."""
    spec = LagrangianSpec.from_dict(params["spec"])
    d = spec.dimension
    scales = sorted(int(n) for n in params["scales"])
    h = float(params["h"])
    p = np.asarray(params["p"], dtype=float)
    model = EffectiveModel.from_dict(params["model"]) if "model" in params else \
        EffectiveModel.from_quadratic(np.asarray(params["Abar"], float),
                                      p_radius=params.get("p_radius", 2.0),
                                      q_radius=params.get("q_radius", 16.0))
    field = field_for(params, seed, Cube(scales[-1], (0,) * d))
    out = {}
    for n in scales:
        cube = Cube(n, (0,) * d)
        forms = quadratic_forms(field, cube, h) if spec.kappa == 0 else None
        e = error_functional(field, cube, p, model, h, forms=forms)
        out[f"E_{n}"] = e.value
        out[f"mu_gap_{n}"] = e.mu_gap
        out[f"nu_gap_{n}"] = e.nu_gap
        out[f"flat_{n}"] = e.flatness
    return out


def error_decay(spec: LagrangianSpec, p, scales, N: int, h: float, seed: int,
                model: EffectiveModel | None = None, Abar=None, workers: int = 1):
    """Ensemble means of the error functional per scale and their rate fit."""
    scales = sorted(int(n) for n in scales)
    params = {"spec": spec.to_dict(), "scales": scales, "h": h,
              "p": np.asarray(p, float).tolist()}
    if model is not None:
        params["model"] = model.to_dict()
    else:
        params["Abar"] = np.asarray(Abar, float).tolist()
    st = run_ensemble(EnsembleTask("error", params, N, seed, workers))
    means = np.array([st.mean[f"E_{n}"] for n in scales])
    fit = fit_rate([(3.0**n, m) for n, m in zip(scales, means)]) if len(scales) >= 3 else None
    return means, fit, st


def monotone_within(means, ses, increasing: bool, k: float = 2.0) -> bool:
    """Consecutive means are monotone up to ``k`` combined standard errors."""
    means = np.asarray(means)
    ses = np.asarray(ses)
    for i in range(len(means) - 1):
        slack = k * math.hypot(ses[i], ses[i + 1])
        step = means[i + 1] - means[i]
        if increasing and step < -slack:
            return False
        if not increasing and step > slack:
            return False
    return True

