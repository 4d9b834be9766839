"""Random cellwise Lagrangians and their evaluation.

A realization assigns to every unit cell ``z + [0,1)^d`` a phase index and
a Bernoulli mark, both computed by a counter-based hash of ``(seed, z)``.
The energy density on a cell with phase matrix ``A`` and mark ``c`` is::

    L(p) = p.A.p + kappa * c * (sqrt(1 + |p|^2) - 1)

with ``kappa = 0`` for the purely quadratic family.

Cell hash (bit exact, all arithmetic modulo 2**64)::

    mix64(x):  x += 0x9E3779B97F4A7C15
               x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
               x = (x ^ (x >> 27)) * 0x94D049BB133111EB
               return x ^ (x >> 31)

    key(seed, stream, z) = fold(mix64(mix64(seed) ^ stream), z)
        where fold applies h <- mix64(h ^ (z_k mod 2**64)) for k = 1..d
    uniform(seed, stream, z) = (key >> 11) * 2**-53

Stream 0 selects the phase (first k with ``u < probs[0] + ... + probs[k]``),
stream 1 the perturbation mark (``c = 1`` iff ``u < 1/2``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import Box

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

FAMILIES = ("quadratic", "quadratic-plus-perturbation")
STRUCTURES = ("iid", "laminate", "periodic-laminate")

STREAM_PHASE = 0
STREAM_MARK = 1


class ValidationError(ValueError):
    """Invalid Lagrangian specification."""


class DomainError(ValueError):
    """Evaluation point outside the realization's region."""


def mix64(x) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    x = np.array(x, dtype=np.uint64, copy=True, ndmin=1)
    with np.errstate(over="ignore"):
        x += _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        x = x ^ (x >> np.uint64(31))
    return x


def cell_key(seed: int, stream: int, z) -> np.ndarray:
    """64-bit hash of ``(seed, stream, z)``; ``z`` has shape ``(..., k)``."""
    z = np.asarray(z, dtype=np.int64)
    shape = z.shape[:-1]
    s = np.uint64(int(seed) & MASK64)
    h = mix64(mix64(s) ^ np.uint64(int(stream) & MASK64))
    h = np.broadcast_to(h, shape if shape else (1,)).copy()
    zu = z.astype(np.uint64)
    for k in range(z.shape[-1]):
        h = mix64(h ^ zu[..., k].reshape(h.shape))
    return h.reshape(shape)


def cell_uniform(seed: int, stream: int, z) -> np.ndarray:
    """Uniform variate in [0, 1) attached to cell ``z``."""
    return (cell_key(seed, stream, z) >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True)
class LagrangianSpec:
    """Parameters of a random cellwise Lagrangian.

    ``structure`` is ``"iid"`` for the i.i.d. unit-cell model.  The two
    laminate structures make the phase depend on ``z_1`` only (independent
    layers, or a periodic stack); they are kept for oracle checks against
    closed-form effective coefficients.
    """

    dimension: int
    family: str
    phases: tuple
    probs: tuple
    kappa: float = 0.0
    Lambda: float = 1.0
    structure: str = "iid"
    K0: float = dc_field(init=False)

    def __post_init__(self):
        d = self.dimension
        if d not in (2, 3):
            raise ValidationError("dimension must be 2 or 3")
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")
        if self.structure not in STRUCTURES:
            raise ValidationError(f"unknown structure {self.structure!r}")
        mats = []
        for A in self.phases:
            A = np.asarray(A, dtype=float)
            if A.ndim == 0:
                A = float(A) * np.eye(d)
            elif A.ndim == 1 and A.size == d * d:
                A = A.reshape(d, d)
            if A.shape != (d, d):
                raise ValidationError(f"phase matrix has shape {A.shape}, expected {(d, d)}")
            if not np.allclose(A, A.T, rtol=0, atol=1e-12):
                raise ValidationError("phase matrices must be symmetric")
            mats.append(0.5 * (A + A.T))
        if not mats:
            raise ValidationError("at least one phase is required")
        probs = np.asarray(self.probs, dtype=float)
        if probs.shape != (len(mats),) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
            raise ValidationError("probs must be nonnegative, one per phase, summing to 1")
        kappa = float(self.kappa)
        if kappa < 0:
            raise ValidationError("kappa must be nonnegative")
        if self.family == "quadratic":
            kappa = 0.0
        Lam = float(self.Lambda)
        for A in mats:
            ev = np.linalg.eigvalsh(A)
            if ev[0] < 1 - 1e-12:
                raise ValidationError(f"phase eigenvalue {ev[0]:g} below 1")
            if ev[-1] + kappa / 2 > Lam + 1e-12:
                raise ValidationError(
                    f"phase eigenvalue {ev[-1]:g} plus kappa/2 exceeds Lambda={Lam:g}")
        object.__setattr__(self, "phases", tuple(mats))
        object.__setattr__(self, "probs", tuple(float(p) for p in probs))
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "Lambda", Lam)
        object.__setattr__(self, "K0", growth_constant(mats, kappa, Lam))

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def phase_array(self) -> np.ndarray:
        return np.stack(self.phases)

    @property
    def cumprobs(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c

    @classmethod
    def from_dict(cls, obj: dict) -> "LagrangianSpec":
        try:
            d = int(obj["dimension"])
            return cls(
                dimension=d,
                family=obj["family"],
                phases=tuple(obj["phases"]),
                probs=tuple(obj["probs"]),
                kappa=float(obj.get("kappa", 0.0)),
                Lambda=float(obj["lambda"]) if "lambda" in obj else _minimal_lambda(obj, d),
                structure=obj.get("structure", "iid"),
            )
        except KeyError as exc:
            raise ValidationError(f"missing key {exc.args[0]!r} in field spec") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed field spec: {exc}") from None

    def to_dict(self) -> dict:
        out = {
            "dimension": self.dimension,
            "family": self.family,
            "phases": [A.ravel().tolist() for A in self.phases],
            "probs": list(self.probs),
            "kappa": self.kappa,
            "lambda": self.Lambda,
        }
        if self.structure != "iid":
            out["structure"] = self.structure
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LagrangianSpec":
        return cls.from_dict(json.loads(text))

    def scaled(self, factor: float) -> "LagrangianSpec":
        """Spec with every phase multiplied by ``factor`` (Lambda scaled too)."""
        return LagrangianSpec(self.dimension, self.family,
                              tuple(factor * A for A in self.phases), self.probs,
                              self.kappa, self.Lambda * factor, self.structure)


def _minimal_lambda(obj: dict, d: int) -> float:
    kappa = float(obj.get("kappa", 0.0)) if obj.get("family") != "quadratic" else 0.0
    top = 1.0
    for A in obj["phases"]:
        A = np.asarray(A, dtype=float)
        A = float(A) * np.eye(d) if A.ndim == 0 else A.reshape(d, d)
        top = max(top, float(np.linalg.eigvalsh(0.5 * (A + A.T))[-1]))
    return top + kappa / 2


def growth_constant(phases, kappa: float, Lam: float) -> float:
    """Smallest ``K0 >= 1`` for which the quadratic growth bounds hold.

    Lower bound ``|p|^2 - K0(1+|p|) <= L`` is automatic since every phase
    is at least the identity and the perturbation is nonnegative.  The
    upper bound needs ``sup_t [a_max t^2 + kappa(sqrt(1+t^2)-1) - Lam t^2]/(1+t)``.
    """
    a_max = max(float(np.linalg.eigvalsh(A)[-1]) for A in phases)

    def excess(t):
        return (a_max - Lam) * t * t + kappa * (np.sqrt(1 + t * t) - 1)

    ts = np.concatenate([np.linspace(0, 10, 2001), np.geomspace(10, 1e6, 400)])
    vals = excess(ts) / (1 + ts)
    i = int(np.argmax(vals))
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, len(ts) - 1)]
    best = vals[i]
    if hi > lo:
        res = minimize_scalar(lambda t: -excess(t) / (1 + t), bounds=(lo, hi), method="bounded")
        best = max(best, -res.fun)
    return max(1.0, float(best))


@dataclass(frozen=True)
class FieldRealization:
    """A sampled Lagrangian on a bounded box.  Immutable and cheap to share."""

    spec: LagrangianSpec
    seed: int
    region: Box

    @property
    def dim(self) -> int:
        return self.spec.dimension

    def phase_index(self, z) -> np.ndarray:
        """Phase of cells ``z`` (integer array of shape ``(..., d)``)."""
        z = np.asarray(z, dtype=np.int64)
        st = self.spec.structure
        if st == "iid":
            u = cell_uniform(self.seed, STREAM_PHASE, z)
        elif st == "laminate":
            u = cell_uniform(self.seed, STREAM_PHASE, z[..., :1])
        else:
            k = self.spec.n_phases
            off = int(cell_key(self.seed, STREAM_PHASE, np.zeros((1,), np.int64))) % k
            return ((z[..., 0] + off) % k).astype(np.int64)
        idx = np.searchsorted(self.spec.cumprobs, u, side="right")
        return np.minimum(idx, self.spec.n_phases - 1).astype(np.int64)

    def mark(self, z) -> np.ndarray:
        """Perturbation mark ``c(z)`` in {0, 1}."""
        z = np.asarray(z, dtype=np.int64)
        if self.spec.kappa == 0:
            return np.zeros(z.shape[:-1])
        return (cell_uniform(self.seed, STREAM_MARK, z) < 0.5).astype(float)

    def cell_table(self, z) -> tuple[np.ndarray, np.ndarray]:
        return self.phase_index(z), self.mark(z)

    def _cells_of(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DomainError(f"points must have {self.dim} coordinates")
        if not np.all(self.region.contains(x)):
            raise DomainError("evaluation point outside the field region")
        return np.floor(x).astype(np.int64)

    def coefficients(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Phase matrices and marks at points ``x`` of shape ``(..., d)``."""
        z = self._cells_of(x)
        return self.spec.phase_array[self.phase_index(z)], self.mark(z)


def sample_field(spec: LagrangianSpec, seed: int, region) -> FieldRealization:
    """Realization of ``spec`` on ``region`` keyed by ``seed``.

    ``region`` is a :class:`Box`, a cube (anything with a ``box``), or a pair
    ``(lo, hi)`` of half-integer bounds.
    """
    region = getattr(region, "box", region)
    if not isinstance(region, Box):
        lo, hi = region
        region = Box.from_bounds(lo, hi)
    if region.dim != spec.dimension:
        raise ValidationError("region dimension does not match the Lagrangian dimension")
    return FieldRealization(spec, int(seed) & MASK64, region)


# ---------------------------------------------------------------------------
# pointwise densities on precomputed coefficients (used by the solver)

def density(A: np.ndarray, c: np.ndarray, kappa: float, p: np.ndarray) -> np.ndarray:
    """``L`` for coefficient arrays ``A (...,d,d)``, ``c (...)`` and slopes ``p (...,d)``."""
    val = np.einsum("...i,...ij,...j->...", p, A, p)
    if kappa:
        val = val + kappa * c * (np.sqrt(1 + np.sum(p * p, axis=-1)) - 1)
    return val


def density_grad(A, c, kappa, p):
    g = 2 * np.einsum("...ij,...j->...i", A, p)
    if kappa:
        s = np.sqrt(1 + np.sum(p * p, axis=-1))
        g = g + (kappa * c / s)[..., None] * p
    return g


def density_hess(A, c, kappa, p):
    H = 2 * np.broadcast_to(A, p.shape[:-1] + A.shape[-2:]).copy()
    if kappa:
        d = p.shape[-1]
        s = np.sqrt(1 + np.sum(p * p, axis=-1))
        w = kappa * c / s
        H += w[..., None, None] * (np.eye(d) - p[..., :, None] * p[..., None, :] / (s * s)[..., None, None])
    return H


def evaluate_L(field: FieldRealization, p, x) -> np.ndarray | float:
    """Energy density ``L(p, x)``; arrays broadcast over leading axes."""
    p = np.asarray(p, dtype=float)
    A, c = field.coefficients(x)
    out = density(A, c, field.spec.kappa, np.broadcast_to(p, A.shape[:-1]))
    return float(out) if np.ndim(out) == 0 else out


def evaluate_DpL(field: FieldRealization, p, x) -> np.ndarray:
    """Gradient of ``L(., x)`` at ``p``."""
    p = np.asarray(p, dtype=float)
    A, c = field.coefficients(x)
    return density_grad(A, c, field.spec.kappa, np.broadcast_to(p, A.shape[:-1]))
