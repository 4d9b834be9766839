"""Reproducible Monte Carlo ensembles.

A task names a member function (``kind``) and a JSON-compatible parameter
blob.  Member ``i`` runs with seed ``member_seed(base, i)`` and returns an
ordered dict of scalar outputs.  Results are collected in member order and
aggregated with exactly rounded sums, so every output byte is independent
of the number of worker processes and of completion order.
"""

from __future__ import annotations

import csv
import importlib
import io
import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import MASK64, mix64

# kind -> "module:function"; the function takes (params, seed, index) and
# returns a dict of floats
MEMBER_FUNCTIONS = {
    "cell": "homoglab.cell:cell_member",
    "monotonicity": "homoglab.cell:monotonicity_member",
    "effective": "homoglab.effective:effective_member",
    "variance": "homoglab.effective:variance_member",
    "error": "homoglab.effective:error_member",
    "dirichlet": "homoglab.homogenize:dirichlet_member",
    "patching": "homoglab.homogenize:patching_member",
    "regularity": "homoglab.regularity:regularity_member",
}

FAILURE_QUORUM = 0.10

# member outputs with this prefix are wall-clock measurements; they are kept
# in the rows but never enter the CSV or the statistics
TIMING_PREFIX = "runtime_"


class EnsembleError(RuntimeError):
    def __init__(self, msg, stats=None):
        super().__init__(msg)
        self.stats = stats


def member_seed(base: int, index: int) -> int:
    """Seed of ensemble member ``index``; a pure function of both arguments."""
    h = mix64(mix64(np.uint64(int(base) & MASK64)) ^ np.uint64(int(index) & MASK64))
    return int(h[0])


def resolve(kind: str):
    target = MEMBER_FUNCTIONS.get(kind, kind)
    if ":" not in target:
        raise ValueError(f"unknown task kind {kind!r}")
    mod, name = target.split(":")
    return getattr(importlib.import_module(mod), name)


@dataclass
class EnsembleTask:
    kind: str
    params: dict
    N: int
    seed: int
    workers: int = 1

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("ensemble size must be positive")
        if self.workers < 1:
            raise ValueError("worker count must be positive")


@dataclass
class EnsembleStats:
    """Per-member rows (ordered by member index) and their column statistics."""

    task: EnsembleTask
    columns: list
    rows: list
    failures: list
    mean: dict = dc_field(default_factory=dict)
    stderr: dict = dc_field(default_factory=dict)
    min: dict = dc_field(default_factory=dict)
    max: dict = dc_field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def ok_rows(self) -> list:
        return [r for r in self.rows if r["status"] == "ok"]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.ok_rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["member", "seed", "status"] + self.columns)
        for r in self.rows:
            w.writerow([r["member"], r["seed"], r["status"]]
                       + [_fmt(r.get(c, math.nan)) for c in self.columns])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "task": {"kind": self.task.kind, "params": self.task.params,
                     "N": self.task.N, "seed": self.task.seed},
            "completed": len(self.ok_rows),
            "failures": [{"member": i, "error": m} for i, m in self.failures],
            "mean": self.mean, "stderr": self.stderr,
            "min": self.min, "max": self.max,
            "elapsed_seconds": self.elapsed,
        }

    def write(self, csv_path, json_path=None):
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv())
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.summary(), fh, indent=2, default=_jsonable)


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


def _run_member(kind, params, base, index):
    seed = member_seed(base, index)
    try:
        out = resolve(kind)(params, seed, index)
        row = {"member": index, "seed": seed, "status": "ok"}
        row.update({k: float(v) for k, v in out.items()})
        return row
    except Exception as exc:  # recorded per member, judged by the quorum
        msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return {"member": index, "seed": seed, "status": "failed", "error": msg,
                "trace": traceback.format_exc()}


def _init_worker():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def _exact_mean(values) -> float:
    m = math.fsum(values) / len(values)
    # one refinement step; makes the mean of identical values exact
    return m + math.fsum(v - m for v in values) / len(values)


def aggregate(task: EnsembleTask, rows: list, elapsed: float = 0.0) -> EnsembleStats:
    rows = sorted(rows, key=lambda r: r["member"])
    ok = [r for r in rows if r["status"] == "ok"]
    columns = [k for k in ok[0] if k not in ("member", "seed", "status")
               and not k.startswith(TIMING_PREFIX)] if ok else []
    failures = [(r["member"], r["error"]) for r in rows if r["status"] != "ok"]
    stats = EnsembleStats(task, columns, rows, failures, elapsed=elapsed)
    for c in columns:
        vals = [r[c] for r in ok]
        m = _exact_mean(vals)
        if len(vals) > 1:
            var = math.fsum((v - m) ** 2 for v in vals) / (len(vals) - 1)
            se = math.sqrt(var / len(vals))
        else:
            se = 0.0
        stats.mean[c] = m
        stats.stderr[c] = se
        stats.min[c] = min(vals)
        stats.max[c] = max(vals)
    return stats


def run_ensemble(task: EnsembleTask) -> EnsembleStats:
    """Run all members and aggregate; fails if more than 10% of members fail."""
    resolve(task.kind)
    t0 = time.perf_counter()
    idx = list(range(task.N))
    if task.workers == 1:
        rows = [_run_member(task.kind, task.params, task.seed, i) for i in idx]
    else:
        with ProcessPoolExecutor(max_workers=task.workers, initializer=_init_worker) as ex:
            rows = list(ex.map(_run_member, [task.kind] * task.N, [task.params] * task.N,
                               [task.seed] * task.N, idx))
    stats = aggregate(task, rows, time.perf_counter() - t0)
    if len(stats.failures) > FAILURE_QUORUM * task.N:
        first = stats.failures[0][1]
        raise EnsembleError(f"{len(stats.failures)} of {task.N} members failed; first: {first}",
                            stats)
    return stats


@dataclass
class TailTable:
    thresholds: np.ndarray
    exceedance: np.ndarray
    log_exceedance: np.ndarray
    n_samples: int


def tail_diagnostic(samples, thresholds) -> TailTable:
    """Empirical ``P[X > t]`` for each threshold ``t``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    if x.size < 10:
        raise ValueError("tail diagnostic needs at least 10 samples")
    t = np.asarray(thresholds, dtype=float).ravel()
    exc = np.array([np.count_nonzero(x > ti) / x.size for ti in t])
    with np.errstate(divide="ignore"):
        logs = np.log(exc)
    return TailTable(t, exc, logs, x.size)
