"""``homog-lab`` command-line entry point.

Every run reads one JSON config, copies it byte for byte into the output
directory as ``config.json``, and writes CSV tables, ``summary.json`` and a
gnuplot script ``plot.gp``.  Exit status: 0 on success, 1 when the config
is malformed or invalid, 2 when the computation fails.

Config keys shared by all commands::

    field    Lagrangian descriptor (dimension, family, phases, probs, kappa, lambda)
    h        grid spacing, 1/h an even integer (default 0.25)
    N        ensemble size
    seed     base seed (overridden by --seed)
    workers  worker processes (overridden by --workers)

Command-specific keys are listed in ``COMMANDS``.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import LagrangianSpec, ValidationError

log = logging.getLogger("homoglab")

# command -> (required keys, optional keys with defaults)
COMMANDS = {
    "estimate-effective": (["scales", "N"], {"p_radius": 2.0, "p_spacing": 0.5,
                                             "q_radius": None, "q_spacing": None}),
    "duality-check": (["scales", "N"], {"p_radius": 2.0, "p_spacing": 0.5,
                                        "q_radius": None, "q_spacing": None}),
    "variance-decay": (["scales", "N", "q"], {}),
    "dirichlet-error": (["g", "levels", "N"], {"Abar": None, "effective": None}),
    "regularity": (["R_list", "N"], {"p": None, "C_Y": 1.4, "threshold": 2.0}),
    "patching-check": (["n_list", "N", "q"], {"Pbar_samples": None, "Pbar": None}),
    "cell": (["n", "kind", "vector", "N"], {"trimmed": False}),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    spec: LagrangianSpec
    params: dict
    N: int
    seed: int
    h: float
    workers: int
    out: Path
    raw: bytes


def _check_type(key, value, kind):
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "list": lambda v: isinstance(v, list),
        "dict": lambda v: isinstance(v, dict),
    }[kind](value)
    if not ok:
        raise ConfigError(f"config key {key!r} must be a {kind}")


def parse_config(command: str, path: Path, seed=None, workers=None, out=None) -> RunConfig:
    raw = path.read_bytes()
    try:
        obj = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 ({exc.reason})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    required, optional = COMMANDS[command]
    missing = [k for k in ["field"] + required if k not in obj]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    _check_type("field", obj["field"], "dict")
    _check_type("N", obj["N"], "int")
    if obj["N"] < 1:
        raise ConfigError("N must be positive")
    spec = LagrangianSpec.from_dict(obj["field"])
    params = {k: obj.get(k, v) for k, v in optional.items()}
    params.update({k: obj[k] for k in required})
    for key in ("scales", "levels", "R_list", "n_list", "q", "vector"):
        if key in params:
            _check_type(key, params[key], "list")
    for key in ("q", "vector"):
        if key in params and len(params[key]) != spec.dimension:
            raise ConfigError(f"{key!r} must have {spec.dimension} components")
    h = obj.get("h", 0.25)
    _check_type("h", h, "number")
    inv = 1 / h if h > 0 else 0
    if h <= 0 or abs(inv - round(inv)) > 1e-9 or round(inv) % 2:
        raise ConfigError("h must be the reciprocal of an even integer")
    s = obj.get("seed", 0) if seed is None else seed
    w = obj.get("workers", 1) if workers is None else workers
    _check_type("seed", s, "int")
    _check_type("workers", w, "int")
    if w < 1:
        raise ConfigError("workers must be positive")
    out = Path(out if out is not None else obj.get("out", "homog-lab-out"))
    return RunConfig(command, spec, params, int(obj["N"]), int(s), float(h), int(w), out, raw)


# ---------------------------------------------------------------------------
# commands; each returns (summary dict, {csv name: text}, gnuplot text)


def _lattice_axes(cfg: RunConfig):
    from .effective import lattice_axis
    p = cfg.params
    q_radius = p["q_radius"] if p["q_radius"] is not None else \
        2 * cfg.spec.Lambda * p["p_radius"]
    q_spacing = p["q_spacing"] if p["q_spacing"] is not None else p["p_spacing"]
    return lattice_axis(p["p_radius"], p["p_spacing"]), lattice_axis(q_radius, q_spacing)


def _estimate(cfg: RunConfig):
    from .effective import estimate_effective
    p_axis, q_axis = _lattice_axes(cfg)
    return estimate_effective(cfg.spec, p_axis, q_axis, cfg.params["scales"], cfg.N, cfg.h,
                              cfg.seed, cfg.workers, return_stats=True)


def cmd_estimate_effective(cfg: RunConfig):
    model, st = _estimate(cfg)
    d = model.d
    lines = [",".join([f"p{k}" for k in range(d)] + ["Lbar", "stderr"])]
    for pt, v, se in zip(model.p_points, model.Lbar_table.ravel(), model.Lbar_se.ravel()):
        lines.append(",".join(repr(float(x)) for x in list(pt) + [v, se]))
    tables = {"lbar.csv": "\n".join(lines) + "\n", "scales.csv": model.scale_csv(),
              "members.csv": st.to_csv()}
    summary = {"quadratic_fit": model.quadratic_fit().tolist(), "provenance": model.provenance,
               "model": model.to_dict()}
    plot = ("set datafile separator ','\nset key autotitle columnhead\n"
            "splot 'lbar.csv' using 1:2:3 with points\n" if d == 2 else
            "set datafile separator ','\nplot 'lbar.csv' using 1:2 with linespoints\n")
    return summary, tables, plot


def cmd_duality_check(cfg: RunConfig):
    from .effective import dual_check
    model, st = _estimate(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = dual_check(model)
    d = model.d
    head = [f"p{k}" for k in range(d)] + ["Lbar", "residual", "budget", "boundary"] + \
        [f"q_star{k}" for k in range(d)]
    lines = [",".join(head)]
    for i, pt in enumerate(model.p_points):
        idx = np.unravel_index(i, model.Lbar_table.shape)
        row = [*pt, model.Lbar_table[idx], res.primal[idx], res.budget[idx]]
        lines.append(",".join(repr(float(x)) for x in row) + f",{int(res.primal_boundary[idx])},"
                     + ",".join(repr(float(x)) for x in res.maximizers[idx]))
    summary = {"max_abs_residual": float(np.max(np.abs(res.primal))),
               "max_abs_dual_residual": float(np.max(np.abs(res.dual))),
               "within_budget": res.within_budget(),
               "boundary_maximizers": int(res.primal_boundary.sum()),
               "warnings": [str(w.message) for w in caught]}
    plot = ("set datafile separator ','\nset key autotitle columnhead\n"
            f"plot 'residuals.csv' using 0:{d + 2} with points\n")
    return summary, {"residuals.csv": "\n".join(lines) + "\n", "members.csv": st.to_csv()}, plot


def cmd_variance_decay(cfg: RunConfig):
    from .effective import variance_decay
    t = variance_decay(cfg.spec, cfg.params["q"], cfg.params["scales"], cfg.N, cfg.h, cfg.seed,
                       cfg.workers)
    lines = ["n,variance,bound,mu_mean,mu_next_mean"]
    for row in zip(t.scales, t.variance, t.bound, t.mu_mean, t.mu_next_mean):
        lines.append(f"{row[0]}," + ",".join(repr(float(x)) for x in row[1:]))
    summary = {"C": t.C, "decreasing": t.decreasing, "bounded": t.bounded,
               "variance": t.variance.tolist()}
    plot = ("set datafile separator ','\nset key autotitle columnhead\nset logscale y\n"
            "plot 'variance.csv' using 1:2 with linespoints, '' using 1:3 with lines\n")
    return summary, {"variance.csv": "\n".join(lines) + "\n", "members.csv": t.stats.to_csv()}, plot


def _effective_for_dirichlet(cfg: RunConfig):
    from .effective import estimate_effective, lattice_axis
    if cfg.params["Abar"] is not None:
        return np.asarray(cfg.params["Abar"], float), None
    eff = cfg.params["effective"] or {}
    scales = eff.get("scales", [max(cfg.params["levels"])])
    samples = int(eff.get("N", cfg.N))
    axis = lattice_axis(float(eff.get("p_radius", 1.0)), float(eff.get("p_spacing", 0.5)))
    model = estimate_effective(cfg.spec, axis, axis, scales, samples, cfg.h,
                               int(eff.get("seed", cfg.seed + 1)), cfg.workers)
    return model.quadratic_fit(), model


def cmd_dirichlet_error(cfg: RunConfig):
    from .homogenize import BoundaryData, DirichletExperiment, dirichlet_error
    g = cfg.params["g"]
    if not isinstance(g, dict) or "kind" not in g:
        raise ConfigError("'g' must be an object with a 'kind'")
    if g["kind"] not in ("affine", "quadratic", "sinusoidal"):
        raise ConfigError(f"unknown boundary datum {g['kind']!r}")
    Abar, model = _effective_for_dirichlet(cfg)
    # the fitted quadratic form covers every slope; tabulated models do not
    radius = np.inf if model is None or cfg.spec.kappa == 0 else float(model.p_axis[-1])
    exp = DirichletExperiment(cfg.spec, BoundaryData(g["kind"], g.get("params", {})),
                              cfg.params["levels"], cfg.N, Abar, radius)
    t = dirichlet_error(exp, cfg.h, cfg.seed, cfg.workers)
    lines = ["epsilon,l2_mean,l2_stderr,linf_mean,energy_gap_mean"]
    for row in zip(t.eps, t.l2_mean, t.l2_se, t.linf_mean, t.energy_gap_mean):
        lines.append(",".join(repr(float(x)) for x in row))
    summary = {"Abar": np.asarray(Abar).tolist(), "M": exp.M,
               "alpha_hat": None if t.fit is None else t.fit.alpha,
               "alpha_ci": None if t.fit is None else list(t.fit.ci),
               "l2_mean": t.l2_mean.tolist(), "epsilon": t.eps.tolist()}
    tables = {"dirichlet_errors.csv": t.csv(), "dirichlet_levels.csv": "\n".join(lines) + "\n",
              "dirichlet_timing.csv": t.timing_csv(), "members.csv": t.stats.to_csv()}
    plot = ("set datafile separator ','\nset key autotitle columnhead\nset logscale xy\n"
            "plot 'dirichlet_levels.csv' using 1:2:3 with yerrorlines, "
            "'' using 1:4 with linespoints\n")
    return summary, tables, plot


def cmd_regularity(cfg: RunConfig):
    from .regularity import quenched_lipschitz_experiment
    tabs = quenched_lipschitz_experiment(cfg.spec, cfg.params["R_list"], cfg.N, cfg.h, cfg.seed,
                                         cfg.params["p"], float(cfg.params["C_Y"]), cfg.workers)
    tables, summary = {}, {"C_Y": cfg.params["C_Y"], "threshold": cfg.params["threshold"],
                           "per_R": []}
    plot = ["set datafile separator ','", "set key autotitle columnhead", "set logscale x"]
    for t in tabs:
        name = f"regularity_R{t.R:g}.csv"
        tables[name] = t.csv()
        tail = ["y,exceedance"] + [f"{y!r},{e!r}" for y, e in
                                   zip(t.tail.thresholds, t.tail.exceedance)]
        tables[f"tail_R{t.R:g}.csv"] = "\n".join(tail) + "\n"
        finite = t.Y[np.isfinite(t.Y)]
        summary["per_R"].append({
            "R": t.R, "median_Y": float(np.median(t.Y)),
            "unresolved": int(np.sum(~np.isfinite(t.Y))),
            "max_Y_finite": float(finite.max()) if finite.size else None,
            "fraction_below_threshold": t.fraction_below(float(cfg.params["threshold"])),
            "tail_nonincreasing": bool(np.all(np.diff(t.tail.exceedance) <= 0))})
        plot.append(f"plot 'tail_R{t.R:g}.csv' using 1:2 with steps")
    return summary, tables, "\n".join(plot) + "\n"


def cmd_patching_check(cfg: RunConfig):
    from .harness import EnsembleTask, member_seed, run_ensemble
    d = cfg.spec.dimension
    q = [float(v) for v in cfg.params["q"]]
    spec_d = cfg.spec.to_dict()
    tables, rows = {}, []
    for n in sorted(int(v) for v in cfg.params["n_list"]):
        if cfg.params["Pbar"] is not None:
            Pbar = [float(v) for v in cfg.params["Pbar"][str(n)]]
        else:
            m = int(cfg.params["Pbar_samples"] or cfg.N)
            st = run_ensemble(EnsembleTask("cell", {"spec": spec_d, "n": n, "trimmed": True,
                                                    "kind": "mu", "vector": q, "h": cfg.h},
                                           m, member_seed(cfg.seed, 1 << 40), cfg.workers))
            Pbar = [st.mean[f"P{k}"] for k in range(d)]
        st = run_ensemble(EnsembleTask("patching", {"spec": spec_d, "n": n, "q": q, "Pbar": Pbar,
                                                    "h": cfg.h}, cfg.N, cfg.seed, cfg.workers))
        tables[f"patching_n{n}.csv"] = st.to_csv()
        rows.append({"n": n, "Pbar": Pbar, "gap": st.mean["candidate"] - float(np.dot(q, Pbar))
                     - st.mean["mu"], "min_slack": st.min["slack"],
                     "max_residual": st.max["residual"]})
    lines = ["n,gap,min_slack"] + [f"{r['n']},{r['gap']!r},{r['min_slack']!r}" for r in rows]
    tables["patching.csv"] = "\n".join(lines) + "\n"
    summary = {"per_n": rows,
               "admissible": all(r["min_slack"] >= -1e-8 for r in rows),
               "gap_decreasing": bool(np.all(np.diff([r["gap"] for r in rows]) < 0))}
    plot = ("set datafile separator ','\nset key autotitle columnhead\n"
            "plot 'patching.csv' using 1:2 with linespoints\n")
    return summary, tables, plot


def cmd_cell(cfg: RunConfig):
    from .harness import EnsembleTask, run_ensemble
    kind = cfg.params["kind"]
    if kind not in ("mu", "nu"):
        raise ConfigError("'kind' must be 'mu' or 'nu'")
    params = {"spec": cfg.spec.to_dict(), "n": int(cfg.params["n"]),
              "trimmed": bool(cfg.params["trimmed"]), "kind": kind,
              "vector": [float(v) for v in cfg.params["vector"]], "h": cfg.h}
    st = run_ensemble(EnsembleTask("cell", params, cfg.N, cfg.seed, cfg.workers))
    summary = {"mean": st.mean, "stderr": st.stderr, "failures": len(st.failures)}
    plot = ("set datafile separator ','\nset key autotitle columnhead\n"
            "plot 'cell.csv' using 1:4 with points\n")
    return summary, {"cell.csv": st.to_csv()}, plot


HANDLERS = {
    "estimate-effective": cmd_estimate_effective,
    "duality-check": cmd_duality_check,
    "variance-decay": cmd_variance_decay,
    "dirichlet-error": cmd_dirichlet_error,
    "regularity": cmd_regularity,
    "patching-check": cmd_patching_check,
    "cell": cmd_cell,
}


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


def run(cfg: RunConfig, config_path: Path) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(config_path, cfg.out / "config.json")
    t0 = time.perf_counter()
    summary, tables, plot = HANDLERS[cfg.command](cfg)
    for name, text in tables.items():
        (cfg.out / name).write_text(text)
    (cfg.out / "plot.gp").write_text(plot)
    summary = {"command": cfg.command, "seed": cfg.seed, "N": cfg.N, "h": cfg.h,
               "field": cfg.spec.to_dict(), "outputs": sorted(tables),
               "elapsed_seconds": time.perf_counter() - t0, **summary}
    (cfg.out / "summary.json").write_text(json.dumps(summary, indent=2, default=_jsonable) + "\n")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="homog-lab", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, type=Path, help="JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
    ap.add_argument("--workers", type=int, default=None, help="worker processes")
    ap.add_argument("--out", type=Path, default=None, help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.command, args.config, args.seed, args.workers, args.out)
    except (ConfigError, ValidationError, OSError) as exc:
        print(f"homog-lab: invalid config: {exc}", file=sys.stderr)
        return 1
    try:
        run(cfg, args.config)
    except (ConfigError, ValidationError) as exc:
        print(f"homog-lab: invalid config: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any failure of the computation itself
        log.debug("execution failed", exc_info=True)
        print(f"homog-lab: execution failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
