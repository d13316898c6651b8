"""Batch front end: ``zvonkin run|validate|list-presets``.

A scenario is one YAML file.  Keys that carry units end in ``_time`` or
``_length`` (model units); everything else is dimensionless.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .coefficients import PRESETS, AssumptionParams, audit_assumptions, make_preset
from .errors import ConfigError, ZvonkinError
from .estimators import (ESTIMATORS, BoundReport, MonteCarloEstimate, doleans_decompose,
                         flow_gradient_moment, holder_time_check, injectivity_gap, khasminskii_check,
                         krylov_check, ladder_stable, lyapunov_moment_check, make_report, summary_lines,
                         strong_feller_modulus, sup_moment_check, two_point_ratio, write_reports_csv)
from .pde_resolvent import KrylovConstants, ResolventConfig, lambda_R
from .simulator import SimConfig, patch_global, shared_noise_bundle, simulate_transformed, two_point, \
    write_paths_csv
from .zvonkin import PipelineSpec, build_pipeline, export_map

log = logging.getLogger("zvonkin_sde")

TEST_FUNCTIONS = ("indicator_ball", "constant", "halfspace", "bump")

_TOP_KEYS = {"name", "seed", "output_dir", "params", "coefficients", "grid", "resolvent", "constants",
             "truncation", "simulation", "estimators"}
_PARAM_KEYS = {"d", "p1", "beta", "beta_tilde", "delta", "varpi", "T_time"}
_GRID_KEYS = {"n", "box_factor"}
_RESOLVENT_KEYS = {"lambda", "solver", "picard_tol", "picard_max_iter", "semigroup_dt_time",
                   "semigroup_t_max_time"}
_SIM_KEYS = {"dt_time", "n_paths", "x0_length", "record_stride", "block_size", "threads", "export_paths",
             "export_every"}
_EST_KEYS = {
    "krylov_check": {"f", "radius_length", "value", "t0_time", "t1_time", "p"},
    "khasminskii_check": {"f", "radius_length", "value", "a", "p"},
    "sup_moment_check": {"p", "C_tilde"},
    "lyapunov_moment_check": {"alpha", "C_tilde"},
    "two_point_moment": {"alpha", "gap_length", "n_paths", "C_tilde"},
    "doleans_decompose": {"alpha", "gap_length", "n_paths", "dt_time", "tolerance"},
    "strong_feller_modulus": {"f", "radius_length", "value", "t_time", "starts_length", "n_paths"},
    "injectivity_gap": {"starts_length", "n_paths"},
    "flow_gradient_moment": {"h_ladder_length", "p", "n_paths", "direction"},
    "holder_time_check": {"p"},
}


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    params: AssumptionParams
    preset: str
    preset_options: dict
    grid_n: int | None
    box_factor: float
    resolvent: dict
    constants: KrylovConstants | None
    R: float | None
    R_ladder: tuple | None
    sim: dict
    estimators: tuple
    output_dir: str


def _require(mapping, key, where):
    if key not in mapping:
        raise ConfigError(f"missing required field {where}{key}", field=f"{where}{key}")
    return mapping[key]


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where.rstrip('.') or 'config'} must be a mapping", field=where.rstrip("."))
    for k in mapping:
        if k not in allowed:
            raise ConfigError(f"unknown field {where}{k}", field=f"{where}{k}")


def _number(value, where, positive=False, integer=False):
    try:
        v = int(value) if integer else float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be a number, got {value!r}", field=where) from None
    if integer and float(value) != v:
        raise ConfigError(f"{where} must be an integer", field=where)
    if positive and not v > 0:
        raise ConfigError(f"{where} must be positive", field=where)
    return v


def parse_config(source) -> Scenario:
    """Parse and validate a scenario from a path, YAML text or a dict."""
    if isinstance(source, dict):
        raw = source
    else:
        path = Path(source)
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: YAML parse error: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    _check_keys(raw, _TOP_KEYS, "")

    pr = _require(raw, "params", "")
    _check_keys(pr, _PARAM_KEYS, "params.")
    d = _number(_require(pr, "d", "params."), "params.d", integer=True)
    try:
        params = AssumptionParams(
            d=d,
            p1=_number(_require(pr, "p1", "params."), "params.p1"),
            beta=_number(_require(pr, "beta", "params."), "params.beta"),
            beta_tilde=_number(_require(pr, "beta_tilde", "params."), "params.beta_tilde"),
            delta=_number(_require(pr, "delta", "params."), "params.delta"),
            varpi=_number(pr.get("varpi", 0.5), "params.varpi"),
            T=_number(_require(pr, "T_time", "params."), "params.T_time"),
        )
    except ZvonkinError as exc:
        raise ConfigError(str(exc), field="params") from None

    co = _require(raw, "coefficients", "")
    _check_keys(co, {"preset", "options"}, "coefficients.")
    preset = _require(co, "preset", "coefficients.")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} in coefficients.preset", field="coefficients.preset")
    options = dict(co.get("options") or {})

    gr = raw.get("grid") or {}
    _check_keys(gr, _GRID_KEYS, "grid.")
    grid_n = _number(gr["n"], "grid.n", positive=True, integer=True) if "n" in gr else None
    box_factor = _number(gr.get("box_factor", 6.0), "grid.box_factor", positive=True)
    if not box_factor > 3:
        raise ConfigError("grid.box_factor must exceed 3 (need 3R < L_box)", field="grid.box_factor")

    rs = raw.get("resolvent") or {}
    _check_keys(rs, _RESOLVENT_KEYS, "resolvent.")
    lam = rs.get("lambda", "lambda_R_H")
    if lam != "lambda_R_H":
        lam = _number(lam, "resolvent.lambda", positive=True)
    resolvent = {
        "lambda": lam,
        "solver": rs.get("solver", "direct-sparse"),
        "picard_tol": _number(rs.get("picard_tol", 1e-8), "resolvent.picard_tol", positive=True),
        "picard_max_iter": _number(rs.get("picard_max_iter", 200), "resolvent.picard_max_iter",
                                   positive=True, integer=True),
    }
    if resolvent["solver"] not in ("direct-sparse", "semigroup-integral"):
        raise ConfigError(f"unknown solver {resolvent['solver']!r}", field="resolvent.solver")

    constants = None
    if raw.get("constants") is not None:
        cs = raw["constants"]
        _check_keys(cs, {"C1", "C2"}, "constants.")
        constants = KrylovConstants(_number(_require(cs, "C1", "constants."), "constants.C1", positive=True),
                                    _number(_require(cs, "C2", "constants."), "constants.C2", positive=True),
                                    "user-supplied")

    tr = _require(raw, "truncation", "")
    _check_keys(tr, {"R_length", "R_ladder_length"}, "truncation.")
    R = R_ladder = None
    if "R_ladder_length" in tr:
        R_ladder = tuple(_number(r, "truncation.R_ladder_length", positive=True) for r in tr["R_ladder_length"])
        if len(R_ladder) < 1 or any(b <= a for a, b in zip(R_ladder, R_ladder[1:])):
            raise ConfigError("truncation.R_ladder_length must be strictly increasing",
                              field="truncation.R_ladder_length")
        if R_ladder[0] < 1:
            raise ConfigError("truncation radii must be >= 1", field="truncation.R_ladder_length")
    else:
        R = _number(_require(tr, "R_length", "truncation."), "truncation.R_length", positive=True)
        if R < 1:
            raise ConfigError("truncation.R_length must be >= 1", field="truncation.R_length")

    sm = _require(raw, "simulation", "")
    _check_keys(sm, _SIM_KEYS, "simulation.")
    x0 = sm.get("x0_length", [0.0] * d)
    x0 = [x0] if not isinstance(x0, (list, tuple)) else list(x0)
    if len(x0) != d:
        raise ConfigError(f"simulation.x0_length must have {d} entries", field="simulation.x0_length")
    sim = {
        "dt": _number(_require(sm, "dt_time", "simulation."), "simulation.dt_time", positive=True),
        "n_paths": _number(_require(sm, "n_paths", "simulation."), "simulation.n_paths", positive=True,
                           integer=True),
        "x0": [float(v) for v in x0],
        "record_stride": _number(sm.get("record_stride", 1), "simulation.record_stride", positive=True,
                                 integer=True),
        "block_size": _number(sm.get("block_size", 4096), "simulation.block_size", positive=True, integer=True),
        "threads": _number(sm.get("threads", 1), "simulation.threads", positive=True, integer=True),
        "export_paths": bool(sm.get("export_paths", False)),
        "export_every": _number(sm.get("export_every", 1), "simulation.export_every", positive=True,
                                integer=True),
    }
    if sim["dt"] > params.T:
        raise ConfigError("simulation.dt_time must not exceed params.T_time", field="simulation.dt_time")

    ests = []
    seen = set()
    for i, e in enumerate(raw.get("estimators") or []):
        where = f"estimators[{i}]."
        if not isinstance(e, dict):
            raise ConfigError(f"{where[:-1]} must be a mapping", field=where[:-1])
        name = _require(e, "name", where)
        if name not in _EST_KEYS:
            raise ConfigError(f"unknown estimator {name!r}", field=f"{where}name")
        if name in seen:
            raise ConfigError(f"estimator {name!r} selected twice", field=f"{where}name")
        seen.add(name)
        _check_keys({k: v for k, v in e.items() if k != "name"}, _EST_KEYS[name], where)
        if "f" in e and e["f"] not in TEST_FUNCTIONS:
            raise ConfigError(f"unknown test function {e['f']!r}", field=f"{where}f")
        ests.append(dict(e))
    return Scenario(
        name=str(raw.get("name", "scenario")), seed=_number(raw.get("seed", 0), "seed", integer=True),
        params=params, preset=preset, preset_options=options, grid_n=grid_n, box_factor=box_factor,
        resolvent=resolvent, constants=constants, R=R, R_ladder=R_ladder, sim=sim, estimators=tuple(ests),
        output_dir=str(raw.get("output_dir", "zvonkin-out")),
    )


# Test functions --------------------------------------------------------------------


def _ball_volume(d: int, r: float) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r**d


def make_test_function(spec: dict, d: int, p: float | None = None):
    """Returns ``(f, ||f||_p)`` for the named test function."""
    kind = spec.get("f", "indicator_ball")
    r = float(spec.get("radius_length", 1.0))
    c = float(spec.get("value", 1.0))
    if kind == "indicator_ball":
        f = lambda x: (np.linalg.norm(x, axis=1) <= r).astype(float)  # noqa: E731
        norm = _ball_volume(d, r) ** (1.0 / p) if p else None
    elif kind == "constant":
        f = lambda x: np.full(len(x), c)  # noqa: E731
        norm = math.inf if c != 0 else 0.0
    elif kind == "halfspace":
        f = lambda x: (x[:, 0] > 0).astype(float)  # noqa: E731
        norm = math.inf
    else:
        def f(x):
            rr = np.linalg.norm(x, axis=1) / r
            out = np.zeros(len(x))
            inside = rr < 1
            out[inside] = np.exp(-1.0 / (1.0 - rr[inside] ** 2))
            return out
        norm = None
    return f, norm


# Orchestration ---------------------------------------------------------------------


def _pipeline_spec(sc: Scenario) -> PipelineSpec:
    rs = sc.resolvent
    lam = rs["lambda"]
    cfg = None
    if lam != "lambda_R_H":
        cfg = ResolventConfig(lam=lam, solver=rs["solver"], picard_tol=rs["picard_tol"],
                              picard_max_iter=rs["picard_max_iter"])
    return PipelineSpec(n=sc.grid_n, box_factor=sc.box_factor, lam=lam, constants=sc.constants, resolvent=cfg)


def _sim_config(sc: Scenario, **over) -> SimConfig:
    s = sc.sim
    base = dict(T=sc.params.T, dt=s["dt"], n_paths=s["n_paths"], seed=sc.seed, record_stride=s["record_stride"],
                block_size=s["block_size"], threads=s["threads"])
    base.update(over)
    return SimConfig(**base)


def _table_report(name, value, stderr, bound, n, constants=None, **details) -> BoundReport:
    return make_report(name, MonteCarloEstimate(float(value), float(stderr), int(n)), bound, constants, **details)


def _write_table(rows, path: Path) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(float(r[k])) if isinstance(r[k], (float, np.floating)) else r[k] for k in keys])


def _run_estimator(e: dict, sc: Scenario, pipe, batch, lam_R: float, tables: Path) -> BoundReport:
    name = e["name"]
    d = sc.params.d
    K = pipe.constants or KrylovConstants(1.0, 1.0, "user-supplied")
    x0 = np.array(sc.sim["x0"])
    if name == "krylov_check":
        p = float(e.get("p", 2.0))
        f, fn = make_test_function(e, d, p)
        return krylov_check(batch, f, float(e.get("t0_time", 0.0)), float(e.get("t1_time", sc.params.T)), p,
                            lam_R, K, f_norm=fn if fn is not None else 1.0)
    if name == "khasminskii_check":
        p = float(e.get("p", 2.0))
        f, fn = make_test_function(e, d, p)
        return khasminskii_check(batch, f, float(e.get("a", 1.0)), p, lam_R, K,
                                 f_norm=fn if fn is not None else 1.0)
    if name == "sup_moment_check":
        return sup_moment_check(batch, float(e.get("p", 2.0)), lam_R, float(e.get("C_tilde", 4.0)))
    if name == "lyapunov_moment_check":
        return lyapunov_moment_check(batch, float(e.get("alpha", 1.0)), lam_R, float(e.get("C_tilde", 4.0)))
    if name == "holder_time_check":
        rows = holder_time_check(batch, float(e.get("p", 2.0)))
        _write_table(rows, tables / "holder_time_check.csv")
        spread = max(abs(a["ratio"] - b["ratio"]) / (3 * math.hypot(a["stderr"], b["stderr"]) or 1.0)
                     for a in rows for b in rows)
        return _table_report(name, spread, 0.0, 1.0, rows[0]["n"], stable=ladder_stable(rows))
    gap = float(e.get("gap_length", 0.1))
    n_paths = int(e.get("n_paths", sc.sim["n_paths"]))
    if name == "two_point_moment":
        alpha = float(e.get("alpha", 2.0))
        cfg = _sim_config(sc, n_paths=n_paths, record_stride=sc.sim["record_stride"])
        tp = two_point(pipe.transformed, pipe.zmap, x0, x0 + gap * np.eye(d)[0], cfg, record_y=False)
        est = two_point_ratio(tp, alpha)
        Ct = float(e.get("C_tilde", 4.0))
        expo = Ct * lam_R ** (sc.params.p1 / (sc.params.p1 - d))
        bound = Ct * math.exp(expo) if expo < 700 else math.inf
        return make_report(name, est, bound, None, alpha=alpha, gap=gap)
    if name == "doleans_decompose":
        alpha = float(e.get("alpha", 2.0))
        cfg = _sim_config(sc, n_paths=n_paths, record_stride=1, dt=float(e.get("dt_time", sc.sim["dt"])))
        tp = two_point(pipe.transformed, pipe.zmap, x0, x0 + gap * np.eye(d)[0], cfg)
        dd = doleans_decompose(tp, pipe.zmap, pipe.transformed, alpha)
        m = dd.martingale
        return _table_report(name, dd.reconstruction_error, 0.0, float(e.get("tolerance", 1e-2)), m.n_effective,
                             martingale_mean=m.mean, martingale_stderr=m.stderr,
                             martingale_ok=abs(m.mean - 1.0) <= 3 * m.stderr)
    if name == "strong_feller_modulus":
        f, _ = make_test_function({"f": e.get("f", "halfspace"), **e}, d)
        starts = np.asarray(e.get("starts_length", list(np.linspace(-1, 1, 10))), dtype=float).reshape(-1, d)
        cfg = _sim_config(sc, n_paths=n_paths)
        out = strong_feller_modulus(pipe, f, float(e.get("t_time", sc.params.T)), starts, cfg)
        rows = sorted(out["rows"], key=lambda r: r["dist"])
        _write_table(rows, tables / "strong_feller_modulus.csv")
        near, far = rows[0], rows[-1]
        return make_report(name, MonteCarloEstimate(near["diff"], near["stderr"], n_paths), far["diff"])
    if name == "injectivity_gap":
        starts = np.asarray(e.get("starts_length", list(np.linspace(-1, 1, 20))), dtype=float).reshape(-1, d)
        cfg = _sim_config(sc, n_paths=n_paths, record_stride=max(1, int(round(sc.params.T / sc.sim["dt"]))))
        res = injectivity_gap(shared_noise_bundle(pipe.transformed, pipe.zmap, starts, cfg))
        _write_table([{k: v for k, v in res.items() if not isinstance(v, list)}], tables / "injectivity_gap.csv")
        return _table_report(name, res["clipped"], 0.0, 0.0, res["n_pairs"], min_gap=res["min_gap"],
                             min_start_gap=res["min_start_gap"])
    if name == "flow_gradient_moment":
        hs = [float(h) for h in e.get("h_ladder_length", [1e-1, 1e-2, 1e-3])]
        direction = e.get("direction", [1.0] + [0.0] * (d - 1))
        cfg = _sim_config(sc, n_paths=n_paths)
        rows = flow_gradient_moment(pipe, x0, direction, hs, float(e.get("p", 2.0)), cfg)
        _write_table(rows, tables / "flow_gradient_moment.csv")
        top = max(rows, key=lambda r: r["ratio"])
        return _table_report(name, top["ratio"], top["stderr"], math.inf, top["n"])
    raise ConfigError(f"unknown estimator {name!r}")


def run_scenario(source, out: str | None = None, seed: int | None = None, threads: int | None = None) -> int:
    """Run one scenario; returns 0 iff every stage succeeds and every report passes."""
    sc = parse_config(source)
    if seed is not None:
        sc = replace(sc, seed=seed)
    if threads is not None:
        sc = replace(sc, sim={**sc.sim, "threads": threads})
    outdir = Path(out or sc.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    tables = outdir / "tables"
    tables.mkdir(exist_ok=True)
    reports: list[BoundReport] = []
    failures: list[str] = []
    field_ = make_preset(sc.preset, sc.params.d, **sc.preset_options)
    R0 = sc.R if sc.R is not None else sc.R_ladder[0]
    Rs = [R0] if sc.R_ladder is None else list(sc.R_ladder)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pipe = batch = None
        try:
            audit = audit_assumptions(field_, sc.params, Rs)
            _write_table(audit, outdir / "audit.csv")
        except ZvonkinError as exc:
            failures.append(f"audit: {exc}")
        try:
            spec = _pipeline_spec(sc)
            pipes = [build_pipeline(field_, sc.params, R, spec) for R in Rs]
            pipe = pipes[0]
            export_map(pipe.zmap, outdir / "map")
        except ZvonkinError as exc:
            failures.append(f"map: {exc}")
        if pipe is not None:
            try:
                cfg = _sim_config(sc)
                if sc.R_ladder is None:
                    batch = simulate_transformed(pipe.transformed, pipe.zmap, sc.sim["x0"], cfg)
                else:
                    batch = patch_global(field_, sc.params, sc.sim["x0"], Rs, cfg, pipelines=pipes)
                if sc.sim["export_paths"]:
                    write_paths_csv(batch, outdir / "paths.csv", every=sc.sim["export_every"])
            except ZvonkinError as exc:
                failures.append(f"simulate: {exc}")
        lam_R = pipe.lam if pipe is not None else math.nan
        if pipe is not None and pipe.constants is not None:
            lam_R = lambda_R(sc.params, pipe.constants, pipe.R)
        for e in sc.estimators:
            if batch is None:
                failures.append(f"{e['name']}: skipped (no paths)")
                continue
            try:
                reports.append(_run_estimator(e, sc, pipe, batch, lam_R, tables))
            except ZvonkinError as exc:
                failures.append(f"{e['name']}: {exc}")
    notes = sorted({str(w.message) for w in caught})

    write_reports_csv(reports, outdir / "reports.csv")
    lines = [f"scenario: {sc.name}", f"seed: {sc.seed}"]
    if pipe is not None:
        lines.append(f"lambda: {pipe.lam!r}  R: {pipe.R!r}  sup_u: {pipe.zmap.sup_u:.6g}  "
                     f"sup_grad_u: {pipe.zmap.sup_grad_u:.6g}")
        if pipe.constants is not None:
            c = pipe.constants
            lines.append(f"constants: C1={c.C1:.6g} C2={c.C2:.6g} ({c.provenance})")
    lines += summary_lines(reports)
    lines += [f"ERROR {f}" for f in failures]
    lines += [f"warning: {n}" for n in notes]
    ok = not failures and all(r.passed for r in reports)
    lines.append(f"overall: {'PASS' if ok else 'FAIL'}")
    (outdir / "summary.txt").write_text("\n".join(lines) + "\n")
    return 0 if ok else 1


def list_presets() -> str:
    rows = [f"preset\t{name}" for name in sorted(PRESETS)]
    rows += [f"estimator\t{name}" for name in sorted(ESTIMATORS)]
    rows += [f"test_function\t{name}" for name in sorted(TEST_FUNCTIONS)]
    return "\n".join(rows) + "\n"


def shipped_config(name: str) -> Path:
    """Path of a config bundled with the package (``"minimal"`` or ``"minimal.yaml"``)."""
    if not name.endswith((".yaml", ".yml")):
        name += ".yaml"
    return Path(str(resources.files("zvonkin_sde") / "configs" / name))


def main(argv=None) -> int:
    # Global options are accepted before or after the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the scenario seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for path blocks")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory override")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    ap = argparse.ArgumentParser(prog="zvonkin", description=__doc__.splitlines()[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario", parents=[common])
    p_run.add_argument("config")
    sub.add_parser("list-presets", help="list coefficient presets and estimators", parents=[common])
    p_val = sub.add_parser("validate", help="parse a config without running it", parents=[common])
    p_val.add_argument("config")
    args = ap.parse_args(argv)
    for name, default in (("seed", None), ("threads", None), ("out", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "list-presets":
            sys.stdout.write(list_presets())
            return 0
        if args.command == "validate":
            sc = parse_config(args.config)
            print(f"ok: {sc.name} ({len(sc.estimators)} estimators)")
            return 0
        status = run_scenario(args.config, args.out, args.seed, args.threads)
        out = Path(args.out or parse_config(args.config).output_dir)
        sys.stdout.write((out / "summary.txt").read_text())
        return status
    except ConfigError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
