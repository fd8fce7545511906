"""Batch front door: one subcommand per pipeline, JSON out, optional CSV.

Subcommands: green, regular-part, mfpt, validate-pde, validate-mc, scaling,
optimize.  Configuration comes from a JSON file (--config) with flag
overrides; results go to stdout as JSON with a fixed schema_version and
floats printed at 17 significant digits so identical runs are
byte-identical.  Exit status is 0 only if every pass flag in the run is
true, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import asymptotics as asy
from . import green as gr
from . import geometry as geo
from . import montecarlo as mc
from . import optimizer as opt
from . import pde

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Canonical JSON (deterministic float formatting)
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if math.isnan(x):
            return '"nan"'
        if math.isinf(x):
            return '"inf"' if x > 0 else '"-inf"'
        return format(float(x), ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    if x is None:
        return "null"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    if isinstance(x, dict):
        items = (f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in x.items())
        return "{" + ", ".join(items) + "}"
    raise TypeError(f"cannot serialize {type(x)!r}")


def canonical_json(obj) -> str:
    return _fmt(obj)


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["out"] = args.out
    if args.threads is not None:
        cfg["threads"] = args.threads
    cfg["format"] = args.format
    return cfg


def _surface(cfg: dict) -> geo.SurfaceSpec:
    if "surface" not in cfg:
        raise ConfigError("missing 'surface' section")
    try:
        return geo.surface_from_json(cfg["surface"])
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad surface spec: {e}") from e


def _point(s: geo.SurfaceSpec, raw) -> geo.SurfacePoint:
    try:
        return geo.point_from_coords(s, np.asarray(raw, dtype=float))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad point {raw!r}: {e}") from e


def _trap(s: geo.SurfaceSpec, cfg: dict) -> asy.TrapSpec:
    if "trap" not in cfg:
        raise ConfigError("missing 'trap' section")
    t = cfg["trap"]
    try:
        trap = asy.TrapSpec(_point(s, t["center"]), float(t["eps"]))
        trap.validate(s)
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad trap spec: {e}") from e
    return trap


def _write_csv(cfg, name, header, rows):
    out = cfg.get("out")
    if not out or cfg.get("format") == "json":
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    f = path / f"{name}.csv"
    with f.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    return str(f)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_green(cfg) -> tuple[dict, bool]:
    s = _surface(cfg)
    x = _point(s, cfg["x"])
    if "points" in cfg:
        ys = [np.asarray(p, dtype=float) for p in cfg["points"]]
    else:
        a = np.asarray(cfg["y_start"], dtype=float)
        b = np.asarray(cfg["y_end"], dtype=float)
        n = int(cfg.get("n", 16))
        ys = [a + (b - a) * k / (n - 1) for k in range(n)]
    rows = []
    for yc in ys:
        y = _point(s, yc)
        g = gr.green(s, x, y)
        xu, xv = x.chart_pair()
        yu, yv = y.chart_pair()
        rows.append((xu, xv, yu, yv, g.distance, g.total, g.log_part, g.regular_part))
    csv = _write_csv(cfg, "green", ["x_u", "x_v", "y_u", "y_v", "distance", "total", "log_part", "regular_part"], rows)
    payload = {
        "rows": [list(r) for r in rows],
        "columns": ["x_u", "x_v", "y_u", "y_v", "distance", "total", "log_part", "regular_part"],
    }
    if csv:
        payload["csv"] = csv
    return payload, True


def _cmd_regular_part(cfg) -> tuple[dict, bool]:
    s = _surface(cfg)
    x0 = _point(s, cfg["x0"])
    est = gr.regular_part(s, x0)
    return {
        "x0": list(x0.coords),
        "value": est.value,
        "extrapolation_error": est.extrapolation_error,
        "ladder": [list(e) for e in est.ladder],
    }, True


def _cmd_mfpt(cfg) -> tuple[dict, bool]:
    s = _surface(cfg)
    t = cfg["trap"]
    eps_list = t["eps"] if isinstance(t["eps"], list) else [t["eps"]]
    results = []
    for eps in eps_list:
        trap = asy.TrapSpec(_point(s, t["center"]), float(eps))
        try:
            trap.validate(s)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if "x" in cfg:
            r = asy.mfpt_pointwise(s, trap, _point(s, cfg["x"]))
        else:
            r = asy.mfpt_average(s, trap)
        d = {"surface": s.to_json_dict(), "trap": {"center": list(trap.center.coords), "eps": trap.eps}}
        d.update(r.to_dict())
        results.append(d)
    payload = results[0] if len(results) == 1 and not isinstance(t["eps"], list) else {"results": results}
    return payload, True


def _cmd_validate_pde(cfg) -> tuple[dict, bool]:
    s = _surface(cfg)
    t = cfg["trap"]
    center = _point(s, t["center"])
    ok = True
    payload = {}
    if "eps_ladder" in cfg:
        ladder = [float(e) for e in cfg["eps_ladder"]]
        pol = None
        if "N_policy" in cfg:
            c = float(cfg["N_policy"].get("over_eps", 20.0))
            pol = lambda eps: max(128, int(math.ceil(c / eps / 16.0)) * 16)
        rep = pde.asymptotic_convergence(
            s, center, ladder, n_policy=pol, grid_check=bool(cfg.get("grid_check", True))
        )
        payload["convergence"] = rep.to_dict()
        ok = ok and rep.passed
    else:
        eps = float(t["eps"])
        trap = asy.TrapSpec(center, eps)
        try:
            trap.validate(s)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        N = int(cfg.get("N", 256))
        sol = pde.solve_trapped_bvp(s, trap, N)
        rep = pde.boundary_flux_report(sol)
        payload["flux"] = rep
        payload["average"] = sol.average()
        payload["asymptotic_average"] = asy.mfpt_average(s, trap).total
        payload["solver"] = {
            "N": N,
            "iterations": sol.meta["iterations"],
            "relative_residual": sol.meta["relative_residual"],
        }
        ok = ok and rep["pass"]
        if cfg.get("refine"):
            sol2 = pde.solve_trapped_bvp(s, trap, 2 * N)
            rep2 = pde.boundary_flux_report(sol2)
            payload["flux_refined"] = rep2
            e1, e2 = rep["relative_error"], rep2["relative_error"]
            improved = bool(e2 <= e1 / 3.0 or e2 < 1e-10)
            payload["flux_improvement_pass"] = improved
            ok = ok and improved
        if cfg.get("dump_field"):
            rows = [
                (i, j, sol.u[i, j])
                for i in range(sol.u.shape[0])
                for j in range(sol.u.shape[1])
            ]
            payload["field_csv"] = _write_csv(
                cfg, f"u_N{N}_eps{eps}_{s.family}", ["i", "j", "u"], rows
            )
    return payload, ok


def _cmd_validate_mc(cfg) -> tuple[dict, bool]:
    s = _surface(cfg)
    trap = _trap(s, cfg)
    m = cfg.get("mc", {})
    if "seed" not in cfg and "seed" not in m:
        raise ConfigError("Monte Carlo runs require a seed")
    start = m.get("start", "uniform")
    if start != "uniform":
        start = _point(s, start)
    base = mc.MCConfig(
        n_paths=int(m.get("n_paths", 1000)),
        base_dt=float(m.get("base_dt", 1e-3)),
        dt_floor=float(m.get("dt_floor", 1e-6)),
        seed=int(cfg.get("seed", m.get("seed", 0))),
        start=start,
        max_time=float(m.get("max_time", 200.0)),
    )
    pred = (
        asy.mfpt_pointwise(s, trap, start).total
        if isinstance(start, geo.SurfacePoint)
        else asy.mfpt_average(s, trap).total
    )
    payload: dict = {"asymptotic_prediction": pred}
    ok = True
    if "dt_ladder" in cfg:
        rep = mc.bias_probe(s, trap, base, [float(d) for d in cfg["dt_ladder"]])
        z = (rep.details["intercept"] - pred) / rep.details["intercept_stderr"]
        payload["bias_probe"] = rep.to_dict()
        payload["z_score"] = z
        ok = ok and rep.passed and abs(z) < 3.0
        if cfg.get("convention_check"):
            wrong = mc.MCConfig(
                n_paths=max(1000, base.n_paths // 2),
                base_dt=base.base_dt,
                dt_floor=base.dt_floor,
                seed=base.seed,
                start=base.start,
                max_time=4.0 * base.max_time,
                step_variance_multiplier=1.0,
            )
            est_w = mc.simulate_first_passage(s, trap, wrong)
            zw = (est_w.mean - pred) / est_w.stderr
            payload["wrong_convention"] = {"mean": est_w.mean, "stderr": est_w.stderr, "z_score": zw}
            payload["convention_lock_pass"] = bool(abs(zw) > 10.0)
            ok = ok and abs(zw) > 10.0
    else:
        est = mc.simulate_first_passage(s, trap, base)
        z = (est.mean - pred) / est.stderr if est.stderr else math.nan
        payload.update(est.to_dict())
        payload["seed"] = base.seed
        payload["z_score"] = z
        ok = ok and est.valid
    return payload, ok


def _cmd_scaling(cfg) -> tuple[dict, bool]:
    s = _surface(cfg)
    x0 = _point(s, cfg["x0"])
    reports = []
    ok = True
    for q in cfg.get("quantities", ["I_sup", "dI_sup", "kernel_const"]):
        if q == "normal_derivative":
            rep = pde.prop_normal_derivative_report(s, x0, cfg["eps_ladder"])
        else:
            ladder = cfg.get(f"{q}_ladder", cfg["eps_ladder"])
            rep = pde.scaling_check(s, x0, q, ladder)
        reports.append(rep.to_dict())
        ok = ok and rep.passed
    return {"reports": reports}, ok


def _cmd_optimize(cfg) -> tuple[dict, bool]:
    s = _surface(cfg)
    res = opt.optimize_trap_center(
        s,
        coarse_n=int(cfg.get("coarse_n", 8)),
        refine_iters=int(cfg.get("refine_iters", 60)),
    )
    payload = res.to_dict()
    ok = res.warning is None
    if cfg.get("landscape_n"):
        n = int(cfg["landscape_n"])
        centers, values, err = opt.robin_landscape(s, n)
        rows = [(c.coords[0], c.coords[1], v) for c, v in zip(centers, values)]
        csv = _write_csv(cfg, "landscape", ["u", "v", "R"], rows)
        if csv:
            payload["landscape_csv"] = csv
        payload["landscape_spread"] = float(values.max() - values.min())
        payload["extrapolation_error"] = err
    return payload, ok


COMMANDS = {
    "green": _cmd_green,
    "regular-part": _cmd_regular_part,
    "mfpt": _cmd_mfpt,
    "validate-pde": _cmd_validate_pde,
    "validate-mc": _cmd_validate_mc,
    "scaling": _cmd_scaling,
    "optimize": _cmd_optimize,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="narrowtrap", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON configuration file")
    ap.add_argument("--out", help="directory for CSV artifacts")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=None, help="worker cap (vectorized backends)")
    ap.add_argument("--format", choices=["json", "csv", "both"], default="json")
    args = ap.parse_args(argv)
    try:
        cfg = _load_config(args)
        payload, ok = COMMANDS[args.command](cfg)
    except ConfigError as e:
        err = {"schema_version": SCHEMA_VERSION, "error": {"kind": "config", "message": str(e)}}
        print(canonical_json(err))
        return 2
    except (ValueError, KeyError, TypeError) as e:
        err = {"schema_version": SCHEMA_VERSION, "error": {"kind": "config", "message": str(e)}}
        print(canonical_json(err))
        return 2
    doc = {"schema_version": SCHEMA_VERSION, "command": args.command}
    doc.update(payload)
    doc["pass"] = bool(ok)
    print(canonical_json(doc))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
