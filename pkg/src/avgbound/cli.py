"""Command-line front end: load a system config, run a pipeline, write artifacts.

Commands map one-to-one onto library operations (bound, synth, refine, sweep,
simulate, export-sdpa).  Every JSON artifact embeds the tool version, the
resolved configuration, and the full option set, and contains no timestamps,
so a rerun with identical inputs is byte-identical.  Errors leave as JSON on
stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .bound import (PolySystem, attractor_certificate, average_bound_program,
                    lower_bound, upper_bound)
from .polynomial import ParseError, Polynomial, parse_poly
from .sdp_solver import export_sdpa
from .simulator import (SimConfig, SweepBoundOptions, check_certificate,
                        find_equilibria, sweep_eps, time_average)
from .synthesis import (Controller, ExpansionState, StepOptions,
                        refine_fixed_eps)


class ConfigError(ValueError):
    """Raised when a system configuration file fails to load or validate."""


@dataclass
class SystemConfig:
    """Parsed system definition plus solver/simulation defaults."""

    states: List[str]
    inputs: List[str]
    f_exprs: List[str]
    g_exprs: Dict[str, str]          # "state.input" -> expression
    phi_expr: str
    defaults: Dict[str, object] = field(default_factory=dict)

    def to_jsonable(self) -> Dict[str, object]:
        return {
            "states": list(self.states),
            "inputs": list(self.inputs),
            "f": list(self.f_exprs),
            "g": dict(sorted(self.g_exprs.items())),
            "phi": self.phi_expr,
            "defaults": dict(sorted(self.defaults.items())),
        }


def _unquote(value: str) -> str:
    v = value.strip()
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "'\"":
        return v[1:-1]
    return v


def _names(value: str) -> List[str]:
    return [tok for tok in value.replace(",", " ").split() if tok]


def load_config(path: str):
    """Parse a sectioned key-value config into (SystemConfig, PolySystem).

    Expressions are validated against the declared names; the cost is
    spot-checked for nonnegativity at 100 seeded random points (a warning,
    not an error, since only lower bounds rely on it).
    """
    parser = configparser.ConfigParser(strict=True, interpolation=None)
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    for section in ("system", "dynamics", "cost"):
        if not parser.has_section(section):
            raise ConfigError(f"missing [{section}] section in {path}")
    states = _names(parser.get("system", "states", fallback=""))
    inputs = _names(parser.get("system", "inputs", fallback=""))
    if not states:
        raise ConfigError("[system] must declare at least one state")

    def parse_expr(text: str, names: Sequence[str], where: str) -> Polynomial:
        try:
            return parse_poly(text, list(names))
        except ParseError as exc:
            raise ConfigError(f"{where}: {exc}") from exc

    f_exprs: List[str] = []
    f: List[Polynomial] = []
    for s in states:
        if not parser.has_option("dynamics", s):
            raise ConfigError(f"[dynamics] is missing an entry for state {s!r}")
        expr = _unquote(parser.get("dynamics", s))
        f_exprs.append(expr)
        f.append(parse_expr(expr, states, f"[dynamics] {s}"))
    for key in parser.options("dynamics"):
        if key not in states:
            raise ConfigError(f"[dynamics] names unknown state {key!r}")

    g_exprs: Dict[str, str] = {}
    g = [[Polynomial.zero(len(states)) for _ in inputs] for _ in states]
    if parser.has_section("actuation"):
        for key in parser.options("actuation"):
            if "." not in key:
                raise ConfigError(
                    f"[actuation] key {key!r} must look like state.input")
            sname, iname = key.split(".", 1)
            if sname not in states:
                raise ConfigError(f"[actuation] names unknown state {sname!r}")
            if iname not in inputs:
                raise ConfigError(f"[actuation] names unknown input {iname!r}")
            expr = _unquote(parser.get("actuation", key))
            g_exprs[key] = expr
            g[states.index(sname)][inputs.index(iname)] = \
                parse_expr(expr, states, f"[actuation] {key}")

    if not parser.has_option("cost", "phi"):
        raise ConfigError("[cost] must define phi")
    phi_expr = _unquote(parser.get("cost", "phi"))
    phi = parse_expr(phi_expr, states + inputs, "[cost] phi")

    defaults: Dict[str, object] = {}
    if parser.has_section("defaults"):
        for key in parser.options("defaults"):
            raw = _unquote(parser.get("defaults", key))
            if key == "x0":
                try:
                    defaults["x0"] = [float(tok) for tok in _names(raw)]
                except ValueError as exc:
                    raise ConfigError(f"[defaults] x0: {exc}") from exc
            else:
                try:
                    defaults[key] = float(raw)
                except ValueError as exc:
                    raise ConfigError(f"[defaults] {key}: {exc}") from exc
    x0 = defaults.get("x0")
    if x0 is not None and len(x0) != len(states):
        raise ConfigError("[defaults] x0 length must match the state count")

    system = PolySystem(states, inputs, f, g, phi)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-3.0, 3.0, size=(100, len(states) + len(inputs)))
    worst = float(phi.eval_many(pts).min())
    if worst < 0.0:
        print(f"warning: phi is negative at sampled points (min {worst:.3g}); "
              "lower bounds may be vacuous", file=sys.stderr)
    cfg = SystemConfig(states=states, inputs=inputs, f_exprs=f_exprs,
                       g_exprs=g_exprs, phi_expr=phi_expr, defaults=defaults)
    return cfg, system


# ----------------------------------------------------------------------
# artifact serialization

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return {"re": _jsonable(obj.real), "im": _jsonable(obj.imag)}
    return obj


def _poly_json(poly: Polynomial, names: Sequence[str]) -> Dict[str, object]:
    return {
        "expr": poly.to_string(list(names)),
        "terms": {",".join(str(e) for e in mono): c
                  for mono, c in sorted(poly.terms.items())},
    }


def _cert_json(cert, names: Sequence[str]) -> Dict[str, object]:
    return _jsonable({
        "kind": cert.kind,
        "status": cert.status,
        "C": cert.C,
        "d_v": cert.d_v,
        "V": _poly_json(cert.V, names),
        "sos_residual": cert.sos_residual,
        "sdp_residuals": cert.sdp_residuals,
        "iterations": cert.iterations,
        "sizes": cert.sizes,
    })


def _write_artifact(path: str, command: str, cfg: SystemConfig,
                    options: Dict[str, object], result) -> None:
    payload = {
        "tool": "avgbound",
        "version": __version__,
        "command": command,
        "config": cfg.to_jsonable(),
        "options": _jsonable(options),
        "result": _jsonable(result),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_controller(path: str) -> Controller:
    """Accept either a raw controller dict or a synth artifact wrapping one."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    data = data.get("result", data)
    data = data.get("controller", data)
    return Controller.from_dict(data)


def _parse_eps_list(spec: str) -> List[float]:
    """Either comma-separated values or a start:stop:step range (inclusive)."""
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError("eps range must look like start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise ValueError("eps range step must be positive")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [start + k * step for k in range(max(count, 0))]
    return [float(tok) for tok in spec.split(",") if tok.strip()]


def _sim_config(args, cfg: SystemConfig) -> SimConfig:
    d = cfg.defaults
    x0 = args.x0 if args.x0 is not None else d.get("x0")
    return SimConfig(
        dt=args.dt if args.dt is not None else float(d.get("dt", 1e-2)),
        T=args.horizon if args.horizon is not None else float(d.get("T", 3000.0)),
        transient_fraction=args.transient,
        x0=x0,
    )


def _resolve_u1(args, cfg: SystemConfig) -> List[Polynomial]:
    if args.u1:
        if len(args.u1) != len(cfg.inputs):
            raise ValueError("need one --u1 expression per input")
        return [parse_poly(_unquote(e), cfg.states) for e in args.u1]
    ctrl = _load_controller(args.controller)
    return list(ctrl.u_terms[0])


# ----------------------------------------------------------------------
# commands

def _cmd_bound(args) -> int:
    cfg, system = load_config(args.config)
    result: Dict[str, object] = {}
    up = upper_bound(system, args.dv, tol=args.tol, max_iter=args.max_iter)
    result["upper"] = _cert_json(up, cfg.states)
    if args.lower:
        lo = lower_bound(system, args.dv, tol=args.tol, max_iter=args.max_iter)
        result["lower"] = _cert_json(lo, cfg.states)
    if args.attractor_beta is not None:
        att = attractor_certificate(system, beta=args.attractor_beta,
                                    d_s=args.ds)
        result["attractor"] = _jsonable({
            "feasible": att.feasible,
            "status": att.status,
            "beta": att.beta,
            "d_s": att.d_s,
        })
    _write_artifact(args.out, "bound", cfg, _options(args), result)
    print(f"{args.out}: status {up.status}, C = {up.C}")
    return 0 if up.status == "optimal" else 1


def _cmd_synth(args) -> int:
    cfg, system = load_config(args.config)
    sign = "sos" if args.method == "AI" else "free"
    state = ExpansionState(system)
    state.step(StepOptions(d_v=args.dv, tol=args.tol, max_iter=args.max_iter))
    for i in range(1, args.order + 1):
        state.step(StepOptions(d_v=args.dv, d_u=args.du, d_s=[args.ds] * i,
                               multiplier_sign=sign, rho=args.rho,
                               tol=args.tol, max_iter=args.max_iter))
    ctrl = state.assemble(epsilon=args.eps, kappa=args.kappa)
    result = {
        "controller": ctrl.to_dict(),
        "terms": [{"order": t.order, "C": t.C, "status": t.status,
                   "multiplier_sign": t.multiplier_sign}
                  for t in state.terms],
    }
    _write_artifact(args.out, "synth", cfg, _options(args), result)
    print(f"{args.out}: C0 = {ctrl.C0}, C1 = {ctrl.C1}, "
          f"bound({args.eps}) = {ctrl.bound}")
    return 0


def _cmd_refine(args) -> int:
    cfg, system = load_config(args.config)
    ctrl = _load_controller(args.controller)
    cert = refine_fixed_eps(system, ctrl, d_v=args.dv, relax=args.relax,
                            d_s=args.ds, epsilon=args.eps, rho=args.rho,
                            tol=args.tol, max_iter=args.max_iter)
    eps_used = args.eps if args.eps is not None else ctrl.epsilon
    result = {
        "certificate": _cert_json(cert, cfg.states),
        "epsilon": eps_used,
        "relaxed": args.relax,
    }
    _write_artifact(args.out, "refine", cfg, _options(args), result)
    print(f"{args.out}: status {cert.status}, C = {cert.C}")
    return 0 if cert.status == "optimal" else 1


def _cmd_sweep(args) -> int:
    cfg, system = load_config(args.config)
    u1 = _resolve_u1(args, cfg)
    eps_list = _parse_eps_list(args.eps)
    if not eps_list:
        raise ValueError("empty eps list")
    bound_opts = None
    if args.controller is not None:
        ctrl = _load_controller(args.controller)
        bound_opts = SweepBoundOptions.from_controller(
            ctrl, d_v=args.dv, d_s=args.ds, rho=args.rho,
            relax=not args.no_relax, refine=not args.no_refine)
    sim_cfg = _sim_config(args, cfg)
    res = sweep_eps(system, u1, eps_list, sim_cfg, bound_opts,
                    detect=not args.no_detect)
    res.to_csv(args.out)
    summary = {
        "csv": args.out,
        "rows": len(res.rows),
        "eps1": res.eps1,
        "eps2": res.eps2,
        "failures": [{"eps": r.eps, "error": r.error}
                     for r in res.rows if r.error],
    }
    _write_artifact(args.summary, "sweep", cfg, _options(args), summary)
    print(f"{args.out}: {len(res.rows)} rows, eps1 = {res.eps1}, "
          f"eps2 = {res.eps2}")
    return 0


def _cmd_simulate(args) -> int:
    cfg, system = load_config(args.config)
    controller = None
    if args.controller is not None or args.u1:
        u1 = _resolve_u1(args, cfg)
        eps = args.eps
        if eps is None:
            if args.controller is None:
                raise ValueError("--eps is required with --u1")
            eps = _load_controller(args.controller).epsilon
        controller = [eps * u for u in u1]
    sim_cfg = _sim_config(args, cfg)
    rep = time_average(system, controller, sim_cfg)
    result: Dict[str, object] = {"report": {
        "phi_bar": rep.phi_bar,
        "convergence_gap": rep.convergence_gap,
        "converged": rep.converged,
        "stabilized": rep.stabilized,
        "terminal_state": rep.terminal_state,
        "mean_states": rep.mean_states,
        "mean_squares": rep.mean_squares,
        "cycle_stats": rep.cycle_stats,
        "dt": rep.dt,
        "T": rep.T,
    }}
    if args.equilibria:
        eqs = find_equilibria(system, controller, grid=tuple(args.grid))
        result["equilibria"] = [{
            "point": e.point,
            "eigenvalues": [complex(v) for v in e.eigenvalues],
            "stable": e.stable,
            "residual": e.residual,
        } for e in eqs]
    if args.check is not None:
        with open(args.check, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        node = data.get("result", data)
        node = node.get("certificate", node.get("upper", node))
        v_terms = {tuple(int(p) for p in key.split(",")): float(c)
                   for key, c in node["V"]["terms"].items()}
        v_poly = Polynomial(len(cfg.states), v_terms)
        result["certificate_check"] = check_certificate(
            (v_poly, float(node["C"])), system, controller, sim_cfg)
    _write_artifact(args.out, "simulate", cfg, _options(args), result)
    print(f"{args.out}: phi_bar = {rep.phi_bar}, stabilized = {rep.stabilized}")
    return 0


def _cmd_export_sdpa(args) -> int:
    cfg, system = load_config(args.config)
    prog = average_bound_program(system.f, system.phi_states_only(),
                                 args.dv, args.kind)
    compiled = prog.compile(reduce_basis=True)
    meta = export_sdpa(compiled.problem, args.out)
    result = {
        "sdpa_path": args.out,
        "meta": meta,
        "objective_constant": compiled.obj_const,
        "recovery": "objective_sign * (-solved_minimum) + objective_offset "
                    "+ objective_constant",
        "block_dims": list(compiled.problem.block_dims),
        "n_free": compiled.problem.n_free,
        "n_constraints": len(compiled.problem.constraints),
    }
    _write_artifact(args.meta_out, "export-sdpa", cfg, _options(args), result)
    print(f"{args.out}: {len(compiled.problem.constraints)} constraints, "
          f"meta in {args.meta_out}")
    return 0


def _options(args) -> Dict[str, object]:
    skip = {"func"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# ----------------------------------------------------------------------
# argument wiring

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "--system", dest="config", required=True,
                   help="system definition file")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=200)


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--T", dest="horizon", type=float, default=None)
    p.add_argument("--x0", type=float, nargs="+", default=None)
    p.add_argument("--transient", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="avgbound",
        description="Bounds and small-feedback synthesis for long-time "
                    "average costs of polynomial systems")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bound", help="certified upper/lower average bounds")
    _add_common(p)
    p.add_argument("--degree", "--dv", dest="dv", type=int, default=2)
    p.add_argument("--lower", action="store_true",
                   help="also compute the lower bound")
    p.add_argument("--attractor-beta", type=float, default=None,
                   help="also attempt an absorbing-ball certificate")
    p.add_argument("--ds", type=int, default=2)
    p.add_argument("--out", default="bound.json")
    p.set_defaults(func=_cmd_bound)

    p = sub.add_parser("synth", help="series-expansion controller synthesis")
    _add_common(p)
    p.add_argument("--method", choices=("AI", "AII"), required=True)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--du", type=int, default=2)
    p.add_argument("--dv", type=int, default=2)
    p.add_argument("--ds", type=int, default=2)
    p.add_argument("--rho", type=float, default=400.0)
    p.add_argument("--eps", type=float, default=8.7e-4)
    p.add_argument("--kappa", type=float, default=0.5)
    p.add_argument("--out", default="controller.json")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("refine", help="re-certify a bound at fixed eps")
    _add_common(p)
    p.add_argument("--controller", required=True,
                   help="controller JSON from synth")
    p.add_argument("--eps", type=float, default=None,
                   help="override the controller's stored eps")
    p.add_argument("--dv", type=int, default=4)
    p.add_argument("--relax", action="store_true",
                   help="subtract multiplier-weighted expansion residuals")
    p.add_argument("--ds", type=int, default=2)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--out", default="refine.json")
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("sweep", help="tabulate averages and bounds over eps")
    _add_common(p)
    p.add_argument("--eps", required=True,
                   help="start:stop:step range or comma list")
    p.add_argument("--controller", default=None,
                   help="controller JSON supplying u1 and the bound columns")
    p.add_argument("--u1", action="append", default=None,
                   help="first-order feedback expression (one per input)")
    p.add_argument("--dv", type=int, default=4)
    p.add_argument("--ds", type=int, default=2)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--no-refine", action="store_true",
                   help="skip per-row certified bounds")
    p.add_argument("--no-relax", action="store_true")
    p.add_argument("--no-detect", action="store_true",
                   help="skip eps1/eps2 bisection")
    _add_sim_flags(p)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--summary", default="sweep.json")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("simulate", help="integrate and report the average")
    _add_common(p)
    p.add_argument("--eps", type=float, default=None,
                   help="feedback gain u = eps * u1 (default: the "
                        "controller's stored value)")
    p.add_argument("--controller", default=None)
    p.add_argument("--u1", action="append", default=None)
    p.add_argument("--equilibria", action="store_true",
                   help="also locate closed-loop equilibria")
    p.add_argument("--grid", type=float, nargs=3, default=(-3.0, 3.0, 1.0),
                   metavar=("LO", "HI", "STEP"))
    p.add_argument("--check", default=None,
                   help="bound/refine artifact whose certificate to check "
                        "along the trajectory")
    _add_sim_flags(p)
    p.add_argument("--out", default="simulate.json")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("export-sdpa", help="write the bound program in "
                                           "sparse SDPA form")
    _add_common(p)
    p.add_argument("--degree", "--dv", dest="dv", type=int, default=2)
    p.add_argument("--kind", choices=("upper", "lower"), default="upper")
    p.add_argument("--out", default="problem.dat-s")
    p.add_argument("--meta-out", default="problem.meta.json")
    p.set_defaults(func=_cmd_export_sdpa)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:   # structured failure for scripting callers
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
