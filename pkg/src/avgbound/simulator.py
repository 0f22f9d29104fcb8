"""Trajectory ground truth for (closed-loop) polynomial systems.

Fixed-step classical fourth-order integration of dx/dt = f(x) + g(x) u(x),
long-time-average measurement with an explicit convergence gap, Newton
characterization of equilibria, empirical certificate spot-checks, and the
eps-sweep that tabulates measured averages against certified bounds.

The integration kernel runs under numba when importable and in plain Python
otherwise; both paths execute the same code.  Horizon and step defaults are
deliberate choices (the averaging window must truncate the infinite-time
limit somewhere) and are reported alongside every measurement.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bound import BoundCertificate, PolySystem
from .polynomial import Polynomial, grad_dot
from .synthesis import Controller, refine_fixed_eps

try:
    from numba import njit as _njit
except ImportError:          # pragma: no cover - numba present in CI image
    _njit = None

DIVERGENCE_RADIUS = 1e6


# ----------------------------------------------------------------------
# integration kernel (identical source for the numba and python backends)

def _field_kernel(exps, coefs, ptr, x, out):
    # out[c] = sum over the c-th component's monomials of coef * prod x^e
    for c in range(out.shape[0]):
        acc = 0.0
        for j in range(ptr[c], ptr[c + 1]):
            t = coefs[j]
            for i in range(x.shape[0]):
                for _ in range(exps[j, i]):
                    t *= x[i]
            acc += t
        out[c] = acc


def _rk4_kernel(exps, coefs, ptr, traj, dt, guard_sq):
    nsteps = traj.shape[0] - 1
    n = traj.shape[1]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xt = np.empty(n)
    for s in range(nsteps):
        x = traj[s]
        _field_kernel(exps, coefs, ptr, x, k1)
        for i in range(n):
            xt[i] = x[i] + 0.5 * dt * k1[i]
        _field_kernel(exps, coefs, ptr, xt, k2)
        for i in range(n):
            xt[i] = x[i] + 0.5 * dt * k2[i]
        _field_kernel(exps, coefs, ptr, xt, k3)
        for i in range(n):
            xt[i] = x[i] + dt * k3[i]
        _field_kernel(exps, coefs, ptr, xt, k4)
        norm_sq = 0.0
        for i in range(n):
            v = x[i] + dt * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0
            traj[s + 1, i] = v
            norm_sq += v * v
        if norm_sq > guard_sq:
            return s + 1
    return nsteps


if _njit is not None:
    _field_kernel = _njit(cache=True, nogil=True)(_field_kernel)
    _rk4_kernel = _njit(cache=True, nogil=True)(_rk4_kernel)


def _field_tables(polys: Sequence[Polynomial]):
    """Stacked (exponent, coefficient) tables for the kernel."""
    n = polys[0].nvars if polys else 0
    exps: List[Tuple[int, ...]] = []
    coefs: List[float] = []
    ptr = [0]
    for p in polys:
        for mono, c in sorted(p.terms.items()):
            exps.append(mono)
            coefs.append(c)
        ptr.append(len(coefs))
    exps_arr = np.array(exps, dtype=np.int64) if exps else \
        np.zeros((0, n), dtype=np.int64)
    return exps_arr, np.array(coefs, dtype=np.float64), \
        np.array(ptr, dtype=np.int64)


# ----------------------------------------------------------------------
# configuration and reports

@dataclass
class SimConfig:
    """Fixed-step integration window.

    T = 3000 covers roughly 440 shedding periods of the wake model at
    angular frequency 0.92; the first transient_fraction of the horizon is
    discarded before averaging.
    """

    dt: float = 1e-2
    T: float = 3000.0
    transient_fraction: float = 0.5
    x0: Optional[Sequence[float]] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T > self.dt:
            raise ValueError("horizon must exceed one step")
        if not 0.0 <= self.transient_fraction < 1.0:
            raise ValueError("transient_fraction must lie in [0, 1)")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def initial_state(self, n: int) -> np.ndarray:
        if self.x0 is not None:
            x0 = np.asarray(self.x0, dtype=float)
            if x0.shape != (n,):
                raise ValueError("x0 has the wrong dimension")
            return x0.copy()
        # shipped default: the wake-model study's initial condition,
        # last component positive
        x0 = np.full(n, -0.3)
        x0[-1] = 0.3
        return x0


@dataclass
class SimReport:
    phi_bar: float
    convergence_gap: float
    converged: bool
    terminal_state: np.ndarray
    stabilized: bool
    mean_states: np.ndarray
    mean_squares: np.ndarray
    cycle_stats: Optional[Dict[str, float]]
    dt: float
    T: float


@dataclass
class Equilibrium:
    point: np.ndarray
    eigenvalues: np.ndarray
    stable: bool
    residual: float


def _window_mean(vals: np.ndarray, dt: float) -> float:
    """Composite Simpson estimate of the window time average.

    Matches the integrator's fourth-order accuracy; a plain sample mean
    would cap the whole measurement at second order in dt.
    """
    m = vals.shape[0]
    if m < 3:
        return float(vals.mean())
    if m % 2 == 0:
        # odd interval count: Simpson up to the penultimate sample plus a
        # trapezoid on the last interval
        head = _window_mean(vals[:-1], dt)
        total = head * (m - 2) * dt + 0.5 * dt * (vals[-2] + vals[-1])
        return float(total / ((m - 1) * dt))
    w = np.ones(m)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float(w @ vals) / (3.0 * (m - 1))


def _resolve_controls(system: PolySystem, controller) -> List[Polynomial]:
    if controller is None:
        return [Polynomial.zero(system.n_states)
                for _ in range(system.n_inputs)]
    if isinstance(controller, Controller):
        return controller.control_polys()
    return list(controller)


# ----------------------------------------------------------------------
# operations

def integrate(system: PolySystem, controller=None,
              cfg: Optional[SimConfig] = None):
    """Fixed-step trajectory of the (closed-loop) system.

    controller may be None (u = 0), a Controller, or a sequence of per-input
    feedback polynomials in the states.  Returns (times, states) with states
    of shape (n_steps + 1, n).  Raises RuntimeError("unbounded trajectory")
    if the state norm exceeds 1e6.
    """
    cfg = cfg or SimConfig()
    controls = _resolve_controls(system, controller)
    f_cl, _ = system.closed_loop(controls)
    n = system.n_states
    exps, coefs, ptr = _field_tables(f_cl)
    nsteps = cfg.n_steps
    traj = np.empty((nsteps + 1, n))
    traj[0] = cfg.initial_state(n)
    done = _rk4_kernel(exps, coefs, ptr, traj, cfg.dt,
                       DIVERGENCE_RADIUS ** 2)
    if done < nsteps:
        raise RuntimeError("unbounded trajectory")
    times = np.arange(nsteps + 1) * cfg.dt
    return times, traj


def time_average(system: PolySystem, controller=None,
                 cfg: Optional[SimConfig] = None) -> SimReport:
    """Trailing-window mean of Phi along the trajectory.

    phi_bar averages the samples after the transient cut; the convergence
    gap compares the last-half and last-quarter averages and must stay
    within 0.5% of phi_bar for the converged flag (increase T otherwise).
    """
    cfg = cfg or SimConfig()
    controls = _resolve_controls(system, controller)
    _, phi_cl = system.closed_loop(controls)
    _, traj = integrate(system, controls, cfg)
    m = traj.shape[0]
    phi_vals = phi_cl.eval_many(traj)
    k0 = int(cfg.transient_fraction * m)
    window = phi_vals[k0:]
    phi_bar = _window_mean(window, cfg.dt)
    gap = abs(_window_mean(phi_vals[m // 2:], cfg.dt)
              - _window_mean(phi_vals[(3 * m) // 4:], cfg.dt))
    converged = gap <= 5e-3 * abs(phi_bar) + 1e-12
    terminal = traj[-1].copy()
    stabilized = bool(np.linalg.norm(terminal) < 1e-3)
    mean_states = traj[k0:].mean(axis=0)
    mean_squares = (traj[k0:] ** 2).mean(axis=0)
    cycle = None
    if not stabilized and system.n_states == 3:
        cycle = {"mean_r2": float(mean_squares[0] + mean_squares[1]),
                 "mean_a3": float(mean_states[2])}
    return SimReport(phi_bar=phi_bar, convergence_gap=gap,
                     converged=converged, terminal_state=terminal,
                     stabilized=stabilized, mean_states=mean_states,
                     mean_squares=mean_squares, cycle_stats=cycle,
                     dt=cfg.dt, T=cfg.T)


def find_equilibria(system: PolySystem, controller=None,
                    grid: Tuple[float, float, float] = (-3.0, 3.0, 1.0),
                    newton_tol: float = 1e-10) -> List[Equilibrium]:
    """Deduplicated Newton roots of the closed-loop field from grid seeds.

    grid = (lo, hi, step) spans a cube of seeds.  Stability comes from the
    Jacobian eigenvalue real parts at each root.
    """
    controls = _resolve_controls(system, controller)
    f_cl, _ = system.closed_loop(controls)
    n = system.n_states
    jac = [fi.gradient() for fi in f_cl]

    lo, hi, step = grid
    if not (hi > lo and step > 0):
        raise ValueError("grid must satisfy hi > lo with positive step")
    axis = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
    seeds = np.stack(np.meshgrid(*([axis] * n), indexing="ij"),
                     axis=-1).reshape(-1, n)

    def eval_field(pts: np.ndarray) -> np.ndarray:
        return np.stack([fi.eval_many(pts) for fi in f_cl], axis=1)

    def eval_jac(pts: np.ndarray) -> np.ndarray:
        out = np.empty((pts.shape[0], n, n))
        for i in range(n):
            for j in range(n):
                out[:, i, j] = jac[i][j].eval_many(pts)
        return out

    pts = seeds.copy()
    with np.errstate(all="ignore"):
        for _ in range(60):
            fv = eval_field(pts)
            jv = eval_jac(pts)
            ok = (np.isfinite(fv).all(axis=1) & np.isfinite(jv).all(axis=(1, 2))
                  & (np.abs(pts).max(axis=1) < 1e8))
            if not ok.any():
                break
            rhs = fv[ok][..., None]
            try:
                delta = np.linalg.solve(jv[ok], rhs)
            except np.linalg.LinAlgError:
                jv_r = jv[ok] + 1e-12 * np.eye(n)
                delta = np.linalg.solve(jv_r, rhs)
            pts[ok] -= delta[..., 0]

        fv = eval_field(pts)
        res = np.abs(fv).max(axis=1)
        good = np.isfinite(res) & (res <= newton_tol)

    roots: List[np.ndarray] = []
    for x in pts[good]:
        if any(np.abs(x - r).max() <= 1e-6 * (1.0 + np.abs(r).max())
               for r in roots):
            continue
        roots.append(x)

    out: List[Equilibrium] = []
    for x in roots:
        jx = np.array([[jac[i][j].evaluate(x) for j in range(n)]
                       for i in range(n)])
        eigs = np.linalg.eigvals(jx)
        resid = max(abs(fi.evaluate(x)) for fi in f_cl)
        out.append(Equilibrium(point=x, eigenvalues=eigs,
                               stable=bool(eigs.real.max() < 0.0),
                               residual=float(resid)))
    out.sort(key=lambda e: (np.linalg.norm(e.point), tuple(e.point)))
    return out


def check_certificate(cert, system: PolySystem, controller=None,
                      cfg: Optional[SimConfig] = None) -> Dict[str, object]:
    """Empirical spot-check of f_cl.grad(V) + Phi <= C along a trajectory.

    cert supplies (V, C): a BoundCertificate or any object with .V and .C,
    or a plain (V, C) pair.  violated flags max_H > 1e-4 * (1 + |C|).
    """
    if hasattr(cert, "V") and hasattr(cert, "C"):
        v_poly, c_val = cert.V, cert.C
    else:
        v_poly, c_val = cert
    cfg = cfg or SimConfig()
    controls = _resolve_controls(system, controller)
    f_cl, phi_cl = system.closed_loop(controls)
    h_poly = grad_dot(f_cl, v_poly) + phi_cl - c_val
    _, traj = integrate(system, controls, cfg)
    max_h = float(h_poly.eval_many(traj).max())
    return {"max_H": max_h,
            "violated": bool(max_h > 1e-4 * (1.0 + abs(c_val)))}


# ----------------------------------------------------------------------
# the eps sweep

@dataclass
class SweepBoundOptions:
    """Bound columns for the sweep; taken from a solved expansion chain."""

    C0: float
    C1: float
    residuals: List[Polynomial] = field(default_factory=list)
    kappa: float = 0.5
    d_v: int = 4
    d_s: int = 2
    rho: float = 1.0
    relax: bool = True
    refine: bool = True   # False fills only C_linear (no SDP solves)

    @classmethod
    def from_controller(cls, ctrl: Controller, **kw) -> "SweepBoundOptions":
        return cls(C0=ctrl.C0, C1=ctrl.C1,
                   residuals=list(ctrl.residuals), kappa=ctrl.kappa, **kw)


@dataclass
class SweepRow:
    eps: float
    phi_bar: float
    converged: bool
    C_eps: float
    C_eps_relaxed: float
    C_linear: float
    n_equilibria: int
    stabilized: bool
    error: str = ""


CSV_COLUMNS = ["eps", "phi_bar", "converged", "C_eps", "C_eps_relaxed",
               "C_linear", "n_equilibria", "stabilized"]


@dataclass
class SweepResult:
    rows: List[SweepRow]
    eps1: Optional[float]
    eps2: Optional[float]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([
                    repr(r.eps), repr(r.phi_bar),
                    "true" if r.converged else "false",
                    repr(r.C_eps), repr(r.C_eps_relaxed), repr(r.C_linear),
                    r.n_equilibria,
                    "true" if r.stabilized else "false",
                ])


def _sweep_workers(n_rows: int) -> int:
    cap = os.environ.get("AVGBOUND_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_rows, 8 if cap is None else limit))


def sweep_eps(system: PolySystem, u1, eps_list: Sequence[float],
              cfg: Optional[SimConfig] = None,
              bound_opts: Optional[SweepBoundOptions] = None,
              grid: Tuple[float, float, float] = (-3.0, 3.0, 1.0),
              detect: bool = True) -> SweepResult:
    """One row per eps: measured average, certified bounds, equilibria.

    u1 is the fixed first-order feedback shape (one polynomial per input);
    row eps applies u = eps * u1.  Rows run in parallel (AVGBOUND_THREADS
    caps the pool).  With detect=True the first stabilized eps (eps1) and
    the first eps with nonzero equilibria (eps2) are refined by bisection
    to 1e-4 resolution after the coarse pass.
    """
    cfg = cfg or SimConfig()
    if isinstance(u1, Polynomial):
        u1 = [u1]
    u1 = list(u1)
    if len(u1) != system.n_inputs:
        raise ValueError("one first-order feedback polynomial per input")
    eps_sorted = sorted(float(e) for e in eps_list)

    def controls_at(eps: float) -> List[Polynomial]:
        return [eps * u for u in u1]

    def stabilized_at(eps: float) -> bool:
        try:
            _, traj = integrate(system, controls_at(eps), cfg)
        except RuntimeError:
            return False
        return bool(np.linalg.norm(traj[-1]) < 1e-3)

    def nonzero_equilibria_at(eps: float) -> int:
        eqs = find_equilibria(system, controls_at(eps), grid=grid)
        return sum(1 for e in eqs
                   if np.linalg.norm(e.point) > 1e-6)

    def make_row(eps: float) -> SweepRow:
        nan = float("nan")
        c_eps = c_rel = c_lin = nan
        try:
            rep = time_average(system, controls_at(eps), cfg)
            eqs = find_equilibria(system, controls_at(eps), grid=grid)
            phi_bar, converged = rep.phi_bar, rep.converged
            stabilized, n_eq = rep.stabilized, len(eqs)
            err = ""
        except RuntimeError as exc:
            phi_bar, converged, stabilized, n_eq = nan, False, False, 0
            err = str(exc)
        if bound_opts is not None:
            c_lin = bound_opts.C0 + eps * bound_opts.C1
            if bound_opts.refine:
                ctrl = Controller(
                    state_names=list(system.state_names),
                    input_names=list(system.input_names),
                    epsilon=eps, kappa=bound_opts.kappa,
                    u_terms=[list(u1)], C0=bound_opts.C0, C1=bound_opts.C1,
                    bound=bound_opts.C0
                    + eps * bound_opts.kappa * bound_opts.C1,
                    bound_label="unverified (asymptotic)", mode="free",
                    residuals=list(bound_opts.residuals))
                plain = refine_fixed_eps(system, ctrl, d_v=bound_opts.d_v)
                c_eps = plain.C
                if bound_opts.relax and bound_opts.residuals:
                    relaxed = refine_fixed_eps(
                        system, ctrl, d_v=bound_opts.d_v, relax=True,
                        d_s=bound_opts.d_s, rho=bound_opts.rho)
                    c_rel = relaxed.C
        return SweepRow(eps=eps, phi_bar=phi_bar, converged=converged,
                        C_eps=c_eps, C_eps_relaxed=c_rel, C_linear=c_lin,
                        n_equilibria=n_eq, stabilized=stabilized, error=err)

    workers = _sweep_workers(len(eps_sorted))
    if workers > 1 and len(eps_sorted) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(make_row, eps_sorted))
    else:
        rows = [make_row(e) for e in eps_sorted]

    eps1 = eps2 = None
    if detect:
        eps1 = _first_transition(rows, eps_sorted, stabilized_at,
                                 lambda r: r.stabilized)
        eps2 = _first_transition(rows, eps_sorted,
                                 lambda e: nonzero_equilibria_at(e) > 0,
                                 lambda r: r.n_equilibria > 1)
    return SweepResult(rows=rows, eps1=eps1, eps2=eps2)


def _first_transition(rows: List[SweepRow], eps_sorted: List[float],
                      predicate, row_flag) -> Optional[float]:
    """Bisect the first coarse-grid onset of row_flag to 1e-4 resolution."""
    hit = next((i for i, r in enumerate(rows) if row_flag(r)), None)
    if hit is None:
        return None
    hi = eps_sorted[hit]
    if hit == 0:
        return hi
    lo = eps_sorted[hit - 1]
    while hi - lo > 1e-4:
        mid = 0.5 * (lo + hi)
        if predicate(mid):
            hi = mid
        else:
            lo = mid
    return hi
