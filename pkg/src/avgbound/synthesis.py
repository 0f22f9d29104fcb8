"""Small-feedback controller synthesis by series expansion of the bound.

For dx/dt = f(x) + g(x) u with cost Phi(x, u), substitute the expansions
u = sum_{i>=1} eps^i u_i(x), V = sum_{i>=0} eps^i V_i(x),
C = sum_{i>=0} eps^i C_i into

    H = f.grad(V) + sum_c (g_c.grad(V)) u_c + Phi(x, u) - C

and match powers of eps.  Order zero is the uncontrolled bound problem; each
later order i fixes the earlier terms and solves

    min C_i   s.t.   -F_i + sum_{j<i} S_j F_j   is SOS

where F_j is the order-j coefficient of H.  With SOS-signed multipliers every
solved order certifies the pointwise inequality F_i <= 0, so the truncation
C_0 + eps * kappa * C_1 (0 < kappa < 1) bounds the achievable average cost
for all sufficiently small eps.  Free-signed multipliers explore further but
the assembled number is only an asymptotic prediction, and is labeled as
such.

The order-i problems are positively homogeneous in the joint decision tuple
(V_i, u_i, S_j, C_i), so any strictly negative C_i would otherwise scale to
-infinity.  A single box |coefficient| <= rho on every order-i decision
polynomial fixes that gauge completely; only the product eps * u_i is
physically meaningful, so rho is a normalization, not a modeling choice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

from .bound import BoundCertificate, PolySystem
from .polynomial import Mono, Polynomial, grad_dot
from .sos_compiler import (
    DecisionPoly,
    LinearExpr,
    SosProgram,
    grad_dot_decision,
    s_procedure_augment,
)

Coeff = Union[Polynomial, DecisionPoly]


# ----------------------------------------------------------------------
# truncated series arithmetic over (decision) polynomials

def _is_zero_coeff(p: Coeff) -> bool:
    return isinstance(p, Polynomial) and not p.terms


def _snap_poly(poly: Polynomial, rel: float = 1e-9) -> Polynomial:
    """Drop coefficients below rel * max|coefficient| (solver dust)."""
    if not poly.terms:
        return poly
    cut = rel * max(abs(c) for c in poly.terms.values())
    return Polynomial(poly.nvars,
                      {m: c for m, c in poly.terms.items() if abs(c) > cut})


def _tol_ladder(tol: float) -> List[float]:
    return sorted({max(tol, 1e-7), 1e-6, 1e-5})


def _solve_ladder(prog: "SosProgram", tols: Sequence[float], max_iter: int):
    """Solve at the tightest tolerance first, loosening only on failure."""
    sol = None
    for t in tols:
        sol = prog.solve(tol=t, max_iter=max_iter, reduce_basis=True)
        if sol.status == "optimal":
            break
    return sol


def _mul_coeff(a: Coeff, b: Coeff) -> Coeff:
    # keep the decision operand on the left; two decision factors would make
    # the product non-affine and never occur for truncated orders
    if isinstance(a, DecisionPoly):
        return a * b
    if isinstance(b, DecisionPoly):
        return b * a
    return a * b


def _series_add(a: Dict[int, Coeff], b: Dict[int, Coeff]) -> Dict[int, Coeff]:
    out = dict(a)
    for k, p in b.items():
        out[k] = out[k] + p if k in out else p
    return out


def _series_mul(a: Dict[int, Coeff], b: Dict[int, Coeff],
                order: int) -> Dict[int, Coeff]:
    out: Dict[int, Coeff] = {}
    for p, cp in a.items():
        if p > order:
            continue
        for q, cq in b.items():
            if p + q > order:
                continue
            prod = _mul_coeff(cp, cq)
            out[p + q] = out[p + q] + prod if p + q in out else prod
    return out


def _series_pow(s: Dict[int, Coeff], k: int, order: int) -> Dict[int, Coeff]:
    out = s
    for _ in range(k - 1):
        out = _series_mul(out, s, order)
    return out


def _hamiltonian_series(system: PolySystem,
                        v_terms: Sequence[Coeff],
                        u_terms: Sequence[Sequence[Coeff]],
                        order: int) -> Dict[int, Coeff]:
    """Order-indexed coefficients of f.grad(V) + sum_c (g_c.grad(V)) u_c
    + Phi(x, u) for V = sum eps^i V_i and u_c = sum_{i>=1} eps^i u_{i,c}."""
    n, p = system.n_states, system.n_inputs

    def gdot(vec: Sequence[Polynomial], v: Coeff) -> Coeff:
        if isinstance(v, DecisionPoly):
            return grad_dot_decision(vec, v)
        return grad_dot(vec, v)

    coeffs: Dict[int, Coeff] = {}
    # transport term f.grad(V)
    for j, vj in enumerate(v_terms):
        if j > order or _is_zero_coeff(vj):
            continue
        coeffs = _series_add(coeffs, {j: gdot(system.f, vj)})

    # per-channel input series, orders >= 1
    u_series: List[Dict[int, Coeff]] = []
    for c in range(p):
        sc: Dict[int, Coeff] = {}
        for j in range(1, len(u_terms)):
            uc = u_terms[j][c]
            if j <= order and not _is_zero_coeff(uc):
                sc[j] = uc
        u_series.append(sc)

    # actuation term sum_c (g_c.grad(V)) u_c
    for c in range(p):
        if not u_series[c]:
            continue
        gcol = [system.g[i][c] for i in range(n)]
        gv: Dict[int, Coeff] = {}
        for j, vj in enumerate(v_terms):
            if j > order or _is_zero_coeff(vj):
                continue
            gv[j] = gdot(gcol, vj)
        coeffs = _series_add(coeffs, _series_mul(gv, u_series[c], order))

    # cost Phi(x, u) with the input series substituted
    for mono, cval in system.phi.terms.items():
        a, b = mono[:n], mono[n:]
        x_part = Polynomial(n, {a: cval})
        term: Dict[int, Coeff] = {0: x_part}
        feasible = True
        for c in range(p):
            if b[c] == 0:
                continue
            if not u_series[c]:
                feasible = False
                break
            term = _series_mul(term, _series_pow(u_series[c], b[c], order),
                               order)
        if feasible:
            coeffs = _series_add(coeffs, term)
    return coeffs


# ----------------------------------------------------------------------
# expansion driver

@dataclass
class StepOptions:
    """Degrees, multiplier sign, and the gauge box for one expansion order."""

    d_v: int = 2
    d_u: int = 2
    d_s: Optional[Sequence[int]] = None   # per earlier order; default: d_u
    multiplier_sign: str = "sos"          # "sos" certifies, "free" explores
    rho: float = 400.0                    # box on every order-i coefficient
    tol: float = 1e-8
    max_iter: int = 200


@dataclass
class ExpansionTerm:
    order: int
    C: float
    V: Polynomial
    u: List[Polynomial]
    multipliers: List[Polynomial]
    residual: Polynomial
    status: str
    multiplier_sign: str
    sos_residual: float
    snapped: bool = False


class ExpansionState:
    """Holds solved expansion orders and produces the next one on demand."""

    def __init__(self, system: PolySystem):
        self.system = system
        self.terms: List[ExpansionTerm] = []

    def _fixed_series(self, upto: int, v_extra: Coeff = None,
                      u_extra: Optional[List[Coeff]] = None):
        n, p = self.system.n_states, self.system.n_inputs
        v_terms: List[Coeff] = [t.V for t in self.terms[:upto]]
        u_terms: List[List[Coeff]] = [[Polynomial.zero(n)] * p
                                      for _ in range(len(v_terms))]
        for j in range(1, min(upto, len(self.terms))):
            u_terms[j] = list(self.terms[j].u)
        if v_extra is not None:
            v_terms.append(v_extra)
            u_terms.append(u_extra if u_extra is not None
                           else [Polynomial.zero(n)] * p)
        return v_terms, u_terms

    def reconstruct_residual(self, j: int) -> Polynomial:
        """Recompute F_j from the stored series terms alone."""
        if not 0 <= j < len(self.terms):
            raise IndexError("no solved term at that order")
        v_terms, u_terms = self._fixed_series(j + 1)
        coeffs = _hamiltonian_series(self.system, v_terms, u_terms, j)
        n = self.system.n_states
        fj = coeffs.get(j, Polynomial.zero(n))
        if isinstance(fj, DecisionPoly):
            fj = fj.to_polynomial()
        return fj - Polynomial.constant(n, self.terms[j].C)

    def _origin_pinned(self) -> bool:
        """True when the order-i optimum is exactly zero by inspection.

        With SOS-signed multipliers the composite constraint evaluated at the
        origin reads C_i >= -sum S_j(0) F_j(0).  When the drift vanishes at
        the origin, every control term vanishes there too (controls carry no
        constant term), so F_i(0) = -C_i; if additionally every stored
        residual satisfies F_j(0) <= 0, the right side is nonnegative and
        C_i >= 0 for every feasible point.  The all-zero increment attains
        C_i = 0, so zero is the exact optimum regardless of solver health.
        """
        sys_ = self.system
        if any(abs(fk.terms.get((0,) * sys_.n_states, 0.0)) > 1e-12
               for fk in sys_.f):
            return False
        scale = max(1.0, abs(self.terms[0].C) if self.terms else 1.0)
        for t in self.terms:
            if t.residual.terms.get((0,) * sys_.n_states, 0.0) > 1e-9 * scale:
                return False
        return True

    def _zero_term(self, i: int, n_mults: int, sign: str,
                   status: str) -> ExpansionTerm:
        n, p = self.system.n_states, self.system.n_inputs
        zero = Polynomial.zero(n)
        term = ExpansionTerm(
            order=i, C=0.0, V=zero, u=[zero] * p,
            multipliers=[zero] * n_mults, residual=zero,
            status=status, multiplier_sign=sign,
            sos_residual=0.0, snapped=True)
        self.terms.append(term)
        # the zero increment keeps any fixed lower-order contributions
        # (input-product terms) in the residual
        term.residual = self.reconstruct_residual(i)
        return term

    def step(self, options: Optional[StepOptions] = None) -> ExpansionTerm:
        opts = options or StepOptions()
        if opts.d_v <= 0 or opts.d_v % 2:
            raise ValueError("V degree must be a positive even integer")
        if opts.multiplier_sign not in ("sos", "free"):
            raise ValueError("multiplier_sign must be 'sos' or 'free'")
        i = len(self.terms)
        sys_ = self.system
        n, p = sys_.n_states, sys_.n_inputs
        if i >= 1 and p == 0:
            raise ValueError("controlled orders need at least one input")

        prog = SosProgram(n)
        c_expr = prog.scalar("C")
        v_dec = prog.poly_var("V", opts.d_v, include_constant=False)
        u_dec: List[DecisionPoly] = []
        if i >= 1:
            # controls vanish at the origin so the uncontrolled equilibrium
            # survives actuation
            u_dec = [prog.poly_var(f"u{c}", opts.d_u, include_constant=False)
                     for c in range(p)]

        v_terms, u_terms = self._fixed_series(i, v_extra=v_dec,
                                              u_extra=list(u_dec) or None)
        coeffs = _hamiltonian_series(sys_, v_terms, u_terms, i)
        f_raw = coeffs.get(i, Polynomial.zero(n))
        if not isinstance(f_raw, DecisionPoly):
            f_raw = DecisionPoly.from_polynomial(f_raw)
        f_i = f_raw - c_expr_poly(n, c_expr)
        body = -f_i

        mults: List[DecisionPoly] = []
        if i >= 1:
            degrees = list(opts.d_s) if opts.d_s is not None else [opts.d_u] * i
            if len(degrees) != i:
                raise ValueError("need one multiplier degree per earlier order")
            constraints = [-_snap_poly(t.residual) for t in self.terms]
            body, mults = s_procedure_augment(
                prog, body, constraints, degrees, sign=opts.multiplier_sign)
            # one gauge box on every order-i decision; the problem is jointly
            # homogeneous, so boxing only part of the tuple leaves scaling
            # directions that drive C_i to solver-dependent garbage
            for dec in [*u_dec, v_dec, *mults]:
                prog.set_box(dec, -opts.rho, opts.rho)

        body_idx = prog.add_sos(body, name=f"order{i}")
        prog.minimize(c_expr)
        pinned = (i >= 1 and opts.multiplier_sign == "sos"
                  and self._origin_pinned())
        # box rows of magnitude rho dominate the primal residual scale, so
        # boxed solves get a ladder of looser stopping tolerances; when the
        # optimum is pinned at zero a loose rung could only return noise, so
        # that case keeps a single attempt plus the analytic fallback
        if i == 0:
            tols = [opts.tol]
        elif pinned:
            tols = [max(opts.tol, 1e-7)]
        else:
            tols = _tol_ladder(opts.tol)
        sol = _solve_ladder(prog, tols, opts.max_iter)

        status = sol.status
        scale = max(1.0, abs(self.terms[0].C) if self.terms else 1.0)
        if status != "optimal":
            if pinned:
                # exact optimum known analytically; the interior-point method
                # stalls here because the SOS-signed problem has no strictly
                # feasible point (the top-degree Gram diagonal is pinched
                # against the multiplier's own cone)
                return self._zero_term(i, len(mults), opts.multiplier_sign,
                                       status="optimal")
            best = sol.value(c_expr)
            if i >= 1 and best == best and best < -1e6 * scale:
                raise RuntimeError("homogeneous objective escape; tighten rho")
            term = ExpansionTerm(
                order=i, C=float("nan"), V=Polynomial.zero(n),
                u=[Polynomial.zero(n)] * (p if i >= 1 else 0),
                multipliers=[], residual=Polynomial.zero(n), status=status,
                multiplier_sign=opts.multiplier_sign,
                sos_residual=float("nan"))
            return term

        c_val = sol.value(c_expr)
        snap_tol = (1e-2 if pinned else 1e-6) * scale
        if i >= 1 and opts.multiplier_sign == "sos" and abs(c_val) <= snap_tol:
            # the optimum face contains the all-zero increment; pick that
            # representative so the residual chain stays exact
            return self._zero_term(i, len(mults), opts.multiplier_sign,
                                   status=status)

        v_sol = sol.poly(v_dec)
        u_sol = [sol.poly(ud) for ud in u_dec]
        m_sol = [sol.poly(md) for md in mults]
        residual = sol.poly(f_i)
        term = ExpansionTerm(
            order=i, C=c_val, V=v_sol, u=u_sol, multipliers=m_sol,
            residual=residual, status=status,
            multiplier_sign=opts.multiplier_sign,
            sos_residual=sol.sos_residual(body_idx), snapped=False)
        self.terms.append(term)
        return term

    def assemble(self, epsilon: float, kappa: float) -> "Controller":
        if not self.terms:
            raise ValueError("run at least the order-zero step first")
        c0 = self.terms[0].C
        c1 = self.terms[1].C if len(self.terms) > 1 else 0.0
        certified = all(t.multiplier_sign == "sos" for t in self.terms[1:])
        label = "certified for small eps" if certified \
            else "unverified (asymptotic)"
        return Controller(
            state_names=list(self.system.state_names),
            input_names=list(self.system.input_names),
            epsilon=float(epsilon),
            kappa=float(kappa),
            u_terms=[list(t.u) for t in self.terms[1:]],
            C0=c0,
            C1=c1,
            bound=c0 + epsilon * kappa * c1,
            bound_label=label,
            mode="sos" if certified else "free",
            residuals=[t.residual for t in self.terms],
        )


def c_expr_poly(nvars: int, expr: LinearExpr) -> DecisionPoly:
    return DecisionPoly(nvars, {(0,) * nvars: expr})


# ----------------------------------------------------------------------
# assembled controller

def _poly_to_dict(poly: Polynomial) -> Dict[str, float]:
    return {",".join(str(e) for e in mono): c
            for mono, c in sorted(poly.terms.items())}


def _poly_from_dict(nvars: int, data: Dict[str, float]) -> Polynomial:
    terms: Dict[Mono, float] = {}
    for key, c in data.items():
        mono = tuple(int(part) for part in key.split(","))
        if len(mono) != nvars:
            raise ValueError(f"exponent key {key!r} does not match {nvars} variables")
        terms[mono] = float(c)
    return Polynomial(nvars, terms)


@dataclass
class Controller:
    """Feedback u_c(x) = sum_i eps^i u_{i,c}(x) with its truncated bound."""

    state_names: List[str]
    input_names: List[str]
    epsilon: float
    kappa: float
    u_terms: List[List[Polynomial]]   # index 0 holds the order-1 terms
    C0: float
    C1: float
    bound: float
    bound_label: str
    mode: str
    residuals: List[Polynomial] = field(default_factory=list)

    def __post_init__(self):
        # eps = 0 is the uncontrolled limit (u identically zero, bound C0)
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie strictly between 0 and 1")

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    def control_polys(self, epsilon: Optional[float] = None) -> List[Polynomial]:
        """Per-channel feedback polynomials at the given (default stored) eps."""
        eps = self.epsilon if epsilon is None else float(epsilon)
        n, p = self.n_states, self.n_inputs
        out = [Polynomial.zero(n) for _ in range(p)]
        for k, row in enumerate(self.u_terms, start=1):
            w = eps ** k
            for c in range(p):
                out[c] = out[c] + row[c] * w
        return out

    def to_dict(self) -> Dict[str, object]:
        return {
            "state_names": list(self.state_names),
            "input_names": list(self.input_names),
            "epsilon": self.epsilon,
            "kappa": self.kappa,
            "C0": self.C0,
            "C1": self.C1,
            "bound": self.bound,
            "bound_label": self.bound_label,
            "mode": self.mode,
            "u_terms": [[_poly_to_dict(u) for u in row]
                        for row in self.u_terms],
            "residuals": [_poly_to_dict(r) for r in self.residuals],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "Controller":
        n = len(data["state_names"])
        return cls(
            state_names=list(data["state_names"]),
            input_names=list(data["input_names"]),
            epsilon=float(data["epsilon"]),
            kappa=float(data["kappa"]),
            u_terms=[[_poly_from_dict(n, u) for u in row]
                     for row in data["u_terms"]],
            C0=float(data["C0"]),
            C1=float(data["C1"]),
            bound=float(data["bound"]),
            bound_label=str(data["bound_label"]),
            mode=str(data["mode"]),
            residuals=[_poly_from_dict(n, r)
                       for r in data.get("residuals", [])],
        )

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Controller":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ----------------------------------------------------------------------
# fixed-eps refinement

def refine_fixed_eps(system: PolySystem, controller: Controller, d_v: int,
                     relax: bool = False, d_s: int = 2,
                     epsilon: Optional[float] = None, rho: float = 1.0,
                     tol: float = 1e-8,
                     max_iter: int = 200) -> BoundCertificate:
    """Upper bound for the closed loop at a fixed eps.

    Substitutes the assembled feedback into the dynamics and cost and solves
    the plain bound problem; with relax=True, SOS-signed multipliers against
    the stored expansion residuals widen the search.  The relaxed optimum is
    never worse than the plain one since zero multipliers recover it.

    Residuals from free-signed steps are non-positive only on the zero set
    of the order-zero residual, so an unbounded multiplier can buy arbitrary
    objective improvement from the region where they are positive; the
    multiplier coefficients are therefore box-bounded by rho, and the
    relaxed value scales with that multiplier budget.  Read it as an
    attractor-local estimate rather than a global certificate; a negative
    value means the relaxation has left the certificate regime entirely.
    """
    if d_v <= 0 or d_v % 2:
        raise ValueError("certificate degree must be a positive even integer")
    controls = controller.control_polys(epsilon)
    f_cl, phi_cl = system.closed_loop(controls)
    n = system.n_states
    prog = SosProgram(n)
    c_expr = prog.scalar("C")
    v_dec = prog.poly_var("V", d_v, include_constant=False)
    body = -(grad_dot_decision(f_cl, v_dec) + phi_cl - c_expr)
    mults: List[DecisionPoly] = []
    if relax and controller.residuals:
        constraints = [-_snap_poly(r) for r in controller.residuals if r.terms]
        if constraints:
            body, mults = s_procedure_augment(
                prog, body, constraints, [d_s] * len(constraints), sign="sos")
            for mdec in mults:
                prog.set_box(mdec, -rho, rho)
    body_idx = prog.add_sos(body, name="closed_loop")
    prog.minimize(c_expr)
    if mults:
        sol = _solve_ladder(prog, _tol_ladder(tol), max_iter)
    else:
        sol = prog.solve(tol=tol, max_iter=max_iter, reduce_basis=True)
    ok = sol.status == "optimal"
    c_val = sol.value(c_expr) if ok else float("nan")
    v_sol = sol.poly(v_dec) if ok else Polynomial.zero(n)
    return BoundCertificate(
        kind="upper",
        status=sol.status,
        C=c_val,
        V=v_sol,
        d_v=d_v,
        sos_residual=sol.sos_residual(body_idx) if ok else float("nan"),
        sdp_residuals=dict(sol.sdp.residuals),
        iterations=sol.sdp.iterations,
        sizes={"relaxed": bool(mults), "n_multipliers": len(mults),
               "multiplier_budget": rho if mults else 0.0},
        sos_factors=sol.sos_factors(body_idx) if ok else [],
    )
