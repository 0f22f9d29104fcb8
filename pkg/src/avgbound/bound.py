"""Rigorous bounds on long-time averages of polynomial dynamical systems.

For dx/dt = f(x) and a cost Phi(x), any differentiable V gives the identity
that the long-time average of f.grad(V) vanishes on bounded trajectories, so

    f(x).grad(V)(x) + Phi(x) <= C  for all x

implies every bounded trajectory has time-averaged cost at most C.  Upper
bounds minimize C subject to the negated inequality being a sum of squares;
lower bounds maximize C with the sign flipped.  A separate certificate
verifies that a ball of squared radius 2*beta absorbs all trajectories,
which supplies the boundedness hypothesis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .polynomial import Polynomial, PolyVec, parse_poly
from .sos_compiler import (
    DecisionPoly,
    SosProgram,
    grad_dot_decision,
    s_procedure_augment,
)


@dataclass
class PolySystem:
    """Polynomial control system dx/dt = f(x) + g(x) u with cost Phi(x, u).

    f entries are polynomials in the n state variables; g has one column per
    input (also polynomials in the states); phi is a polynomial in the
    n + p variables ordered states-then-inputs.
    """

    state_names: List[str]
    input_names: List[str]
    f: List[Polynomial]
    g: List[List[Polynomial]]
    phi: Polynomial

    def __post_init__(self):
        n, p = self.n_states, self.n_inputs
        if len(self.f) != n:
            raise ValueError("one drift polynomial per state required")
        for fi in self.f:
            if fi.nvars != n:
                raise ValueError("drift polynomials must live on the state space")
        if len(self.g) != n:
            raise ValueError("one actuation row per state required")
        for row in self.g:
            if len(row) != p:
                raise ValueError("one actuation column per input required")
            for gij in row:
                if gij.nvars != n:
                    raise ValueError("actuation polynomials must live on the state space")
        if self.phi.nvars != n + p:
            raise ValueError("cost must be a polynomial in states then inputs")

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    def phi_states_only(self) -> Polynomial:
        """Cost with all inputs set to zero, as a polynomial in the states."""
        n = self.n_states
        assignments = [Polynomial.variable(n, i) for i in range(n)]
        assignments += [Polynomial.zero(n)] * self.n_inputs
        return self.phi.compose(assignments)

    def closed_loop(self, controls: Sequence[Polynomial]):
        """Substitute u = controls(x); returns (f_closed, phi_closed)."""
        n, p = self.n_states, self.n_inputs
        if len(controls) != p:
            raise ValueError("one control polynomial per input required")
        for u in controls:
            if u.nvars != n:
                raise ValueError("controls must be polynomials in the states")
        f_closed = []
        for i in range(n):
            fi = self.f[i]
            for j in range(p):
                fi = fi + self.g[i][j] * controls[j]
            f_closed.append(fi)
        assignments = [Polynomial.variable(n, i) for i in range(n)] + list(controls)
        phi_closed = self.phi.compose(assignments)
        return f_closed, phi_closed


@dataclass
class BoundCertificate:
    kind: str                 # "upper" or "lower"
    status: str
    C: float
    V: Polynomial
    d_v: int
    sos_residual: float
    sdp_residuals: Dict[str, float]
    iterations: int
    sizes: Dict[str, object] = field(default_factory=dict)
    sos_factors: List[Polynomial] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status == "optimal"


@dataclass
class AttractorCertificate:
    feasible: bool
    status: str
    beta: float
    d_s: int
    S: Optional[Polynomial]
    sos_residual: float


def average_bound_program(f: PolyVec, phi: Polynomial, d_v: int,
                          sense: str) -> SosProgram:
    """Unsolved SOS program whose optimum is the degree-d_v average bound."""
    if d_v <= 0 or d_v % 2:
        raise ValueError("certificate degree must be a positive even integer")
    if sense not in ("upper", "lower"):
        raise ValueError("sense must be 'upper' or 'lower'")
    n = phi.nvars
    prog = SosProgram(n)
    c = prog.scalar("C")
    v = prog.poly_var("V", d_v, include_constant=False)
    drift = grad_dot_decision(f, v)
    if sense == "upper":
        body = -(drift + phi - c)
        prog.minimize(c)
    else:
        body = drift + phi - c
        prog.minimize(-c)
    prog.add_sos(body, name="bound")
    return prog


def _average_bound(f: PolyVec, phi: Polynomial, d_v: int, sense: str,
                   tol: float, max_iter: int) -> BoundCertificate:
    prog = average_bound_program(f, phi, d_v, sense)
    idx = 0   # the single SOS block added by the builder
    sol = prog.solve(tol=tol, max_iter=max_iter, reduce_basis=True)
    ok = sol.status == "optimal"
    compiled_problem = sol._compiled.problem
    return BoundCertificate(
        kind=sense,
        status=sol.status,
        C=sol.value("C") if ok else float("nan"),
        V=sol.poly("V") if ok else Polynomial.zero(n),
        d_v=d_v,
        sos_residual=sol.sos_residual(idx) if ok else float("nan"),
        sdp_residuals=dict(sol.sdp.residuals),
        iterations=sol.sdp.iterations,
        sizes={
            "gram_blocks": [d for d in compiled_problem.block_dims],
            "equalities": len(compiled_problem.constraints),
            "decisions": compiled_problem.n_free,
        },
        sos_factors=sol.sos_factors(idx) if ok else [],
    )


def upper_bound(system: PolySystem, d_v: int,
                controls: Optional[Sequence[Polynomial]] = None,
                tol: float = 1e-8, max_iter: int = 200) -> BoundCertificate:
    """Least C with f.grad(V) + Phi <= C certifiable at degree d_v.

    With controls given, the bound applies to the closed-loop system and the
    cost has the controls substituted in.
    """
    if controls is None:
        f, phi = system.f, system.phi_states_only()
    else:
        f, phi = system.closed_loop(controls)
    return _average_bound(f, phi, d_v, "upper", tol, max_iter)


def lower_bound(system: PolySystem, d_v: int,
                controls: Optional[Sequence[Polynomial]] = None,
                tol: float = 1e-8, max_iter: int = 200) -> BoundCertificate:
    """Greatest C with f.grad(V) + Phi >= C certifiable at degree d_v."""
    if controls is None:
        f, phi = system.f, system.phi_states_only()
    else:
        f, phi = system.closed_loop(controls)
    return _average_bound(f, phi, d_v, "lower", tol, max_iter)


def attractor_certificate(system: PolySystem, beta: float, d_s: int,
                          controls: Optional[Sequence[Polynomial]] = None,
                          tol: float = 1e-8, max_iter: int = 200) -> AttractorCertificate:
    """Certify that the ball x.x <= 2*beta absorbs all trajectories.

    Looks for an SOS multiplier S with  -x.f(x) - S(x) (x.x/2 - beta)  SOS,
    which makes the squared radius decrease outside the ball.
    """
    if d_s < 0 or d_s % 2:
        raise ValueError("multiplier degree must be a nonnegative even integer")
    if controls is None:
        f = system.f
    else:
        f, _phi = system.closed_loop(controls)
    n = system.n_states
    radial = Polynomial.zero(n)
    ball = Polynomial.constant(n, -float(beta))
    for i in range(n):
        xi = Polynomial.variable(n, i)
        radial = radial + xi * f[i]
        ball = ball + 0.5 * (xi * xi)
    prog = SosProgram(n)
    body = DecisionPoly.from_polynomial(-radial)
    body, mults = s_procedure_augment(prog, body, [ball], [d_s], sign="sos")
    idx = prog.add_sos(body, name="radial")
    prog.minimize(0.0)
    sol = prog.solve(tol=tol, max_iter=max_iter, reduce_basis=True)
    ok = sol.status == "optimal"
    return AttractorCertificate(
        feasible=ok,
        status=sol.status,
        beta=float(beta),
        d_s=d_s,
        S=sol.poly("S0") if ok else None,
        sos_residual=sol.sos_residual(idx) if ok else float("nan"),
    )


def cylinder_wake_system() -> PolySystem:
    """Three-mode vortex-shedding model with one body-force input.

    States (a1, a2, a3) follow a rotation at unit-order frequency, linear
    growth of the oscillation pair, a shift mode fed quadratically by the
    oscillation amplitude, and bilinear saturation; the input enters the
    first two components with fixed gains.  Cost is the fluctuation energy
    plus the control effort.
    """
    names = ["a1", "a2", "a3"]
    f = [
        parse_poly("0.05439*a1 - 0.9232*a2 + 0.03504*a2*a3 - 0.02116*a1*a3", names),
        parse_poly("0.9232*a1 + 0.05439*a2 - 0.03504*a1*a3 - 0.02116*a2*a3", names),
        parse_poly("0.02095*a1^2 + 0.02095*a2^2 - 0.05347*a3", names),
    ]
    g = [
        [parse_poly("-0.15402", names)],
        [parse_poly("0.046387", names)],
        [parse_poly("0", names)],
    ]
    phi = parse_poly("0.5*a1^2 + 0.5*a2^2 + 0.5*a3^2 + u^2", names + ["u"])
    return PolySystem(names, ["u"], f, g, phi)
