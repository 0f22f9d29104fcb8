"""Compile sum-of-squares feasibility/optimization programs to block SDPs.

A program holds scalar decision variables and polynomial decision variables
(polynomials whose coefficients are decisions).  Affine combinations of
these are DecisionPoly objects; requiring one to be a sum of squares
attaches a Gram matrix block zᵀQz over the monomial basis z of half the
(padded-even) degree, with one linear equality per matched monomial.
Requiring one to vanish identically produces pure equality rows.

The compiled SdpProblem is solved by avgbound.sdp_solver; SosSolution maps
the block/free values back to named decisions, Gram matrices, and explicit
sum-of-squares factorizations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .polynomial import Mono, Polynomial, monomial_basis
from .sdp_solver import SdpConstraint, SdpProblem, SdpSolution, solve


class LinearExpr:
    """Affine expression const + sum(coef * decision) over scalar decisions."""

    __slots__ = ("const", "lin")

    def __init__(self, const: float = 0.0, lin: Optional[Dict[int, float]] = None):
        self.const = float(const)
        self.lin = dict(lin) if lin else {}

    @staticmethod
    def variable(var_id: int) -> "LinearExpr":
        return LinearExpr(0.0, {var_id: 1.0})

    def is_constant(self) -> bool:
        return not self.lin

    def copy(self) -> "LinearExpr":
        return LinearExpr(self.const, self.lin)

    def __add__(self, other):
        if isinstance(other, LinearExpr):
            lin = dict(self.lin)
            for k, v in other.lin.items():
                lin[k] = lin.get(k, 0.0) + v
            return LinearExpr(self.const + other.const, lin)
        if isinstance(other, (int, float)):
            return LinearExpr(self.const + float(other), self.lin)
        return NotImplemented

    __radd__ = __add__

    def __neg__(self):
        return LinearExpr(-self.const, {k: -v for k, v in self.lin.items()})

    def __sub__(self, other):
        if isinstance(other, (LinearExpr, int, float)):
            return self + (-other if isinstance(other, LinearExpr) else -float(other))
        return NotImplemented

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        if isinstance(scalar, (int, float)):
            s = float(scalar)
            return LinearExpr(self.const * s, {k: v * s for k, v in self.lin.items()})
        return NotImplemented

    __rmul__ = __mul__

    def __repr__(self):
        parts = [repr(self.const)] + [f"{v!r}*d{k}" for k, v in sorted(self.lin.items())]
        return " + ".join(parts)


ScalarLike = Union[int, float, LinearExpr]


class DecisionPoly:
    """Polynomial in the state variables with affine-in-decisions coefficients."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Optional[Dict[Mono, LinearExpr]] = None):
        self.nvars = nvars
        self.terms = {}
        if terms:
            for mono, expr in terms.items():
                if expr.lin or expr.const != 0.0:
                    self.terms[mono] = expr

    @staticmethod
    def from_polynomial(poly: Polynomial) -> "DecisionPoly":
        return DecisionPoly(poly.nvars,
                            {m: LinearExpr(c) for m, c in poly.terms.items()})

    @staticmethod
    def zero(nvars: int) -> "DecisionPoly":
        return DecisionPoly(nvars)

    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(m) for m in self.terms)

    def is_numeric(self) -> bool:
        return all(e.is_constant() for e in self.terms.values())

    def to_polynomial(self) -> Polynomial:
        if not self.is_numeric():
            raise ValueError("polynomial still contains decision variables")
        return Polynomial(self.nvars, {m: e.const for m, e in self.terms.items()})

    def coefficient(self, mono: Mono) -> LinearExpr:
        return self.terms.get(tuple(mono), LinearExpr(0.0)).copy()

    def decision_ids(self) -> List[int]:
        ids = set()
        for e in self.terms.values():
            ids.update(e.lin)
        return sorted(ids)

    def _coerce(self, other) -> "DecisionPoly":
        if isinstance(other, DecisionPoly):
            if other.nvars != self.nvars:
                raise ValueError("mixed state spaces")
            return other
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError("mixed state spaces")
            return DecisionPoly.from_polynomial(other)
        if isinstance(other, (int, float)):
            zero_mono = (0,) * self.nvars
            return DecisionPoly(self.nvars, {zero_mono: LinearExpr(float(other))})
        if isinstance(other, LinearExpr):
            zero_mono = (0,) * self.nvars
            return DecisionPoly(self.nvars, {zero_mono: other.copy()})
        raise TypeError(f"cannot combine DecisionPoly with {type(other).__name__}")

    def __add__(self, other):
        rhs = self._coerce(other)
        terms = {m: e.copy() for m, e in self.terms.items()}
        for m, e in rhs.terms.items():
            terms[m] = terms[m] + e if m in terms else e
        return DecisionPoly(self.nvars, terms)

    __radd__ = __add__

    def __neg__(self):
        return DecisionPoly(self.nvars, {m: -e for m, e in self.terms.items()})

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        """Scalar or numeric-polynomial multiplication; decisions stay affine."""
        if isinstance(other, (int, float)):
            s = float(other)
            return DecisionPoly(self.nvars, {m: e * s for m, e in self.terms.items()})
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError("mixed state spaces")
            terms: Dict[Mono, LinearExpr] = {}
            for m1, e in self.terms.items():
                for m2, c in other.terms.items():
                    m = tuple(a + b for a, b in zip(m1, m2))
                    contrib = e * c
                    terms[m] = terms[m] + contrib if m in terms else contrib
            return DecisionPoly(self.nvars, terms)
        if isinstance(other, DecisionPoly):
            if other.is_numeric():
                return self * other.to_polynomial()
            if self.is_numeric():
                return other * self.to_polynomial()
            raise ValueError("product of two decision polynomials is not affine")
        return NotImplemented

    __rmul__ = __mul__

    def substitute_decisions(self, values: Dict[int, float]) -> Polynomial:
        """Numeric polynomial at a full decision assignment (missing ids -> 0)."""
        terms = {}
        for m, e in self.terms.items():
            val = e.const + sum(c * values.get(k, 0.0) for k, c in e.lin.items())
            terms[m] = val
        return Polynomial(self.nvars, terms)


def grad_dot_decision(vec: Sequence[Polynomial], v: DecisionPoly) -> DecisionPoly:
    """vec . grad(v) for a decision polynomial v (used for f . grad V)."""
    nvars = v.nvars
    out = DecisionPoly.zero(nvars)
    for i in range(nvars):
        dterms: Dict[Mono, LinearExpr] = {}
        for m, e in v.terms.items():
            if m[i] == 0:
                continue
            dm = list(m)
            dm[i] -= 1
            dterms[tuple(dm)] = e * float(m[i])
        out = out + DecisionPoly(nvars, dterms) * vec[i]
    return out


@dataclass
class _SosBlock:
    index: int                 # position in the program's SOS list
    sdp_block: Optional[int]   # block index in the compiled SdpProblem
    basis: List[Mono]
    body: DecisionPoly
    name: str


def _is_zero_expr(e: LinearExpr) -> bool:
    return e.const == 0.0 and all(v == 0.0 for v in e.lin.values())


def _reduced_basis(nvars: int, half: int, body: DecisionPoly) -> List[Mono]:
    """Drop basis monomials whose Gram diagonal is forced to zero.

    A basis monomial z can be removed when its square 2z has an identically
    zero coefficient in the body and no other decomposition as a product of
    two remaining basis monomials: positive semidefiniteness then pins the
    whole z row and column of the Gram matrix to zero.  Iterated to a fixed
    point this removes nothing feasible (bodies of odd top degree get their
    impossible top coefficients turned into explicit linear conditions).
    """
    basis = set(monomial_basis(nvars, half))
    support = {m for m, e in body.terms.items() if not _is_zero_expr(e)}
    changed = True
    while changed:
        changed = False
        for m in sorted(basis, key=lambda t: (-sum(t), t)):
            dm = tuple(2 * a for a in m)
            if dm in support:
                continue
            has_other = False
            for z in basis:
                w = tuple(a - b for a, b in zip(dm, z))
                if w == m and z == m:
                    continue
                if min(w) >= 0 and w in basis:
                    has_other = True
                    break
            if not has_other:
                basis.remove(m)
                changed = True
    return sorted(basis, key=lambda t: (sum(t), t))


@dataclass
class Compiled:
    problem: SdpProblem
    sos_blocks: List[_SosBlock]
    decision_to_free: Dict[int, int]
    fixed_decisions: Dict[int, float]
    obj_const: float


class SosSolution:
    """Solved program with named decision values and Gram factorizations."""

    def __init__(self, program: "SosProgram", compiled: Compiled, sdp: SdpSolution):
        self._program = program
        self._compiled = compiled
        self.sdp = sdp
        self.status = sdp.status
        self.objective = sdp.objective + compiled.obj_const
        values: Dict[int, float] = dict(compiled.fixed_decisions)
        for did, fid in compiled.decision_to_free.items():
            values[did] = float(sdp.free_values[fid]) if sdp.free_values.size else 0.0
        self.decision_values = values

    def value(self, expr: Union[str, LinearExpr]) -> float:
        if isinstance(expr, str):
            kind, obj = self._program._names[expr]
            if kind != "scalar":
                raise ValueError(f"{expr} is not a scalar decision")
            expr = obj
        return expr.const + sum(c * self.decision_values.get(k, 0.0)
                                for k, c in expr.lin.items())

    def poly(self, target: Union[str, DecisionPoly]) -> Polynomial:
        if isinstance(target, str):
            kind, obj = self._program._names[target]
            if kind != "poly":
                raise ValueError(f"{target} is not a polynomial decision")
            target = obj
        return target.substitute_decisions(self.decision_values)

    def gram(self, sos_index: int) -> np.ndarray:
        blk = self._compiled.sos_blocks[sos_index]
        if blk.sdp_block is None:
            return np.zeros((0, 0))
        return self.sdp.block_values[blk.sdp_block]

    def basis(self, sos_index: int) -> List[Mono]:
        return list(self._compiled.sos_blocks[sos_index].basis)

    def sos_factors(self, sos_index: int, clip: float = 1e-9) -> List[Polynomial]:
        """Explicit factors g_i with body = sum g_i^2 (eigenvalues under clip dropped)."""
        blk = self._compiled.sos_blocks[sos_index]
        q = self.gram(sos_index)
        w, u = np.linalg.eigh(q)
        nvars = blk.body.nvars
        factors = []
        for t in range(len(w) - 1, -1, -1):
            if w[t] <= clip:
                break
            coef = np.sqrt(w[t]) * u[:, t]
            terms = {m: float(c) for m, c in zip(blk.basis, coef)}
            factors.append(Polynomial(nvars, terms))
        return factors

    def sos_residual(self, sos_index: int) -> float:
        """Max coefficient gap between the body and its Gram form zᵀQz."""
        blk = self._compiled.sos_blocks[sos_index]
        q = self.gram(sos_index)
        nvars = blk.body.nvars
        recomposed: Dict[Mono, float] = {}
        basis = blk.basis
        for i in range(len(basis)):
            for j in range(i, len(basis)):
                m = tuple(a + b for a, b in zip(basis[i], basis[j]))
                v = q[i, j] * (2.0 if i != j else 1.0)
                recomposed[m] = recomposed.get(m, 0.0) + v
        body = blk.body.substitute_decisions(self.decision_values)
        monos = set(recomposed) | set(body.terms)
        gap = 0.0
        for m in monos:
            gap = max(gap, abs(recomposed.get(m, 0.0) - body.coefficient(m)))
        return gap


class SosProgram:
    """Builder for sum-of-squares programs over a fixed state space."""

    def __init__(self, nvars: int):
        self.nvars = nvars
        self._n_decisions = 0
        self._names: Dict[str, Tuple[str, object]] = {}
        self._bounds: Dict[int, Tuple[Optional[float], Optional[float]]] = {}
        self._sos: List[Tuple[DecisionPoly, str]] = []
        self._zero: List[DecisionPoly] = []
        self._objective: Optional[LinearExpr] = None

    def _fresh(self) -> int:
        self._n_decisions += 1
        return self._n_decisions - 1

    def scalar(self, name: str) -> LinearExpr:
        if name in self._names:
            raise ValueError(f"decision name {name!r} already used")
        expr = LinearExpr.variable(self._fresh())
        self._names[name] = ("scalar", expr)
        return expr

    def poly_var(self, name: str, degree: int, include_constant: bool = True) -> DecisionPoly:
        """Fully parameterized polynomial decision of the given total degree."""
        if name in self._names:
            raise ValueError(f"decision name {name!r} already used")
        terms: Dict[Mono, LinearExpr] = {}
        for m in monomial_basis(self.nvars, degree):
            if not include_constant and sum(m) == 0:
                continue
            terms[m] = LinearExpr.variable(self._fresh())
        dp = DecisionPoly(self.nvars, terms)
        self._names[name] = ("poly", dp)
        return dp

    def add_sos(self, body: Union[DecisionPoly, Polynomial], name: str = "") -> int:
        if isinstance(body, Polynomial):
            body = DecisionPoly.from_polynomial(body)
        if body.nvars != self.nvars:
            raise ValueError("mixed state spaces")
        self._sos.append((body, name or f"sos{len(self._sos)}"))
        return len(self._sos) - 1

    def add_zero(self, body: Union[DecisionPoly, Polynomial]) -> None:
        if isinstance(body, Polynomial):
            body = DecisionPoly.from_polynomial(body)
        if body.nvars != self.nvars:
            raise ValueError("mixed state spaces")
        self._zero.append(body)

    def minimize(self, expr: Union[LinearExpr, float]) -> None:
        if isinstance(expr, (int, float)):
            expr = LinearExpr(float(expr))
        self._objective = expr

    def set_box(self, target: Union[LinearExpr, DecisionPoly], lo: float, hi: float) -> None:
        """Box every decision variable appearing in the target."""
        if isinstance(target, LinearExpr):
            ids: Iterable[int] = target.lin.keys()
        else:
            ids = target.decision_ids()
        for did in ids:
            self._bounds[did] = (float(lo), float(hi))

    # ------------------------------------------------------------------

    def compile(self, reduce_basis: bool = False) -> Compiled:
        rows: List[SdpConstraint] = []
        block_dims: List[int] = []
        sos_blocks: List[_SosBlock] = []
        used: set = set()

        for body, _name in self._sos:
            for e in body.terms.values():
                used.update(e.lin)
        for body in self._zero:
            for e in body.terms.values():
                used.update(e.lin)
        if self._objective is not None:
            used.update(self._objective.lin)
        decision_to_free = {did: t for t, did in enumerate(sorted(used))}

        fixed: Dict[int, float] = {}
        for did in range(self._n_decisions):
            if did not in used:
                lo, hi = self._bounds.get(did, (None, None))
                val = 0.0
                if lo is not None and val < lo:
                    val = lo
                if hi is not None and val > hi:
                    val = hi
                fixed[did] = val

        n_free = len(decision_to_free)
        free_bounds: List[Tuple[Optional[float], Optional[float]]] = \
            [(None, None)] * n_free
        any_bound = False
        for did, fid in decision_to_free.items():
            if did in self._bounds:
                free_bounds[fid] = self._bounds[did]
                any_bound = True

        def free_entries(expr: LinearExpr, scale: float) -> Dict[int, float]:
            out = {}
            for did, c in expr.lin.items():
                if c != 0.0:
                    out[decision_to_free[did]] = scale * c
            return out

        for si, (body, name) in enumerate(self._sos):
            deg = body.degree()
            half = (deg + 1) // 2
            if reduce_basis:
                basis = _reduced_basis(self.nvars, half, body)
            else:
                basis = monomial_basis(self.nvars, half)
            if not basis:
                # nothing representable: the body must vanish identically
                for m in sorted(body.terms, key=lambda t: (sum(t), t)):
                    coef = body.terms[m]
                    rows.append(SdpConstraint(
                        blocks={},
                        free=free_entries(coef, 1.0),
                        rhs=-coef.const,
                    ))
                sos_blocks.append(_SosBlock(si, None, [], body, name))
                continue
            block = len(block_dims)
            block_dims.append(len(basis))
            # group Gram positions by their product monomial
            by_mono: Dict[Mono, List[Tuple[int, int, float]]] = {}
            for i in range(len(basis)):
                for j in range(i, len(basis)):
                    m = tuple(a + b for a, b in zip(basis[i], basis[j]))
                    by_mono.setdefault(m, []).append((i, j, 1.0))
            monos = set(by_mono) | set(body.terms)
            for m in sorted(monos, key=lambda t: (sum(t), t)):
                coef = body.terms.get(m, LinearExpr(0.0))
                entries = by_mono.get(m, [])
                rows.append(SdpConstraint(
                    blocks={block: entries} if entries else {},
                    free=free_entries(coef, -1.0),
                    rhs=coef.const,
                ))
            sos_blocks.append(_SosBlock(si, block, basis, body, name))

        for body in self._zero:
            for m in sorted(body.terms, key=lambda t: (sum(t), t)):
                coef = body.terms[m]
                rows.append(SdpConstraint(
                    blocks={},
                    free=free_entries(coef, 1.0),
                    rhs=-coef.const,
                ))

        obj_free: Dict[int, float] = {}
        obj_const = 0.0
        if self._objective is not None:
            obj_const = self._objective.const
            obj_free = free_entries(self._objective, 1.0)

        problem = SdpProblem(
            block_dims=block_dims,
            n_free=n_free,
            constraints=rows,
            obj_blocks={},
            obj_free=obj_free,
            free_bounds=free_bounds if any_bound else None,
        )
        return Compiled(problem, sos_blocks, decision_to_free, fixed, obj_const)

    def solve(self, tol: float = 1e-8, max_iter: int = 200,
              reduce_basis: bool = False) -> SosSolution:
        compiled = self.compile(reduce_basis=reduce_basis)
        sdp = solve(compiled.problem, tol=tol, max_iter=max_iter)
        return SosSolution(self, compiled, sdp)


def s_procedure_augment(
    program: SosProgram,
    body: DecisionPoly,
    constraints: Sequence[Union[Polynomial, DecisionPoly]],
    degrees: Sequence[int],
    sign: str = "sos",
    name_prefix: str = "S",
) -> Tuple[DecisionPoly, List[DecisionPoly]]:
    """Subtract multiplier-weighted constraint polynomials from the body.

    With sign="sos" each multiplier is itself constrained to be a sum of
    squares (valid when the weighted terms are known non-negative on the
    region of interest); sign="free" leaves them unrestricted, which is
    only meaningful for terms that vanish there.
    """
    if sign not in ("sos", "free"):
        raise ValueError("sign must be 'sos' or 'free'")
    if len(constraints) != len(degrees):
        raise ValueError("one degree per constraint polynomial")
    multipliers = []
    out = body
    for t, (con, deg) in enumerate(zip(constraints, degrees)):
        mult = program.poly_var(f"{name_prefix}{t}", deg)
        if sign == "sos":
            program.add_sos(mult, name=f"{name_prefix}{t}")
        multipliers.append(mult)
        out = out - mult * con
    return out, multipliers
