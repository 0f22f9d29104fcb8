"""Dense primal-dual interior-point solver for small block SDPs.

Problem form:

    minimize    sum_k <C_k, X_k> + d.f
    subject to  sum_k <A_jk, X_k> + F_j . f = b_j     (j = 1..m)
                X_k >= 0 (PSD),  f free, optionally lo_i <= f_i <= hi_i

Blocks are dense PSD matrices; a negative entry in block_dims marks a
diagonal block (vector of non-negative scalars), mirroring the SDPA sparse
format convention.  Box bounds on free variables are eliminated up front by
shifting into non-negative slacks collected in an extra diagonal block.

The algorithm is a path-following method with Nesterov-Todd scaling and a
Mehrotra-style predictor-corrector.  All linear algebra is dense
(numpy/scipy); iterates keep X, S strictly positive definite and the
equality/dual residuals shrink geometrically, so Karush-Kuhn-Tucker
residuals at optimality are assertable from the returned solution.

Also here: SDPA sparse export/import (.dat-s) used for cross-validation
against external solvers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

Entry = Tuple[int, int, float]  # (row, col, value) with row <= col, symmetric

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_UNBOUNDED = "unbounded"
STATUS_MAX_ITERATIONS = "max_iterations"
STATUS_NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class SdpConstraint:
    """One equality row: sum_k <blocks[k], X_k> + sum_i free[i]*f_i = rhs."""

    blocks: Dict[int, List[Entry]] = field(default_factory=dict)
    free: Dict[int, float] = field(default_factory=dict)
    rhs: float = 0.0


@dataclass
class SdpProblem:
    """Block SDP data; block_dims entries < 0 denote diagonal blocks."""

    block_dims: List[int]
    n_free: int
    constraints: List[SdpConstraint]
    obj_blocks: Dict[int, List[Entry]] = field(default_factory=dict)
    obj_free: Dict[int, float] = field(default_factory=dict)
    free_bounds: Optional[List[Tuple[Optional[float], Optional[float]]]] = None

    def validate(self) -> None:
        nb = len(self.block_dims)
        for dim in self.block_dims:
            if dim == 0:
                raise ValueError("zero-dimensional block")
        if self.free_bounds is not None and len(self.free_bounds) != self.n_free:
            raise ValueError("free_bounds length must equal n_free")

        def check_entries(k: int, entries: List[Entry]) -> None:
            if not 0 <= k < nb:
                raise ValueError(f"block index {k} out of range")
            size = abs(self.block_dims[k])
            diag = self.block_dims[k] < 0
            for (i, j, _v) in entries:
                if not (0 <= i <= j < size):
                    raise ValueError(f"entry ({i},{j}) out of range for block {k}")
                if diag and i != j:
                    raise ValueError(f"off-diagonal entry in diagonal block {k}")

        for con in self.constraints:
            for k, entries in con.blocks.items():
                check_entries(k, entries)
            for i in con.free:
                if not 0 <= i < self.n_free:
                    raise ValueError(f"free index {i} out of range")
        for k, entries in self.obj_blocks.items():
            check_entries(k, entries)
        for i in self.obj_free:
            if not 0 <= i < self.n_free:
                raise ValueError(f"objective free index {i} out of range")


@dataclass
class SdpSolution:
    status: str
    objective: float
    dual_objective: float
    block_values: List[np.ndarray]
    free_values: np.ndarray
    y: np.ndarray
    dual_blocks: List[np.ndarray]
    residuals: Dict[str, float]
    iterations: int


# ----------------------------------------------------------------------
# bound elimination

def _eliminate_bounds(problem: SdpProblem):
    """Rewrite box bounds as non-negative slacks in one extra diagonal block.

    Returns (block_dims, constraints, obj_blocks, obj_free, offset, recover)
    where recover(free_values, diag_value_vector) gives the original free
    vector.  The transformed problem has unbounded free variables only.
    """
    bounds = problem.free_bounds
    if bounds is None or all(lo is None and hi is None for lo, hi in bounds):
        return (
            list(problem.block_dims),
            problem.constraints,
            problem.obj_blocks,
            problem.obj_free,
            0.0,
            lambda f, _s: f,
            problem.n_free,
        )

    slack_block = len(problem.block_dims)
    # slot assignment inside the new diagonal block
    main_slot: Dict[int, int] = {}   # free var -> slack slot carrying it
    upper_slot: Dict[int, int] = {}  # two-sided: extra slack for the range row
    shift = np.zeros(problem.n_free)
    sign = np.ones(problem.n_free)
    nslots = 0
    for i, (lo, hi) in enumerate(bounds):
        if lo is None and hi is None:
            continue
        if lo is not None and hi is not None and hi < lo:
            raise ValueError(f"empty box for free variable {i}")
        main_slot[i] = nslots
        nslots += 1
        if lo is not None:
            shift[i] = lo
            sign[i] = 1.0
            if hi is not None:
                upper_slot[i] = nslots
                nslots += 1
        else:
            shift[i] = float(hi)  # type: ignore[arg-type]
            sign[i] = -1.0

    kept = [i for i in range(problem.n_free) if i not in main_slot]
    remap = {i: t for t, i in enumerate(kept)}

    def translate_free(d: Dict[int, float]):
        """Split a free-coefficient row into (still-free part, slack part, rhs shift)."""
        free_part: Dict[int, float] = {}
        slack_part: List[Entry] = []
        rhs_shift = 0.0
        for i, c in d.items():
            if i in main_slot:
                slack_part.append((main_slot[i], main_slot[i], c * sign[i]))
                rhs_shift += c * shift[i]
            else:
                free_part[remap[i]] = c
        return free_part, slack_part, rhs_shift

    constraints: List[SdpConstraint] = []
    for con in problem.constraints:
        free_part, slack_part, rhs_shift = translate_free(con.free)
        blocks = dict(con.blocks)
        if slack_part:
            blocks[slack_block] = blocks.get(slack_block, []) + slack_part
        constraints.append(SdpConstraint(blocks, free_part, con.rhs - rhs_shift))
    # range rows p_i + s_i = hi - lo for two-sided boxes
    for i, up in upper_slot.items():
        lo, hi = bounds[i]
        constraints.append(
            SdpConstraint(
                blocks={slack_block: [(main_slot[i], main_slot[i], 1.0), (up, up, 1.0)]},
                free={},
                rhs=float(hi) - float(lo),  # type: ignore[arg-type]
            )
        )

    obj_free, obj_slack, obj_shift = translate_free(problem.obj_free)
    obj_blocks = dict(problem.obj_blocks)
    if obj_slack:
        obj_blocks[slack_block] = obj_blocks.get(slack_block, []) + obj_slack

    block_dims = list(problem.block_dims) + [-nslots]

    def recover(free_values: np.ndarray, slack_values: np.ndarray) -> np.ndarray:
        full = np.zeros(problem.n_free)
        for i in range(problem.n_free):
            if i in main_slot:
                full[i] = shift[i] + sign[i] * slack_values[main_slot[i]]
            else:
                full[i] = free_values[remap[i]]
        return full

    return block_dims, constraints, obj_blocks, obj_free, obj_shift, recover, len(kept)


# ----------------------------------------------------------------------
# dense assembly

class _DenseData:
    """Dense arrays for the interior-point iteration."""

    def __init__(self, block_dims, constraints, obj_blocks, obj_free, n_free):
        self.m = len(constraints)
        self.q = n_free
        self.dense_idx = [k for k, d in enumerate(block_dims) if d > 0]
        self.diag_idx = [k for k, d in enumerate(block_dims) if d < 0]
        self.dense_dims = [block_dims[k] for k in self.dense_idx]
        self.diag_dims = [-block_dims[k] for k in self.diag_idx]
        self.block_dims = block_dims

        self.A = [np.zeros((self.m, n, n)) for n in self.dense_dims]
        self.C = [np.zeros((n, n)) for n in self.dense_dims]
        self.Ad = [np.zeros((self.m, s)) for s in self.diag_dims]
        self.Cd = [np.zeros(s) for s in self.diag_dims]
        self.F = np.zeros((self.m, self.q))
        self.b = np.array([c.rhs for c in constraints], dtype=float)
        self.d = np.zeros(self.q)

        pos_of = {k: t for t, k in enumerate(self.dense_idx)}
        dpos_of = {k: t for t, k in enumerate(self.diag_idx)}

        def fill(target_row, blocks: Dict[int, List[Entry]], row: int | None):
            for k, entries in blocks.items():
                if k in pos_of:
                    mat = self.A[pos_of[k]][row] if row is not None else self.C[pos_of[k]]
                    for (i, j, v) in entries:
                        mat[i, j] += v
                        if i != j:
                            mat[j, i] += v
                else:
                    vec = self.Ad[dpos_of[k]][row] if row is not None else self.Cd[dpos_of[k]]
                    for (i, _j, v) in entries:
                        vec[i] += v

        for r, con in enumerate(constraints):
            fill(None, con.blocks, r)
            for i, v in con.free.items():
                self.F[r, i] = v
        fill(None, obj_blocks, None)
        for i, v in obj_free.items():
            self.d[i] = v

        self.Aflat = [a.reshape(self.m, -1) for a in self.A]
        self.ntot = sum(self.dense_dims) + sum(self.diag_dims)

    def apply_A(self, X: List[np.ndarray], Xd: List[np.ndarray], f: np.ndarray) -> np.ndarray:
        out = np.zeros(self.m)
        for aflat, x in zip(self.Aflat, X):
            out += aflat @ x.ravel()
        for ad, xd in zip(self.Ad, Xd):
            out += ad @ xd
        if self.q:
            out += self.F @ f
        return out

    def apply_AT(self, y: np.ndarray):
        mats = [(aflat.T @ y).reshape(n, n) for aflat, n in zip(self.Aflat, self.dense_dims)]
        vecs = [ad.T @ y for ad in self.Ad]
        return mats, vecs

    def obj(self, X, Xd, f) -> float:
        total = 0.0
        for c, x in zip(self.C, X):
            total += float(np.sum(c * x))
        for cd, xd in zip(self.Cd, Xd):
            total += float(cd @ xd)
        if self.q:
            total += float(self.d @ f)
        return total

    def restrict_rows(self, kept: np.ndarray) -> None:
        self.A = [a[kept] for a in self.A]
        self.Ad = [ad[kept] for ad in self.Ad]
        self.F = self.F[kept]
        self.b = self.b[kept]
        self.Aflat = [a.reshape(len(kept), -1) for a in self.A]
        self.m = len(kept)


def _independent_rows(data: _DenseData):
    """Rank-revealing selection of linearly independent constraint rows.

    Returns (kept_indices, dropped_indices, inconsistent) where dropped rows
    are exact linear combinations of kept ones; inconsistent is True when a
    dependent row's right-hand side contradicts that combination (the
    problem is then infeasible).  Works from the m x m Gramian of the
    constraint rows via pivoted Cholesky, so the full coefficient matrix is
    never materialized.
    """
    m = data.m
    H = np.zeros((m, m))
    for aflat in data.Aflat:
        H += aflat @ aflat.T
    for ad in data.Ad:
        H += ad @ ad.T
    if data.q:
        H += data.F @ data.F.T
    diag = np.diag(H).copy()
    scale = np.maximum(diag, 1e-30)

    L = np.zeros((m, m))
    piv: List[int] = []
    dres = diag.copy()
    for t in range(m):
        rel = dres / scale
        i = int(np.argmax(rel))
        if rel[i] <= 1e-14:
            break
        col = H[:, i] - L[:, :t] @ L[i, :t]
        if col[i] <= 0.0:
            break
        L[:, t] = col / np.sqrt(col[i])
        piv.append(i)
        dres = np.maximum(dres - L[:, t] ** 2, 0.0)
        dres[piv] = 0.0

    rest = [j for j in range(m) if j not in set(piv)]
    if not rest:
        return sorted(piv), [], False
    # rhs consistency of each candidate row against its combination of the
    # pivoted rows; rows that are not clearly dependent are kept as-is
    if piv:
        Lk = L[np.ix_(piv, range(len(piv)))]
        lam = sla.solve_triangular(Lk, L[rest, :len(piv)].T,
                                   lower=True, trans="T")
        b_pred = lam.T @ data.b[piv]
    else:
        b_pred = np.zeros(len(rest))
    mismatch = np.abs(data.b[rest] - b_pred)
    b_tol = 1e-7 * (1.0 + float(np.max(np.abs(data.b))))
    kept = list(piv)
    dropped: List[int] = []
    for t, j in enumerate(rest):
        clearly_dependent = dres[j] <= 1e-14 * scale[j]
        if clearly_dependent and mismatch[t] <= b_tol:
            dropped.append(j)
        elif clearly_dependent and dres[j] <= 1e-24 * scale[j] \
                and mismatch[t] > 100.0 * b_tol:
            return sorted(kept), [j], True
        else:
            kept.append(j)
    return sorted(kept), dropped, False


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def _psd_sqrt_pair(mat: np.ndarray):
    """Return (sqrt, inv_sqrt) for a symmetric PD matrix via eigh."""
    w, u = np.linalg.eigh(mat)
    # roundoff can push the smallest eigenvalue slightly negative for
    # ill-conditioned iterates; factor a nearby PD matrix instead
    floor = max(1e-300, 1e-16 * float(w[-1]))
    w = np.maximum(w, floor)
    sq = (u * np.sqrt(w)) @ u.T
    isq = (u / np.sqrt(w)) @ u.T
    return sq, isq


def _max_step(x_sqrt_inv: np.ndarray, delta: np.ndarray) -> float:
    """Largest alpha with X + alpha*Delta >= 0 given X^{-1/2}."""
    t = _sym(x_sqrt_inv @ delta @ x_sqrt_inv.T)
    lam = np.linalg.eigvalsh(t)[0]
    if lam >= -1e-300:
        return np.inf
    return -1.0 / lam


def _max_step_diag(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


def solve(problem: SdpProblem, tol: float = 1e-8, max_iter: int = 200,
          verbose: bool = False) -> SdpSolution:
    """Solve the block SDP; deterministic for identical inputs and options."""
    problem.validate()
    (block_dims, constraints, obj_blocks, obj_free, offset, recover,
     n_free_int) = _eliminate_bounds(problem)
    data = _DenseData(block_dims, constraints, obj_blocks, obj_free, n_free_int)

    n_orig_blocks = len(problem.block_dims)
    n_orig_rows = len(problem.constraints)
    n_rows_full = data.m
    kept_rows = np.arange(data.m)

    def finish(status, X, Xd, f, y, S, Sd, res, iters):
        # map internal (scaled-space already undone by caller) values back to
        # the original block list and free vector
        blocks_out: List[np.ndarray] = []
        duals_out: List[np.ndarray] = []
        slack_vec = np.zeros(0)
        for k in range(len(block_dims)):
            if block_dims[k] > 0:
                t = data.dense_idx.index(k)
                mat, dual = X[t], S[t]
            else:
                t = data.diag_idx.index(k)
                mat, dual = np.diag(Xd[t]), np.diag(Sd[t])
                if k >= n_orig_blocks:
                    slack_vec = Xd[t]
            if k < n_orig_blocks:
                blocks_out.append(mat)
                duals_out.append(dual)
        f_out = recover(f, slack_vec) if problem.n_free else np.zeros(0)
        pobj = data.obj(X, Xd, f) + offset
        dobj = float(data.b @ y) + offset
        y_full = np.zeros(n_rows_full)
        if len(y):
            y_full[kept_rows] = y
        return SdpSolution(
            status=status,
            objective=pobj,
            dual_objective=dobj,
            block_values=blocks_out,
            free_values=f_out,
            y=np.asarray(y_full[:n_orig_rows], dtype=float),
            dual_blocks=duals_out,
            residuals=res,
            iterations=iters,
        )

    m, q = data.m, data.q

    # pure linear program over free variables (no blocks at all)
    if not data.dense_dims and not data.diag_dims:
        return _solve_linear(data, problem, offset, recover, finish, tol)

    # drop linearly dependent equality rows so the KKT system keeps full
    # row rank (duplicated or implied rows otherwise make the Schur
    # complement singular and stall the iteration)
    if m > 0:
        kept, dropped, inconsistent = _independent_rows(data)
        if inconsistent:
            X0 = [np.zeros((n, n)) for n in data.dense_dims]
            Xd0 = [np.zeros(s) for s in data.diag_dims]
            S0 = [c.copy() for c in data.C]
            Sd0 = [cd.copy() for cd in data.Cd]
            res0 = {"primal": np.inf, "dual": 0.0, "gap": np.inf,
                    "min_eig": 0.0}
            return finish(STATUS_INFEASIBLE, X0, Xd0, np.zeros(q),
                          np.zeros(data.m), S0, Sd0, res0, 0)
        if dropped:
            kept_rows = np.asarray(kept, dtype=int)
            data.restrict_rows(kept_rows)
            m = data.m

    if m == 0:
        # no constraints: optimum is X=0, f=0 unless the objective has a
        # decreasing direction (any negative C eigenvalue or nonzero d)
        unbounded = bool(np.any(np.abs(data.d) > 0))
        for c in data.C:
            unbounded = unbounded or np.linalg.eigvalsh(c)[0] < -tol
        for cd in data.Cd:
            unbounded = unbounded or np.min(cd, initial=0.0) < -tol
        status = STATUS_UNBOUNDED if unbounded else STATUS_OPTIMAL
        X = [np.zeros((n, n)) for n in data.dense_dims]
        Xd = [np.zeros(s) for s in data.diag_dims]
        S = [c.copy() for c in data.C]
        Sd = [cd.copy() for cd in data.Cd]
        res = {"primal": 0.0, "dual": 0.0, "gap": 0.0, "min_eig": 0.0}
        return finish(status, X, Xd, np.zeros(q), np.zeros(0), S, Sd, res, 0)

    # --- scaling ---------------------------------------------------------
    row_scale = np.ones(m)
    for j in range(m):
        mx = 0.0
        for a in data.A:
            mx = max(mx, float(np.max(np.abs(a[j]))) if a[j].size else 0.0)
        for ad in data.Ad:
            mx = max(mx, float(np.max(np.abs(ad[j]))) if ad[j].size else 0.0)
        if q:
            mx = max(mx, float(np.max(np.abs(data.F[j]))))
        row_scale[j] = max(mx, 1e-8)
    obj_scale = max(
        1e-8,
        max((float(np.max(np.abs(c))) for c in data.C if c.size), default=0.0),
        max((float(np.max(np.abs(cd))) for cd in data.Cd if cd.size), default=0.0),
        float(np.max(np.abs(data.d))) if q else 0.0,
        1.0,
    )
    A_s = [a / row_scale[:, None, None] for a in data.A]
    Ad_s = [ad / row_scale[:, None] for ad in data.Ad]
    F_s = data.F / row_scale[:, None] if q else data.F
    b_s = data.b / row_scale
    rhs_scale = max(1.0, float(np.max(np.abs(b_s))) if m else 1.0)
    b_s = b_s / rhs_scale
    C_s = [c / obj_scale for c in data.C]
    Cd_s = [cd / obj_scale for cd in data.Cd]
    d_s = data.d / obj_scale
    Aflat_s = [a.reshape(m, -1) for a in A_s]

    def unscale(X, Xd, f, y, S, Sd):
        Xu = [x * rhs_scale for x in X]
        Xdu = [x * rhs_scale for x in Xd]
        fu = f * rhs_scale
        yu = (y / row_scale) * obj_scale
        Su = [s * obj_scale for s in S]
        Sdu = [s * obj_scale for s in Sd]
        return Xu, Xdu, fu, yu, Su, Sdu

    # --- initial point ---------------------------------------------------
    tau = max(1.0, float(np.max(np.abs(b_s))) if m else 1.0) * max(
        10.0, math.sqrt(max(data.dense_dims, default=1))
    )
    taud = max(10.0, math.sqrt(max(data.dense_dims, default=1)))
    X = [tau * np.eye(n) for n in data.dense_dims]
    Xd = [tau * np.ones(s) for s in data.diag_dims]
    S = [taud * np.eye(n) for n in data.dense_dims]
    Sd = [taud * np.ones(s) for s in data.diag_dims]
    y = np.zeros(m)
    f = np.zeros(q)

    def scaled_residuals(X, Xd, f, y, S, Sd):
        ax = np.zeros(m)
        for aflat, x in zip(Aflat_s, X):
            ax += aflat @ x.ravel()
        for ad, xd in zip(Ad_s, Xd):
            ax += ad @ xd
        if q:
            ax += F_s @ f
        rp = b_s - ax
        aty_mats = [(aflat.T @ y).reshape(n, n) for aflat, n in zip(Aflat_s, data.dense_dims)]
        aty_vecs = [ad.T @ y for ad in Ad_s]
        Rd = [c - at - s for c, at, s in zip(C_s, aty_mats, S)]
        Rdd = [cd - at - s for cd, at, s in zip(Cd_s, aty_vecs, Sd)]
        rf = d_s - F_s.T @ y if q else np.zeros(0)
        return rp, Rd, Rdd, rf

    def true_residuals(X, Xd, f, y, S, Sd):
        """Residuals of the unscaled problem (the quantities promised to users)."""
        Xu, Xdu, fu, yu, Su, Sdu = unscale(X, Xd, f, y, S, Sd)
        rp = data.b - data.apply_A(Xu, Xdu, fu)
        aty_mats, aty_vecs = data.apply_AT(yu)
        dual_inf = 0.0
        for c, at, s in zip(data.C, aty_mats, Su):
            dual_inf = max(dual_inf, float(np.max(np.abs(c - at - s))) if c.size else 0.0)
        for cd, at, s in zip(data.Cd, aty_vecs, Sdu):
            dual_inf = max(dual_inf, float(np.max(np.abs(cd - at - s))) if cd.size else 0.0)
        if q:
            dual_inf = max(dual_inf, float(np.max(np.abs(data.d - data.F.T @ yu))))
        gap = 0.0
        for x, s in zip(Xu, Su):
            gap += float(np.sum(x * s))
        for xd, sd in zip(Xdu, Sdu):
            gap += float(xd @ sd)
        pobj = data.obj(Xu, Xdu, fu) + offset
        dobj = float(data.b @ yu) + offset
        rel_gap = gap / (1.0 + abs(pobj) + abs(dobj))
        prim_inf = float(np.max(np.abs(rp))) if m else 0.0
        min_eig = 0.0
        return {
            "primal": prim_inf,
            "dual": dual_inf,
            "gap": rel_gap,
            "gap_abs": gap,
            "min_eig": min_eig,
            "primal_obj": pobj,
            "dual_obj": dobj,
        }

    # dual residual shrinks geometrically once steps approach 1, so an
    # absolute threshold matching the primal one is attainable
    dual_tol = tol

    best = None
    best_merit = np.inf
    mu_history: List[float] = []
    n_total = data.ntot

    status = STATUS_MAX_ITERATIONS
    it = 0
    for it in range(1, max_iter + 1):
        rp, Rd, Rdd, rf = scaled_residuals(X, Xd, f, y, S, Sd)
        gap = sum(float(np.sum(x * s)) for x, s in zip(X, S))
        gap += sum(float(xd @ sd) for xd, sd in zip(Xd, Sd))
        mu = gap / n_total
        mu_history.append(mu)

        res = true_residuals(X, Xd, f, y, S, Sd)
        merit = max(res["primal"], res["dual"], res["gap"])
        if merit < best_merit:
            best_merit = merit
            best = ([x.copy() for x in X], [x.copy() for x in Xd], f.copy(),
                    y.copy(), [s.copy() for s in S], [s.copy() for s in Sd], res, it)

        if res["primal"] <= tol and res["dual"] <= dual_tol and res["gap"] <= tol:
            status = STATUS_OPTIMAL
            best = ([x.copy() for x in X], [x.copy() for x in Xd], f.copy(),
                    y.copy(), [s.copy() for s in S], [s.copy() for s in Sd], res, it)
            break

        # certificate-based infeasibility / unboundedness detection
        bty = float(b_s @ y)
        ynorm = float(np.max(np.abs(y))) if m else 0.0
        if bty > 1e-8 and ynorm > 1.0:
            u = y / bty
            ray_viol = float(np.max(np.abs(F_s.T @ u))) if q else 0.0
            for aflat, n in zip(Aflat_s, data.dense_dims):
                t = -(aflat.T @ u).reshape(n, n)
                lam = float(np.linalg.eigvalsh(_sym(t))[0])
                ray_viol = max(ray_viol, -min(lam, 0.0))
            for ad in Ad_s:
                t = -(ad.T @ u)
                ray_viol = max(ray_viol, -min(float(np.min(t, initial=0.0)), 0.0))
            if ray_viol <= 1e-9 * (1.0 + float(np.max(np.abs(u)))):
                status = STATUS_INFEASIBLE
                break
        pobj_s = sum(float(np.sum(c * x)) for c, x in zip(C_s, X))
        pobj_s += sum(float(cd @ xd) for cd, xd in zip(Cd_s, Xd))
        if q:
            pobj_s += float(d_s @ f)
        xnorm = max(
            max((float(np.max(np.abs(x))) for x in X), default=0.0),
            max((float(np.max(np.abs(x))) for x in Xd), default=0.0),
            float(np.max(np.abs(f))) if q else 0.0,
        )
        if pobj_s < -1e-6 and xnorm > 1e5:
            scale = 1.0 / xnorm
            axf = np.zeros(m)
            for aflat, x in zip(Aflat_s, X):
                axf += aflat @ x.ravel()
            for ad, xd in zip(Ad_s, Xd):
                axf += ad @ xd
            if q:
                axf += F_s @ f
            ray_res = float(np.max(np.abs(axf * scale)))
            if ray_res <= 1e-7 and pobj_s * scale < -1e-7:
                status = STATUS_UNBOUNDED
                break
        if len(mu_history) > 40:
            window = mu_history[-31:]
            if window[-1] > 10.0 * window[0] and merit > 1e-4:
                status = STATUS_NUMERICAL_FAILURE
                break

        # --- Nesterov-Todd scaling ---------------------------------------
        try:
            W = []
            Xisqrt = []
            Sinv = []
            for x, s in zip(X, S):
                xs, xis = _psd_sqrt_pair(x)
                t = _sym(xs @ s @ xs)
                tw, tu = np.linalg.eigh(t)
                if tw[-1] <= 0:
                    raise np.linalg.LinAlgError("loss of positive definiteness")
                tw = np.maximum(tw, 1e-16 * tw[-1])
                tisq = (tu / np.sqrt(tw)) @ tu.T
                W.append(_sym(xs @ tisq @ xs))
                Xisqrt.append(xis)
                sw, su = np.linalg.eigh(s)
                if sw[-1] <= 0:
                    raise np.linalg.LinAlgError("loss of positive definiteness")
                sw = np.maximum(sw, 1e-16 * sw[-1])
                Sinv.append((su / sw) @ su.T)
            wd = [np.sqrt(xd / sd) for xd, sd in zip(Xd, Sd)]
        except np.linalg.LinAlgError:
            status = STATUS_NUMERICAL_FAILURE
            break

        # Schur complement M = A(W A'(.) W) plus diagonal-block terms
        M = np.zeros((m, m))
        WAW = []
        for a, aflat, w in zip(A_s, Aflat_s, W):
            waw = np.matmul(np.matmul(w, a), w)
            WAW.append(waw)
            M += aflat @ waw.reshape(m, -1).T
        for ad, w in zip(Ad_s, wd):
            M += (ad * (w * w)[None, :]) @ ad.T
        M = _sym(M)

        kdim = m + q
        K = np.zeros((kdim, kdim))
        K[:m, :m] = M
        if q:
            K[:m, m:] = F_s
            K[m:, :m] = F_s.T
        lu = None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            for reg in (0.0, 1e-12, 1e-9):
                try:
                    Kreg = K.copy()
                    if reg:
                        Kreg[:m, :m] += reg * np.eye(m) * max(1.0, float(np.trace(M)) / m)
                        if q:
                            Kreg[m:, m:] -= reg * np.eye(q)
                    lu_try = sla.lu_factor(Kreg)
                except (np.linalg.LinAlgError, ValueError):
                    continue
                probe = sla.lu_solve(lu_try, np.ones(kdim))
                if np.isfinite(probe).all():
                    lu = lu_try
                    break
        if lu is None:
            status = STATUS_NUMERICAL_FAILURE
            break

        def kkt_solve(rhs):
            # LU solve plus iterative refinement against the unregularized
            # system; keeps the best iterate if refinement stops improving
            sol = sla.lu_solve(lu, rhs)
            scale_r = 1.0 + float(np.max(np.abs(rhs)))
            err = rhs - K @ sol
            best, best_err = sol, float(np.max(np.abs(err)))
            for _ in range(4):
                if best_err <= 1e-15 * scale_r:
                    break
                sol = sol + sla.lu_solve(lu, err)
                err = rhs - K @ sol
                e = float(np.max(np.abs(err)))
                if e < best_err:
                    best, best_err = sol, e
                else:
                    break
            return best

        def solve_direction(Rc, rcd):
            r1 = rp.copy()
            for aflat, rc, rd, w, waw in zip(Aflat_s, Rc, Rd, W, WAW):
                wrdw = _sym(w @ rd @ w)
                r1 += aflat @ (wrdw - rc).ravel()
            for ad, rc, rdd, w in zip(Ad_s, rcd, Rdd, wd):
                r1 += ad @ ((w * w) * rdd - rc)
            rhs = np.concatenate([r1, rf]) if q else r1
            sol = kkt_solve(rhs)
            dy = sol[:m]
            df = sol[m:] if q else np.zeros(0)
            dS = [rd - (aflat.T @ dy).reshape(w.shape) for rd, aflat, w in zip(Rd, Aflat_s, W)]
            dSd = [rdd - ad.T @ dy for rdd, ad in zip(Rdd, Ad_s)]
            dX = [_sym(rc - w @ ds @ w) for rc, w, ds in zip(Rc, W, dS)]
            dXd = [rc - (w * w) * ds for rc, w, ds in zip(rcd, wd, dSd)]
            return dX, dXd, df, dy, dS, dSd

        # predictor (affine direction)
        Rc_aff = [-x for x in X]
        rcd_aff = [-xd for xd in Xd]
        dXa, dXda, dfa, dya, dSa, dSda = solve_direction(Rc_aff, rcd_aff)

        ap = 1.0
        ad_ = 1.0
        for xis, dx in zip(Xisqrt, dXa):
            ap = min(ap, _max_step(xis, dx))
        for xd, dxd in zip(Xd, dXda):
            ap = min(ap, _max_step_diag(xd, dxd))
        for s, ds in zip(S, dSa):
            _, sis = _psd_sqrt_pair(s)
            ad_ = min(ad_, _max_step(sis, ds))
        for sd, dsd in zip(Sd, dSda):
            ad_ = min(ad_, _max_step_diag(sd, dsd))
        ap = min(1.0, 0.99 * ap)
        ad_ = min(1.0, 0.99 * ad_)

        gap_aff = 0.0
        for x, dx, s, ds in zip(X, dXa, S, dSa):
            gap_aff += float(np.sum((x + ap * dx) * (s + ad_ * ds)))
        for xd, dxd, sd, dsd in zip(Xd, dXda, Sd, dSda):
            gap_aff += float((xd + ap * dxd) @ (sd + ad_ * dsd))
        mu_aff = max(gap_aff, 0.0) / n_total
        sigma = min(1.0, max((mu_aff / mu) ** 3, 1e-10))

        # corrector target: sigma*mu*S^{-1} - X + second-order term
        Rc = []
        for x, sinv, dsa in zip(X, Sinv, dSa):
            e = sinv @ dsa
            Rc.append(_sym(sigma * mu * sinv - x + sigma * mu * _sym(e @ e @ sinv)))
        rcd = []
        for xd, sd, dsda in zip(Xd, Sd, dSda):
            e = dsda / sd
            rcd.append(sigma * mu / sd - xd + sigma * mu * e * e / sd)

        dX, dXd, df, dy, dS, dSd = solve_direction(Rc, rcd)

        ap = 1.0
        ad_ = 1.0
        for xis, dx in zip(Xisqrt, dX):
            ap = min(ap, _max_step(xis, dx))
        for xd, dxd in zip(Xd, dXd):
            ap = min(ap, _max_step_diag(xd, dxd))
        for s, ds in zip(S, dS):
            _, sis = _psd_sqrt_pair(s)
            ad_ = min(ad_, _max_step(sis, ds))
        for sd, dsd in zip(Sd, dSd):
            ad_ = min(ad_, _max_step_diag(sd, dsd))
        eta = 0.9 + 0.09 * min(ap, ad_)
        ap = min(1.0, eta * ap)
        ad_ = min(1.0, eta * ad_)

        X = [_sym(x + ap * dx) for x, dx in zip(X, dX)]
        Xd = [xd + ap * dxd for xd, dxd in zip(Xd, dXd)]
        f = f + ap * df
        y = y + ad_ * dy
        S = [_sym(s + ad_ * ds) for s, ds in zip(S, dS)]
        Sd = [sd + ad_ * dsd for sd, dsd in zip(Sd, dSd)]

        if verbose:
            print(f"iter {it:3d}  mu={mu:9.2e}  prim={res['primal']:9.2e} "
                  f"dual={res['dual']:9.2e}  gap={res['gap']:9.2e}")

        if not np.isfinite(mu) or any(not np.isfinite(x).all() for x in X):
            status = STATUS_NUMERICAL_FAILURE
            break

    if best is None:
        res = true_residuals(X, Xd, f, y, S, Sd)
        best = (X, Xd, f, y, S, Sd, res, it)

    Xb, Xdb, fb, yb, Sb, Sdb, resb, itb = best
    Xu, Xdu, fu, yu, Su, Sdu = unscale(Xb, Xdb, fb, yb, Sb, Sdb)
    min_eig = 0.0
    for x in Xu:
        if x.size:
            min_eig = min(min_eig, float(np.linalg.eigvalsh(x)[0]))
    for xd in Xdu:
        if xd.size:
            min_eig = min(min_eig, float(np.min(xd)))
    resb = dict(resb)
    resb["min_eig"] = min_eig
    if status == STATUS_MAX_ITERATIONS and resb["primal"] <= tol and \
            resb["dual"] <= dual_tol and resb["gap"] <= tol:
        status = STATUS_OPTIMAL
    return finish(status, Xu, Xdu, fu, yu, Su, Sdu, resb, itb)


def _solve_linear(data: _DenseData, problem: SdpProblem, offset, recover, finish, tol):
    """Equality-constrained linear objective over free variables only."""
    m, q = data.m, data.q
    F, b, d = data.F, data.b, data.d
    if m:
        f, fres, _rank, _sv = np.linalg.lstsq(F, b, rcond=None)
        if float(np.max(np.abs(F @ f - b))) > tol * (1.0 + float(np.max(np.abs(b)))):
            return finish(STATUS_INFEASIBLE, [], [], f, np.zeros(m), [], [],
                          {"primal": float(np.max(np.abs(F @ f - b))), "dual": 0.0,
                           "gap": 0.0, "min_eig": 0.0}, 0)
        y, _res, _rank, _sv = np.linalg.lstsq(F.T, d, rcond=None)
        if float(np.max(np.abs(F.T @ y - d))) > tol * (1.0 + float(np.max(np.abs(d)))):
            return finish(STATUS_UNBOUNDED, [], [], f, y, [], [],
                          {"primal": 0.0, "dual": float(np.max(np.abs(F.T @ y - d))),
                           "gap": 0.0, "min_eig": 0.0}, 0)
        res = {"primal": float(np.max(np.abs(F @ f - b))),
               "dual": float(np.max(np.abs(F.T @ y - d))),
               "gap": 0.0, "min_eig": 0.0,
               "primal_obj": float(d @ f) + offset, "dual_obj": float(b @ y) + offset}
        return finish(STATUS_OPTIMAL, [], [], f, y, [], [], res, 1)
    status = STATUS_OPTIMAL if not np.any(np.abs(d) > 0) else STATUS_UNBOUNDED
    return finish(status, [], [], np.zeros(q), np.zeros(0), [], [],
                  {"primal": 0.0, "dual": 0.0, "gap": 0.0, "min_eig": 0.0}, 0)


# ----------------------------------------------------------------------
# SDPA sparse format (.dat-s)

def _format_float(v: float) -> str:
    return repr(float(v))


def export_sdpa(problem: SdpProblem, path: str) -> Dict[str, object]:
    """Write the problem in SDPA sparse format.

    The container's canonical reading maximizes <F0, Y> subject to
    <Fj, Y> = b_j over PSD Y, so a minimize problem exports with F0 = -C:
    original_objective = objective_sign * file_optimum + objective_offset.
    Free variables are split into differences of non-negative scalars and
    box-bounded ones are shifted into slacks; all such scalars live in one
    trailing diagonal block.
    """
    problem.validate()
    (block_dims, constraints, obj_blocks, obj_free, offset, _rec,
     _nf) = _eliminate_bounds(problem)

    # split remaining free variables as p - q inside one diagonal block
    free_ids = sorted({i for con in constraints for i in con.free} | set(obj_free))
    n_split = len(free_ids)
    slot = {i: 2 * t for t, i in enumerate(free_ids)}
    dims = list(block_dims)
    split_block = None
    if n_split:
        split_block = len(dims)
        dims.append(-2 * n_split)

    def expand(blocks: Dict[int, List[Entry]], free: Dict[int, float]):
        out = {k: list(v) for k, v in blocks.items()}
        if free:
            extra = []
            for i, c in sorted(free.items()):
                extra.append((slot[i], slot[i], c))
                extra.append((slot[i] + 1, slot[i] + 1, -c))
            out[split_block] = out.get(split_block, []) + extra
        return out

    rows = [(expand(con.blocks, con.free), con.rhs) for con in constraints]
    obj = expand(obj_blocks, obj_free)

    lines = [str(len(rows)), str(len(dims)),
             " ".join(str(dim) for dim in dims),
             " ".join(_format_float(rhs) for _blocks, rhs in rows)]
    entries: List[Tuple[int, int, int, int, float]] = []
    for k, block_entries in obj.items():
        for (i, j, v) in block_entries:
            if v != 0.0:
                entries.append((0, k + 1, i + 1, j + 1, -v))
    for r, (blocks, _rhs) in enumerate(rows):
        for k, block_entries in blocks.items():
            for (i, j, v) in block_entries:
                if v != 0.0:
                    entries.append((r + 1, k + 1, i + 1, j + 1, v))
    entries.sort()
    for matno, blkno, i, j, v in entries:
        lines.append(f"{matno} {blkno} {i} {j} {_format_float(v)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return {
        "path": path,
        "m": len(rows),
        "block_structure": dims,
        "objective_sign": -1.0,
        "objective_offset": offset,
        "n_split_free": n_split,
    }


def import_sdpa(path: str) -> SdpProblem:
    """Parse an SDPA sparse file back into an SdpProblem (no free variables)."""
    with open(path) as fh:
        raw = fh.readlines()
    lines = []
    for ln, text in enumerate(raw, start=1):
        stripped = text.strip()
        if not stripped or stripped.startswith(("*", '"')):
            continue
        lines.append((ln, stripped))
    if len(lines) < 4:
        raise ValueError("SDPA file too short: need 4 header lines")

    def clean(text: str) -> List[str]:
        for ch in "{}(),":
            text = text.replace(ch, " ")
        return text.split()

    try:
        m = int(clean(lines[0][1])[0])
        nblock = int(clean(lines[1][1])[0])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed SDPA header: {exc}") from exc
    dims = [int(tok) for tok in clean(lines[2][1])]
    if len(dims) != nblock:
        raise ValueError(f"line 3 lists {len(dims)} blocks, header says {nblock}")
    rhs = [float(tok) for tok in clean(lines[3][1])]
    if len(rhs) != m:
        raise ValueError(f"line 4 lists {len(rhs)} values, header says {m}")

    constraints = [SdpConstraint(rhs=v) for v in rhs]
    obj_blocks: Dict[int, List[Entry]] = {}
    seen = set()
    for ln, text in lines[4:]:
        toks = clean(text)
        if len(toks) != 5:
            raise ValueError(f"line {ln}: expected 'matno blkno i j value'")
        matno, blkno, i, j = (int(t) for t in toks[:4])
        v = float(toks[4])
        if not 0 <= matno <= m:
            raise ValueError(f"line {ln}: matrix number {matno} out of range")
        if not 1 <= blkno <= nblock:
            raise ValueError(f"line {ln}: block number {blkno} out of range")
        size = abs(dims[blkno - 1])
        if not (1 <= i <= j <= size):
            raise ValueError(f"line {ln}: entry ({i},{j}) out of range or not upper-triangular")
        if dims[blkno - 1] < 0 and i != j:
            raise ValueError(f"line {ln}: off-diagonal entry in diagonal block")
        key = (matno, blkno, i, j)
        if key in seen:
            raise ValueError(f"line {ln}: duplicate entry {key}")
        seen.add(key)
        if matno == 0:
            obj_blocks.setdefault(blkno - 1, []).append((i - 1, j - 1, -v))
        else:
            constraints[matno - 1].blocks.setdefault(blkno - 1, []).append((i - 1, j - 1, v))
    return SdpProblem(
        block_dims=dims,
        n_free=0,
        constraints=constraints,
        obj_blocks=obj_blocks,
        obj_free={},
    )
