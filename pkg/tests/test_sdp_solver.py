"""Interior-point solver tests against analytic optima and random KKT checks."""

import numpy as np
import pytest

from avgbound.sdp_solver import (
    SdpConstraint,
    SdpProblem,
    SdpSolution,
    export_sdpa,
    import_sdpa,
    solve,
)


def sym_entries(mat):
    """Upper-triangle entry list for a dense symmetric matrix."""
    n = mat.shape[0]
    out = []
    for i in range(n):
        for j in range(i, n):
            if mat[i, j] != 0.0:
                out.append((i, j, float(mat[i, j])))
    return out


def inner(mat, x):
    return float(np.sum(mat * x))


def test_fixed_trace_eigenvalue_toy():
    # min <C,X> s.t. trace X = 1 has optimum lambda_min(C)
    c = np.array([[2.0, 1.0], [1.0, 2.0]])
    prob = SdpProblem(
        block_dims=[2],
        n_free=0,
        constraints=[SdpConstraint(blocks={0: [(0, 0, 1.0), (1, 1, 1.0)]}, rhs=1.0)],
        obj_blocks={0: sym_entries(c)},
    )
    sol = solve(prob)
    assert sol.status == "optimal"
    assert abs(sol.objective - 1.0) < 1e-7
    x = sol.block_values[0]
    assert abs(np.trace(x) - 1.0) < 1e-8
    assert np.linalg.eigvalsh(x)[0] > -1e-9


def test_constant_objective_on_feasible_set():
    # trace is pinned entrywise, so the optimum equals 3 exactly
    prob = SdpProblem(
        block_dims=[2],
        n_free=0,
        constraints=[
            SdpConstraint(blocks={0: [(0, 0, 1.0)]}, rhs=1.0),
            SdpConstraint(blocks={0: [(1, 1, 1.0)]}, rhs=2.0),
        ],
        obj_blocks={0: [(0, 0, 1.0), (1, 1, 1.0)]},
    )
    sol = solve(prob)
    assert sol.status == "optimal"
    assert abs(sol.objective - 3.0) < 1e-7


def test_free_variable_coupling():
    # min X11 - 2 f s.t. X11 + f = 3 reduces to min 3*X11 - 6
    prob = SdpProblem(
        block_dims=[1],
        n_free=1,
        constraints=[SdpConstraint(blocks={0: [(0, 0, 1.0)]}, free={0: 1.0}, rhs=3.0)],
        obj_blocks={0: [(0, 0, 1.0)]},
        obj_free={0: -2.0},
    )
    sol = solve(prob)
    assert sol.status == "optimal"
    assert abs(sol.objective - (-6.0)) < 1e-6
    assert abs(sol.free_values[0] - 3.0) < 1e-6
    assert abs(sol.block_values[0][0, 0]) < 1e-6


def test_box_bounds_without_constraints():
    prob = SdpProblem(
        block_dims=[],
        n_free=1,
        constraints=[],
        obj_blocks={},
        obj_free={0: 1.0},
        free_bounds=[(-2.0, 5.0)],
    )
    sol = solve(prob)
    assert sol.status == "optimal"
    assert abs(sol.objective - (-2.0)) < 1e-6
    assert abs(sol.free_values[0] - (-2.0)) < 1e-6

    prob.obj_free = {0: -1.0}
    sol = solve(prob)
    assert sol.status == "optimal"
    assert abs(sol.objective - (-5.0)) < 1e-6
    assert abs(sol.free_values[0] - 5.0) < 1e-6


def test_box_bound_with_psd_block():
    # min X11 + f s.t. X11 - f = 1, f >= 0.5: optimum at f = 0.5, X11 = 1.5
    prob = SdpProblem(
        block_dims=[1],
        n_free=1,
        constraints=[SdpConstraint(blocks={0: [(0, 0, 1.0)]}, free={0: -1.0}, rhs=1.0)],
        obj_blocks={0: [(0, 0, 1.0)]},
        obj_free={0: 1.0},
        free_bounds=[(0.5, None)],
    )
    sol = solve(prob)
    assert sol.status == "optimal"
    assert abs(sol.objective - 2.0) < 1e-6
    assert abs(sol.free_values[0] - 0.5) < 1e-6
    assert abs(sol.block_values[0][0, 0] - 1.5) < 1e-6


def test_unbounded_direction_detected():
    prob = SdpProblem(
        block_dims=[2],
        n_free=0,
        constraints=[SdpConstraint(blocks={0: [(1, 1, 1.0)]}, rhs=1.0)],
        obj_blocks={0: [(0, 0, -1.0)]},
    )
    sol = solve(prob)
    assert sol.status == "unbounded"


def test_infeasible_trace_detected():
    prob = SdpProblem(
        block_dims=[2],
        n_free=0,
        constraints=[SdpConstraint(blocks={0: [(0, 0, 1.0), (1, 1, 1.0)]}, rhs=-1.0)],
        obj_blocks={0: [(0, 0, 1.0), (1, 1, 1.0)]},
    )
    sol = solve(prob)
    assert sol.status == "infeasible"


def test_diagonal_block_linear_program():
    # min -x1 - 2 x2 s.t. x1 + x2 = 1, x >= 0 picks the second vertex
    prob = SdpProblem(
        block_dims=[-2],
        n_free=0,
        constraints=[SdpConstraint(blocks={0: [(0, 0, 1.0), (1, 1, 1.0)]}, rhs=1.0)],
        obj_blocks={0: [(0, 0, -1.0), (1, 1, -2.0)]},
    )
    sol = solve(prob)
    assert sol.status == "optimal"
    assert abs(sol.objective - (-2.0)) < 1e-7
    x = sol.block_values[0]
    assert abs(x[1, 1] - 1.0) < 1e-6
    assert abs(x[0, 0]) < 1e-6


def test_pure_linear_paths():
    # equality-only problems with no PSD blocks
    feasible = SdpProblem(
        block_dims=[],
        n_free=2,
        constraints=[SdpConstraint(free={0: 1.0, 1: -1.0}, rhs=1.0)],
        obj_free={0: 1.0, 1: -1.0},
    )
    sol = solve(feasible)
    assert sol.status == "optimal"
    assert abs(sol.objective - 1.0) < 1e-8

    unbounded = SdpProblem(
        block_dims=[],
        n_free=2,
        constraints=[SdpConstraint(free={0: 1.0, 1: -1.0}, rhs=1.0)],
        obj_free={0: 1.0, 1: 1.0},
    )
    assert solve(unbounded).status == "unbounded"

    infeasible = SdpProblem(
        block_dims=[],
        n_free=1,
        constraints=[
            SdpConstraint(free={0: 1.0}, rhs=1.0),
            SdpConstraint(free={0: 1.0}, rhs=2.0),
        ],
        obj_free={0: 1.0},
    )
    assert solve(infeasible).status == "infeasible"


def random_feasible_problem(rng):
    """Strictly feasible primal-dual pair by construction."""
    n = int(rng.integers(3, 8))
    s = int(rng.integers(2, 5))
    m = int(rng.integers(3, 10))
    q = int(rng.integers(0, 3))

    mats = []
    diags = []
    for _ in range(m):
        a = rng.normal(size=(n, n))
        mats.append(0.5 * (a + a.T))
        diags.append(rng.normal(size=s))
    g = rng.normal(size=(n, n))
    x0 = g @ g.T + n * np.eye(n)
    xd0 = rng.uniform(0.5, 2.0, size=s)
    f0 = rng.normal(size=q)
    fmat = rng.normal(size=(m, q)) if q else np.zeros((m, 0))

    b = np.array([
        inner(mats[j], x0) + float(diags[j] @ xd0) + float(fmat[j] @ f0)
        for j in range(m)
    ])
    y0 = rng.normal(size=m)
    g2 = rng.normal(size=(n, n))
    s0 = g2 @ g2.T + n * np.eye(n)
    sd0 = rng.uniform(0.5, 2.0, size=s)
    c = sum(y0[j] * mats[j] for j in range(m)) + s0
    cd = sum(y0[j] * diags[j] for j in range(m)) + sd0
    d = fmat.T @ y0

    prob = SdpProblem(
        block_dims=[n, -s],
        n_free=q,
        constraints=[
            SdpConstraint(
                blocks={0: sym_entries(mats[j]),
                        1: [(i, i, float(diags[j][i])) for i in range(s) if diags[j][i] != 0.0]},
                free={i: float(fmat[j, i]) for i in range(q) if fmat[j, i] != 0.0},
                rhs=float(b[j]),
            )
            for j in range(m)
        ],
        obj_blocks={0: sym_entries(c), 1: [(i, i, float(cd[i])) for i in range(s)]},
        obj_free={i: float(d[i]) for i in range(q)},
    )
    return prob, mats, diags, fmat, b, c, cd, d


@pytest.mark.parametrize("seed", range(1000, 1020))
def test_random_feasible_kkt_residuals(seed):
    rng = np.random.default_rng(seed)
    prob, mats, diags, fmat, b, c, cd, d = random_feasible_problem(rng)
    sol = solve(prob, tol=1e-8)
    assert sol.status == "optimal"

    x = sol.block_values[0]
    xd = np.diag(sol.block_values[1])
    f = sol.free_values
    y = sol.y

    # primal feasibility, recomputed from scratch
    for j in range(len(b)):
        lhs = inner(mats[j], x) + float(diags[j] @ xd) + float(fmat[j] @ f)
        assert abs(lhs - b[j]) < 1e-8 * (1.0 + abs(b[j]))
    # cone membership
    assert np.linalg.eigvalsh(x)[0] > -1e-8
    assert np.min(xd) > -1e-8
    # dual feasibility
    smat = c - sum(y[j] * mats[j] for j in range(len(y)))
    sdvec = cd - sum(y[j] * diags[j] for j in range(len(y)))
    assert np.linalg.eigvalsh(smat)[0] > -1e-7
    assert np.min(sdvec) > -1e-7
    if f.size:
        assert np.max(np.abs(fmat.T @ y - d)) < 1e-7
    # complementarity and duality gap
    gap = inner(smat, x) + float(sdvec @ xd)
    pobj = inner(c, x) + float(cd @ xd) + float(d @ f)
    dobj = float(b @ y)
    assert gap < 1e-6 * (1.0 + abs(pobj))
    assert abs(pobj - dobj) < 1e-6 * (1.0 + abs(pobj) + abs(dobj))
    assert sol.residuals["primal"] < 1e-8
    assert sol.residuals["gap"] < 1e-8


def test_solver_deterministic():
    rng = np.random.default_rng(77)
    prob, *_ = random_feasible_problem(rng)
    a = solve(prob)
    b = solve(prob)
    assert a.objective == b.objective
    assert np.array_equal(a.y, b.y)
    assert np.array_equal(a.block_values[0], b.block_values[0])


def test_sdpa_minimal_file_layout(tmp_path):
    prob = SdpProblem(
        block_dims=[1],
        n_free=0,
        constraints=[SdpConstraint(blocks={0: [(0, 0, 1.0)]}, rhs=1.0)],
        obj_blocks={0: [(0, 0, 1.0)]},
    )
    path = tmp_path / "toy.dat-s"
    meta = export_sdpa(prob, str(path))
    text = path.read_text()
    lines = text.strip().split("\n")
    assert lines == ["1", "1", "1", "1.0", "0 1 1 1 -1.0", "1 1 1 1 1.0"]
    assert meta["objective_sign"] == -1.0
    assert meta["objective_offset"] == 0.0


def test_sdpa_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    prob, *_ = random_feasible_problem(rng)
    prob.free_bounds = [(None, None)] * prob.n_free
    if prob.n_free:
        prob.free_bounds[0] = (-3.0, 4.0)
    p1 = tmp_path / "a.dat-s"
    p2 = tmp_path / "b.dat-s"
    export_sdpa(prob, str(p1))
    imported = import_sdpa(str(p1))
    export_sdpa(imported, str(p2))
    assert p1.read_bytes() == p2.read_bytes()


def test_sdpa_objective_mapping(tmp_path):
    # solving the exported problem reproduces the original optimum through
    # the recorded sign and offset
    prob = SdpProblem(
        block_dims=[1],
        n_free=1,
        constraints=[SdpConstraint(blocks={0: [(0, 0, 1.0)]}, free={0: -1.0}, rhs=1.0)],
        obj_blocks={0: [(0, 0, 1.0)]},
        obj_free={0: 1.0},
        free_bounds=[(0.5, None)],
    )
    direct = solve(prob)
    path = tmp_path / "m.dat-s"
    meta = export_sdpa(prob, str(path))
    imported = import_sdpa(str(path))
    indirect = solve(imported)
    assert indirect.status == "optimal"
    # file optimum is max <F0,Y> = -(imported minimum)
    file_opt = -indirect.objective
    recovered = meta["objective_sign"] * file_opt + meta["objective_offset"]
    assert abs(recovered - direct.objective) < 1e-6


def test_sdpa_import_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.dat-s"
    bad.write_text("1\n1\n1\n1.0\n0 1 2 2 1.0\n")
    with pytest.raises(ValueError, match="out of range"):
        import_sdpa(str(bad))
    bad.write_text("1\n2\n1\n1.0\n")
    with pytest.raises(ValueError, match="blocks"):
        import_sdpa(str(bad))
    bad.write_text("1\n1\n-2\n1.0\n1 1 1 2 1.0\n")
    with pytest.raises(ValueError, match="diagonal"):
        import_sdpa(str(bad))


def _cvxpy_solve_imported(problem):
    cvxpy = pytest.importorskip("cvxpy")
    xs = []
    for dim in problem.block_dims:
        if dim > 0:
            xs.append(cvxpy.Variable((dim, dim), PSD=True))
        else:
            xs.append(cvxpy.Variable(-dim, nonneg=True))

    def form(entries_by_block):
        expr = 0
        for k, entries in entries_by_block.items():
            for (i, j, v) in entries:
                if problem.block_dims[k] > 0:
                    expr = expr + v * xs[k][i, j] * (2.0 if i != j else 1.0)
                else:
                    expr = expr + v * xs[k][i]
        return expr

    cons = [form(c.blocks) == c.rhs for c in problem.constraints]
    objective = cvxpy.Minimize(form(problem.obj_blocks))
    cp = cvxpy.Problem(objective, cons)
    cp.solve(solver=cvxpy.SCS, eps=1e-9, max_iters=200000)
    if cp.status not in ("optimal", "optimal_inaccurate"):
        pytest.skip(f"external solver returned {cp.status}")
    return float(cp.value)


def test_external_solver_agrees_on_exported_problem(tmp_path):
    rng = np.random.default_rng(11)
    prob, *_ = random_feasible_problem(rng)
    mine = solve(prob)
    assert mine.status == "optimal"
    path = tmp_path / "x.dat-s"
    meta = export_sdpa(prob, str(path))
    imported = import_sdpa(str(path))
    external_min = _cvxpy_solve_imported(imported)
    recovered = meta["objective_sign"] * (-external_min) + meta["objective_offset"]
    assert abs(recovered - mine.objective) < 1e-5 * (1.0 + abs(mine.objective))
