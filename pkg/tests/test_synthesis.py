"""Tests for series-expansion controller synthesis and fixed-eps refinement."""

import numpy as np
import pytest

from avgbound.bound import PolySystem, cylinder_wake_system, upper_bound
from avgbound.polynomial import Polynomial, grad_dot, parse_poly
from avgbound.synthesis import (
    Controller,
    ExpansionState,
    ExpansionTerm,
    StepOptions,
    refine_fixed_eps,
)

RHO = 400.0


def coef_distance(a: Polynomial, b: Polynomial) -> float:
    return (a - b).max_abs_coef()


@pytest.fixture(scope="module")
def cylinder():
    return cylinder_wake_system()


@pytest.fixture(scope="module")
def plain_cert(cylinder):
    return upper_bound(cylinder, d_v=2)


@pytest.fixture(scope="module")
def chain_free(cylinder):
    st = ExpansionState(cylinder)
    st.step(StepOptions(d_v=2))
    st.step(StepOptions(d_v=2, d_u=2, multiplier_sign="free", rho=RHO))
    return st


@pytest.fixture(scope="module")
def chain_sos(cylinder):
    st = ExpansionState(cylinder)
    st.step(StepOptions(d_v=2))
    st.step(StepOptions(d_v=2, d_u=2, multiplier_sign="sos", rho=RHO))
    return st


# ----------------------------------------------------------------------
# series expansion correctness (no solver in the loop)

def manual_toy_state():
    # dx/dt = -x + y^2 + u, dy/dt = -y + x u, cost x^2 + y^2 + 0.3 u + u^2
    x = Polynomial.variable(2, 0)
    y = Polynomial.variable(2, 1)
    one = Polynomial.constant(2, 1.0)
    sys_ = PolySystem(
        state_names=["x", "y"], input_names=["u"],
        f=[-x + y * y, -y],
        g=[[one], [x]],
        phi=parse_poly("x^2 + y^2 + 0.3*u + u^2", ["x", "y", "u"]),
    )
    zero = Polynomial.zero(2)
    v0 = x * x + 2.0 * (y * y)
    v1 = 0.7 * (x * y)
    u1 = 0.4 * x - 0.2 * (y * y)
    v2 = 0.1 * (y * y)
    u2 = 0.05 * (x * y)
    st = ExpansionState(sys_)
    for order, (v, u, c) in enumerate(
            [(v0, [], 1.3), (v1, [u1], -0.5), (v2, [u2], 0.2)]):
        st.terms.append(ExpansionTerm(
            order=order, C=c, V=v, u=list(u), multipliers=[],
            residual=zero, status="manual", multiplier_sign="sos",
            sos_residual=0.0))
    return sys_, st, (v0, v1, v2, u1, u2)


def test_series_reconstruction_matches_hand_expansion():
    sys_, st, (v0, v1, v2, u1, u2) = manual_toy_state()
    f, (gcol,) = sys_.f, zip(*sys_.g)
    gcol = list(gcol)

    def gdot(v):
        return grad_dot(gcol, v)

    phi_x = sys_.phi_states_only()
    f0 = grad_dot(f, v0) + phi_x - 1.3
    f1 = grad_dot(f, v1) + gdot(v0) * u1 + 0.3 * u1 - (-0.5)
    f2 = (grad_dot(f, v2) + gdot(v1) * u1 + gdot(v0) * u2
          + 0.3 * u2 + u1 * u1 - 0.2)
    for j, hand in enumerate([f0, f1, f2]):
        assert coef_distance(st.reconstruct_residual(j), hand) <= 1e-12


def test_reconstruction_rejects_unsolved_order():
    sys_, st, _ = manual_toy_state()
    with pytest.raises(IndexError):
        st.reconstruct_residual(3)


# ----------------------------------------------------------------------
# order zero

def test_step_zero_matches_plain_bound(chain_free, plain_cert):
    t0 = chain_free.terms[0]
    assert t0.status == "optimal"
    assert abs(t0.C - plain_cert.C) <= 1e-9


def test_uncontrolled_bound_value(plain_cert):
    # closed-form cycle average for the wake model: 6.5837
    assert 6.54 <= plain_cert.C <= 6.64


def test_order_zero_residual_identity(cylinder, chain_free):
    t0 = chain_free.terms[0]
    hand = grad_dot(cylinder.f, t0.V) + cylinder.phi_states_only() - t0.C
    assert coef_distance(t0.residual, hand) <= 1e-8
    # the certified inequality: residual <= 0 everywhere
    rng = np.random.default_rng(7)
    pts = rng.uniform(-4.0, 4.0, size=(300, 3))
    vals = t0.residual.eval_many(pts)
    assert vals.max() <= 1e-6


# ----------------------------------------------------------------------
# order one, certifying multipliers

def test_sos_step_one_is_zero(chain_sos):
    t1 = chain_sos.terms[1]
    assert t1.status == "optimal"
    assert abs(t1.C) <= 1e-4
    assert all(u.is_zero() for u in t1.u)
    assert t1.V.is_zero()


def test_sos_step_one_zero_at_degree_four(cylinder):
    st = ExpansionState(cylinder)
    st.step(StepOptions(d_v=2))
    t1 = st.step(StepOptions(d_v=2, d_u=4, multiplier_sign="sos", rho=RHO))
    assert t1.status == "optimal"
    assert abs(t1.C) <= 1e-4


def test_sos_series_keeps_order_zero_bound(cylinder):
    st = ExpansionState(cylinder)
    st.step(StepOptions(d_v=2))
    st.step(StepOptions(d_v=2, d_u=2, multiplier_sign="sos", rho=RHO))
    st.step(StepOptions(d_v=2, d_u=2, multiplier_sign="sos", rho=RHO))
    assert [t.C for t in st.terms[1:]] == [0.0, 0.0]
    ctrl = st.assemble(epsilon=5e-3, kappa=0.5)
    assert ctrl.bound == st.terms[0].C
    assert ctrl.mode == "sos"
    assert ctrl.bound_label == "certified for small eps"


# ----------------------------------------------------------------------
# order one, exploratory multipliers

def test_free_step_one_strictly_negative(chain_free):
    t1 = chain_free.terms[1]
    assert t1.status == "optimal"
    assert t1.C <= -250.0


def test_step_one_optimum_nonpositive(chain_free, chain_sos):
    # the zero increment is always feasible, so the optimum cannot be positive
    assert chain_free.terms[1].C <= 1e-9
    assert chain_sos.terms[1].C <= 1e-9


def test_free_step_respects_gauge_box(chain_free):
    t1 = chain_free.terms[1]
    slack = 1e-6 * RHO
    for poly in [t1.V, *t1.u, *t1.multipliers]:
        assert poly.max_abs_coef() <= RHO + slack


def test_free_step_control_is_odd_in_the_oscillating_pair(chain_free):
    # the wake model is symmetric under (a1, a2) -> (-a1, -a2); the useful
    # first-order feedback flips sign with the pair
    u1 = chain_free.terms[1].u[0]
    top = u1.max_abs_coef()
    for mono, coef in u1.terms.items():
        parity = (mono[0] + mono[1]) % 2
        if parity == 0:
            assert abs(coef) <= 1e-9 * top


def test_free_step_control_sign_pattern(chain_free):
    u1 = chain_free.terms[1].u[0]
    assert u1.coefficient((1, 0, 0)) > 0
    assert u1.coefficient((0, 1, 0)) < 0
    assert u1.coefficient((1, 0, 1)) > 0
    assert u1.coefficient((0, 1, 1)) < 0


def test_free_step_degree_four_no_worse(cylinder, chain_free):
    st = ExpansionState(cylinder)
    st.step(StepOptions(d_v=2))
    t1 = st.step(StepOptions(d_v=2, d_u=4, multiplier_sign="free", rho=RHO))
    assert t1.status == "optimal"
    assert t1.C <= chain_free.terms[1].C + 1e-6


def test_free_step_gauge_scales_linearly(cylinder, chain_free):
    # the order-one problem is jointly homogeneous, so halving the box
    # halves the optimum
    st = ExpansionState(cylinder)
    st.step(StepOptions(d_v=2))
    t1 = st.step(StepOptions(d_v=2, d_u=2, multiplier_sign="free",
                             rho=RHO / 2))
    ref = chain_free.terms[1].C
    assert abs(2.0 * t1.C - ref) <= 1e-3 * abs(ref)


def test_step_one_residual_identity(cylinder, chain_free):
    t0, t1 = chain_free.terms
    gcol = [cylinder.g[i][0] for i in range(3)]
    hand = (grad_dot(cylinder.f, t1.V)
            + grad_dot(gcol, t0.V) * t1.u[0] - t1.C)
    assert coef_distance(t1.residual, hand) <= 1e-8
    assert coef_distance(chain_free.reconstruct_residual(1), hand) <= 1e-8


def test_step_one_certificate_recomposition(chain_free):
    # the solved constraint -F1 + S0 F0 must be a sum of squares; spot-check
    # nonnegativity on a sampling cloud
    t0, t1 = chain_free.terms
    body = -t1.residual + t1.multipliers[0] * t0.residual
    rng = np.random.default_rng(11)
    pts = rng.uniform(-4.0, 4.0, size=(400, 3))
    vals = body.eval_many(pts)
    assert vals.min() >= -1e-6 * (1.0 + body.max_abs_coef())


# ----------------------------------------------------------------------
# step validation

def test_step_rejects_odd_certificate_degree(cylinder):
    st = ExpansionState(cylinder)
    with pytest.raises(ValueError):
        st.step(StepOptions(d_v=3))


def test_step_rejects_unknown_multiplier_sign(cylinder):
    st = ExpansionState(cylinder)
    with pytest.raises(ValueError):
        st.step(StepOptions(d_v=2, multiplier_sign="sometimes"))


def test_controlled_step_needs_an_input():
    x = Polynomial.variable(1, 0)
    sys_ = PolySystem(state_names=["x"], input_names=[], f=[-x], g=[[]],
                      phi=x * x)
    st = ExpansionState(sys_)
    st.step(StepOptions(d_v=2))
    with pytest.raises(ValueError):
        st.step(StepOptions(d_v=2))


def test_step_rejects_wrong_multiplier_degree_count(cylinder):
    st = ExpansionState(cylinder)
    st.step(StepOptions(d_v=2))
    with pytest.raises(ValueError):
        st.step(StepOptions(d_v=2, d_s=[2, 2]))


# ----------------------------------------------------------------------
# controller assembly and serialization

def test_assemble_arithmetic(chain_free):
    c0, c1 = chain_free.terms[0].C, chain_free.terms[1].C
    ctrl = chain_free.assemble(epsilon=8.7e-4, kappa=0.5)
    assert ctrl.bound == c0 + 8.7e-4 * 0.5 * c1
    assert ctrl.bound < c0
    assert ctrl.mode == "free"
    assert ctrl.bound_label == "unverified (asymptotic)"
    assert ctrl.C0 == c0 and ctrl.C1 == c1


def test_assemble_zero_eps_is_uncontrolled(chain_free):
    ctrl = chain_free.assemble(epsilon=0.0, kappa=0.5)
    assert ctrl.bound == chain_free.terms[0].C
    assert all(u.is_zero() for u in ctrl.control_polys())


def test_assemble_requires_a_solved_order(cylinder):
    with pytest.raises(ValueError):
        ExpansionState(cylinder).assemble(epsilon=1e-3, kappa=0.5)


def test_control_polys_scale_with_eps(chain_free):
    ctrl = chain_free.assemble(epsilon=1e-2, kappa=0.5)
    u_at_stored = ctrl.control_polys()[0]
    u_at_double = ctrl.control_polys(epsilon=2e-2)[0]
    assert coef_distance(u_at_double, 2.0 * u_at_stored) <= 1e-12


def test_controller_roundtrip(tmp_path, chain_free):
    ctrl = chain_free.assemble(epsilon=8.7e-4, kappa=0.5)
    path = tmp_path / "controller.json"
    ctrl.save(str(path))
    back = Controller.load(str(path))
    assert back.epsilon == ctrl.epsilon
    assert back.kappa == ctrl.kappa
    assert back.C0 == ctrl.C0 and back.C1 == ctrl.C1
    assert back.bound == ctrl.bound
    assert back.state_names == ctrl.state_names
    for u_back, u_orig in zip(back.u_terms[0], ctrl.u_terms[0]):
        assert coef_distance(u_back, u_orig) == 0.0
    for r_back, r_orig in zip(back.residuals, ctrl.residuals):
        assert coef_distance(r_back, r_orig) == 0.0


def test_controller_validation():
    def make(eps, kappa):
        return Controller(state_names=["x"], input_names=["u"],
                          epsilon=eps, kappa=kappa, u_terms=[], C0=1.0,
                          C1=0.0, bound=1.0, bound_label="", mode="sos")

    with pytest.raises(ValueError):
        make(-1e-3, 0.5)
    with pytest.raises(ValueError):
        make(1e-3, 0.0)
    with pytest.raises(ValueError):
        make(1e-3, 1.0)
    make(0.0, 0.5)


# ----------------------------------------------------------------------
# fixed-eps refinement

def test_refine_zero_eps_reduces_to_plain_bound(cylinder, chain_free,
                                                plain_cert):
    ctrl = chain_free.assemble(epsilon=0.0, kappa=0.5)
    cert = refine_fixed_eps(cylinder, ctrl, d_v=2)
    assert cert.status == "optimal"
    assert abs(cert.C - plain_cert.C) <= 1e-9


def test_refine_small_eps_improves_on_uncontrolled(cylinder, chain_free,
                                                   plain_cert):
    ctrl = chain_free.assemble(epsilon=8.7e-4, kappa=0.5)
    cert = refine_fixed_eps(cylinder, ctrl, d_v=4)
    assert cert.status == "optimal"
    assert 0.0 < cert.C < plain_cert.C


def test_refine_reports_infeasible_at_low_degree(cylinder, chain_free):
    # the substituted cost carries a negative quartic top (-eps^2 u1^2 terms)
    # that a quadratic certificate cannot absorb
    ctrl = chain_free.assemble(epsilon=8.7e-4, kappa=0.5)
    cert = refine_fixed_eps(cylinder, ctrl, d_v=2)
    assert cert.status != "optimal"
    assert np.isnan(cert.C)


def test_refine_relaxed_no_worse(cylinder, chain_free):
    ctrl = chain_free.assemble(epsilon=3e-3, kappa=0.5)
    plain = refine_fixed_eps(cylinder, ctrl, d_v=4)
    relaxed = refine_fixed_eps(cylinder, ctrl, d_v=4, relax=True)
    assert plain.status == "optimal"
    assert relaxed.status == "optimal"
    assert relaxed.C <= plain.C + 1e-6
    assert relaxed.sizes["relaxed"] is True
    assert plain.sizes["relaxed"] is False


def test_refine_rejects_bad_degree(cylinder, chain_free):
    ctrl = chain_free.assemble(epsilon=1e-3, kappa=0.5)
    for bad in (3, 0, -2):
        with pytest.raises(ValueError):
            refine_fixed_eps(cylinder, ctrl, d_v=bad)
