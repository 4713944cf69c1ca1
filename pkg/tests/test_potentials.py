"""Layer-potential traces: jump relations, transpose duality, interior fields.

Expected values below were frozen from the constant-coefficient split oracle
(continuous-limit Nystrom diagonal) and from closed-form eigenrelations on the
unit circle; bars carry roughly a 10x margin over the measured residuals.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerpot.coefficients import constant_field, sampled_field
from layerpot.geometry import (
    build_closed_curve,
    build_special_domain,
    make_mesh,
    unit_circle,
)
from layerpot.greens import FourierParams, make_evaluator
from layerpot.potentials import (
    BoundaryDensity,
    InteriorField,
    ResolutionError,
    assemble_K,
    assemble_Kt,
    assemble_Lt,
    bmo_density,
    constant_split_operator,
    eval_double,
    eval_single,
    h1_atom,
    jump_check,
    lp_density,
    operator_norm,
    single_layer_trace,
    weak_pde_residual,
    weighted_pairing,
)

I2 = np.eye(2, dtype=complex)
# complex symmetric: the split oracle's diagonal limit exists only when the
# antisymmetric part vanishes (odd 1/r term otherwise)
A_SYM = np.array([[1.2 + 0.08j, 0.15 + 0.05j], [0.15 + 0.05j, 0.9 - 0.02j]])
A_NONSYM = np.array([[1.3 + 0.05j, 0.4 + 0.1j], [0.1 - 0.02j, 0.9]])


def angle_of(mesh):
    return np.arctan2(mesh.nodes[:, 1], mesh.nodes[:, 0])


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def circle():
    mesh = make_mesh(unit_circle(), 16)
    ev = make_evaluator(constant_field(I2))
    return {
        "mesh": mesh,
        "ev": ev,
        "Kp": assemble_K(ev, mesh, "+"),
        "Km": assemble_K(ev, mesh, "-"),
        "Ltp": assemble_Lt(ev, mesh, "+"),
        "S": single_layer_trace(ev, mesh),
    }


@pytest.fixture(scope="module")
def flat():
    xs = np.linspace(-12.0, 12.0, 49)
    geom = build_special_domain((xs, np.zeros_like(xs)), [0.0, 1.0], 12.0)
    mesh = make_mesh(geom, 48)
    ev = make_evaluator(constant_field(I2))
    return {
        "mesh": mesh,
        "Kp": assemble_K(ev, mesh, "+"),
        "Ktp": assemble_Kt(ev, mesh, "+"),
        "Ktm": assemble_Kt(ev, mesh, "-"),
    }


@pytest.fixture(scope="module")
def nonsym():
    mesh = make_mesh(unit_circle(), 16)
    ev_t = make_evaluator(constant_field(A_NONSYM.T))  # K pairs A^T poles
    ev = make_evaluator(constant_field(A_NONSYM))
    return {
        "mesh": mesh,
        "Kp": assemble_K(ev_t, mesh, "+"),
        "Km": assemble_K(ev_t, mesh, "-"),
        "Ktp": assemble_Kt(ev, mesh, "+"),
        "Ktm": assemble_Kt(ev, mesh, "-"),
        "Ltp": assemble_Lt(ev, mesh, "+"),
        "Ltm": assemble_Lt(ev, mesh, "-"),
    }


@pytest.fixture(scope="module")
def sym(circle):
    mesh = circle["mesh"]
    return {
        "mesh": mesh,
        "Kp": assemble_K(make_evaluator(constant_field(A_SYM.T)), mesh, "+"),
        "Ktp": assemble_Kt(make_evaluator(constant_field(A_SYM)), mesh, "+"),
    }


@pytest.fixture(scope="module")
def square():
    geom = build_closed_curve([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0],
                               [-1.0, 1.0]])
    mesh = make_mesh(geom, 24, grading_exponent=2.0)
    ev_t = make_evaluator(constant_field(A_SYM.T))
    return {
        "mesh": mesh,
        "ev_t": ev_t,
        "Kp": assemble_K(ev_t, mesh, "+"),
        "Km": assemble_K(ev_t, mesh, "-"),
    }


# ---------------------------------------------------------------------------
# flat-boundary traces (half-space multipliers are exactly +-1/2)
# ---------------------------------------------------------------------------

def test_flat_half_identity(flat):
    f = np.exp(-flat["mesh"].nodes[:, 0] ** 2)
    scale = np.abs(f).max()
    assert np.abs(flat["Kp"].apply(f) - 0.5 * f).max() <= 1e-8 * scale
    assert np.abs(flat["Ktp"].apply(f) - 0.5 * f).max() <= 1e-8 * scale
    assert np.abs(flat["Ktm"].apply(f) + 0.5 * f).max() <= 1e-8 * scale


# ---------------------------------------------------------------------------
# jump relations on the circle
# ---------------------------------------------------------------------------

def test_indicator_traces(circle):
    one = np.ones(circle["mesh"].n_nodes)
    assert np.abs(circle["Kp"].apply(one) - 1.0).max() <= 1e-8
    assert np.abs(circle["Km"].apply(one)).max() <= 1e-8


def test_jump_relation_smooth(circle):
    th = angle_of(circle["mesh"])
    rep = jump_check(circle["Kp"], circle["Km"],
                     [np.ones_like(th), np.cos(th)])
    assert rep["n_densities"] == 2
    assert rep["max_residual"] <= 1e-8


def test_jump_relation_rough(circle):
    mesh = circle["mesh"]
    rng = np.random.default_rng(3)
    noise = rng.normal(size=mesh.n_nodes) + 1j * rng.normal(size=mesh.n_nodes)
    dens = [
        h1_atom(mesh, [np.cos(0.3), np.sin(0.3)], 0.35),
        h1_atom(mesh, [np.cos(1.1), np.sin(1.1)], 0.30, profile="step"),
        lp_density(noise),
    ]
    rep = jump_check(circle["Kp"], circle["Km"], dens)
    assert rep["max_residual"] <= 2e-4


def test_transpose_jump(nonsym):
    mesh = nonsym["mesh"]
    th = angle_of(mesh)
    f = np.exp(np.sin(th))
    r = nonsym["Ktp"].apply(f) - nonsym["Ktm"].apply(f) - f
    assert np.abs(r).max() <= 1e-7 * np.abs(f).max()
    rng = np.random.default_rng(3)
    g = rng.normal(size=mesh.n_nodes) + 1j * rng.normal(size=mesh.n_nodes)
    r = nonsym["Ktp"].apply(g) - nonsym["Ktm"].apply(g) - g
    assert np.abs(r).max() <= 5e-4 * np.abs(g).max()


# ---------------------------------------------------------------------------
# circle eigenrelations.  With the kernel normalised as
# +log(q)/(4 pi sqrt(det A_s)) the single layer sends cos(k th) to
# -cos(k th)/(2k), and the tangential-derivative trace sends cos to +sin/2.
# ---------------------------------------------------------------------------

def test_single_layer_eigenrelations(circle):
    th = angle_of(circle["mesh"])
    S = circle["S"]
    assert np.abs(S @ np.ones_like(th)).max() <= 1e-10
    assert np.abs(S @ np.cos(th) + 0.5 * np.cos(th)).max() <= 1e-10
    assert np.abs(S @ np.cos(3 * th) + np.cos(3 * th) / 6.0).max() <= 1e-10


def test_tangential_trace_eigenrelation(circle):
    th = angle_of(circle["mesh"])
    r = circle["Ltp"].apply(np.cos(th)) - 0.5 * np.sin(th)
    assert np.abs(r).max() <= 1e-10


def test_tangential_trace_loops(circle):
    mesh = circle["mesh"]
    th = angle_of(mesh)
    f, g = np.exp(np.sin(th)), np.sin(2 * th)
    # derivative of a single-layer field integrates to zero around the loop
    assert abs(np.sum(mesh.weights * circle["Ltp"].apply(f))) <= 1e-10
    # and the pairing is antisymmetric (integration by parts on a loop)
    skew = (weighted_pairing(mesh, g, circle["Ltp"].apply(f))
            + weighted_pairing(mesh, f, circle["Ltp"].apply(g)))
    assert abs(skew) <= 1e-10


def test_tangential_trace_side_independent(nonsym):
    d = np.abs(nonsym["Ltp"].matrix - nonsym["Ltm"].matrix).max()
    assert d <= 5e-4


def test_interior_flux_annihilation(nonsym):
    # total flux of a single-layer field through the closed boundary: zero
    # from inside, the full weight of the density from outside
    mesh = nonsym["mesh"]
    w = mesh.weights
    f = np.cos(angle_of(mesh)) + 0.5
    assert abs(np.sum(w * nonsym["Ktm"].apply(f))) <= 1e-8
    assert abs(np.sum(w * nonsym["Ktp"].apply(f)) - np.sum(w * f)) <= 1e-8


# ---------------------------------------------------------------------------
# split-oracle agreement (symmetric coefficients only; see module docstring)
# ---------------------------------------------------------------------------

def test_split_oracle_identity_coefficients(circle):
    mesh = circle["mesh"]
    for side, op in (("+", circle["Kp"]), ("-", circle["Km"])):
        ref = constant_split_operator(I2, mesh, op="K", side=side)
        assert np.abs(op.matrix - ref).max() <= 5e-5


def test_split_oracle_complex_symmetric(sym):
    mesh = sym["mesh"]
    ref = constant_split_operator(A_SYM, mesh, op="K", side="+")
    assert np.abs(sym["Kp"].matrix - ref).max() <= 2e-4
    ref = constant_split_operator(A_SYM, mesh, op="Kt", side="+")
    assert np.abs(sym["Ktp"].matrix - ref).max() <= 2e-4


def test_split_oracle_action_on_atoms(circle):
    mesh = circle["mesh"]
    ref = constant_split_operator(I2, mesh, op="K", side="+")
    w = mesh.weights
    for profile in ("bump", "step"):
        f = h1_atom(mesh, [np.cos(0.3), np.sin(0.3)], 0.35, profile=profile)
        r = (circle["Kp"].matrix - ref) @ f.values
        rel = (np.sqrt(np.sum(w * np.abs(r) ** 2))
               / np.sqrt(np.sum(w * np.abs(f.values) ** 2)))
        assert rel <= 1e-4


# ---------------------------------------------------------------------------
# transpose duality: K^t = W^-1 K^T W row-by-row in the far field, and as a
# bilinear pairing identity for smooth densities everywhere
# ---------------------------------------------------------------------------

def test_transpose_far_entries(nonsym):
    mesh = nonsym["mesh"]
    n_pan = len(mesh.panel_bounds)
    pi = mesh.panel_index
    d = np.abs(pi[:, None] - pi[None, :])
    far = np.minimum(d, n_pan - d) >= 4
    w = mesh.weights
    dual = nonsym["Kp"].matrix.T * w[None, :] / w[:, None]
    assert np.abs((nonsym["Ktp"].matrix - dual)[far]).max() <= 1e-12


def test_transpose_pairing(nonsym):
    mesh = nonsym["mesh"]
    th = angle_of(mesh)
    f, g = np.exp(np.sin(th)), np.cos(2 * th) + 0.3
    for K, Kt in ((nonsym["Kp"], nonsym["Ktp"]),
                  (nonsym["Km"], nonsym["Ktm"])):
        lhs = weighted_pairing(mesh, g, K.apply(f))
        rhs = weighted_pairing(mesh, f, Kt.apply(g))
        assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), 1.0)


# ---------------------------------------------------------------------------
# interior evaluation
# ---------------------------------------------------------------------------

def test_double_layer_indicator(circle):
    mesh = circle["mesh"]
    one = np.ones(mesh.n_nodes)
    for p in ([0.0, 0.0], [0.4, -0.3], [-0.55, 0.2]):
        u, gu = eval_double(circle["ev"], mesh, one, p)
        assert abs(u - 1.0) <= 1e-10
        assert np.abs(gu).max() <= 1e-10
    for p in ([1.7, 0.4], [-2.2, 0.1]):
        u, _ = eval_double(circle["ev"], mesh, one, p)
        assert abs(u) <= 1e-10


def test_double_layer_indicator_complex(nonsym):
    # the unit strength of the double layer is coefficient-independent
    mesh = nonsym["mesh"]
    ev_t = make_evaluator(constant_field(A_NONSYM.T))
    one = np.ones(mesh.n_nodes)
    for p in ([0.0, 0.0], [0.4, -0.3]):
        u, _ = eval_double(ev_t, mesh, one, p)
        assert abs(u - 1.0) <= 1e-9
    u, _ = eval_double(ev_t, mesh, one, [1.7, 0.4])
    assert abs(u) <= 1e-9


def test_double_layer_harmonic_extension(circle):
    # boundary data cos(th) extends to u = x/ (for the disk: u(r,th)=r cos th)
    # through the double layer with density 2 cos(th)
    mesh = circle["mesh"]
    f = 2.0 * np.cos(angle_of(mesh))
    u, gu = eval_double(circle["ev"], mesh, f, [0.5, 0.0])
    assert abs(u - 0.5) <= 1e-8
    assert np.abs(gu - np.array([1.0, 0.0])).max() <= 1e-8


def test_single_layer_center(circle):
    mesh = circle["mesh"]
    u, gu = eval_single(circle["ev"], mesh, np.ones(mesh.n_nodes), [0.0, 0.0])
    assert abs(u) <= 1e-10
    assert np.abs(gu).max() <= 1e-10


def test_weak_pde_residual_double_layer(circle):
    mesh = circle["mesh"]
    fld = constant_field(A_SYM)
    ev_t = make_evaluator(constant_field(A_SYM.T))
    f = np.cos(angle_of(mesh))

    def field_eval(P):
        vals = [eval_double(ev_t, mesh, f, p) for p in np.atleast_2d(P)]
        return (np.array([v for v, _ in vals]),
                np.array([g for _, g in vals]))

    u = InteriorField(field_eval, provenance="double-layer test")
    assert weak_pde_residual(fld, u, np.array([0.15, -0.1]), 0.35) <= 1e-8


def test_resolution_guard(circle):
    mesh = circle["mesh"]
    X = mesh.nodes[0] * (1.0 - 1e-4)
    with pytest.raises(ResolutionError) as exc:
        eval_double(circle["ev"], mesh, np.ones(mesh.n_nodes), X)
    assert exc.value.distance < 1e-3


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def test_atom_invariants(circle):
    mesh = circle["mesh"]
    c = np.array([np.cos(0.3), np.sin(0.3)])
    for profile in ("bump", "step"):
        atom = h1_atom(mesh, c, 0.35, profile=profile)
        assert abs(np.sum(mesh.weights * atom.values)) <= 1e-10
        assert np.abs(atom.values).max() <= (1.0 + 1e-10) / 0.35
        d = np.linalg.norm(mesh.nodes - c, axis=1)
        assert np.all(atom.values[d >= 0.35] == 0.0)
        assert atom.space_tag[0] == "H1Atom"
    assert h1_atom(mesh, c, 0.35).smooth
    assert not h1_atom(mesh, c, 0.35, profile="step").smooth


def test_step_atom_declines_gradient(circle):
    mesh = circle["mesh"]
    c = [np.cos(1.1), np.sin(1.1)]
    step = h1_atom(mesh, c, 0.30, profile="step")
    u, gu = eval_double(circle["ev"], mesh, step, [0.0, 0.0])
    assert gu is None and np.isfinite(u.real)
    bump = h1_atom(mesh, c, 0.30)
    _, gu = eval_double(circle["ev"], mesh, bump, [0.0, 0.0])
    assert gu is not None


def test_atom_needs_resolved_support(circle):
    with pytest.raises(ValueError):
        h1_atom(circle["mesh"], [1.0, 0.0], 1e-3)


def test_density_tags(circle):
    mesh = circle["mesh"]
    v = np.cos(angle_of(mesh))
    assert lp_density(v, p=3.0).space_tag == ("Lp", 3.0)
    assert bmo_density(v).space_tag == ("BMO",)
    # pairing is bilinear and accepts tagged or raw densities
    a = weighted_pairing(mesh, lp_density(v), 2.0 * v)
    b = 2.0 * weighted_pairing(mesh, v, v)
    assert abs(a - b) <= 1e-12 * abs(b)


# ---------------------------------------------------------------------------
# operator norms and coefficient perturbation
# ---------------------------------------------------------------------------

def test_operator_norm_disk(circle):
    # on the disk the interior trace has eigenvalues 1 (constants) and 1/2,
    # so the weighted operator norm is 1; stable under mesh doubling
    n16 = operator_norm(circle["Kp"])
    assert abs(n16 - 1.0) <= 1e-6
    mesh2 = make_mesh(unit_circle(), 32)
    n32 = operator_norm(assemble_K(circle["ev"], mesh2, "+"))
    assert abs(n32 - n16) <= 1e-6


def test_perturbation_linearity(circle):
    mesh = circle["mesh"]
    E = np.array([[0.3, 0.1 + 0.2j], [-0.1j, 0.5]])
    norms = {}
    for eps in (0.02, 0.05, 0.1):
        ev = make_evaluator(constant_field(I2 + eps * E.T))
        K = assemble_K(ev, mesh, "+")
        norms[eps] = operator_norm(K.matrix - circle["Kp"].matrix,
                                   weights=mesh.weights)
    assert abs(norms[0.05] / norms[0.02] - 2.5) <= 0.15 * 2.5
    assert abs(norms[0.1] / norms[0.05] - 2.0) <= 0.15 * 2.0


# ---------------------------------------------------------------------------
# corner domain with graded panels
# ---------------------------------------------------------------------------

def test_graded_square_jump(square):
    mesh = square["mesh"]
    one = np.ones(mesh.n_nodes)
    f = np.exp(np.sin(2.0 * np.pi * mesh.params))
    rep = jump_check(square["Kp"], square["Km"], [one, f])
    assert rep["residuals"][0] <= 1e-10
    assert rep["residuals"][1] <= 1e-7
    assert np.abs(square["Kp"].apply(one) - 1.0).max() <= 1e-10


def test_graded_square_indicator(square):
    mesh = square["mesh"]
    one = np.ones(mesh.n_nodes)
    for p in ([0.0, 0.0], [0.5, -0.4]):
        u, _ = eval_double(square["ev_t"], mesh, one, p)
        assert abs(u - 1.0) <= 1e-7


# ---------------------------------------------------------------------------
# structural checks and reported tolerances
# ---------------------------------------------------------------------------

def test_operator_metadata(circle, flat):
    for op, tag in ((circle["Kp"], "Kplus"), (circle["Km"], "Kminus"),
                    (flat["Ktp"], "KtPlus"), (flat["Ktm"], "KtMinus"),
                    (circle["Ltp"], "Lt")):
        assert op.op_tag == tag
        assert op.limit_offsets.shape == (op.mesh.n_nodes,)
        assert np.all(op.limit_offsets > 0.0)
        assert 0.0 < op.tolerance < 5e-5


# ---------------------------------------------------------------------------
# variable coefficients through the frequency-sweep route (slow)
# ---------------------------------------------------------------------------

def test_variable_flat_half_identity():
    def mat(x):
        a = 1.0 + 0.5 * np.exp(-np.asarray(x, dtype=float) ** 2)
        z = np.zeros_like(a)
        return np.stack([np.stack([a, z], -1), np.stack([z, a], -1)], -2)

    field = sampled_field(mat, -4.5, 4.5, 1025)
    xs = np.linspace(-4.5, 4.5, 9)
    geom = build_special_domain((xs, np.zeros_like(xs)), [0.0, 1.0], 4.5)
    mesh = make_mesh(geom, 8, panel_order=4)
    params = FourierParams(n_cells=300, panels_top=3, panels_low=1)
    K = assemble_K(make_evaluator(field, params=params), mesh, "+")
    f = np.exp(-mesh.nodes[:, 0] ** 2)
    r = np.abs(K.apply(f) - 0.5 * f).max() / np.abs(f).max()
    assert r <= 1e-5


# ---------------------------------------------------------------------------
# property: the jump relation holds for arbitrary low-order trigonometric
# densities, not just the probes above
# ---------------------------------------------------------------------------

@settings(deadline=None, max_examples=25)
@given(st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6))
def test_jump_relation_random_trig(circle, coeffs):
    th = angle_of(circle["mesh"])
    f = sum(c * np.cos((k % 3 + 1) * th) if k < 3
            else c * np.sin((k % 3 + 1) * th)
            for k, c in enumerate(coeffs))
    f = np.asarray(f) + 0.0
    r = circle["Kp"].apply(f) - circle["Km"].apply(f) - f
    assert np.abs(r).max() <= 1e-8 * (1.0 + np.abs(f).max())
