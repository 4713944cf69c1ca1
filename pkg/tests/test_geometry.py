"""Domain construction, quadrature meshes, nontangential cone sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerpot.geometry import (
    ApertureError,
    ConeSampler,
    GeometryError,
    ahlfors_david_constant,
    build_closed_curve,
    build_special_domain,
    build_parametric_loop,
    cone_points,
    geometry_from_json,
    geometry_to_json,
    make_mesh,
    mesh_to_csv,
    unit_circle,
)

E_UP = np.array([0.0, 1.0])


def flat_graph(T=10.0):
    xs = np.linspace(-T, T, 41)
    return build_special_domain((xs, np.zeros_like(xs)), E_UP, T)


def wedge_graph(T=4.0):
    xs = np.linspace(-T, T, 81)
    return build_special_domain((xs, np.abs(xs) / 2), E_UP, T)


def unit_square():
    return build_closed_curve([[0, 0], [1, 0], [1, 1], [0, 1]])


# -- special domains ----------------------------------------------------------

def test_flat_graph_constant():
    geom = flat_graph()
    assert geom.lipschitz_k1 == 0.0
    assert np.allclose(geom.phi(np.linspace(-9, 9, 7)), 0.0)


def test_wedge_slope():
    assert wedge_graph().lipschitz_k1 == pytest.approx(0.5)


def test_sine_graph_slope_matches_sample_differences():
    T = np.pi
    xs = np.linspace(-T, T, 257)
    ys = 0.3 * np.sin(xs)
    expected = np.max(np.abs(np.diff(ys) / np.diff(xs)))
    geom = build_special_domain((xs, ys), E_UP, T)
    assert geom.lipschitz_k1 == pytest.approx(expected)
    assert abs(geom.lipschitz_k1 - 0.3) < 0.01


def test_special_domain_rejects_bad_truncation():
    xs = np.linspace(-1, 1, 5)
    with pytest.raises(GeometryError):
        build_special_domain((xs, np.zeros(5)), E_UP, -1.0)
    with pytest.raises(GeometryError):
        build_special_domain((xs, np.zeros(5)), E_UP, 2.0)  # samples too short


def test_special_domain_rejects_nonfinite():
    xs = np.linspace(-1, 1, 5)
    ys = np.array([0.0, np.inf, 0.0, 0.0, 0.0])
    with pytest.raises(GeometryError):
        build_special_domain((xs, ys), E_UP, 1.0)


def test_special_domain_rejects_non_unit_e():
    xs = np.linspace(-1, 1, 5)
    with pytest.raises(GeometryError):
        build_special_domain((xs, np.zeros(5)), np.array([0.0, 2.0]), 1.0)


def test_contains_uses_graph_side():
    geom = wedge_graph()
    assert geom.contains(np.array([[0.0, 1.0]]))[0]
    assert not geom.contains(np.array([[0.0, -1.0]]))[0]
    assert not geom.contains(np.array([[2.0, 0.5]]))[0]   # below phi(2)=1


# -- closed curves -------------------------------------------------------------

def test_circle_polygon_perimeter():
    t = np.linspace(0, 2 * np.pi, 129)[:-1]
    geom = build_closed_curve(np.stack([np.cos(t), np.sin(t)], axis=1))
    assert abs(geom.arclength() - 2 * np.pi) < 1e-3


def test_square_perimeter():
    assert unit_square().arclength() == pytest.approx(4.0)


def test_reentrant_hexagon_accepted_and_flagged():
    # L-shape: reentrant corner at (1,1)
    verts = [[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]]
    geom = build_closed_curve(verts)
    mesh = make_mesh(geom, 24, grading_exponent=3.0)
    assert mesh.corner_panel.any()
    # every vertex of the L is a genuine corner: all six flagged neighborhoods
    assert len(geom.corner_params()) == 6


def test_orientation_normalized():
    cw = build_closed_curve([[0, 0], [0, 1], [1, 1], [1, 0]])
    mesh = make_mesh(cw, 8)
    # outward normal on the bottom edge points down regardless of input order
    bottom = np.abs(mesh.nodes[:, 1]) < 1e-12
    assert bottom.any()
    assert np.all(mesh.normals[bottom, 1] < 0)


def test_rejects_self_intersection():
    with pytest.raises(GeometryError):
        build_closed_curve([[0, 0], [1, 1], [1, 0], [0, 1]])


def test_rejects_too_few_vertices():
    with pytest.raises(GeometryError):
        build_closed_curve([[0, 0], [1, 0]])


# -- meshes ---------------------------------------------------------------------

def test_circle_mesh_weight_sum():
    mesh = make_mesh(unit_circle(), 32)
    assert abs(mesh.weights.sum() - 2 * np.pi) < 1e-10


def test_quadrature_convergence_order():
    # the circle's arclength density is constant (exact at any resolution),
    # so measure the decay on an ellipse where |gamma'| actually varies
    pos = lambda t: np.stack([2 * np.cos(t), np.sin(t)], axis=-1)
    der = lambda t: np.stack([-2 * np.sin(t), np.cos(t)], axis=-1)
    geom = build_parametric_loop(pos, der)
    ref = make_mesh(geom, 512).weights.sum()
    errs = [abs(make_mesh(geom, n).weights.sum() - ref) for n in (8, 16)]
    assert errs[1] <= max(errs[0] / 16.0, 1e-13)


def test_graded_square_concentrates_nodes():
    mesh = make_mesh(unit_square(), 16, grading_exponent=3.0)
    lens = mesh.panel_length()
    # per-panel node density (order/length): corner-adjacent vs mid-edge
    corner_density = mesh.panel_order / lens[mesh.corner_panel].min()
    mid_density = mesh.panel_order / lens[~mesh.corner_panel].max()
    assert corner_density >= 10 * mid_density
    d_corner = np.min(np.linalg.norm(mesh.nodes - np.array([0.0, 0.0]), axis=1))
    d_mid = np.min(np.linalg.norm(mesh.nodes - np.array([0.5, 0.0]), axis=1))
    assert d_corner < d_mid


def test_flat_graph_normals_point_down():
    geom = flat_graph(T=1.0)
    mesh = make_mesh(geom, 8)
    assert np.allclose(mesh.normals, [0.0, -1.0])
    assert np.allclose(mesh.tangents, [1.0, 0.0])


def test_graph_normal_formula():
    geom = wedge_graph()
    mesh = make_mesh(geom, 16)
    p = geom.phi_prime(mesh.params)
    expected = (p[:, None] * geom.eperp - geom.e) / np.sqrt(1 + p**2)[:, None]
    assert np.abs(mesh.normals - expected).max() < 1e-12


def test_mesh_rejects_few_panels():
    with pytest.raises(GeometryError):
        make_mesh(unit_circle(), 4)


def test_mesh_csv_export(tmp_path):
    mesh = make_mesh(unit_circle(), 8)
    path = tmp_path / "mesh.csv"
    mesh_to_csv(mesh, path)
    text = path.read_text().splitlines()
    assert text[0] == "node_x,node_y,weight,nu_x,nu_y,tau_x,tau_y,panel"
    assert len(text) == mesh.n_nodes + 1


def test_dtau_differentiates_coordinate():
    mesh = make_mesh(unit_circle(), 24)
    theta = np.arctan2(mesh.nodes[:, 1], mesh.nodes[:, 0])
    got = mesh.dtau_matrix() @ np.sin(theta)
    assert np.abs(got - np.cos(theta)).max() < 1e-8


slopes = st.lists(st.floats(-0.9, 0.9, allow_nan=False), min_size=4, max_size=12)


@given(slopes)
@settings(max_examples=25, deadline=None)
def test_mesh_frames_orthonormal(sl):
    xs = np.linspace(-2.0, 2.0, len(sl) + 1)
    ys = np.concatenate([[0.0], np.cumsum(np.array(sl) * np.diff(xs))])
    geom = build_special_domain((xs, ys), E_UP, 2.0)
    assert geom.lipschitz_k1 <= 0.9 + 1e-12
    mesh = make_mesh(geom, 12)
    assert np.abs(np.einsum("ni,ni->n", mesh.normals, mesh.tangents)).max() < 1e-12
    assert np.abs(np.linalg.norm(mesh.normals, axis=1) - 1).max() < 1e-12
    assert np.abs(np.linalg.norm(mesh.tangents, axis=1) - 1).max() < 1e-12
    # arclength of a graph over [-T,T] is at least the parameter width
    assert mesh.weights.sum() >= 4.0 - 1e-9


# -- cones -----------------------------------------------------------------------

def test_flat_cone_condition_pointwise():
    geom = flat_graph(T=10.0)
    mesh = make_mesh(geom, 64)
    j = int(np.argmin(np.linalg.norm(mesh.nodes, axis=1)))
    X = mesh.nodes[j]
    pts = cone_points(geom, mesh, j, ConeSampler(aperture=1.0, height_cap=1.0))
    t = pts[:, 1]                      # dist to the flat boundary is height
    assert np.all(np.linalg.norm(pts - X, axis=1) < 2.0 * t)
    assert np.all(t <= 1.0 + 1e-12)


def test_narrow_cone_blocked_at_square_corner():
    mesh = make_mesh(unit_square(), 16, grading_exponent=3.0)
    j = int(np.argmin(np.linalg.norm(mesh.nodes, axis=1)))   # nearest corner
    with pytest.raises(ApertureError):
        cone_points(unit_square(), mesh, j,
                    ConeSampler(aperture=0.05, height_cap=1.0))


def test_circle_cone_has_dyadic_levels():
    geom = unit_circle()
    mesh = make_mesh(geom, 32)
    pts = cone_points(geom, mesh, 0,
                      ConeSampler(aperture=1.0, height_cap=0.5, levels=6))
    d = geom.boundary_distance(pts)
    h_min = 0.5 * float(mesh.panel_length(int(mesh.panel_index[0])))
    # the sampler walks 6 geometric depth levels; each must survive filtering
    expected = np.geomspace(0.5, h_min, 6)
    assert all(np.any(np.abs(d - lv) < 0.3 * lv) for lv in expected)


def test_cone_membership_brute_force():
    # re-verify the cone condition against an independent dense boundary cloud
    geom = unit_circle()
    mesh = make_mesh(geom, 32)
    sampler = ConeSampler(aperture=0.8, height_cap=0.6)
    t = np.linspace(0, 2 * np.pi, 20001)
    cloud = np.stack([np.cos(t), np.sin(t)], axis=1)
    for j in (0, 5, 17):
        X = mesh.nodes[j]
        pts = cone_points(geom, mesh, j, sampler)
        d = np.min(np.linalg.norm(pts[:, None, :] - cloud[None], axis=-1), axis=1)
        assert np.all(np.linalg.norm(pts - X, axis=1) < 1.8 * d * (1 + 1e-4))


def test_cone_nesting_across_apertures():
    geom = unit_circle()
    mesh = make_mesh(geom, 32)
    narrow = cone_points(geom, mesh, 3, ConeSampler(aperture=0.5, height_cap=0.7))
    wide = cone_points(geom, mesh, 3, ConeSampler(aperture=1.5, height_cap=0.7))
    wide_set = {tuple(np.round(p, 12)) for p in wide}
    assert all(tuple(np.round(p, 12)) in wide_set for p in narrow)
    assert len(wide) > len(narrow)


# -- JSON and measured constants ---------------------------------------------------

def test_geometry_json_roundtrip_special():
    geom = wedge_graph()
    back = geometry_from_json(geometry_to_json(geom))
    assert back.kind == "special"
    assert back.lipschitz_k1 == pytest.approx(0.5)
    assert np.allclose(back.phi_x, geom.phi_x)


def test_geometry_json_roundtrip_closed():
    back = geometry_from_json(geometry_to_json(unit_square()))
    assert back.kind == "closed"
    assert back.arclength() == pytest.approx(4.0)


def test_ahlfors_david_constant_finite():
    mesh = make_mesh(unit_circle(), 32)
    k4 = ahlfors_david_constant(unit_circle(), mesh)
    assert 1.0 < k4 < 10.0


def test_parametric_loop_orientation_guard():
    pos = lambda t: np.stack([np.cos(-t), np.sin(-t)], axis=-1)
    der = lambda t: np.stack([np.sin(-t), -np.cos(-t)], axis=-1)
    with pytest.raises(GeometryError):
        build_parametric_loop(pos, der)
