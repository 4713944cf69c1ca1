"""Boundary-value solvers built on the operator traces.

Dirichlet data is extended by the double layer (u = D K_+^{-1} f), Neumann
and regularity data by the single layer through its conormal and tangential
traces; conjugates come from path integration, and the domain Green function
from a Dirichlet corrector plus a transposed solve for the representation
weights.  Every solve reports a residual and a condition estimate; nothing
here assumes invertibility beyond what the gate checks.

All solves for coefficients A run through the evaluator of A^T, whose kernel
is the fundamental solution Gamma_A(X, .) as a function of the second slot;
the double and single layers, their traces, and the conormal matrices below
are the ones that reproduce D1 = 1 and the +-1/2 flat-boundary multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import gmres

from .coefficients import CoefficientField
from .geometry import QuadratureMesh
from .greens import GreenEvaluator, make_evaluator
from .potentials import (
    BoundaryDensity,
    BoundaryOperator,
    InteriorField,
    ResolutionError,
    _density_values,
    _neville_zero,
    assemble_K,
    assemble_Kt,
    assemble_Lt,
    eval_double,
    eval_single,
    lp_density,
    single_layer_trace,
)

#: condition estimate beyond which a solve refuses to report a solution
COND_LIMIT = 1e12

#: inverse of the quarter-turn in "rot90 grad u~ = A grad u"
_ROT_INV = np.array([[0.0, -1.0], [1.0, 0.0]])


class InvertibilityError(RuntimeError):
    """Boundary operator too ill-conditioned to trust the solve."""

    def __init__(self, msg: str, condition: float):
        super().__init__(msg)
        self.condition = float(condition)


class CompatibilityError(ValueError):
    """Neumann data with nonzero total flux on a closed boundary."""


class PathDependenceError(RuntimeError):
    """Closed-loop conormal flux does not vanish: the conjugate potential is
    multivalued (multiply connected domain) or the field is inaccurate."""

    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = float(residual)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def solve_linear(matrix, rhs, method: str = "dense", restart: int = 60,
                 tol: float = 1e-10, maxiter: int = 2000):
    """Solve matrix @ x = rhs; returns (x, stats).

    stats reports the relative residual, a condition estimate, the iteration
    count (0 for the dense factorization), and the method used.
    """
    M = np.asarray(matrix, dtype=complex)
    b = np.asarray(rhs, dtype=complex)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix must be square")
    if b.shape != (M.shape[0],):
        raise ValueError("rhs length does not match the matrix")
    if method == "dense":
        lu, piv = sla.lu_factor(M)
        x = sla.lu_solve((lu, piv), b)
        iters = 0
    elif method == "iterative":
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = gmres(M, b, rtol=tol, restart=restart, maxiter=maxiter,
                        callback=cb, callback_type="pr_norm")
        if info != 0:
            raise RuntimeError(f"iterative solve did not converge "
                               f"(info={info} after {count[0]} iterations)")
        iters = count[0]
    else:
        raise ValueError(f"unknown linear-solve method {method!r}")
    bn = np.linalg.norm(b)
    residual = float(np.linalg.norm(M @ x - b) / max(bn, 1e-300))
    stats = {"method": method, "residual": residual,
             "condition": _condition_estimate(M), "iterations": iters}
    return x, stats


def _condition_estimate(M: np.ndarray) -> float:
    if M.shape[0] <= 2048:
        return float(np.linalg.cond(M))
    # power iteration on M and on the factorized inverse
    lu, piv = sla.lu_factor(M)
    rng = np.random.default_rng(0)
    v = rng.normal(size=M.shape[0]) + 0j
    w = v.copy()
    for _ in range(30):
        v = M.conj().T @ (M @ v)
        v /= np.linalg.norm(v)
        w = sla.lu_solve((lu, piv), sla.lu_solve((lu, piv), w, trans=2))
        w /= np.linalg.norm(w)
    smax = np.sqrt(np.linalg.norm(M.conj().T @ (M @ v)))
    smin = 1.0 / np.sqrt(np.linalg.norm(
        sla.lu_solve((lu, piv), sla.lu_solve((lu, piv), w, trans=2))))
    return float(smax / smin)


def _gate(stats: dict, what: str) -> None:
    if not np.isfinite(stats["condition"]) or stats["condition"] > COND_LIMIT:
        raise InvertibilityError(
            f"{what} has condition estimate {stats['condition']:.3e} beyond "
            f"{COND_LIMIT:.0e}; the coefficient matrix is outside the "
            f"perturbative invertibility regime", stats["condition"])


# ---------------------------------------------------------------------------
# solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Solution:
    """One solved boundary-value problem.

    density is the layer density h; field evaluates (u, grad u) at interior
    points; trace and conormal hold u and nu . A grad u at the mesh nodes
    (conormal only when the solve produces it directly -- recover the other
    one with boundary_trace / conormal_trace).
    """

    problem: str            # dirichlet | neumann | regularity
    p: float
    density: BoundaryDensity
    field: InteriorField
    mesh: QuadratureMesh
    coefficients: CoefficientField
    evaluator: GreenEvaluator
    trace: np.ndarray
    conormal: np.ndarray | None
    solve_stats: dict


def _transposed_evaluator(coefficients: CoefficientField,
                          evaluator) -> GreenEvaluator:
    return evaluator if evaluator is not None else make_evaluator(
        coefficients.transpose())


def _double_field(ev_t, mesh, h, tag) -> InteriorField:
    hv = np.asarray(h, dtype=complex)

    def evaluate(P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        out = [eval_double(ev_t, mesh, hv, q) for q in P]
        return (np.array([u for u, _ in out]),
                np.array([g for _, g in out]))

    return InteriorField(evaluate, provenance=tag)


def _single_field(ev_t, mesh, h, shift, tag) -> InteriorField:
    hv = np.asarray(h, dtype=complex)
    c = complex(shift)

    def evaluate(P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        out = [eval_single(ev_t, mesh, hv, q) for q in P]
        return (np.array([u for u, _ in out]) + c,
                np.array([g for _, g in out]))

    return InteriorField(evaluate, provenance=tag)


def _mean_deflation(mesh: QuadratureMesh) -> np.ndarray:
    # rank-one shift carrying the closed-curve kernel of Kt_- and Lt; exact
    # because w^T Kt_- = w^T Lt = 0 (interior flux / loop annihilation)
    w = mesh.weights
    return np.outer(np.ones(mesh.n_nodes), w) / np.sum(w)


def solve_dirichlet(mesh: QuadratureMesh, coefficients: CoefficientField,
                    data, p: float = 2.0, method: str = "dense",
                    evaluator=None, operator: BoundaryOperator | None = None
                    ) -> Solution:
    """u = D(K_+^{-1} f): interior solution with boundary trace f."""
    ev_t = _transposed_evaluator(coefficients, evaluator)
    K = operator if operator is not None else assemble_K(ev_t, mesh, "+")
    f = _density_values(data)
    h, stats = solve_linear(K.matrix, f, method=method)
    _gate(stats, "the interior double-layer trace")
    stats["assembly_tolerance"] = K.tolerance
    field = _double_field(ev_t, mesh, h, "dirichlet double layer")
    return Solution("dirichlet", float(p), lp_density(h, p), field, mesh,
                    coefficients, ev_t, trace=f.copy(), conormal=None,
                    solve_stats=stats)


def solve_neumann(mesh: QuadratureMesh, coefficients: CoefficientField,
                  data, p: float = 2.0, method: str = "dense",
                  evaluator=None, operator: BoundaryOperator | None = None
                  ) -> Solution:
    """u = S h with the interior conormal trace of S h matching g.

    On a closed boundary the data must have zero total flux and u is
    normalized to zero boundary mean.
    """
    g = _density_values(data)
    w = mesh.weights
    scale = float(np.sqrt(np.sum(w * np.abs(g) ** 2)))
    if mesh.geom.closed and abs(np.sum(w * g)) > 1e-8 * max(scale, 1e-30):
        raise CompatibilityError(
            f"Neumann data has total flux {abs(np.sum(w * g)):.3e}; a "
            "bounded domain admits no solution")
    ev_t = _transposed_evaluator(coefficients, evaluator)
    Kt = operator if operator is not None else assemble_Kt(ev_t, mesh, "-")
    M = Kt.matrix + _mean_deflation(mesh) if mesh.geom.closed else Kt.matrix
    h, stats = solve_linear(M, g, method=method)
    _gate(stats, "the interior conormal trace")
    stats["assembly_tolerance"] = Kt.tolerance
    tr = single_layer_trace(ev_t, mesh) @ h
    shift = 0.0
    if mesh.geom.closed:
        stats["flux_defect"] = float(abs(np.sum(w * h)) / np.sum(w).real)
        shift = -np.sum(w * tr) / np.sum(w)
        tr = tr + shift
    field = _single_field(ev_t, mesh, h, shift, "neumann single layer")
    return Solution("neumann", float(p), lp_density(h, p), field, mesh,
                    coefficients, ev_t, trace=tr, conormal=g.copy(),
                    solve_stats=stats)


def _constrained_solve(A: np.ndarray, g: np.ndarray, w: np.ndarray):
    # closed-curve single-layer traces have a one-dimensional kernel along
    # the equilibrium direction, and the discrete range of Lt contains the
    # constants exactly, so rank-one deflation can cancel; pin the weighted
    # mean in a stacked least-squares system instead
    row = (w / np.sum(w)).astype(complex)
    stacked = np.vstack([A, row[None, :]])
    b = np.concatenate([g, [0.0]])
    h, _, _, s = np.linalg.lstsq(stacked, b, rcond=None)
    resid = float(np.linalg.norm(A @ h - g)
                  / max(np.linalg.norm(g), 1e-300))
    return h, {"method": "lstsq", "residual": resid,
               "condition": float(s[0] / s[-1]), "iterations": 0}


def solve_regularity(mesh: QuadratureMesh, coefficients: CoefficientField,
                     data, p: float = 2.0, method: str = "dense",
                     evaluator=None, operator: BoundaryOperator | None = None
                     ) -> Solution:
    """u = S(Lt^{-1} d_tau f): solution whose trace has the tangential
    derivative of f; the additive constant is fixed by matching f at node 0.

    On closed curves the system is solved by mean-constrained least squares
    (the method flag applies to open boundaries only).
    """
    f = _density_values(data)
    g = mesh.dtau_matrix() @ f
    ev_t = _transposed_evaluator(coefficients, evaluator)
    Lt = operator if operator is not None else assemble_Lt(ev_t, mesh, "+")
    if mesh.geom.closed:
        h, stats = _constrained_solve(Lt.matrix, g, mesh.weights)
    else:
        h, stats = solve_linear(Lt.matrix, g, method=method)
    _gate(stats, "the tangential single-layer trace")
    stats["assembly_tolerance"] = Lt.tolerance
    tr = single_layer_trace(ev_t, mesh) @ h
    shift = f[0] - tr[0]
    tr = tr + shift
    stats["trace_residual"] = float(
        np.sqrt(np.sum(mesh.weights * np.abs(tr - f) ** 2))
        / max(np.sqrt(np.sum(mesh.weights * np.abs(f) ** 2)), 1e-30))
    field = _single_field(ev_t, mesh, h, shift, "regularity single layer")
    return Solution("regularity", float(p), lp_density(h, p), field, mesh,
                    coefficients, ev_t, trace=tr, conormal=None,
                    solve_stats=stats)


# ---------------------------------------------------------------------------
# boundary re-sampling (nontangential offset ladder)
# ---------------------------------------------------------------------------

def _offset_ladder(mesh: QuadratureMesh, idx, rungs: int = 5,
                   factor: float = 0.8):
    # rungs stay above the interior-evaluation clearance floor (half the
    # local panel length), so the extrapolation interval is O(panel length);
    # near corners the inward ray can pinch against an adjacent edge, so
    # each rung is checked against the floor of whatever boundary it lands
    # nearest to, and nodes left with fewer than 3 usable rungs refuse
    L = mesh.local_spacing()
    out = []
    for j in idx:
        hs = 1.4 * L[j] * factor ** np.arange(rungs)
        P = mesh.nodes[j] - hs[:, None] * mesh.normals[j]
        d = np.linalg.norm(P[:, None, :] - mesh.nodes[None, :, :], axis=-1)
        floor = 0.5 * L[np.argmin(d, axis=1)]
        bd = np.abs(np.asarray(mesh.geom.boundary_distance(P)).ravel())
        hs = hs[bd >= 1.02 * floor]
        if len(hs) < 3:
            raise ResolutionError(
                f"node {j} cannot take a nontangential offset ladder on "
                f"this mesh (corner pinch)", float(bd.min()))
        out.append(hs)
    return out


def boundary_trace(field: InteriorField, mesh: QuadratureMesh, idx=None,
                   rungs: int = 5):
    """(values, residual): u extrapolated to the boundary along the inward
    normal at the selected nodes."""
    idx = np.arange(mesh.n_nodes) if idx is None else np.asarray(idx)
    ladders = _offset_ladder(mesh, idx, rungs)
    out = np.zeros(len(idx), dtype=complex)
    resid = 0.0
    for k, (j, hs) in enumerate(zip(idx, ladders)):
        P = mesh.nodes[j] - hs[:, None] * mesh.normals[j]
        vals, _ = field(P)
        lim, err = _neville_zero(hs, [v[None] for v in vals])
        out[k] = lim[0]
        resid = max(resid, err)
    return out, resid


def conormal_trace(sol: Solution, idx=None, rungs: int = 5):
    """(values, residual): nu . A grad u extrapolated to the boundary."""
    mesh = sol.mesh
    idx = np.arange(mesh.n_nodes) if idx is None else np.asarray(idx)
    ladders = _offset_ladder(mesh, idx, rungs)
    out = np.zeros(len(idx), dtype=complex)
    resid = 0.0
    for k, (j, hs) in enumerate(zip(idx, ladders)):
        P = mesh.nodes[j] - hs[:, None] * mesh.normals[j]
        _, grads = sol.field(P)
        Amat = sol.coefficients.at_points(P)
        flux = np.einsum("a,nab,nb->n", mesh.normals[j], Amat, grads)
        lim, err = _neville_zero(hs, [v[None] for v in flux])
        out[k] = lim[0]
        resid = max(resid, err)
    return out, resid


def representation_residual(sol: Solution, points, conormal=None) -> float:
    """max |u(X) - (D f - S g)(X)| over the points, relative to max(1, |u|);
    f and g are the solution's boundary trace and conormal, re-sampled by
    ladder extrapolation when the solve did not produce them."""
    f = sol.trace
    g = sol.conormal if conormal is None else _density_values(conormal)
    if g is None:
        g, _ = conormal_trace(sol)
    P = np.atleast_2d(np.asarray(points, dtype=float))
    u, _ = sol.field(P)
    rep = np.array([eval_double(sol.evaluator, sol.mesh, f, q)[0]
                    - eval_single(sol.evaluator, sol.mesh, g, q)[0]
                    for q in P])
    return float(np.abs(u - rep).max() / max(1.0, np.abs(u).max()))


# ---------------------------------------------------------------------------
# conjugates
# ---------------------------------------------------------------------------

def conjugate_gradient_field(field: InteriorField,
                             coefficients: CoefficientField):
    """grad u~ as a function of interior points, from rot90 grad u~ = A grad u."""

    def grad(P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        _, gu = field(P)
        return np.einsum("ab,nbc,nc->na", _ROT_INV,
                         coefficients.at_points(P), gu)

    return grad


def loop_flux(field: InteriorField, coefficients: CoefficientField,
              center, radius: float, n: int = 128) -> complex:
    """Integral of nu . A grad u around an interior circle (periodic
    trapezoid); vanishes when the conjugate is single-valued."""
    th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    nu = np.stack([np.cos(th), np.sin(th)], -1)
    P = np.asarray(center, dtype=float) + radius * nu
    _, gu = field(P)
    flux = np.einsum("na,nab,nb->n", nu, coefficients.at_points(P), gu)
    return complex(radius * (2.0 * np.pi / n) * np.sum(flux))


def conjugate_solution(sol: Solution, anchor=None, segments: int = 12,
                       quad_order: int = 8) -> InteriorField:
    """Conjugate u~ by path integration of rot90^{-1} A grad u from an anchor
    (where u~ = 0); solves div A~ grad u~ = 0 for A~ = A^T / det A.

    Paths are straight segments from the anchor, so the anchor must see the
    evaluation points within the domain; pass one explicitly for nonconvex
    geometry.  Multiply-connected obstructions are checked with loop_flux.
    """
    grad_conj = conjugate_gradient_field(sol.field, sol.coefficients)
    if anchor is None:
        anchor = sol.mesh.nodes.mean(axis=0)
    anchor = np.asarray(anchor, dtype=float)
    gl_x, gl_w = np.polynomial.legendre.leggauss(quad_order)
    # composite rule on [0, 1]
    edges = np.linspace(0.0, 1.0, segments + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * np.diff(edges)
    ts = (mid[:, None] + half[:, None] * gl_x[None, :]).ravel()
    ws = (half[:, None] * gl_w[None, :]).ravel()

    def evaluate(P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        vals = np.zeros(len(P), dtype=complex)
        for i, X in enumerate(P):
            d = X - anchor
            Q = anchor[None, :] + ts[:, None] * d[None, :]
            gt = grad_conj(Q)
            vals[i] = np.sum(ws * (gt @ d))
        return vals, grad_conj(P)

    return InteriorField(evaluate, provenance=f"conjugate of {sol.problem}")


# ---------------------------------------------------------------------------
# domain Green function
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainGreen:
    """G_X = Gamma_X - Phi_X with the corrector Phi_X solving the Dirichlet
    problem with trace Gamma_X; weights w_j (nu . A grad G_X)_j represent
    interior values of solutions from their boundary trace."""

    pole: np.ndarray
    corrector: Solution
    conormal: np.ndarray
    weights: np.ndarray
    boundary_residual: float

    def represent(self, f) -> complex:
        """u(pole) for the solution with boundary trace f."""
        return complex(np.sum(self.weights * _density_values(f)))

    def evaluate(self, P):
        """(G_X, grad G_X) at interior points (gradient in the second slot)."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        v, gy, _ = self.corrector.evaluator.value_grads(self.pole, P)
        phi, gphi = self.corrector.field(P)
        return v - phi, gy - gphi


def domain_green(mesh: QuadratureMesh, coefficients: CoefficientField, X,
                 method: str = "dense", evaluator=None,
                 operator: BoundaryOperator | None = None) -> DomainGreen:
    """Green function of the bounded domain with pole X.

    The representation weights solve the transposed system K_+^T omega = r
    with r the double-layer row at X, so sum(weights) reproduces D1(X) = 1
    exactly up to the solver residual.
    """
    if not mesh.geom.closed:
        raise ValueError("domain Green function needs a bounded domain")
    X = np.asarray(X, dtype=float)
    ev_t = _transposed_evaluator(coefficients, evaluator)
    K = operator if operator is not None else assemble_K(ev_t, mesh, "+")
    gval, gy, _ = ev_t.value_grads(X, mesh.nodes)
    h, stats = solve_linear(K.matrix, gval, method=method)
    _gate(stats, "the interior double-layer trace")
    field = _double_field(ev_t, mesh, h, "green corrector")
    corrector = Solution("dirichlet", 2.0, lp_density(h), field, mesh,
                         coefficients, ev_t, trace=gval.copy(), conormal=None,
                         solve_stats=stats)
    AT = ev_t.field.at_points(mesh.nodes)
    r = mesh.weights * np.einsum("ja,jab,jb->j", mesh.normals, AT, gy)
    omega, _ = solve_linear(K.matrix.T, r, method=method)
    boundary_residual = float(np.abs(K.matrix @ h - gval).max())
    return DomainGreen(pole=X, corrector=corrector,
                       conormal=omega / mesh.weights, weights=omega,
                       boundary_residual=boundary_residual)
