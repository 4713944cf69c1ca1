"""Layer potentials and Nystrom boundary operators.

Interior evaluation is plain mesh quadrature of the kernels.  Boundary
operators realize nontangential limits by evaluating at poles offset along
the normal on a geometric h-ladder and extrapolating h -> 0 (Neville);
far-field entries are direct quadrature at h = 0, and the near field is
integrated on a dyadically refined sub-panel rule so every ladder rung is
resolved.  Densities enter near entries through the panel's Lagrange
interpolant, so the assembled matrix acts on node values.

Evaluator conventions (fixed by the flat-boundary half-identities): the
single/double layers and K_pm take the evaluator of the TRANSPOSED
coefficients (their kernels put poles of Gamma^T at the evaluation point),
while K^t_pm and L^t take the evaluator of the coefficients themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import QuadratureMesh
from .greens import GreenEvaluator, green_constant

_XG, _WG = np.polynomial.legendre.leggauss(8)

#: relative offset ladder; pole distances are panel_length * _LADDER
_LADDER = 2.0 ** -np.arange(6)

#: panels closer than this multiple of max(own, source panel length) get the
#: refined near-field treatment
_NEAR_FACTOR = 2.5


class ResolutionError(ValueError):
    """Evaluation point closer to the boundary than the mesh resolves."""

    def __init__(self, msg: str, distance: float):
        super().__init__(msg)
        self.distance = distance


class ExtrapolationError(RuntimeError):
    """Offset-ladder limit failed to settle at some target node."""

    def __init__(self, msg: str, node: int):
        super().__init__(msg)
        self.node = node


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryDensity:
    """Complex node values plus the function-space tag they are meant in.

    space_tag is ("Lp", p), ("H1Atom", (cx, cy), radius), or ("BMO",).
    smooth=False declines tangential differentiation (atom profiles with
    jumps); eval_double then returns no gradient.
    """

    values: np.ndarray
    space_tag: tuple
    smooth: bool = True


def lp_density(values, p: float = 2.0) -> BoundaryDensity:
    return BoundaryDensity(np.asarray(values, dtype=complex), ("Lp", float(p)))


def bmo_density(values) -> BoundaryDensity:
    return BoundaryDensity(np.asarray(values, dtype=complex), ("BMO",))


def h1_atom(mesh: QuadratureMesh, center, radius: float,
            profile: str = "bump") -> BoundaryDensity:
    """Mean-zero density supported in the ball of the given radius, with
    sup norm at most 1/radius."""
    center = np.asarray(center, dtype=float)
    d = np.linalg.norm(mesh.nodes - center, axis=1)
    mask = d < radius
    if mask.sum() < 4:
        raise ValueError("atom support covers fewer than 4 nodes")
    w = mesh.weights[mask].real
    f = np.zeros(mesh.n_nodes, dtype=complex)
    if profile == "bump":
        s = d[mask] / radius
        g = np.exp(1.0 - 1.0 / (1.0 - s**2))
        g2 = g * g
        f[mask] = g - (np.sum(w * g) / np.sum(w * g2)) * g2
        smooth = True
    elif profile == "step":
        tan_c = mesh.tangents[int(np.argmin(d))]
        side = (mesh.nodes[mask] - center) @ tan_c >= 0.0
        wp, wm = np.sum(w[side]), np.sum(w[~side])
        if wp <= 0 or wm <= 0:
            raise ValueError("atom support does not straddle its center")
        f[mask] = np.where(side, 1.0 / wp, -1.0 / wm)
        smooth = False
    else:
        raise ValueError(f"unknown atom profile {profile!r}")
    peak = np.abs(f).max()
    f *= (1.0 - 1e-12) / (radius * peak)
    f[mask] -= (mesh.weights @ f) / w.sum()  # exact re-centering
    return BoundaryDensity(f, ("H1Atom", (float(center[0]), float(center[1])),
                               float(radius)), smooth=smooth)


def _density_values(f) -> np.ndarray:
    if isinstance(f, BoundaryDensity):
        return np.asarray(f.values, dtype=complex)
    return np.asarray(f, dtype=complex)


def weighted_pairing(mesh: QuadratureMesh, g, f) -> complex:
    """Bilinear (non-conjugated) pairing sum w_j g_j f_j."""
    return complex(np.sum(mesh.weights * _density_values(g) * _density_values(f)))


# ---------------------------------------------------------------------------
# operator / field containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryOperator:
    matrix: np.ndarray
    op_tag: str            # Kplus | Kminus | KtPlus | KtMinus | Lt
    mesh: QuadratureMesh
    limit_offsets: np.ndarray   # per-row pole distances actually used
    tolerance: float            # max Neville residual across rows

    def apply(self, f) -> np.ndarray:
        return self.matrix @ _density_values(f)


@dataclass(frozen=True)
class InteriorField:
    """Solution field: evaluate maps points (m,2) -> (u (m,), grad_u (m,2))."""

    evaluate: object
    provenance: str

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.evaluate(X)


def weak_pde_residual(fld, interior, center, radius: float, n: int = 20) -> float:
    """Relative weak-form residual |int A grad u . grad eta| for a smooth
    bump eta in the ball; checks div A grad u = 0 away from sources."""
    center = np.asarray(center, dtype=float)
    gx_, ws = np.polynomial.legendre.leggauss(n)
    xs = center[0] + radius * gx_
    ys = center[1] + radius * gx_
    W = np.outer(ws, ws).ravel() * radius * radius
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    P = np.stack([XX.ravel(), YY.ravel()], -1)
    r2 = ((P - center) ** 2).sum(-1) / radius**2
    inside = r2 < 1.0
    eta = np.zeros(len(P))
    eta[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    gm = np.zeros((len(P), 2))
    gm[inside] = (-2.0 * (P[inside] - center) / radius**2
                  / (1.0 - r2[inside, None]) ** 2) * eta[inside, None]
    _, gu = interior(P)
    flux = np.einsum("nab,nb->na", fld.at_points(P), gu)
    val = np.sum(W[:, None] * flux * gm)
    scale = np.sum(W * np.linalg.norm(flux, axis=1) * np.linalg.norm(gm, axis=1))
    return float(abs(val) / max(scale, 1e-300))


# ---------------------------------------------------------------------------
# interior evaluation
# ---------------------------------------------------------------------------

def _check_clearance(mesh: QuadratureMesh, X: np.ndarray) -> None:
    d = np.linalg.norm(mesh.nodes - X, axis=1)
    j = int(np.argmin(d))
    floor = 0.5 * mesh.local_spacing()[j]
    dist = float(np.asarray(mesh.geom.boundary_distance(X)).ravel()[0])
    if dist < floor:
        raise ResolutionError(
            f"point at distance {dist:.3e} from the boundary; the local mesh "
            f"resolves {floor:.3e}", dist)


def eval_single(evaluator: GreenEvaluator, mesh: QuadratureMesh, f, X):
    """(S f(X), grad S f(X)) at an interior point.

    evaluator: transposed-coefficient evaluator (pole at X).
    """
    X = np.asarray(X, dtype=float)
    _check_clearance(mesh, X)
    fv = _density_values(f)
    v, _, gx = evaluator.value_grads(X, mesh.nodes)
    wf = mesh.weights * fv
    return complex(np.sum(wf * v)), np.einsum("j,ja->a", wf, gx)


def eval_double(evaluator: GreenEvaluator, mesh: QuadratureMesh, f, X,
                want_grad: bool = True):
    """(D f(X), grad D f(X)) at an interior point.

    evaluator: transposed-coefficient evaluator.  The gradient comes from the
    conjugate kernel applied to the tangential derivative of f, so it is
    declined (None) for densities tagged non-smooth.
    """
    X = np.asarray(X, dtype=float)
    _check_clearance(mesh, X)
    fv = _density_values(f)
    _, gy, _ = evaluator.value_grads(X, mesh.nodes)
    AT = evaluator.field.at_points(mesh.nodes)
    ker = np.einsum("ja,jab,jb->j", mesh.normals, AT, gy)
    u = complex(np.sum(mesh.weights * ker * fv))
    smooth = f.smooth if isinstance(f, BoundaryDensity) else True
    if not (want_grad and smooth):
        return u, None
    df = mesh.dtau_matrix() @ fv
    cg = evaluator.conjugate_gradX(X, mesh.nodes)
    return u, -np.einsum("j,ja->a", mesh.weights * df, cg)


# ---------------------------------------------------------------------------
# near-field quadrature machinery
# ---------------------------------------------------------------------------

def _dyadic_cells(lo: float, hi: float, toward_hi: bool, min_cell: float):
    """Cover [lo, hi] with cells halving toward one end, smallest ~ min_cell."""
    length = hi - lo
    if length <= 0:
        return []
    levels = int(np.clip(np.ceil(np.log2(length / max(min_cell, 1e-14))), 1, 24))
    f = 2.0 ** -np.arange(levels + 1)
    f[-1] = 0.0
    if toward_hi:
        edges = hi - length * f
        return list(zip(edges[:-1], edges[1:]))
    edges = lo + length * f[::-1]
    return list(zip(edges[:-1], edges[1:]))


def _refined_rule(geom, a: float, b: float, t_star: float, min_cell: float):
    """Sub-panel GL rule on [a,b] graded toward t_star (param units)."""
    eps = 1e-12 * max(1.0, abs(b - a))
    cells = []
    if t_star <= a + eps:
        cells += _dyadic_cells(a, b, False, min_cell)
    elif t_star >= b - eps:
        cells += _dyadic_cells(a, b, True, min_cell)
    else:
        cells += _dyadic_cells(a, t_star, True, min_cell)
        cells += _dyadic_cells(t_star, b, False, min_cell)
    cells = np.asarray(cells)
    mid = 0.5 * (cells[:, 0] + cells[:, 1])
    half = 0.5 * (cells[:, 1] - cells[:, 0])
    t = (mid[:, None] + half[:, None] * _XG[None, :]).ravel()
    wpar = (half[:, None] * _WG[None, :]).ravel()
    tv = geom.tangent_vector(t)
    jac = np.linalg.norm(tv, axis=-1)
    w = wpar * jac
    tan = tv / jac[:, None]
    nor = np.stack([tan[:, 1], -tan[:, 0]], axis=-1)
    return t, geom.position(t), w, nor, tan


def _lagrange_basis(xn: np.ndarray, xq: np.ndarray) -> np.ndarray:
    """Rows: values of the Lagrange basis on nodes xn at points xq."""
    c = np.array([1.0 / np.prod(xn[j] - np.delete(xn, j)) for j in range(len(xn))])
    diff = xq[:, None] - xn[None, :]
    exact = np.isclose(diff, 0.0, atol=1e-14)
    diff[exact] = 1.0
    B = c[None, :] / diff
    B /= B.sum(axis=1)[:, None]
    B[exact.any(axis=1)] = exact[exact.any(axis=1)].astype(float)
    return B


def _neville_zero(hs: np.ndarray, rows: list):
    """Polynomial extrapolation to h=0; returns (limit, last correction)."""
    T = [np.asarray(r, dtype=complex) for r in rows]
    prev = T[-1].copy()
    for m in range(1, len(hs)):
        prev = T[-1].copy()
        for k in range(len(hs) - 1, m - 1, -1):
            r = hs[k - m] / hs[k]
            T[k] = T[k] + (T[k] - T[k - 1]) / (r - 1.0)
    return T[-1], float(np.abs(T[-1] - prev).max())


# ---------------------------------------------------------------------------
# operator assembly
# ---------------------------------------------------------------------------

def _row_evaluator(evaluator: GreenEvaluator, xs: np.ndarray,
                   rho: float) -> GreenEvaluator:
    if evaluator.route != "FourierODE":
        return evaluator
    ev = GreenEvaluator(field=evaluator.field, route="FourierODE",
                        geom=evaluator.geom, params=evaluator.params,
                        rho_min=min(rho, evaluator.rho_min))
    ev.register_x(xs)
    return ev


def _assemble(evaluator: GreenEvaluator, mesh: QuadratureMesh, op_tag: str,
              offset_sign: float) -> BoundaryOperator:
    N = mesh.n_nodes
    q = mesh.panel_order
    lens = mesh.panel_length()
    M = np.zeros((N, N), dtype=complex)
    pan_nodes = mesh.nodes.reshape(mesh.n_panels, q, 2)

    if op_tag in ("Kplus", "Kminus"):
        AT_nodes = evaluator.field.at_points(mesh.nodes)

        def far_kernel(rev, Z, sel, i):
            _, gy, _ = rev.value_grads(Z, mesh.nodes[sel])
            return np.einsum("ma,mab,mb->m", mesh.normals[sel],
                             AT_nodes[sel], gy)

        def near_kernel(rev, Z, pos, nor, i):
            _, gy, _ = rev.value_grads(Z, pos)
            AT = evaluator.field.at_points(pos)
            return np.einsum("ma,mab,mb->m", nor, AT, gy)
    elif op_tag == "Strace":

        def far_kernel(rev, Z, sel, i):
            v, _, _ = rev.value_grads(Z, mesh.nodes[sel])
            return v

        def near_kernel(rev, Z, pos, nor, i):
            v, _, _ = rev.value_grads(Z, pos)
            return v
    else:
        A_nodes = evaluator.field.at_points(mesh.nodes)

        def _row_vec(i):
            if op_tag == "Lt":
                return mesh.tangents[i].astype(complex)
            return A_nodes[i] @ mesh.normals[i]   # nu . A^T grad = (A nu) . grad

        def far_kernel(rev, Z, sel, i):
            _, _, gx = rev.value_grads(Z, mesh.nodes[sel])
            return gx @ _row_vec(i)

        def near_kernel(rev, Z, pos, nor, i):
            _, _, gx = rev.value_grads(Z, pos)
            return gx @ _row_vec(i)

    worst = 0.0
    offsets = np.empty(N)
    for i in range(N):
        X = mesh.nodes[i]
        L = lens[mesh.panel_index[i]]
        # ladder base capped by the node's arc distance to its panel edge:
        # the column basis has a kink there, and the h-expansion of the
        # near-field limit only converges for h below that distance
        a0, b0 = mesh.panel_bounds[mesh.panel_index[i]]
        t_i = mesh.params[i]
        d_edge = min(t_i - a0, b0 - t_i) * L / (b0 - a0)
        hs = min(L, 0.7 * d_edge) * _LADDER
        offsets[i] = hs[0]
        poles = X[None, :] + offset_sign * hs[:, None] * mesh.normals[i][None, :]

        pan_d = np.linalg.norm(pan_nodes - X, axis=-1).min(axis=1)
        near = pan_d <= _NEAR_FACTOR * np.maximum(L, lens)
        near[mesh.panel_index[i]] = True
        far_sel = ~np.repeat(near, q)
        far_sel &= np.linalg.norm(mesh.nodes - X, axis=1) > 0

        rules, cols = [], []
        for p in np.where(near)[0]:
            a, b = mesh.panel_bounds[p]
            tp = mesh.params[p * q:(p + 1) * q]
            j_near = int(np.argmin(np.linalg.norm(pan_nodes[p] - X, axis=1)))
            t_star = mesh.params[i] if p == mesh.panel_index[i] else tp[j_near]
            min_cell = 0.5 * hs[-1] * (b - a) / lens[p]
            t, pos, w, nor, _ = _refined_rule(mesh.geom, a, b, t_star, min_cell)
            B = _lagrange_basis(tp, t)
            rules.append((pos, w, nor, B))
            cols.append(np.arange(p * q, (p + 1) * q))
        cols = np.concatenate(cols)

        xs_row = np.concatenate([np.concatenate([r[0][:, 0] for r in rules]),
                                 mesh.nodes[far_sel, 0], poles[:, 0], [X[0]]])
        rev = _row_evaluator(evaluator, xs_row, 0.8 * hs[-1])

        if far_sel.any():
            M[i, far_sel] = mesh.weights[far_sel] * far_kernel(rev, X, far_sel, i)

        rungs = []
        for Z in poles:
            parts = [((w * near_kernel(rev, Z, pos, nor, i)) @ B)
                     for pos, w, nor, B in rules]
            rungs.append(np.concatenate(parts))
        limit, resid = _neville_zero(hs, rungs)
        scale = max(float(np.abs(limit).max()), 0.1)
        if resid > 0.2 * scale:
            raise ExtrapolationError(
                f"offset ladder not settling at node {i} "
                f"(residual {resid:.2e} vs scale {scale:.2e})", i)
        worst = max(worst, resid)
        M[i, cols] += limit
    return BoundaryOperator(matrix=M, op_tag=op_tag, mesh=mesh,
                            limit_offsets=offsets, tolerance=worst)


def _side_char(side) -> str:
    s = {"+": "+", "-": "-", 1: "+", -1: "-", "plus": "+", "minus": "-"}.get(side)
    if s is None:
        raise ValueError(f"side must be '+' or '-', got {side!r}")
    return s


def assemble_K(evaluator: GreenEvaluator, mesh: QuadratureMesh,
               side="+") -> BoundaryOperator:
    """K_pm: nontangential boundary trace of the double layer.

    evaluator: transposed-coefficient evaluator.  side '+' approaches from
    the interior (pole at X - h nu), '-' from the exterior.
    """
    s = _side_char(side)
    return _assemble(evaluator, mesh, "Kplus" if s == "+" else "Kminus",
                     -1.0 if s == "+" else +1.0)


def assemble_Kt(evaluator: GreenEvaluator, mesh: QuadratureMesh,
                side="+") -> BoundaryOperator:
    """K^t_pm: conormal trace of the transposed single layer, taken from the
    side OPPOSITE the label (the '+' operator is the exterior trace).

    evaluator: evaluator of the coefficients themselves.
    """
    s = _side_char(side)
    return _assemble(evaluator, mesh, "KtPlus" if s == "+" else "KtMinus",
                     +1.0 if s == "+" else -1.0)


def assemble_Lt(evaluator: GreenEvaluator, mesh: QuadratureMesh,
                side="+") -> BoundaryOperator:
    """L^t: tangential derivative trace of the transposed single layer.
    The two sides agree; `side` only picks the offset direction used."""
    s = _side_char(side)
    return _assemble(evaluator, mesh, "Lt", -1.0 if s == "+" else +1.0)


def single_layer_trace(evaluator: GreenEvaluator, mesh: QuadratureMesh) -> np.ndarray:
    """Matrix of boundary values of the single layer (continuous across the
    boundary, so one-sided extrapolation gives the trace).

    evaluator: transposed-coefficient evaluator, as for eval_single.
    """
    op = _assemble(evaluator, mesh, "Strace", -1.0)
    return op.matrix


def jump_check(kplus: BoundaryOperator, kminus: BoundaryOperator,
               densities) -> dict:
    """Max weighted-L2 relative residual of (K+ - K-) f = f over densities."""
    if kplus.mesh is not kminus.mesh:
        raise ValueError("jump_check needs operators on one mesh")
    w = kplus.mesh.weights
    out = []
    for f in densities:
        fv = _density_values(f)
        r = (kplus.matrix - kminus.matrix) @ fv - fv
        out.append(float(np.sqrt(np.sum(w * np.abs(r) ** 2))
                         / np.sqrt(np.sum(w * np.abs(fv) ** 2))))
    return {"max_residual": max(out), "residuals": out,
            "n_densities": len(out)}


# ---------------------------------------------------------------------------
# constant-coefficient split oracle
# ---------------------------------------------------------------------------

def constant_split_operator(A, mesh: QuadratureMesh, op: str = "K",
                            side="+") -> np.ndarray:
    """Direct Nystrom matrix for constant A on a smooth closed curve: the
    principal-value kernel extends continuously to the diagonal, and the
    nontangential jump contributes an explicit +-1/2 identity.  Used as the
    oracle for the offset-ladder assembly."""
    s = _side_char(side)
    N = mesh.n_nodes
    A = np.asarray(A, dtype=complex)
    M = np.zeros((N, N), dtype=complex)
    for i in range(N):
        sel = np.arange(N) != i
        if op == "K":
            _, gy, _ = green_constant(A.T, mesh.nodes[i], mesh.nodes[sel])
            row = np.einsum("ma,ab,mb->m", mesh.normals[sel], A.T, gy)
        else:
            _, _, gx = green_constant(A, mesh.nodes[i], mesh.nodes[sel])
            vec = (A @ mesh.normals[i] if op == "Kt"
                   else mesh.tangents[i].astype(complex))
            row = gx @ vec
        M[i, sel] = mesh.weights[sel] * row
        # diagonal: continuous limit along the boundary, Richardson in eps
        a, b = mesh.panel_bounds[mesh.panel_index[i]]
        eps = 0.05 * (b - a) * 2.0 ** -np.arange(4)
        ts = mesh.params[i] + eps
        pts = mesh.geom.position(ts)
        if op == "K":
            _, gy, _ = green_constant(A.T, mesh.nodes[i], pts)
            tv = mesh.geom.tangent_vector(ts)
            tanp = tv / np.linalg.norm(tv, axis=-1)[:, None]
            norp = np.stack([tanp[:, 1], -tanp[:, 0]], -1)
            vals = np.einsum("ma,ab,mb->m", norp, A.T, gy)
        else:
            _, _, gx = green_constant(A, mesh.nodes[i], pts)
            vec = (A @ mesh.normals[i] if op == "Kt"
                   else mesh.tangents[i].astype(complex))
            vals = gx @ vec
        diag, _ = _neville_zero(eps, [v[None] for v in vals])
        M[i, i] = mesh.weights[i] * diag[0]
    if op != "Lt":
        half = 0.5 if s == "+" else -0.5
        M += half * np.eye(N)
    return M


# ---------------------------------------------------------------------------
# operator norms
# ---------------------------------------------------------------------------

def operator_norm(op, weights=None, n_iter: int = 80, seed: int = 0) -> float:
    """Power-iteration estimate of the operator 2-norm on the weighted
    space ||f||^2 = sum w |f|^2."""
    M = op.matrix if isinstance(op, BoundaryOperator) else np.asarray(op)
    if weights is None:
        weights = op.mesh.weights
    rw = np.sqrt(np.asarray(weights, dtype=float))
    B = rw[:, None] * M / rw[None, :]
    rng = np.random.default_rng(seed)
    v = rng.normal(size=len(B)) + 1j * rng.normal(size=len(B))
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(n_iter):
        u = B @ v
        v = B.conj().T @ u
        s = np.linalg.norm(v) ** 0.5
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
    return float(s)
