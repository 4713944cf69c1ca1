"""Lipschitz boundary geometry, quadrature meshes, nontangential cone sampling.

Conventions, fixed package-wide:

* A "special" domain is the region above a graph,
  ``Omega = {X : phi(X . eperp) < X . e}`` with ``e`` the unit graph direction
  and ``eperp = (e_y, -e_x)``; the boundary is ``psi(x) = x*eperp + phi(x)*e``.
* ``phi`` is piecewise linear through its samples.  Corners are therefore
  represented exactly, and quadrature panels never straddle a slope
  breakpoint, so Gauss-Legendre panel quadrature of arclength is exact.
* Normals point out of the domain: on a graph
  ``nu = (phi' * eperp - e)/sqrt(1+phi'^2)`` (flat graph with e=(0,1) gives
  nu = (0,-1)); tangents satisfy ``tau = R nu`` with R the rotation by +90
  degrees, ``R = [[0,-1],[1,0]]``.
* Closed boundaries are positively oriented simple polygons, or smooth
  parametric loops built with :func:`build_parametric_loop`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])

# turn angles above this (radians) mark a vertex as a genuine corner
CORNER_ANGLE_TOL = 0.1


class GeometryError(ValueError):
    pass


class ApertureError(GeometryError):
    """Cone sampling found no admissible point at a node (aperture blocked)."""


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[-1] != 2:
        raise GeometryError(f"expected 2d points, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class DomainGeometry:
    """A special (graph) domain or a bounded domain with closed boundary.

    ``proxy`` is a polyline tracing the boundary exactly for piecewise-linear
    geometry and densely for smooth loops; distance and inside tests use it.
    """

    kind: str                      # "special" | "closed"
    e: np.ndarray | None = None
    phi_x: np.ndarray | None = None
    phi_y: np.ndarray | None = None
    vertices: np.ndarray | None = None
    truncation: float | None = None
    lipschitz_k1: float = 0.0
    param_curve: tuple | None = field(default=None, repr=False)
    proxy: np.ndarray = field(default=None, repr=False)

    # -- graph pieces -----------------------------------------------------
    @property
    def eperp(self) -> np.ndarray:
        return np.array([self.e[1], -self.e[0]])

    def phi(self, x):
        return np.interp(x, self.phi_x, self.phi_y)

    def phi_prime(self, x):
        """Slope of the piecewise-linear graph; at a breakpoint, the right slope."""
        x = np.asarray(x, dtype=float)
        sl = np.diff(self.phi_y) / np.diff(self.phi_x)
        idx = np.clip(np.searchsorted(self.phi_x, x, side="right") - 1, 0, len(sl) - 1)
        return sl[idx]

    # -- parameterization --------------------------------------------------
    # special graph: t = x on [-T, T]
    # closed polygon: t in [0, n_edges), edge k = floor(t)
    # parametric loop: t in [0, period)
    @property
    def closed(self) -> bool:
        return self.kind == "closed"

    def param_range(self) -> tuple[float, float]:
        if self.kind == "special":
            return (-self.truncation, self.truncation)
        if self.param_curve is not None:
            return (0.0, self.param_curve[2])
        return (0.0, float(len(self.vertices)))

    def position(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "special":
            return t[..., None] * self.eperp + self.phi(t)[..., None] * self.e
        if self.param_curve is not None:
            return self.param_curve[0](t)
        v = self.vertices
        n = len(v)
        k = np.clip(np.floor(t).astype(int), 0, n - 1)
        loc = t - k
        return v[k] + loc[..., None] * (v[(k + 1) % n] - v[k])

    def tangent_vector(self, t):
        """dposition/dt (not normalized)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "special":
            return np.broadcast_to(self.eperp, t.shape + (2,)) + \
                self.phi_prime(t)[..., None] * self.e
        if self.param_curve is not None:
            return self.param_curve[1](t)
        v = self.vertices
        n = len(v)
        k = np.clip(np.floor(t).astype(int), 0, n - 1)
        return np.broadcast_to(v[(k + 1) % n] - v[k], t.shape + (2,)).copy()

    def param_breaks(self) -> np.ndarray:
        """Interior parameters where the tangent direction may jump."""
        if self.kind == "special":
            return self.phi_x[1:-1]
        if self.param_curve is not None:
            return np.array([])
        return np.arange(1.0, len(self.vertices))

    def corner_params(self) -> np.ndarray:
        """Parameters of genuine corners (turn angle > CORNER_ANGLE_TOL)."""
        if self.kind == "special":
            sl = np.diff(self.phi_y) / np.diff(self.phi_x)
            turn = np.abs(np.arctan(sl[1:]) - np.arctan(sl[:-1]))
            return self.phi_x[1:-1][turn > CORNER_ANGLE_TOL]
        if self.param_curve is not None:
            return np.array([])
        turn = _vertex_turns(self.vertices)
        return np.arange(float(len(self.vertices)))[turn > CORNER_ANGLE_TOL]

    # -- global predicates ---------------------------------------------------
    def arclength(self) -> float:
        d = np.diff(self.proxy, axis=0)
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    def contains(self, points) -> np.ndarray:
        """Strict interior test (V_+); exterior and boundary return False."""
        p = _as_points(points)
        if self.kind == "special":
            x = p @ self.eperp
            h = p @ self.e
            return h > self.phi(x)
        # even-odd ray casting against the proxy polyline
        a = self.proxy[:-1]
        b = self.proxy[1:]
        px = p[:, 0][:, None]
        py = p[:, 1][:, None]
        cond = (a[:, 1] > py) != (b[:, 1] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a[:, 0] + (py - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1])
        crossings = np.sum(cond & (xint > px), axis=1)
        return crossings % 2 == 1

    def boundary_distance(self, points) -> np.ndarray:
        """Distance to the boundary via nearest-segment search on the proxy."""
        p = _as_points(points)
        a = self.proxy[:-1]
        ab = self.proxy[1:] - a
        ap = p[:, None, :] - a[None, :, :]
        denom = np.einsum("sk,sk->s", ab, ab)
        tpar = np.clip(np.einsum("psk,sk->ps", ap, ab) / denom, 0.0, 1.0)
        close = a[None] + tpar[..., None] * ab[None]
        d = np.linalg.norm(p[:, None, :] - close, axis=-1)
        return d.min(axis=1)


def _vertex_turns(v: np.ndarray) -> np.ndarray:
    """|turn angle| at each vertex of a closed polygon (entry k = vertex k)."""
    edges = np.roll(v, -1, axis=0) - v
    ang = np.arctan2(edges[:, 1], edges[:, 0])
    turn = np.abs((np.diff(ang, append=ang[0]) + np.pi) % (2 * np.pi) - np.pi)
    return np.roll(turn, 1)   # turn[k] was at vertex k+1


def _polygon_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def build_special_domain(phi_samples, e, truncation: float) -> DomainGeometry:
    """Graph domain above the piecewise-linear interpolant of ``phi_samples``.

    ``phi_samples`` is a pair of arrays (x, phi(x)) whose x-range must cover
    [-truncation, truncation]; the stored samples are clipped to that window.
    ``lipschitz_k1`` is the max slope between adjacent samples.
    """
    if truncation is None or not np.isfinite(truncation) or truncation <= 0:
        raise GeometryError("truncation must be positive and finite")
    x, y = (np.asarray(v, dtype=float).ravel() for v in phi_samples)
    if x.size != y.size or x.size < 2:
        raise GeometryError("need at least two phi samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise GeometryError("non-finite phi samples")
    order = np.argsort(x)
    x, y = x[order], y[order]
    if np.any(np.diff(x) <= 0):
        raise GeometryError("phi sample x-grid must be strictly increasing")
    T = float(truncation)
    if x[0] > -T or x[-1] < T:
        raise GeometryError(f"phi samples must cover [-{T}, {T}]")
    # clip to the window, inserting exact endpoint samples
    lo = np.interp(-T, x, y)
    hi = np.interp(T, x, y)
    keep = (x > -T) & (x < T)
    x = np.concatenate([[-T], x[keep], [T]])
    y = np.concatenate([[lo], y[keep], [hi]])
    e = np.asarray(e, dtype=float)
    if abs(np.linalg.norm(e) - 1.0) > 1e-12:
        raise GeometryError("graph direction e must be a unit vector")
    k1 = float(np.max(np.abs(np.diff(y) / np.diff(x)))) if x.size > 1 else 0.0
    eperp = np.array([e[1], -e[0]])
    proxy = x[:, None] * eperp + y[:, None] * e
    return DomainGeometry(kind="special", e=e, phi_x=x, phi_y=y,
                          truncation=T, lipschitz_k1=k1, proxy=proxy)


def build_closed_curve(vertices) -> DomainGeometry:
    """Simple positively-oriented polygon boundary from a vertex list."""
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
        raise GeometryError("need at least 3 vertices of shape (n, 2)")
    if not np.all(np.isfinite(v)):
        raise GeometryError("non-finite vertices")
    if _polygon_area(v) < 0:
        v = v[::-1].copy()
    n = len(v)
    for i in range(n):
        p1, p2 = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(p1, p2, v[j], v[(j + 1) % n]):
                raise GeometryError(f"polygon self-intersects (edges {i} and {j})")
    edges = np.roll(v, -1, axis=0) - v
    lens = np.hypot(edges[:, 0], edges[:, 1])
    if np.any(lens <= 0):
        raise GeometryError("degenerate (zero-length) polygon edge")
    # edge-slope proxy for the Lipschitz constant: tan of half the largest turn
    max_turn = float(np.max(_vertex_turns(v)))
    if max_turn >= np.pi - 1e-9:
        raise GeometryError("polygon has a cusp (turn angle >= pi)")
    k1 = float(np.tan(max_turn / 2))
    proxy = np.vstack([v, v[:1]])
    return DomainGeometry(kind="closed", vertices=v, lipschitz_k1=k1, proxy=proxy)


def build_parametric_loop(pos_fn: Callable, der_fn: Callable, period: float = 2 * np.pi,
                          proxy_n: int = 4096) -> DomainGeometry:
    """Smooth closed boundary from a positively-oriented parameterization."""
    t = np.linspace(0.0, period, proxy_n + 1)
    proxy = np.asarray(pos_fn(t), dtype=float)
    verts = proxy[:-1]
    if _polygon_area(verts) < 0:
        raise GeometryError("parametric loop must be positively oriented")
    return DomainGeometry(kind="closed", vertices=verts,
                          param_curve=(pos_fn, der_fn, float(period)),
                          lipschitz_k1=0.0, proxy=proxy)


def unit_circle() -> DomainGeometry:
    pos = lambda t: np.stack([np.cos(t), np.sin(t)], axis=-1)
    der = lambda t: np.stack([-np.sin(t), np.cos(t)], axis=-1)
    return build_parametric_loop(pos, der)


def geometry_from_json(doc) -> DomainGeometry:
    """Ingest {"kind": "special"|"closed", "e", "phi", "vertices", "truncation"}."""
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    kind = doc.get("kind")
    if kind == "special":
        phi = doc["phi"]
        return build_special_domain((phi["x"], phi["y"]),
                                    doc.get("e", [0.0, 1.0]), doc["truncation"])
    if kind == "closed":
        return build_closed_curve(doc["vertices"])
    raise GeometryError(f"unknown geometry kind {kind!r}")


def geometry_to_json(geom: DomainGeometry) -> dict:
    if geom.kind == "special":
        return {"kind": "special", "e": list(geom.e),
                "phi": {"x": geom.phi_x.tolist(), "y": geom.phi_y.tolist()},
                "truncation": geom.truncation}
    return {"kind": "closed", "vertices": geom.vertices.tolist()}


# ---------------------------------------------------------------------------
# quadrature meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureMesh:
    """Composite Gauss-Legendre quadrature on a boundary.

    Arrays are per-node; ``panel_index`` maps node -> panel, and
    ``panel_bounds`` holds each panel's parameter interval.  ``corner_panel``
    flags panels adjacent to a genuine corner.
    """

    geom: DomainGeometry
    nodes: np.ndarray          # (N, 2)
    weights: np.ndarray        # (N,)
    normals: np.ndarray        # (N, 2)
    tangents: np.ndarray       # (N, 2)
    params: np.ndarray         # (N,)
    panel_index: np.ndarray    # (N,)
    panel_bounds: np.ndarray   # (P, 2)
    corner_panel: np.ndarray   # (P,) bool
    grading_exponent: float
    panel_order: int

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_panels(self) -> int:
        return len(self.panel_bounds)

    def panel_slice(self, p: int) -> slice:
        q = self.panel_order
        return slice(p * q, (p + 1) * q)

    def panel_length(self, p=None) -> np.ndarray:
        """Arclength per panel (sum of weights)."""
        w = self.weights.reshape(self.n_panels, self.panel_order).sum(axis=1)
        return w if p is None else w[p]

    def local_spacing(self) -> np.ndarray:
        """Per-node resolution scale: the node's panel arclength."""
        return np.repeat(self.panel_length(), self.panel_order)

    def dtau_matrix(self) -> np.ndarray:
        """Tangential (arclength) derivative, per-panel Lagrange differentiation."""
        q = self.panel_order
        xg, _ = np.polynomial.legendre.leggauss(q)
        D = _lagrange_diff(xg)
        N = self.n_nodes
        M = np.zeros((N, N))
        for p in range(self.n_panels):
            sl = self.panel_slice(p)
            a, b = self.panel_bounds[p]
            jac = np.linalg.norm(self.geom.tangent_vector(self.params[sl]), axis=-1)
            M[sl, sl] = D * (2.0 / (b - a)) / jac[:, None]
        return M


def _lagrange_diff(x: np.ndarray) -> np.ndarray:
    """Differentiation matrix of the Lagrange basis at nodes x."""
    n = len(x)
    c = np.ones(n)
    for j in range(n):
        c[j] = np.prod(x[j] - np.delete(x, j))
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = (c[i] / c[j]) / (x[i] - x[j])
    D[np.arange(n), np.arange(n)] = -D.sum(axis=1)
    return D


def _graded_partition(m: int, beta: float, corner_lo: bool, corner_hi: bool) -> np.ndarray:
    """Partition of [0,1] into m panels, power-graded toward flagged ends."""
    s = np.linspace(0.0, 1.0, m + 1)
    if beta <= 1.0 or not (corner_lo or corner_hi):
        return s
    if corner_lo and corner_hi:
        return s**beta / (s**beta + (1 - s) ** beta)
    if corner_lo:
        return s**beta
    return 1.0 - (1.0 - s) ** beta


def make_mesh(geom: DomainGeometry, n_panels: int, grading_exponent: float = 1.0,
              panel_order: int = 8) -> QuadratureMesh:
    """Composite Gauss-Legendre mesh, graded toward corners.

    Panels align with the geometry's slope breakpoints, so the actual panel
    count is at least the number of boundary breakpoints.
    """
    if n_panels < 8:
        raise GeometryError("need n_panels >= 8")
    lo, hi = geom.param_range()
    breaks = np.concatenate([[lo], geom.param_breaks(), [hi]])
    corner_t = set(np.round(geom.corner_params(), 12))
    # on a closed curve the parameter seam lo==hi is vertex 0
    wrap_corner = geom.closed and 0.0 in corner_t

    # segment arclengths, for proportional panel allocation
    seg_len = []
    for a, b in zip(breaks[:-1], breaks[1:]):
        tt = np.linspace(a, b, 9)
        seg_len.append(np.trapezoid(
            np.linalg.norm(geom.tangent_vector(tt), axis=-1), tt))
    seg_len = np.asarray(seg_len)
    total = seg_len.sum()
    raw = n_panels * seg_len / total
    alloc = np.maximum(1, np.floor(raw).astype(int))
    short = n_panels - alloc.sum()
    if short > 0:
        extra = np.argsort(raw - np.floor(raw))[::-1][:short]
        alloc[extra] += 1

    bounds = []
    corner_flag = []
    for (a, b), m in zip(zip(breaks[:-1], breaks[1:]), alloc):
        c_lo = np.round(a, 12) in corner_t or (a == lo and wrap_corner)
        c_hi = np.round(b, 12) in corner_t or (b == hi and wrap_corner)
        c_lo, c_hi = bool(c_lo), bool(c_hi)
        part = a + (b - a) * _graded_partition(m, grading_exponent, c_lo, c_hi)
        for i in range(m):
            bounds.append((part[i], part[i + 1]))
            corner_flag.append((c_lo and i == 0) or (c_hi and i == m - 1))
    bounds = np.asarray(bounds)
    corner_flag = np.asarray(corner_flag, dtype=bool)

    xg, wg = np.polynomial.legendre.leggauss(panel_order)
    mid = 0.5 * (bounds[:, 0] + bounds[:, 1])
    half = 0.5 * (bounds[:, 1] - bounds[:, 0])
    if np.any(half <= 0):
        raise GeometryError("degenerate panel (zero parameter length)")
    params = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
    tv = geom.tangent_vector(params)
    jac = np.linalg.norm(tv, axis=-1)
    if np.any(jac <= 0):
        raise GeometryError("degenerate panel (zero tangent)")
    weights = (half[:, None] * wg[None, :]).ravel() * jac
    tangents = tv / jac[:, None]
    # tau = R nu  <=>  nu = R^T tau = (tau_y, -tau_x)
    normals = np.stack([tangents[:, 1], -tangents[:, 0]], axis=-1)
    nodes = geom.position(params)
    panel_index = np.repeat(np.arange(len(bounds)), panel_order)
    return QuadratureMesh(geom=geom, nodes=nodes, weights=weights,
                          normals=normals, tangents=tangents, params=params,
                          panel_index=panel_index, panel_bounds=bounds,
                          corner_panel=corner_flag,
                          grading_exponent=float(grading_exponent),
                          panel_order=panel_order)


def mesh_to_csv(mesh: QuadratureMesh, path) -> None:
    header = "node_x,node_y,weight,nu_x,nu_y,tau_x,tau_y,panel"
    rows = np.column_stack([mesh.nodes, mesh.weights[:, None], mesh.normals,
                            mesh.tangents, mesh.panel_index[:, None].astype(float)])
    np.savetxt(path, rows, delimiter=",", header=header, comments="",
               fmt="%.17g")


# ---------------------------------------------------------------------------
# nontangential cones
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConeSampler:
    """Sampler for the truncated nontangential cone gamma_a(X).

    Emits interior points with dist(Y, boundary) geometrically spaced from
    ``height_cap`` down to ``h_min`` (default: half the local panel length),
    filtered by the exact cone condition |X-Y| < (1+a) dist(Y, boundary).
    """

    aperture: float = 1.0
    height_cap: float = 1.0
    levels: int = 6
    samples_per_level: int = 7
    h_min: float | None = None

    def __post_init__(self):
        if self.aperture <= 0 or self.height_cap <= 0:
            raise GeometryError("aperture and height_cap must be positive")
        if self.levels < 4 or self.samples_per_level < 3:
            raise GeometryError("need levels >= 4 and samples_per_level >= 3")


def cone_points(geom: DomainGeometry, mesh: QuadratureMesh, node_index: int,
                sampler: ConeSampler) -> np.ndarray:
    """Interior sample points of the truncated cone at a boundary node.

    Candidates are drawn from a fixed wide cloud (independent of the
    aperture) and filtered by the exact cone condition, so the emitted sets
    are nested across apertures: larger aperture keeps a superset.
    """
    X = mesh.nodes[node_index]
    inward = -mesh.normals[node_index]
    tau = mesh.tangents[node_index]
    h_min = sampler.h_min
    if h_min is None:
        h_min = 0.5 * float(mesh.panel_length(mesh.panel_index[node_index]))
    if h_min >= sampler.height_cap:
        h_min = sampler.height_cap / 2**sampler.levels
    depths = np.geomspace(sampler.height_cap, h_min, sampler.levels)
    spread = np.linspace(-2.0, 2.0, 2 * sampler.samples_per_level + 1)
    cand = (X[None, None, :]
            + depths[:, None, None] * inward[None, None, :]
            + (depths[:, None] * spread[None, :])[..., None] * tau[None, None, :])
    cand = cand.reshape(-1, 2)
    inside = geom.contains(cand)
    cand = cand[inside]
    if len(cand) == 0:
        raise ApertureError(f"cone empty at node {node_index}")
    d = geom.boundary_distance(cand)
    keep = (np.linalg.norm(cand - X, axis=1) < (1.0 + sampler.aperture) * d) \
        & (d <= sampler.height_cap * (1 + 1e-12))
    pts = cand[keep]
    if len(pts) == 0:
        raise ApertureError(f"cone empty at node {node_index} "
                            f"(aperture {sampler.aperture} blocked)")
    return pts


def ahlfors_david_constant(geom: DomainGeometry, mesh: QuadratureMesh,
                           n_balls: int = 64, seed: int = 0) -> float:
    """sup over sampled boundary balls of sigma(B(X,r) intersect bdry)/r."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, mesh.n_nodes, size=n_balls)
    L = mesh.weights.sum()
    radii = rng.uniform(0.05, 0.5, size=n_balls) * L / 4
    best = 0.0
    for i, r in zip(idx, radii):
        inb = np.linalg.norm(mesh.nodes - mesh.nodes[i], axis=1) < r
        best = max(best, float(mesh.weights[inb].sum() / r))
    return best
