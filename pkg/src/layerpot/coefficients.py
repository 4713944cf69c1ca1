"""Complex 2x2 coefficient fields A(x), independent of the second coordinate.

Ellipticity is measured by probing:

    lambda = min_x min_eta Re(eta* A(x) eta) / |eta|^2
    Lambda = max_x max_{xi,eta} |xi . A(x) eta| / (|xi| |eta|)

over complex unit vectors.  The inner maximum over xi is attained at
xi = conj(A eta)/|A eta|, so Lambda reduces to max |A eta|; eta is probed over
(theta, psi) with eta = (cos theta, e^{i psi} sin theta), which covers all of
C^2 up to an irrelevant global phase and scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline


class EllipticityError(ValueError):
    pass


@dataclass(frozen=True)
class CoefficientField:
    """A(x), constant or a cubic-interpolated sampled profile.

    The type stores no t-dependence: A(X) depends on X through its first
    coordinate only.
    """

    kind: str                                # "constant" | "profile"
    matrix: np.ndarray | None = None         # (2,2) complex
    grid_x: np.ndarray | None = None         # (n,)
    grid_A: np.ndarray | None = None         # (n,2,2) complex
    lambda_ell: float = 0.0
    Lambda_ell: float = 0.0
    reference: "CoefficientField | None" = None
    _spline: object = field(default=None, repr=False, compare=False)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def matrix_at(self, x) -> np.ndarray:
        """A at scalar coordinate(s) x, shape x.shape + (2,2).

        Profiles extend as constants outside the sample window.
        """
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            out = np.broadcast_to(self.matrix, x.shape + (2, 2))
            return out.copy()
        xc = np.clip(x, self.grid_x[0], self.grid_x[-1])
        return self._spline(xc)

    def at_points(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.matrix_at(p[..., 0])

    def transpose(self) -> "CoefficientField":
        if self.kind == "constant":
            return constant_field(self.matrix.T)
        return profile_field(self.grid_x, np.swapaxes(self.grid_A, -1, -2))

    def window(self) -> tuple[float, float]:
        if self.kind == "constant":
            return (-np.inf, np.inf)
        return (float(self.grid_x[0]), float(self.grid_x[-1]))

    def eps_to_reference(self) -> float:
        """sup over the sample grid of the spectral norm of A - A0."""
        if self.reference is None:
            raise ValueError("field has no reference")
        if self.kind == "constant":
            xs = np.array([0.0])
        else:
            xs = self.grid_x
        diff = self.matrix_at(xs) - self.reference.matrix_at(xs)
        return float(np.linalg.norm(diff, ord=2, axis=(-2, -1)).max())


def _probe_directions(n: int) -> np.ndarray:
    m = max(3, int(np.ceil(np.sqrt(n))))
    th = np.linspace(0.0, np.pi / 2, m)
    ps = np.linspace(0.0, 2 * np.pi, m, endpoint=False)
    TH, PS = np.meshgrid(th, ps, indexing="ij")
    return np.stack([np.cos(TH).ravel(),
                     (np.sin(TH) * np.exp(1j * PS)).ravel()], axis=-1)


def _eta(th, ps):
    return np.stack([np.cos(th), np.sin(th) * np.exp(1j * ps)], axis=-1)


def _refine(objective, minimize: bool, n: int, passes: int = 4):
    """Optimize objective(th, ps) over the probe torus by grid refinement."""
    m = max(8, int(np.ceil(np.sqrt(n))))
    lo_t, hi_t, lo_p, hi_p = 0.0, np.pi / 2, 0.0, 2 * np.pi
    best = None
    for _ in range(passes):
        th = np.linspace(lo_t, hi_t, m)
        ps = np.linspace(lo_p, hi_p, m)
        TH, PS = np.meshgrid(th, ps, indexing="ij")
        vals = objective(TH.ravel(), PS.ravel())
        k = np.argmin(vals) if minimize else np.argmax(vals)
        best = vals[k]
        t0, p0 = TH.ravel()[k], PS.ravel()[k]
        wt, wp = (hi_t - lo_t) / m, (hi_p - lo_p) / m
        lo_t, hi_t = max(0.0, t0 - 2 * wt), min(np.pi / 2, t0 + 2 * wt)
        lo_p, hi_p = p0 - 2 * wp, p0 + 2 * wp
    return float(best)


def check_ellipticity(fld_or_mats, probe_count: int = 256) -> tuple[float, float]:
    """(lambda, Lambda) by dense probing with local refinement.

    Raises EllipticityError when lambda <= 0.
    """
    if probe_count < 64:
        raise ValueError("probe_count must be >= 64")
    if isinstance(fld_or_mats, CoefficientField):
        f = fld_or_mats
        if f.kind == "constant":
            mats = f.matrix[None]
        else:
            xs = np.linspace(f.grid_x[0], f.grid_x[-1], 4 * len(f.grid_x))
            mats = f.matrix_at(xs)
    else:
        mats = np.asarray(fld_or_mats, dtype=complex)
        if mats.ndim == 2:
            mats = mats[None]
    if not np.all(np.isfinite(mats)):
        raise EllipticityError("non-finite coefficient matrix")

    def lam_obj(th, ps):
        eta = _eta(th, ps)
        v = np.einsum("pi,kij,pj->kp", eta.conj(), mats, eta).real
        return v.min(axis=0)

    def Lam_obj(th, ps):
        eta = _eta(th, ps)
        v = np.linalg.norm(np.einsum("kij,pj->kpi", mats, eta), axis=-1)
        return v.max(axis=0)

    lam = _refine(lam_obj, True, probe_count)
    Lam = _refine(Lam_obj, False, probe_count)
    if lam <= 0:
        raise EllipticityError(f"field is not elliptic (lambda = {lam:.3e})")
    return lam, Lam


def constant_field(matrix, reference: CoefficientField | None = None,
                   probe_count: int = 256) -> CoefficientField:
    m = np.asarray(matrix, dtype=complex)
    if m.shape != (2, 2):
        raise ValueError("matrix must be 2x2")
    lam, Lam = check_ellipticity(m[None], probe_count)
    return CoefficientField(kind="constant", matrix=m, lambda_ell=lam,
                            Lambda_ell=Lam, reference=reference)


def profile_field(x, A, reference: CoefficientField | None = None,
                  probe_count: int = 256) -> CoefficientField:
    x = np.asarray(x, dtype=float)
    A = np.asarray(A, dtype=complex)
    if x.ndim != 1 or A.shape != (len(x), 2, 2) or len(x) < 2:
        raise ValueError("need x (n,) and A (n,2,2) with n >= 2")
    if np.any(np.diff(x) <= 0):
        raise ValueError("profile grid must be strictly increasing")
    spline = CubicSpline(x, A, axis=0, bc_type="natural")
    fld = CoefficientField(kind="profile", grid_x=x, grid_A=A,
                           reference=reference, _spline=spline)
    lam, Lam = check_ellipticity(fld, probe_count)
    return CoefficientField(kind="profile", grid_x=x, grid_A=A,
                            lambda_ell=lam, Lambda_ell=Lam,
                            reference=reference, _spline=spline)


def sampled_field(fn: Callable, lo: float, hi: float, n: int = 513,
                  reference: CoefficientField | None = None) -> CoefficientField:
    """Profile field sampling a callable x -> 2x2 matrix on a uniform grid."""
    xs = np.linspace(lo, hi, n)
    A = np.array([np.asarray(fn(x), dtype=complex) for x in xs])
    return profile_field(xs, A, reference=reference)


def conjugate_matrix(fld: CoefficientField) -> CoefficientField:
    """Pointwise A~ = A^T / det A (the conjugate-solution coefficient)."""
    def transform(mats):
        det = mats[..., 0, 0] * mats[..., 1, 1] - mats[..., 0, 1] * mats[..., 1, 0]
        if np.any(np.abs(det) < 1e-12):
            raise EllipticityError("near-singular determinant in conjugate_matrix")
        return np.swapaxes(mats, -1, -2) / det[..., None, None]

    if fld.kind == "constant":
        return constant_field(transform(fld.matrix))
    return profile_field(fld.grid_x, transform(fld.grid_A))


def triangularize(fld: CoefficientField):
    """Change of variables J:(y,s) -> (f(y), s+g(y)) making a11 = 1, a21 = 0.

    Returns (f_map, g_map, transformed).  The maps satisfy f'(y) = a11(f(y))
    and g'(y) = a21(f(y)), both anchored at 0, and the transformed field is

        (1/f') [[1,0],[-g',f']] A(f(y)) [[1,-g'],[0,f']]

    which has first column (1, 0) exactly.  Only real fields are transformed.
    """
    if fld.kind == "constant":
        mats = fld.matrix[None]
    else:
        mats = fld.grid_A
    if np.abs(mats.imag).max() > 1e-13:
        raise EllipticityError("triangularize requires a real field")

    if fld.kind == "constant":
        a11 = float(fld.matrix[0, 0].real)
        a21 = float(fld.matrix[1, 0].real)
        f_map = lambda y: a11 * np.asarray(y, dtype=float)
        g_map = lambda y: a21 * np.asarray(y, dtype=float)
        trans = _sandwich(fld.matrix.real[None], np.array([a11]), np.array([a21]))[0]
        return f_map, g_map, constant_field(trans)

    x0, x1 = fld.grid_x[0], fld.grid_x[-1]
    anchor = 0.0 if x0 <= 0.0 <= x1 else float(x0)
    xr = np.linspace(x0, x1, 8 * len(fld.grid_x))
    Ar = fld.matrix_at(xr).real
    a11 = Ar[:, 0, 0]
    a21 = Ar[:, 1, 0]
    if np.any(a11 <= 0):
        raise EllipticityError("a11 must stay positive for triangularization")
    F = cumulative_trapezoid(1.0 / a11, xr, initial=0.0)
    G = cumulative_trapezoid(a21 / a11, xr, initial=0.0)
    F -= np.interp(anchor, xr, F)
    G -= np.interp(anchor, xr, G)
    f_map = CubicSpline(F, xr)
    g_map = CubicSpline(F, G)
    trans = _sandwich(Ar, a11, a21)
    return f_map, g_map, profile_field(F, trans)


def _sandwich(A, fprime, gprime):
    """(1/f') [[1,0],[-g',f']] A [[1,-g'],[0,f']], vectorized over the grid."""
    n = len(A)
    L = np.zeros((n, 2, 2))
    R = np.zeros((n, 2, 2))
    L[:, 0, 0] = 1.0
    L[:, 1, 0] = -gprime
    L[:, 1, 1] = fprime
    R[:, 0, 0] = 1.0
    R[:, 0, 1] = -gprime
    R[:, 1, 1] = fprime
    return np.einsum("nij,njk,nkl->nil", L, A, R) / fprime[:, None, None]


def b6(fld: CoefficientField, x: float) -> np.ndarray:
    """[[a11(x), a21(x)], [0, 1]]; det = a11, nonzero by ellipticity."""
    lo, hi = fld.window()
    if not (lo <= x <= hi):
        raise ValueError(f"x = {x} outside profile window [{lo}, {hi}]")
    A = fld.matrix_at(np.asarray(x, dtype=float))
    return np.array([[A[0, 0], A[1, 0]], [0.0, 1.0]], dtype=complex)


def eps(fld: CoefficientField, ref: CoefficientField) -> float:
    """sup-norm distance between two fields on the finer of their grids."""
    if fld.kind == "constant" and ref.kind == "constant":
        xs = np.array([0.0])
    else:
        grids = [f.grid_x for f in (fld, ref) if f.kind == "profile"]
        xs = max(grids, key=len)
    diff = fld.matrix_at(xs) - ref.matrix_at(xs)
    return float(np.linalg.norm(diff, ord=2, axis=(-2, -1)).max())


# ---------------------------------------------------------------------------
# JSON interchange: matrices as 4 [re, im] pairs, row-major
# ---------------------------------------------------------------------------

def _mat_to_pairs(m) -> list:
    m = np.asarray(m, dtype=complex).ravel()
    return [[float(z.real), float(z.imag)] for z in m]


def _pairs_to_mat(pairs) -> np.ndarray:
    a = np.asarray(pairs, dtype=float)
    if a.shape != (4, 2):
        raise ValueError("matrix must be 4 [re, im] pairs")
    return (a[:, 0] + 1j * a[:, 1]).reshape(2, 2)


def field_from_json(doc) -> CoefficientField:
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    ref = field_from_json(doc["reference"]) if doc.get("reference") else None
    kind = doc.get("kind")
    if kind == "constant":
        return constant_field(_pairs_to_mat(doc["matrix"]), reference=ref)
    if kind == "profile":
        grid = doc["grid"]
        x = np.asarray(grid["x"], dtype=float)
        A = np.stack([_pairs_to_mat(p) for p in grid["A"]])
        return profile_field(x, A, reference=ref)
    raise ValueError(f"unknown coefficient kind {kind!r}")


def field_to_json(fld: CoefficientField) -> dict:
    doc: dict = {"kind": fld.kind}
    if fld.kind == "constant":
        doc["matrix"] = _mat_to_pairs(fld.matrix)
    else:
        doc["grid"] = {"x": fld.grid_x.tolist(),
                       "A": [_mat_to_pairs(m) for m in fld.grid_A]}
    if fld.reference is not None:
        doc["reference"] = field_to_json(fld.reference)
    return doc
