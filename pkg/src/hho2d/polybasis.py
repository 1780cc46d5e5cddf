"""Polynomial bases, quadrature, and L2 projections on polygonal cells.

Cell bases are scaled monomials ((x - center)/diameter)^a centered at the
element centroid; for degrees >= 4 they are L2-orthonormalized through a
triangular change of basis to keep mass matrices well conditioned.  Face
bases are 1D monomials in the arc-length coordinate s in [-1, 1], oriented
by the global face record so that both neighbors of a face see identical
coefficients.

Cell quadrature fans the (star-shaped) polygon into triangles from its
centroid and applies a positive-weight conical product rule on each; face
quadrature is plain Gauss-Legendre along the segment.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.special import roots_jacobi, roots_legendre

# degree at which cell bases switch to the orthonormalized form
ORTHONORMALIZE_FROM = 4


class BasisError(Exception):
    """Degenerate geometry or unusable basis/quadrature request."""


@dataclass(frozen=True)
class QuadRule:
    """Quadrature points (2D), weights, and guaranteed exactness degree."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def integrate(self, f):
        return float(self.weights @ f(self.points))


@lru_cache(maxsize=None)
def _triangle_rule(degree):
    """Conical product rule on the reference triangle (0,0)-(1,0)-(0,1).

    Gauss-Jacobi in the collapsed direction absorbs the Duffy Jacobian, so
    m = ceil((degree+1)/2) points per direction integrate total degree
    ``degree`` exactly with strictly positive weights.
    """
    m = max(1, (degree + 2) // 2)
    xj, wj = roots_jacobi(m, 1.0, 0.0)  # weight (1 - x) on [-1, 1]
    xl, wl = roots_legendre(m)
    xi, wxi = (xj + 1.0) / 2.0, wj / 4.0
    eta, weta = (xl + 1.0) / 2.0, wl / 2.0
    pts = np.array([(u, e * (1.0 - u)) for u in xi for e in eta])
    w = np.array([wu * we for wu in wxi for we in weta])
    return pts, w


def cell_quadrature(mesh, elem_id, order):
    """Rule on element ``elem_id`` exact for polynomials up to ``order``."""
    if order < 0:
        raise BasisError("quadrature order must be >= 0")
    el = mesh.elements[elem_id]
    poly = mesh.polygon(elem_id)
    ref_pts, ref_w = _triangle_rule(order)
    pts, wts = [], []
    c = el.centroid
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        jac = np.column_stack([a - c, b - c])
        det = abs(np.linalg.det(jac))
        pts.append(c + ref_pts @ jac.T)
        wts.append(ref_w * det)
    points = np.vstack(pts)
    weights = np.concatenate(wts)
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadRule(points, weights, order)


def face_quadrature(mesh, face_id, order):
    """Gauss-Legendre rule along face ``face_id``, exact up to ``order``."""
    f = mesh.faces[face_id]
    m = max(1, (order + 2) // 2)
    s, w = roots_legendre(m)
    points = f.midpoint + 0.5 * f.length * np.outer(s, f.tangent)
    weights = w * 0.5 * f.length
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadRule(points, weights, 2 * m - 1)


# ---------------------------------------------------------------------------
# bases


def monomial_exponents(degree):
    """Graded-lexicographic exponents (a, b) with a + b <= degree."""
    return [(d - b, b) for d in range(degree + 1) for b in range(d + 1)]


class CellBasis:
    """Scaled monomial basis of total degree <= ``degree`` on one element."""

    def __init__(self, center, scale, degree, transform=None):
        if degree < 0:
            raise BasisError("cell basis degree must be >= 0")
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.degree = degree
        self.exponents = np.array(monomial_exponents(degree))
        self.dim = len(self.exponents)
        # lower-triangular inverse Cholesky factor of the raw mass matrix,
        # or None for the plain monomial basis
        self.transform = transform

    def _raw(self, points):
        z = (np.atleast_2d(points) - self.center) / self.scale
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        return z[:, [0]] ** a * z[:, [1]] ** b

    def _apply(self, V):
        return V if self.transform is None else V @ self.transform.T

    def eval(self, points):
        return self._apply(self._raw(points))

    def grad(self, points):
        z = (np.atleast_2d(points) - self.center) / self.scale
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        za, zb = z[:, [0]], z[:, [1]]
        with np.errstate(invalid="ignore"):
            gx = a * np.where(a > 0, za ** np.maximum(a - 1, 0), 0.0) * zb**b
            gy = b * za**a * np.where(b > 0, zb ** np.maximum(b - 1, 0), 0.0)
        out = np.stack([gx, gy], axis=-1) / self.scale
        if self.transform is not None:
            out = np.einsum("pjd,ij->pid", out, self.transform)
        return out

    def laplacian(self, points):
        z = (np.atleast_2d(points) - self.center) / self.scale
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        za, zb = z[:, [0]], z[:, [1]]
        lxx = a * (a - 1) * np.where(a > 1, za ** np.maximum(a - 2, 0), 0.0) * zb**b
        lyy = b * (b - 1) * za**a * np.where(b > 1, zb ** np.maximum(b - 2, 0), 0.0)
        return self._apply((lxx + lyy) / self.scale**2)


def cell_basis(mesh, elem_id, degree, orthonormalize=None):
    """Basis on an element; orthonormalized for degree >= 4 by default."""
    el = mesh.elements[elem_id]
    basis = CellBasis(el.centroid, el.diameter, degree)
    if orthonormalize is None:
        orthonormalize = degree >= ORTHONORMALIZE_FROM
    if orthonormalize and degree > 0:
        quad = cell_quadrature(mesh, elem_id, 2 * degree)
        V = basis._raw(quad.points)
        M = V.T * quad.weights @ V
        try:
            L = cholesky(M, lower=True)
        except np.linalg.LinAlgError as exc:
            raise BasisError(
                f"element {elem_id}: singular mass matrix at degree {degree}"
            ) from exc
        inv_L = solve_triangular(L, np.eye(len(M)), lower=True)
        basis = CellBasis(el.centroid, el.diameter, degree, transform=inv_L)
    return basis


class FaceBasis:
    """Monomials s^q in the arc-length coordinate of one face."""

    def __init__(self, face, degree):
        if degree < 0:
            raise BasisError("face basis degree must be >= 0")
        self.face = face
        self.degree = degree
        self.dim = degree + 1

    def param(self, points):
        """Map 2D points on the face to s in [-1, 1]."""
        rel = np.atleast_2d(points) - self.face.midpoint
        return rel @ self.face.tangent * (2.0 / self.face.length)

    def eval(self, points):
        s = self.param(points)
        return s[:, None] ** np.arange(self.dim)

    def mass(self):
        # int_F s^(p+q) dl = (|F|/2) * 2/(p+q+1) for even p+q, else 0
        pq = np.add.outer(np.arange(self.dim), np.arange(self.dim))
        M = np.where(pq % 2 == 0, self.face.length / (pq + 1.0), 0.0)
        return M


def face_basis(mesh, face_id, degree):
    return FaceBasis(mesh.faces[face_id], degree)


# ---------------------------------------------------------------------------
# Grams and projections


def grams(mesh, elem_id, degree, basis=None):
    """Mass and stiffness matrices of the cell basis at ``degree``."""
    if basis is None:
        basis = cell_basis(mesh, elem_id, degree)
    quad = cell_quadrature(mesh, elem_id, 2 * degree)
    V = basis.eval(quad.points)
    D = basis.grad(quad.points)
    M = V.T * quad.weights @ V
    G = np.einsum("pid,p,pjd->ij", D, quad.weights, D)
    return 0.5 * (M + M.T), 0.5 * (G + G.T)


def default_cell_order(degree):
    """Projection quadrature default: 2*degree plus a smoothness margin."""
    return 2 * degree + degree + 2


def l2_project_cell(mesh, elem_id, degree, v, order=None, basis=None):
    """Coefficients of the L2 projection of ``v`` onto the cell basis."""
    if basis is None:
        basis = cell_basis(mesh, elem_id, degree)
    quad = cell_quadrature(mesh, elem_id, order or default_cell_order(degree))
    V = basis.eval(quad.points)
    M = V.T * quad.weights @ V
    rhs = V.T @ (quad.weights * v(quad.points))
    try:
        return cho_solve(cho_factor(M), rhs)
    except np.linalg.LinAlgError as exc:
        raise BasisError(
            f"element {elem_id}: singular mass matrix at degree {degree}"
        ) from exc


def l2_project_face(mesh, face_id, degree, v, order=None, basis=None):
    """Coefficients of the L2 projection of ``v`` onto the face basis."""
    if basis is None:
        basis = face_basis(mesh, face_id, degree)
    quad = face_quadrature(mesh, face_id, order or default_cell_order(degree))
    V = basis.eval(quad.points)
    M = V.T * quad.weights @ V
    rhs = V.T @ (quad.weights * v(quad.points))
    return cho_solve(cho_factor(M), rhs)
