"""Classical simplicial companions: the Crouzeix-Raviart scheme on
conforming triangle meshes, the lowest-order Raviart-Thomas-Nedelec local
interpolation, and the flux-times-face-value cancellation identity used as
a cross-check for both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from hho2d import polybasis as pb
from hho2d.mesh import MeshError


@dataclass
class CrSystem:
    """Crouzeix-Raviart discretization: one unknown per interior face."""

    mesh: object
    matrix: sp.csr_matrix       # stiffness on interior-face unknowns
    rhs: np.ndarray
    face_index: np.ndarray      # face id -> unknown index, -1 on boundary

    def solve(self):
        """Face values for all faces (boundary ones pinned to zero)."""
        values = np.zeros(self.mesh.n_faces)
        if self.matrix.shape[0]:
            sol = spsolve(self.matrix.tocsc(), self.rhs)
            values[self.face_index >= 0] = np.atleast_1d(sol)
        return values


def _check_triangles(mesh):
    for el in mesh.elements:
        if len(el.vertex_loop) != 3:
            raise MeshError(f"element {el.id}: not a triangle")
        if el.n_faces != 3:
            raise MeshError(f"element {el.id}: hanging node on a side")


def cr_basis_gradients(mesh, elem_id):
    """Gradients of the three face-average basis functions 1 - 2*hat_opp."""
    el = mesh.elements[elem_id]
    pts = mesh.vertices[el.vertex_loop]
    A = np.column_stack([np.ones(3), pts])
    hat_coeffs = np.linalg.solve(A, np.eye(3))  # column i: barycentric of vertex i
    grads = np.empty((3, 2))
    for i, fid in enumerate(el.face_ids):
        f = mesh.faces[fid]
        opp = [j for j, v in enumerate(el.vertex_loop) if v not in (f.v0, f.v1)]
        grads[i] = -2.0 * hat_coeffs[1:, opp[0]]
    return grads


def cr_assemble(mesh, f, order=6):
    """Assemble the broken-gradient stiffness and load for face averages."""
    _check_triangles(mesh)
    face_index = np.full(mesh.n_faces, -1, dtype=int)
    for i, fid in enumerate(mesh.interior_face_ids()):
        face_index[fid] = i
    n = int((face_index >= 0).sum())

    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for el in mesh.elements:
        grads = cr_basis_gradients(mesh, el.id)
        K = el.area * grads @ grads.T
        quad = pb.cell_quadrature(mesh, el.id, order)
        fvals = f(quad.points)
        idx = face_index[el.face_ids]
        # basis value at x: 1 - 2*hat_opp(x) = affine through the gradients
        for i, fid in enumerate(el.face_ids):
            face = mesh.faces[fid]
            phi = 1.0 + (quad.points - face.midpoint) @ grads[i]
            if idx[i] >= 0:
                rhs[idx[i]] += quad.weights @ (fvals * phi)
            for j in range(3):
                if idx[i] >= 0 and idx[j] >= 0:
                    rows.append(idx[i])
                    cols.append(idx[j])
                    vals.append(K[i, j])
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return CrSystem(mesh=mesh, matrix=matrix, rhs=rhs, face_index=face_index)


def cr_energy_error(mesh, face_values, grad_u, order=8):
    """Broken-gradient error of a Crouzeix-Raviart field vs an exact slope."""
    total = 0.0
    for el in mesh.elements:
        grads = cr_basis_gradients(mesh, el.id)
        gh = face_values[el.face_ids] @ grads
        quad = pb.cell_quadrature(mesh, el.id, order)
        diff = grad_u(quad.points) - gh
        total += np.einsum("pd,p,pd->", diff, quad.weights, diff)
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# lowest-order Raviart-Thomas-Nedelec fields


@dataclass
class RtnField:
    """Per-triangle fields a + q (x - anchor): constant divergence and
    constant normal trace on every face."""

    mesh: object
    a: np.ndarray        # (n_elements, 2)
    q: np.ndarray        # (n_elements,)
    anchor: np.ndarray   # (n_elements, 2)

    def eval(self, elem_id, points):
        rel = np.atleast_2d(points) - self.anchor[elem_id]
        return self.a[elem_id] + self.q[elem_id] * rel

    def divergence(self):
        return 2.0 * self.q

    def normal_fluxes(self):
        """Per-element arrays of the constant flux through each face."""
        out = []
        for el in self.mesh.elements:
            rel = el.face_midpoints - self.anchor[el.id]
            out.append(
                el.face_normals @ self.a[el.id]
                + self.q[el.id] * np.einsum("fd,fd->f", rel, el.face_normals)
            )
        return out


def rtn_interpolate(mesh, tau, order=8):
    """Match the exact face flux integrals of ``tau`` on every triangle."""
    _check_triangles(mesh)
    n = mesh.n_elements
    a = np.empty((n, 2))
    q = np.empty(n)
    anchor = np.empty((n, 2))
    for el in mesh.elements:
        anchor[el.id] = el.centroid
        A = np.empty((3, 3))
        b = np.empty(3)
        for i, fid in enumerate(el.face_ids):
            quad = pb.face_quadrature(mesh, int(fid), order)
            b[i] = quad.weights @ (tau(quad.points) @ el.face_normals[i])
            A[i, :2] = el.face_lengths[i] * el.face_normals[i]
            A[i, 2] = el.face_lengths[i] * el.face_dists[i]
        try:
            sol = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise MeshError(f"element {el.id}: degenerate triangle") from exc
        a[el.id] = sol[:2]
        q[el.id] = sol[2]
    return RtnField(mesh=mesh, a=a, q=q, anchor=anchor)


# ---------------------------------------------------------------------------
# flux cancellation identity


def magic_residual(mesh, normal_fluxes, face_values):
    """Sum over elements and faces of |F| * flux * face value.

    ``normal_fluxes``: per-element arrays of constant outward fluxes, in
    face-loop order.  ``face_values``: one constant per mesh face, required
    to vanish on boundary faces.  The sum cancels whenever the fluxes come
    from a field with continuous normal components.
    """
    face_values = np.asarray(face_values, dtype=float)
    for fid in mesh.boundary_face_ids():
        if face_values[fid] != 0.0:
            raise ValueError(f"face {fid}: boundary value must be zero")
    total = 0.0
    for el in mesh.elements:
        flux = np.asarray(normal_fluxes[el.id], dtype=float)
        total += np.dot(el.face_lengths * flux, face_values[el.face_ids])
    return float(total)


def magic_scale(mesh, normal_fluxes, face_values):
    """Cancellation-free magnitude of the same sum (for relative checks)."""
    face_values = np.asarray(face_values, dtype=float)
    total = 0.0
    for el in mesh.elements:
        flux = np.asarray(normal_fluxes[el.id], dtype=float)
        total += np.dot(el.face_lengths * np.abs(flux), np.abs(face_values[el.face_ids]))
    return float(total)


def gradient_fluxes(mesh, grad, order=8):
    """Face-average normal fluxes of an analytic gradient field."""
    out = []
    for el in mesh.elements:
        flux = np.empty(el.n_faces)
        for i, fid in enumerate(el.face_ids):
            quad = pb.face_quadrature(mesh, int(fid), order)
            flux[i] = quad.weights @ (grad(quad.points) @ el.face_normals[i]) / el.face_lengths[i]
        out.append(flux)
    return out
