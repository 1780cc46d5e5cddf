"""Element-local hybrid high-order operators.

On each element T, a discrete unknown is a pair (cell polynomial of degree
k-1, one face polynomial of degree k per face).  From it we build:

* a potential reconstruction of degree k+1, defined through the
  integration-by-parts identity

      int_T grad(w) . grad(phi) = -int_T v_T lap(phi)
                                  + sum_F int_F v_F (grad(phi) . n_TF)

  for all phi of degree k+1, closed by fixing the mean value of w (a
  weighted average of the face values for k = 0, the cell mean for k >= 1);
* the stabilization penalizing the mismatch between the unknowns and the
  interpolate of their own reconstruction (cell part scaled by h^-2, face
  parts by h^-1);
* the local stiffness (reconstruction energy plus stabilization) and the
  Gram matrix of the local energy norm
  |grad v_T|^2 + h^-1 sum_F |v_F - v_T|^2_F.

Cell unknowns are absent for k = 0; where a cell value is needed it is
recovered on the fly as the distance-weighted face average.  All builders
are pure functions of the (immutable) mesh and can run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, eigh, null_space, solve

from hho2d import polybasis as pb


class HhoError(Exception):
    """Broken local geometry or operator construction failure."""


class CoercivityViolationError(HhoError):
    """Local stiffness/norm pencil is not a valid coercivity pencil."""


def cell_block_dim(k):
    return k * (k + 1) // 2


@dataclass
class LocalHhoVector:
    """Coefficients of one element-local unknown."""

    k: int
    cell: np.ndarray          # (k(k+1)/2,), empty when k == 0
    faces: list               # one (k+1,) array per face, in face-loop order

    def flat(self):
        return np.concatenate([self.cell, *self.faces])

    @classmethod
    def from_flat(cls, k, n_faces, data):
        nc = cell_block_dim(k)
        cell = np.asarray(data[:nc], dtype=float)
        faces = [
            np.asarray(data[nc + i * (k + 1):nc + (i + 1) * (k + 1)], dtype=float)
            for i in range(n_faces)
        ]
        return cls(k=k, cell=cell, faces=faces)


@dataclass
class LocalOperators:
    """Dense element matrices shared by assembly and verification."""

    elem_id: int
    k: int
    recon: np.ndarray        # reconstruction coefficients map, (dim P^{k+1}, n)
    stab: np.ndarray         # stabilization Gram, (n, n)
    stab_factor: np.ndarray  # R with stab = R.T @ R (cancellation-free energies)
    stiff: np.ndarray        # local bilinear form, (n, n)
    norm_gram: np.ndarray    # local energy-norm Gram, (n, n)
    avg_weights: np.ndarray  # row giving the element-mean cell value
    recon_basis: pb.CellBasis
    cell_basis: pb.CellBasis | None
    face_bases: list

    @property
    def n_local(self):
        return self.stiff.shape[0]

    def constant_vector(self):
        """Local interpolate of the constant function 1 (shared kernel)."""
        z = np.zeros(self.n_local)
        nc = cell_block_dim(self.k)
        if self.k >= 1:
            z[:nc] = _constant_coeffs(self.cell_basis)
        for i in range(len(self.face_bases)):
            z[nc + i * (self.k + 1)] = 1.0
        return z


def _constant_coeffs(basis):
    c = np.zeros(basis.dim)
    c[0] = 1.0
    if basis.transform is not None:
        c = np.linalg.solve(basis.transform.T, c)
    return c


def interpolate(mesh, elem_id, k, v, order=None):
    """Project ``v`` onto the local unknown space (cell and face blocks)."""
    el = mesh.elements[elem_id]
    order = order if order is not None else 2 * k + 4
    if k >= 1:
        cell = pb.l2_project_cell(mesh, elem_id, k - 1, v, order=order)
    else:
        cell = np.zeros(0)
    faces = [
        pb.l2_project_face(mesh, int(fid), k, v, order=order)
        for fid in el.face_ids
    ]
    return LocalHhoVector(k=k, cell=cell, faces=faces)


def local_operators(mesh, elem_id, k):
    """Build reconstruction, stabilization, stiffness, and norm Gram."""
    if k < 0:
        raise HhoError("polynomial degree must be >= 0")
    el = mesh.elements[elem_id]
    hT = el.diameter
    nf = el.n_faces
    nc = cell_block_dim(k)
    n_loc = nc + nf * (k + 1)

    rec = pb.cell_basis(mesh, elem_id, k + 1)
    quad = pb.cell_quadrature(mesh, elem_id, 2 * (k + 1))
    Vr = rec.eval(quad.points)
    Dr = rec.grad(quad.points)
    G = np.einsum("pid,p,pjd->ij", Dr, quad.weights, Dr)
    G = 0.5 * (G + G.T)
    m_rec = quad.weights @ Vr

    if k >= 1:
        cellb = pb.cell_basis(mesh, elem_id, k - 1)
        Vc = cellb.eval(quad.points)
        M_cell = Vc.T * quad.weights @ Vc
        M_cell = 0.5 * (M_cell + M_cell.T)
        Dc = cellb.grad(quad.points)
        G_cell = np.einsum("pid,p,pjd->ij", Dc, quad.weights, Dc)
        G_cell = 0.5 * (G_cell + G_cell.T)
        Lr = rec.laplacian(quad.points)
        m_cell = quad.weights @ Vc
    else:
        cellb = None

    face_bases = [pb.face_basis(mesh, int(fid), k) for fid in el.face_ids]
    face_quads = [
        pb.face_quadrature(mesh, int(fid), 2 * k + 2) for fid in el.face_ids
    ]

    # right-hand side of the reconstruction system, one column per local dof
    B = np.zeros((rec.dim, n_loc))
    if k >= 1:
        B[:, :nc] = -(Lr.T * quad.weights) @ Vc
    for i, (fb, fq) in enumerate(zip(face_bases, face_quads)):
        flux = rec.grad(fq.points) @ el.face_normals[i]
        cols = slice(nc + i * (k + 1), nc + (i + 1) * (k + 1))
        B[:, cols] = (flux.T * fq.weights) @ fb.eval(fq.points)

    # mean-value closure row and the element-average weight row
    r = np.zeros(n_loc)
    avg = np.zeros(n_loc)
    if k == 0:
        for i, fb in enumerate(face_bases):
            cols = slice(nc + i, nc + i + 1)
            r[cols] = 0.5 * el.face_dists[i] * fb.mass()[0]
        avg = r / el.area
    else:
        r[:nc] = m_cell
        avg[:nc] = m_cell / el.area

    K = np.zeros((rec.dim + 1, rec.dim + 1))
    K[:rec.dim, :rec.dim] = G
    K[:rec.dim, rec.dim] = m_rec
    K[rec.dim, :rec.dim] = m_rec
    rhs = np.vstack([B, r])
    try:
        P = solve(K, rhs)[:rec.dim]
    except np.linalg.LinAlgError as exc:
        raise HhoError(
            f"element {elem_id}: singular reconstruction system"
        ) from exc

    # stabilization: difference to the interpolate of the reconstruction,
    # kept in factored form S = R^T R so energies of near-kernel vectors
    # are evaluated without catastrophic cancellation
    factor_rows = []
    if k >= 1:
        M_mix = Vc.T * quad.weights @ Vr
        Pi_cell = solve(M_cell, M_mix, assume_a="pos")
        D = -Pi_cell @ P
        D[:, :nc] += np.eye(nc)
        factor_rows.append(cholesky(M_cell, lower=True).T @ D / hT)
    for i, (fb, fq) in enumerate(zip(face_bases, face_quads)):
        Vf = fb.eval(fq.points)
        M_f = fb.mass()
        M_mix = Vf.T * fq.weights @ rec.eval(fq.points)
        Pi_f = solve(M_f, M_mix, assume_a="pos")
        D = -Pi_f @ P
        D[:, nc + i * (k + 1):nc + (i + 1) * (k + 1)] += np.eye(k + 1)
        factor_rows.append(cholesky(M_f, lower=True).T @ D / np.sqrt(hT))
    R = np.vstack(factor_rows)
    S = R.T @ R
    S = 0.5 * (S + S.T)

    A = P.T @ G @ P + S
    A = 0.5 * (A + A.T)

    # energy-norm Gram: cell gradient plus scaled face jumps
    N = np.zeros((n_loc, n_loc))
    if k >= 1:
        N[:nc, :nc] = G_cell
    for i, (fb, fq) in enumerate(zip(face_bases, face_quads)):
        J = np.zeros((len(fq.weights), n_loc))
        J[:, nc + i * (k + 1):nc + (i + 1) * (k + 1)] = fb.eval(fq.points)
        if k >= 1:
            J[:, :nc] -= cellb.eval(fq.points)
        else:
            J -= np.outer(np.ones(len(fq.weights)), avg)
        N += (J.T * fq.weights @ J) / hT
    N = 0.5 * (N + N.T)

    return LocalOperators(
        elem_id=elem_id,
        k=k,
        recon=P,
        stab=S,
        stab_factor=R,
        stiff=A,
        norm_gram=N,
        avg_weights=avg,
        recon_basis=rec,
        cell_basis=cellb,
        face_bases=face_bases,
    )


def build_reconstruction(mesh, elem_id, k):
    """Reconstruction map and its target basis (degree k+1)."""
    ops = local_operators(mesh, elem_id, k)
    return ops.recon, ops.recon_basis


def build_stabilization(mesh, elem_id, k):
    return local_operators(mesh, elem_id, k).stab


def build_local_forms(mesh, elem_id, k):
    ops = local_operators(mesh, elem_id, k)
    return ops.stiff, ops.norm_gram


def elliptic_project(mesh, elem_id, k, v, ops=None, order=None):
    """Reconstruction of the interpolate of ``v``: H1-type local projection
    onto polynomials of degree k+1 with fixed mean."""
    if ops is None:
        ops = local_operators(mesh, elem_id, k)
    vec = interpolate(mesh, elem_id, k, v, order=order)
    return ops.recon @ vec.flat(), ops.recon_basis


def eta_bounds(ops, tol=1e-8):
    """Extreme generalized eigenvalues of (stiffness, norm Gram) off-kernel.

    Both forms share the one-dimensional kernel spanned by the interpolate
    of constants; the pencil restricted to its complement measures how far
    the local form is from the energy norm.  Returns (lam_min, lam_max);
    the per-element equivalence constant is max(1/lam_min, lam_max).
    """
    z = ops.constant_vector()
    z = z / np.linalg.norm(z)
    scale_a = np.linalg.norm(ops.stiff, 2)
    scale_n = np.linalg.norm(ops.norm_gram, 2)
    if np.linalg.norm(ops.stiff @ z) > tol * scale_a or np.linalg.norm(
        ops.norm_gram @ z
    ) > tol * scale_n:
        raise CoercivityViolationError(
            f"element {ops.elem_id}: constants are not in the shared kernel"
        )
    Q = null_space(z[None, :])
    Aq = Q.T @ ops.stiff @ Q
    Nq = Q.T @ ops.norm_gram @ Q
    try:
        lam = eigh(Aq, Nq, eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise CoercivityViolationError(
            f"element {ops.elem_id}: norm Gram singular off the kernel"
        ) from exc
    if lam[0] <= 0:
        raise CoercivityViolationError(
            f"element {ops.elem_id}: non-coercive local form (lam={lam[0]:.3e})"
        )
    return float(lam[0]), float(lam[-1])


def eta_of(ops):
    lam_min, lam_max = eta_bounds(ops)
    return max(1.0 / lam_min, lam_max)
