"""Global degree-of-freedom management, assembly, and solvers.

Unknowns are ordered with all interior-face blocks first (by face id) and
all cell blocks after (by element id), so static condensation is a
trailing-block Schur complement.  Boundary faces are eliminated (rows and
columns dropped), which keeps the assembled matrix symmetric positive
definite.  Local matrices can be built concurrently; the scatter order is
fixed by element id, so two assemblies of the same inputs produce
bit-identical results.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from hho2d import hho_local as hl
from hho2d import polybasis as pb


class AssemblyError(Exception):
    """Inconsistent global system (kernel leak, bad degree, ...)."""


class SolverError(Exception):
    """Factorization failure or iterative non-convergence."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class DofMap:
    """Global offsets: interior-face blocks first, then cell blocks."""

    k: int
    face_offset: np.ndarray   # (n_faces,) offset or -1 for boundary faces
    cell_offset: np.ndarray   # (n_elements,) offset, or -1 when k == 0
    n_face_dofs: int
    total: int

    def element_indices(self, element):
        """Global index per local dof of one element, -1 where eliminated."""
        k = self.k
        nc = hl.cell_block_dim(k)
        idx = np.full(nc + element.n_faces * (k + 1), -1, dtype=int)
        if k >= 1:
            idx[:nc] = self.cell_offset[element.id] + np.arange(nc)
        for i, fid in enumerate(element.face_ids):
            off = self.face_offset[fid]
            if off >= 0:
                idx[nc + i * (k + 1):nc + (i + 1) * (k + 1)] = off + np.arange(k + 1)
        return idx


def build_dof_map(mesh, k):
    if not 0 <= k <= 3:
        raise AssemblyError("polynomial degree must be in {0, 1, 2, 3}")
    face_offset = np.full(mesh.n_faces, -1, dtype=int)
    pos = 0
    for fid in mesh.interior_face_ids():
        face_offset[fid] = pos
        pos += k + 1
    n_face_dofs = pos
    nc = hl.cell_block_dim(k)
    cell_offset = np.full(mesh.n_elements, -1, dtype=int)
    if k >= 1:
        for e in range(mesh.n_elements):
            cell_offset[e] = pos
            pos += nc
    face_offset.setflags(write=False)
    cell_offset.setflags(write=False)
    return DofMap(
        k=k,
        face_offset=face_offset,
        cell_offset=cell_offset,
        n_face_dofs=n_face_dofs,
        total=pos,
    )


@dataclass
class GlobalHhoVector:
    """Flat coefficient vector plus the gather/scatter logic."""

    mesh: object
    dofmap: DofMap
    data: np.ndarray

    def local(self, elem_id):
        """Element-local view; boundary-face blocks read as zero."""
        el = self.mesh.elements[elem_id]
        idx = self.dofmap.element_indices(el)
        flat = np.where(idx >= 0, self.data[np.clip(idx, 0, None)], 0.0)
        return hl.LocalHhoVector.from_flat(self.dofmap.k, el.n_faces, flat)

    def local_flat(self, elem_id):
        el = self.mesh.elements[elem_id]
        idx = self.dofmap.element_indices(el)
        return np.where(idx >= 0, self.data[np.clip(idx, 0, None)], 0.0)

    def scatter_add(self, elem_id, local_flat):
        el = self.mesh.elements[elem_id]
        idx = self.dofmap.element_indices(el)
        keep = idx >= 0
        np.add.at(self.data, idx[keep], np.asarray(local_flat)[keep])

    @classmethod
    def zeros(cls, mesh, dofmap):
        return cls(mesh=mesh, dofmap=dofmap, data=np.zeros(dofmap.total))


def build_local_operators(mesh, k, threads=None):
    """Per-element operators, optionally built on a thread pool."""
    n = mesh.n_elements
    if threads is None:
        threads = _default_threads()
    if threads == 1 or n < 8:
        return [hl.local_operators(mesh, e, k) for e in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda e: hl.local_operators(mesh, e, k), range(n)))


def _default_threads():
    raw = os.environ.get("HHO_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        return 1
    if value == 0:
        return os.cpu_count() or 1
    return max(1, value)


@dataclass
class SparseSpdSystem:
    """Assembled symmetric positive definite system."""

    mesh: object
    k: int
    dofmap: DofMap
    matrix: sp.csr_matrix
    rhs: np.ndarray
    ops: list
    nnz: int = 0
    n_elements: int = 0

    def __post_init__(self):
        self.nnz = self.matrix.nnz
        self.n_elements = self.mesh.n_elements


def assemble(mesh, k, f, ops=None, rhs_order=None, determinism=False, threads=None):
    """Assemble stiffness and load for the homogeneous Dirichlet problem.

    The load tests the source against the piecewise cell value: the cell
    polynomial for k >= 1, the distance-weighted face average for k = 0.
    """
    dofmap = build_dof_map(mesh, k)
    if ops is None:
        ops = build_local_operators(mesh, k, threads=1 if determinism else threads)
    order = rhs_order if rhs_order is not None else 2 * k + 4

    rows, cols, vals = [], [], []
    rhs = np.zeros(dofmap.total)
    for el, op in zip(mesh.elements, ops):
        idx = dofmap.element_indices(el)
        keep = np.flatnonzero(idx >= 0)
        A = op.stiff[np.ix_(keep, keep)]
        gi = idx[keep]
        rows.append(np.repeat(gi, len(gi)))
        cols.append(np.tile(gi, len(gi)))
        vals.append(A.ravel())

        quad = pb.cell_quadrature(mesh, el.id, order)
        fvals = f(quad.points)
        if k >= 1:
            b_loc = np.zeros(op.n_local)
            nc = hl.cell_block_dim(k)
            Vc = op.cell_basis.eval(quad.points)
            b_loc[:nc] = Vc.T @ (quad.weights * fvals)
        else:
            b_loc = (quad.weights @ fvals) * op.avg_weights
        np.add.at(rhs, gi, b_loc[keep])

    if dofmap.total:
        matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(dofmap.total, dofmap.total),
        ).tocsr()
    else:
        matrix = sp.csr_matrix((0, 0))
    system = SparseSpdSystem(
        mesh=mesh, k=k, dofmap=dofmap, matrix=matrix, rhs=rhs, ops=ops
    )
    _check_diagonal(system)
    return system


def _check_diagonal(system):
    diag = system.matrix.diagonal()
    bad = np.flatnonzero(diag <= 0)
    if len(bad):
        dof = int(bad[0])
        elem = _owner_element(system, dof)
        raise AssemblyError(
            f"non-positive diagonal at dof {dof} (element {elem}): "
            "broken geometry or coercivity"
        )


def _owner_element(system, dof):
    for el in system.mesh.elements:
        if dof in system.dofmap.element_indices(el):
            return el.id
    return -1


@dataclass
class SolveInfo:
    method: str
    residual: float
    iterations: int = 0


def solve(system, method="direct", tol=1e-12):
    """Solve to relative residual <= 1e-12; CG fallback if requested/needed."""
    A, b = system.matrix, system.rhs
    x = np.zeros(system.dofmap.total)
    if system.dofmap.total == 0:
        vec = GlobalHhoVector(mesh=system.mesh, dofmap=system.dofmap, data=x)
        return vec, SolveInfo(method="empty", residual=0.0)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        vec = GlobalHhoVector(mesh=system.mesh, dofmap=system.dofmap, data=x)
        return vec, SolveInfo(method=method, residual=0.0)

    info = None
    if method == "direct":
        try:
            lu = spla.splu(A.tocsc())
            x = lu.solve(b)
            res = np.linalg.norm(A @ x - b) / bnorm
            if np.isfinite(res) and res <= tol:
                info = SolveInfo(method="direct", residual=float(res))
        except RuntimeError:
            x = None
    if info is None:
        x, info = _cg_solve(A, b, tol)
    vec = GlobalHhoVector(mesh=system.mesh, dofmap=system.dofmap, data=x)
    return vec, info


def _cg_solve(A, b, tol):
    n = A.shape[0]
    diag = A.diagonal()
    M = sp.diags(1.0 / diag)
    count = [0]

    def cb(_):
        count[0] += 1

    x, flag = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=10 * n, M=M, callback=cb)
    res = np.linalg.norm(A @ x - b) / np.linalg.norm(b)
    if flag != 0 or res > 10 * tol:
        raise SolverError(
            f"conjugate gradients failed after {count[0]} iterations "
            f"(relative residual {res:.3e})",
            iterations=count[0],
            residual=float(res),
        )
    return x, SolveInfo(method="cg", residual=float(res), iterations=count[0])


# ---------------------------------------------------------------------------
# static condensation


@dataclass
class CondensedSystem:
    """Face-only Schur complement with per-element recovery data."""

    full: SparseSpdSystem
    matrix: sp.csr_matrix
    rhs: np.ndarray
    recovery: list            # (cell rows solver data) per element
    nnz_before: int
    nnz_after: int

    @property
    def n_reduced(self):
        return self.matrix.shape[0]

    def expand(self, face_solution):
        """Recover the full solution from the face-only one."""
        sys = self.full
        data = np.zeros(sys.dofmap.total)
        data[:sys.dofmap.n_face_dofs] = face_solution
        vec = GlobalHhoVector(mesh=sys.mesh, dofmap=sys.dofmap, data=data)
        nc = hl.cell_block_dim(sys.k)
        for el, (Acc_inv, Acf, b_cell) in zip(sys.mesh.elements, self.recovery):
            idx = sys.dofmap.element_indices(el)
            xf = np.where(idx[nc:] >= 0, data[np.clip(idx[nc:], 0, None)], 0.0)
            xc = Acc_inv @ (b_cell - Acf @ xf)
            data[idx[:nc]] = xc
        return vec


def static_condense(system):
    """Eliminate cell blocks through local Schur complements (k >= 1)."""
    if system.k < 1:
        raise AssemblyError("static condensation needs cell unknowns (k >= 1)")
    nc = hl.cell_block_dim(system.k)
    nf_dofs = system.dofmap.n_face_dofs

    rows, cols, vals = [], [], []
    rhs = np.zeros(nf_dofs)
    recovery = []
    for el, op in zip(system.mesh.elements, system.ops):
        idx = system.dofmap.element_indices(el)
        Acc = op.stiff[:nc, :nc]
        Acf = op.stiff[:nc, nc:]
        Aff = op.stiff[nc:, nc:]
        try:
            Acc_inv = np.linalg.inv(Acc)
        except np.linalg.LinAlgError as exc:
            raise AssemblyError(
                f"element {el.id}: singular cell block (coercivity violated)"
            ) from exc
        b_cell = _local_rhs_cell(system, el, op)
        S_loc = Aff - Acf.T @ Acc_inv @ Acf
        b_loc = -Acf.T @ (Acc_inv @ b_cell)
        face_idx = idx[nc:]
        keep = np.flatnonzero(face_idx >= 0)
        gi = face_idx[keep]
        rows.append(np.repeat(gi, len(gi)))
        cols.append(np.tile(gi, len(gi)))
        vals.append(S_loc[np.ix_(keep, keep)].ravel())
        np.add.at(rhs, gi, b_loc[keep])
        recovery.append((Acc_inv, Acf, b_cell))
    rhs += system.rhs[:nf_dofs]  # face loads (zero for this scheme's RHS)

    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nf_dofs, nf_dofs),
    ).tocsr()
    return CondensedSystem(
        full=system,
        matrix=matrix,
        rhs=rhs,
        recovery=recovery,
        nnz_before=system.matrix.nnz,
        nnz_after=matrix.nnz,
    )


def _local_rhs_cell(system, el, op):
    """Cell-block part of the local load vector (recomputed for recovery)."""
    nc = hl.cell_block_dim(system.k)
    idx = system.dofmap.element_indices(el)
    return system.rhs[idx[:nc]] if nc else np.zeros(0)


def solve_condensed(condensed, tol=1e-12):
    sys = condensed.full
    if condensed.n_reduced == 0:
        return condensed.expand(np.zeros(0)), SolveInfo("empty", 0.0)
    lu = spla.splu(condensed.matrix.tocsc())
    xf = lu.solve(condensed.rhs)
    res = np.linalg.norm(condensed.matrix @ xf - condensed.rhs) / max(
        np.linalg.norm(condensed.rhs), 1e-300
    )
    if not np.isfinite(res) or res > tol * 10:
        raise SolverError("condensed solve lost accuracy", residual=float(res))
    return condensed.expand(xf), SolveInfo("direct", float(res))


# ---------------------------------------------------------------------------
# energy-norm Gram and dual norms


class NormGram:
    """Assembled Gram of the discrete energy norm on the zero-boundary space."""

    def __init__(self, mesh, k, ops=None, dofmap=None):
        self.mesh = mesh
        self.k = k
        self.dofmap = dofmap or build_dof_map(mesh, k)
        if ops is None:
            ops = build_local_operators(mesh, k)
        self.ops = ops
        rows, cols, vals = [], [], []
        for el, op in zip(mesh.elements, ops):
            idx = self.dofmap.element_indices(el)
            keep = np.flatnonzero(idx >= 0)
            gi = idx[keep]
            rows.append(np.repeat(gi, len(gi)))
            cols.append(np.tile(gi, len(gi)))
            vals.append(op.norm_gram[np.ix_(keep, keep)].ravel())
        n = self.dofmap.total
        if n:
            self.matrix = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n, n),
            ).tocsr()
            try:
                self._lu = spla.splu(self.matrix.tocsc())
            except RuntimeError as exc:
                raise AssemblyError(
                    "energy-norm Gram singular on the zero-boundary space"
                ) from exc
        else:
            self.matrix = sp.csr_matrix((0, 0))
            self._lu = None

    def norm(self, data):
        data = np.asarray(data, dtype=float)
        return float(np.sqrt(max(data @ (self.matrix @ data), 0.0)))

    def apply_inverse(self, data):
        return self._lu.solve(np.asarray(data, dtype=float))

    def riesz_dual_norm(self, moments):
        """sup of moments(v) / |v| over the zero-boundary space."""
        moments = np.asarray(moments, dtype=float)
        if self.dofmap.total == 0 or not np.any(moments):
            return 0.0
        x = self._lu.solve(moments)
        return float(np.sqrt(max(moments @ x, 0.0)))


def riesz_dual_norm(mesh, k, moments, ops=None):
    return NormGram(mesh, k, ops=ops).riesz_dual_norm(moments)


# ---------------------------------------------------------------------------
# matrix dump


def dump_matrix(path, matrix):
    """Coordinate text dump: MatrixMarket-style header, 0-based indices."""
    coo = matrix.tocoo()
    with open(path, "w") as out:
        out.write("%%MatrixMarket matrix coordinate real general\n")
        out.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            out.write(f"{i} {j} {float(v)!r}\n")
