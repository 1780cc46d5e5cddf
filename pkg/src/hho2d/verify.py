"""Manufactured solutions, error measures, and convergence studies.

Everything here treats the solver as a black box and measures: the energy
distance between the discrete solution and the interpolate of the exact
one, the dual norm of the consistency functional, the stabilization energy
of the interpolated exact solution, spectral constants (the coercivity
equivalence constant per mesh and the discrete Poincare constant), and the
fitted orders of convergence along refinement families.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from hho2d import assembly as asm
from hho2d import hho_local as hl
from hho2d import polybasis as pb
from hho2d.mesh import MeshFamily, agglomerate, generate, refine_nonconforming


@dataclass(frozen=True)
class ManufacturedCase:
    """Closed-form solution with matching source for the unit square."""

    name: str
    u: object
    grad: object
    f: object
    regularity: str = "smooth"


def _sine():
    u = lambda p: np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])
    grad = lambda p: np.pi * np.column_stack(
        [
            np.cos(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1]),
            np.sin(np.pi * p[:, 0]) * np.cos(np.pi * p[:, 1]),
        ]
    )
    f = lambda p: 2.0 * np.pi**2 * np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])
    return ManufacturedCase("sine", u, grad, f, "analytic")


def _bubble():
    u = lambda p: p[:, 0] * (1 - p[:, 0]) * p[:, 1] * (1 - p[:, 1])
    grad = lambda p: np.column_stack(
        [
            (1 - 2 * p[:, 0]) * p[:, 1] * (1 - p[:, 1]),
            p[:, 0] * (1 - p[:, 0]) * (1 - 2 * p[:, 1]),
        ]
    )
    f = lambda p: 2.0 * (p[:, 0] * (1 - p[:, 0]) + p[:, 1] * (1 - p[:, 1]))
    return ManufacturedCase("bubble", u, grad, f, "polynomial")


CASES = {"sine": _sine(), "bubble": _bubble()}


# ---------------------------------------------------------------------------
# mesh families


def build_family(tag, levels, frac=0.25, block=2):
    """Refinement families used by the studies.

    cartesian / triangular: uniform generators; nonconforming: scattered
    marking (stride pattern) so hanging-node elements cover a fixed area
    fraction; agglomerated: coarse blocks on the left half, fine cells on
    the right; rectangles: 2x1 dominoes everywhere.
    """
    meshes = []
    for n in levels:
        if tag in ("cartesian", "triangular"):
            meshes.append(generate(tag, n))
        elif tag == "nonconforming":
            meshes.append(nonconforming_mesh(n, frac))
        elif tag == "agglomerated":
            meshes.append(agglomerated_mesh(n, block))
        elif tag == "rectangles":
            meshes.append(rectangle_mesh(n))
        else:
            raise ValueError(f"unknown family tag {tag!r}")
    return MeshFamily(tag=tag, meshes=meshes)


def nonconforming_mesh(n, frac=0.25):
    """Cartesian grid with a scattered fraction of cells split in four."""
    mesh = generate("cartesian", n)
    stride = max(1, int(round(1.0 / frac)))
    marked = [
        j * n + i for j in range(n) for i in range(n)
        if (i + 3 * j) % stride == 0
    ]
    return refine_nonconforming(mesh, marked)


def agglomerated_mesh(n, block=2):
    """Left half coarsened into block x block squares, right half fine."""
    if n % (2 * block) != 0:
        raise ValueError("agglomerated mesh needs block | n/2")
    blocks = [
        (i, j, block, block)
        for j in range(0, n, block)
        for i in range(0, n // 2, block)
    ]
    blocks += [(i, j, 1, 1) for j in range(n) for i in range(n // 2, n)]
    return agglomerate(generate("cartesian", n), blocks)


def rectangle_mesh(n):
    """All cells merged into 2x1 dominoes (generic non-square elements)."""
    if n % 2 != 0:
        raise ValueError("rectangle mesh needs even n")
    blocks = [(2 * i, j, 2, 1) for j in range(n) for i in range(n // 2)]
    return agglomerate(generate("cartesian", n), blocks)


# ---------------------------------------------------------------------------
# error measures


def interpolate_global(system, u):
    """Dof vector of the global interpolate (boundary faces read zero)."""
    data = np.zeros(system.dofmap.total)
    for el, op in zip(system.mesh.elements, system.ops):
        vec = hl.interpolate(system.mesh, el.id, system.k, u)
        idx = system.dofmap.element_indices(el)
        keep = idx >= 0
        data[idx[keep]] = vec.flat()[keep]
    return asm.GlobalHhoVector(mesh=system.mesh, dofmap=system.dofmap, data=data)


def energy_error(system, solution, case):
    """Energy distance between the solution and the exact interpolate."""
    err2 = 0.0
    for el, op in zip(system.mesh.elements, system.ops):
        iu = hl.interpolate(system.mesh, el.id, system.k, case.u).flat()
        e = iu - solution.local_flat(el.id)
        err2 += e @ op.norm_gram @ e
    return float(np.sqrt(max(err2, 0.0)))


def l2_error_cell_value(system, solution, case, order=None):
    """L2 distance between the exact solution and the piecewise cell value."""
    order = order if order is not None else 2 * system.k + 6
    err2 = 0.0
    for el, op in zip(system.mesh.elements, system.ops):
        quad = pb.cell_quadrature(system.mesh, el.id, order)
        loc = solution.local_flat(el.id)
        if system.k >= 1:
            vals = op.cell_basis.eval(quad.points) @ loc[: hl.cell_block_dim(system.k)]
        else:
            vals = np.full(len(quad.weights), op.avg_weights @ loc)
        diff = case.u(quad.points) - vals
        err2 += quad.weights @ diff**2
    return float(np.sqrt(err2))


def consistency_moments(system, case):
    """Moments of the consistency functional against every basis dof."""
    iu = interpolate_global(system, case.u)
    return system.rhs - system.matrix @ iu.data


def consistency_dual_norm(system, case, norm_gram=None):
    """Dual energy norm of the consistency functional of the exact solution."""
    if norm_gram is None:
        norm_gram = asm.NormGram(
            system.mesh, system.k, ops=system.ops, dofmap=system.dofmap
        )
    return norm_gram.riesz_dual_norm(consistency_moments(system, case))


def stab_energy(system, case):
    """Aggregate stabilization energy of the interpolated exact solution."""
    total = 0.0
    for el, op in zip(system.mesh.elements, system.ops):
        iu = hl.interpolate(system.mesh, el.id, system.k, case.u).flat()
        r = op.stab_factor @ iu
        total += r @ r
    return float(np.sqrt(total))


def source_l2_norm(mesh, case, order=10):
    total = 0.0
    for el in mesh.elements:
        quad = pb.cell_quadrature(mesh, el.id, order)
        total += quad.weights @ case.f(quad.points) ** 2
    return float(np.sqrt(total))


def mesh_eta(system):
    """Largest per-element equivalence constant of the local forms."""
    return max(hl.eta_of(op) for op in system.ops)


# ---------------------------------------------------------------------------
# discrete Poincare constant


class PowerIterationError(Exception):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def l2_mass_matrix(system):
    """Gram of the piecewise cell value on the zero-boundary dof space."""
    rows, cols, vals = [], [], []
    nc = hl.cell_block_dim(system.k)
    for el, op in zip(system.mesh.elements, system.ops):
        idx = system.dofmap.element_indices(el)
        if system.k >= 1:
            quad = pb.cell_quadrature(system.mesh, el.id, 2 * system.k)
            V = op.cell_basis.eval(quad.points)
            M = V.T * quad.weights @ V
            gi = idx[:nc]
            rows.append(np.repeat(gi, nc))
            cols.append(np.tile(gi, nc))
            vals.append(M.ravel())
        else:
            w = op.avg_weights * np.sqrt(el.area)
            keep = np.flatnonzero(idx >= 0)
            gi = idx[keep]
            M = np.outer(w[keep], w[keep])
            rows.append(np.repeat(gi, len(gi)))
            cols.append(np.tile(gi, len(gi)))
            vals.append(M.ravel())
    n = system.dofmap.total
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()


def poincare_constant(system, norm_gram=None, tol=1e-10, maxiter=5000):
    """Largest ratio |cell value|_L2 / energy norm, by power iteration."""
    if system.dofmap.total == 0:
        raise ValueError("empty system has no Poincare constant")
    if norm_gram is None:
        norm_gram = asm.NormGram(
            system.mesh, system.k, ops=system.ops, dofmap=system.dofmap
        )
    M = l2_mass_matrix(system)
    rng = np.random.default_rng(2718)
    x = rng.standard_normal(system.dofmap.total)
    lam = 0.0
    history = []
    for it in range(1, maxiter + 1):
        y = norm_gram.apply_inverse(M @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            raise PowerIterationError("mass matrix annihilated the iterate", history)
        x = y / ny
        num = x @ (M @ x)
        den = x @ (norm_gram.matrix @ x)
        lam_new = num / den
        history.append(lam_new)
        if it > 1 and abs(lam_new - lam) <= tol * abs(lam_new):
            return float(np.sqrt(lam_new)), it
        lam = lam_new
    raise PowerIterationError(
        f"power iteration stagnated after {maxiter} iterations", history
    )


# ---------------------------------------------------------------------------
# EOC fitting


def eoc_fit(hs, errors, points=3):
    """Least-squares slope of log(error) vs log(h) on the finest points."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if len(hs) < 2:
        return float("nan")
    take = min(points, len(hs))
    h, e = hs[-take:], errors[-take:]
    if np.any(e <= 0):
        return float("nan")
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


def incremental_eoc(hs, errors):
    out = [float("nan")]
    for i in range(1, len(hs)):
        if errors[i] > 0 and errors[i - 1] > 0:
            out.append(
                float(np.log(errors[i - 1] / errors[i]) / np.log(hs[i - 1] / hs[i]))
            )
        else:
            out.append(float("nan"))
    return out


# ---------------------------------------------------------------------------
# convergence studies


@dataclass
class StudyRow:
    h: float
    n_dofs: int
    n_face_dofs: int
    energy_err: float
    consist_dual: float
    stab_consist: float
    l2_err: float
    eta: float
    cp: float
    seconds: float
    uh_energy_norm: float = 0.0
    f_l2: float = 0.0
    poincare_iters: int = 0
    solver_residual: float = 0.0
    condensed_rel_diff: float = float("nan")
    reduced_dofs: int = 0


@dataclass
class ConvergenceReport:
    family: str
    k: int
    case: str
    rows: list = field(default_factory=list)
    eoc: dict = field(default_factory=dict)

    CSV_HEADER = [
        "family", "k", "h", "n_dofs", "energy_err", "eoc",
        "consist_dual", "stab_consist", "CP", "eta", "seconds",
    ]

    def finalize(self):
        hs = [r.h for r in self.rows]
        if len(self.rows) >= 3:
            self.eoc = {
                "energy": eoc_fit(hs, [r.energy_err for r in self.rows]),
                "consist": eoc_fit(hs, [r.consist_dual for r in self.rows]),
                "stab": eoc_fit(hs, [r.stab_consist for r in self.rows]),
                "l2": eoc_fit(hs, [r.l2_err for r in self.rows]),
            }
        return self

    def _table_rows(self):
        hs = [r.h for r in self.rows]
        incr = incremental_eoc(hs, [r.energy_err for r in self.rows])
        for row, e in zip(self.rows, incr):
            yield [
                self.family, str(self.k), f"{row.h:.6e}", str(row.n_dofs),
                f"{row.energy_err:.6e}", "" if np.isnan(e) else f"{e:.3f}",
                f"{row.consist_dual:.6e}", f"{row.stab_consist:.6e}",
                f"{row.cp:.6e}", f"{row.eta:.6e}", f"{row.seconds:.3f}",
            ]

    def to_csv(self):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(self.CSV_HEADER)
        for fields in self._table_rows():
            writer.writerow(fields)
        return out.getvalue()

    def to_markdown(self):
        lines = [
            "| " + " | ".join(self.CSV_HEADER) + " |",
            "|" + "|".join(["---"] * len(self.CSV_HEADER)) + "|",
        ]
        for fields in self._table_rows():
            lines.append("| " + " | ".join(fields) + " |")
        if self.eoc:
            lines.append("")
            lines.append(
                "fitted EOC (finest 3): "
                + ", ".join(f"{k} = {v:.3f}" for k, v in self.eoc.items())
            )
        return "\n".join(lines) + "\n"


def study(family, k, case, check_condensation=True, determinism=False):
    """Solve on every mesh of the family and collect all row metrics."""
    if isinstance(case, str):
        case = CASES[case]
    report = ConvergenceReport(family=family.tag, k=k, case=case.name)
    for mesh in family:
        t0 = time.perf_counter()
        system = asm.assemble(mesh, k, case.f, determinism=determinism)
        solution, info = asm.solve(system)
        norm_gram = asm.NormGram(mesh, k, ops=system.ops, dofmap=system.dofmap)
        row = StudyRow(
            h=mesh.h,
            n_dofs=system.dofmap.total,
            n_face_dofs=system.dofmap.n_face_dofs,
            energy_err=energy_error(system, solution, case),
            consist_dual=consistency_dual_norm(system, case, norm_gram=norm_gram),
            stab_consist=stab_energy(system, case),
            l2_err=l2_error_cell_value(system, solution, case),
            eta=mesh_eta(system),
            cp=float("nan"),
            seconds=0.0,
            uh_energy_norm=norm_gram.norm(solution.data),
            f_l2=source_l2_norm(mesh, case),
            solver_residual=info.residual,
        )
        row.cp, row.poincare_iters = poincare_constant(system, norm_gram=norm_gram)
        if check_condensation and k >= 1:
            condensed = asm.static_condense(system)
            recovered, _ = asm.solve_condensed(condensed)
            row.condensed_rel_diff = float(
                np.linalg.norm(recovered.data - solution.data)
                / np.linalg.norm(solution.data)
            )
            row.reduced_dofs = condensed.n_reduced
        # wall time is inherently irreproducible; the determinism contract
        # promises byte-identical reports, so it is dropped there
        row.seconds = 0.0 if determinism else time.perf_counter() - t0
        report.rows.append(row)
    return report.finalize()


@dataclass
class _LocalOnlySystem:
    """Mesh/degree/operators bundle for measures that need no global matrix."""

    mesh: object
    k: int
    ops: list
    dofmap: object


def _bare_system(mesh, k, ops):
    return _LocalOnlySystem(mesh=mesh, k=k, ops=ops, dofmap=asm.build_dof_map(mesh, k))


def stab_consistency_rate(family, k, case):
    """EOC of the aggregate stabilization energy of the exact interpolate."""
    if isinstance(case, str):
        case = CASES[case]
    hs, values = [], []
    for mesh in family:
        ops = asm.build_local_operators(mesh, k)
        values.append(stab_energy(_bare_system(mesh, k, ops), case))
        hs.append(mesh.h)
    return eoc_fit(hs, values), hs, values


def projector_rate_suite(family, degree, case):
    """EOCs of the cell projection, its weighted boundary trace, and the
    weighted boundary gradient of the local energy projection."""
    if isinstance(case, str):
        case = CASES[case]
    hs, cell_errs, trace_errs, egrad_errs = [], [], [], []
    for mesh in family:
        cell2 = trace2 = egrad2 = 0.0
        for el in mesh.elements:
            basis = pb.cell_basis(mesh, el.id, degree)
            coeff = pb.l2_project_cell(
                mesh, el.id, degree, case.u, order=2 * degree + 6, basis=basis
            )
            quad = pb.cell_quadrature(mesh, el.id, 2 * degree + 6)
            diff = case.u(quad.points) - basis.eval(quad.points) @ coeff
            cell2 += quad.weights @ diff**2

            ops = hl.local_operators(mesh, el.id, degree)
            eproj, ebasis = hl.elliptic_project(
                mesh, el.id, degree, case.u, ops=ops, order=2 * degree + 6
            )
            for fid in el.face_ids:
                fq = pb.face_quadrature(mesh, int(fid), 2 * degree + 6)
                bdiff = case.u(fq.points) - basis.eval(fq.points) @ coeff
                trace2 += el.diameter * (fq.weights @ bdiff**2)
                gdiff = case.grad(fq.points) - np.einsum(
                    "pid,i->pd", ebasis.grad(fq.points), eproj
                )
                egrad2 += el.diameter * np.einsum(
                    "pd,p,pd->", gdiff, fq.weights, gdiff
                )
        hs.append(mesh.h)
        cell_errs.append(np.sqrt(cell2))
        trace_errs.append(np.sqrt(trace2))
        egrad_errs.append(np.sqrt(egrad2))
    return {
        "cell_l2": eoc_fit(hs, cell_errs),
        "weighted_trace": eoc_fit(hs, trace_errs),
        "elliptic_boundary_gradient": eoc_fit(hs, egrad_errs),
        "hs": hs,
        "cell_errors": cell_errs,
        "trace_errors": trace_errs,
        "egrad_errors": egrad_errs,
    }
