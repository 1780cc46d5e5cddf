"""Command-line front end: solve one problem, run a convergence study, or
run the invariant check suite.

Mesh sources are either a POLYMESH2D file path or a generator spec:
``cartesian:n``, ``triangular:n``, ``nonconf:n:frac``, ``agglo:n:block``.
Exit codes: 0 success, 1 check-suite failure, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hho2d import assembly as asm
from hho2d import classics as cl
from hho2d import hho_local as hl
from hho2d import verify as vf
from hho2d.mesh import MeshError, load_mesh
from hho2d.polybasis import BasisError


class ConfigError(Exception):
    pass


class CheckFailure(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    mesh_source: str = ""
    family: str = ""
    levels: tuple = (4, 8, 16, 32)
    k: int = 1
    case: str = "sine"
    out: str = "study.csv"
    determinism: bool = False
    solver: str = "direct"
    tol: float = 1e-12
    dump_matrix: str = ""
    frac: float = 0.25
    block: int = 2

    def __post_init__(self):
        if self.k not in (0, 1, 2, 3):
            raise ConfigError(f"degree k must be in {{0,1,2,3}}, got {self.k}")
        if self.case not in vf.CASES:
            raise ConfigError(f"unknown case {self.case!r}")
        if self.solver not in ("direct", "cg"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if any(n < 1 for n in self.levels):
            raise ConfigError("levels must be positive")


def resolve_mesh(source, frac=0.25, block=2):
    """Turn a mesh source spec into a PolyMesh."""
    parts = source.split(":")
    kind = parts[0]
    try:
        if kind == "cartesian" and len(parts) == 2:
            return vf.generate("cartesian", _positive_int(parts[1]))
        if kind == "triangular" and len(parts) == 2:
            return vf.generate("triangular", _positive_int(parts[1]))
        if kind == "nonconf" and len(parts) in (2, 3):
            n = _positive_int(parts[1])
            f = float(parts[2]) if len(parts) == 3 else frac
            if not 0 < f <= 1:
                raise ConfigError("nonconf fraction must be in (0, 1]")
            return vf.nonconforming_mesh(n, f)
        if kind == "agglo" and len(parts) in (2, 3):
            n = _positive_int(parts[1])
            b = int(parts[2]) if len(parts) == 3 else block
            return vf.agglomerated_mesh(n, b)
    except ValueError as exc:
        raise ConfigError(f"bad generator spec {source!r}: {exc}") from exc
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"mesh source {source!r}: no such file or generator")
    return load_mesh(path.read_text())


def _positive_int(token):
    value = int(token)
    if value < 1:
        raise ValueError("parameter must be >= 1")
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hho2d",
        description="Hybrid high-order Poisson solver on polygonal meshes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="solve one problem and print a summary")
    solve.add_argument("--mesh", required=True, help="file path or generator spec")
    solve.add_argument("--k", type=int, default=1)
    solve.add_argument("--case", default="sine")
    solve.add_argument("--solver", default="direct", choices=["direct", "cg"])
    solve.add_argument("--determinism", action="store_true")
    solve.add_argument("--dump-matrix", default="", help="write the system matrix")

    study = sub.add_parser("study", help="run a convergence study over a family")
    study.add_argument(
        "--family",
        default="cartesian",
        choices=["cartesian", "triangular", "nonconforming", "agglomerated", "rectangles"],
    )
    study.add_argument("--levels", default="4,8,16,32")
    study.add_argument("--k", type=int, default=1)
    study.add_argument("--case", default="sine")
    study.add_argument("--out", default="study.csv")
    study.add_argument("--determinism", action="store_true")
    study.add_argument("--frac", type=float, default=0.25)
    study.add_argument("--block", type=int, default=2)

    check = sub.add_parser("check", help="run the invariant suite on one mesh")
    check.add_argument("--mesh", required=True)
    check.add_argument("--k", type=int, default=1)
    check.add_argument("--determinism", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "solve":
            config = RunConfig(
                command="solve",
                mesh_source=args.mesh,
                k=args.k,
                case=args.case,
                solver=args.solver,
                determinism=args.determinism,
                dump_matrix=args.dump_matrix,
            )
            return run_solve(config)
        if args.command == "study":
            levels = tuple(int(t) for t in args.levels.split(","))
            config = RunConfig(
                command="study",
                family=args.family,
                levels=levels,
                k=args.k,
                case=args.case,
                out=args.out,
                determinism=args.determinism,
                frac=args.frac,
                block=args.block,
            )
            return run_study(config)
        if args.command == "check":
            config = RunConfig(command="check", mesh_source=args.mesh, k=args.k)
            return run_check(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, MeshError, ValueError) as exc:
        print(f'FAILURE kind=config detail="{exc}"', file=sys.stderr)
        return 2
    except (
        asm.SolverError,
        asm.AssemblyError,
        hl.HhoError,
        BasisError,
        vf.PowerIterationError,
        np.linalg.LinAlgError,
    ) as exc:
        print(f'FAILURE kind=numerical detail="{exc}"', file=sys.stderr)
        return 3
    except CheckFailure as exc:
        print(f'FAILURE kind=check detail="{exc}"', file=sys.stderr)
        return 1


def run_solve(config):
    mesh = resolve_mesh(config.mesh_source, config.frac, config.block)
    case = vf.CASES[config.case]
    t0 = time.perf_counter()
    system = asm.assemble(mesh, config.k, case.f, determinism=config.determinism)
    solution, info = asm.solve(system, method=config.solver, tol=config.tol)
    elapsed = time.perf_counter() - t0
    norm_gram = asm.NormGram(mesh, config.k, ops=system.ops, dofmap=system.dofmap)
    print(f"mesh: {mesh.n_elements} elements, {mesh.n_faces} faces, h = {mesh.h:.6e}")
    print(f"degree k = {config.k}, case = {config.case}, unknowns = {system.dofmap.total}")
    print(f"solver = {info.method}, relative residual = {info.residual:.3e}")
    print(f"solution energy norm = {norm_gram.norm(solution.data):.6e}")
    print(f"energy error vs exact interpolate = {vf.energy_error(system, solution, case):.6e}")
    print(f"wall time = {elapsed:.3f} s")
    if config.dump_matrix:
        asm.dump_matrix(config.dump_matrix, system.matrix)
        print(f"matrix dumped to {config.dump_matrix} (nnz = {system.matrix.nnz})")
    return 0


def run_study(config):
    family = vf.build_family(
        config.family, config.levels, frac=config.frac, block=config.block
    )
    report = vf.study(
        family, config.k, config.case, determinism=config.determinism
    )
    csv_text = report.to_csv()
    out = Path(config.out)
    out.write_text(csv_text)
    out.with_suffix(".md").write_text(report.to_markdown())
    sys.stdout.write(csv_text)
    if report.eoc:
        print(
            "fitted EOC (finest 3): "
            + ", ".join(f"{k} = {v:.3f}" for k, v in report.eoc.items())
        )
    print(f"wrote {out} and {out.with_suffix('.md')}")
    return 0


def run_check(config):
    mesh = resolve_mesh(config.mesh_source, config.frac, config.block)
    k = config.k
    failures = []

    def report(name, ok, detail):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failures.append(name)

    ops = asm.build_local_operators(mesh, k)
    rng = np.random.default_rng(20240601)

    worst = 0.0
    for op in ops:
        c = rng.standard_normal(op.recon_basis.dim)
        vec = hl.interpolate(mesh, op.elem_id, k, lambda p: op.recon_basis.eval(p) @ c)
        got = op.recon @ vec.flat()
        worst = max(worst, np.linalg.norm(got - c) / np.linalg.norm(c))
    report("polynomial-consistency", worst <= 1e-10, f"max relative defect {worst:.2e}")

    worst = 0.0
    for op in ops:
        c = rng.standard_normal(op.recon_basis.dim)
        vec = hl.interpolate(mesh, op.elem_id, k, lambda p: op.recon_basis.eval(p) @ c)
        flat = vec.flat()
        denom = np.linalg.norm(op.stab, 2) * np.linalg.norm(flat) + 1e-300
        worst = max(worst, np.linalg.norm(op.stab @ flat) / denom)
    report("stabilization-consistency", worst <= 1e-10, f"max scaled defect {worst:.2e}")

    try:
        etas = [hl.eta_of(op) for op in ops]
        report("coercivity-bounds", True, f"max eta {max(etas):.3f}")
    except hl.CoercivityViolationError as exc:
        report("coercivity-bounds", False, str(exc))

    case = vf.CASES["sine"]
    fluxes = cl.gradient_fluxes(mesh, case.grad, order=10)
    values = np.zeros(mesh.n_faces)
    interior = mesh.interior_face_ids()
    values[interior] = rng.standard_normal(len(interior))
    residual = cl.magic_residual(mesh, fluxes, values)
    scale = cl.magic_scale(mesh, fluxes, values) + 1e-300
    report("flux-cancellation", abs(residual) <= 1e-12 * scale,
           f"relative residual {abs(residual) / scale:.2e}")

    all_triangles = all(len(el.vertex_loop) == 3 == el.n_faces for el in mesh.elements)
    if all_triangles:
        import scipy.sparse as sp

        system0 = asm.assemble(mesh, 0, case.f)
        cr = cl.cr_assemble(mesh, case.f)
        rel = sp.linalg.norm(system0.matrix - cr.matrix) / sp.linalg.norm(cr.matrix)
        report("cr-equality", rel <= 1e-12, f"relative Frobenius gap {rel:.2e}")
    else:
        print("SKIP cr-equality: mesh is not a conforming triangulation")

    system = asm.assemble(mesh, k, case.f)
    if system.dofmap.total:
        try:
            cp, iters = vf.poincare_constant(system)
            report("poincare", np.isfinite(cp) and cp > 0,
                   f"C_P {cp:.4f} in {iters} iterations")
        except vf.PowerIterationError as exc:
            report("poincare", False, str(exc))
    else:
        print("SKIP poincare: no unknowns on this mesh")

    if failures:
        raise CheckFailure(", ".join(failures))
    return 0


if __name__ == "__main__":
    sys.exit(main())
