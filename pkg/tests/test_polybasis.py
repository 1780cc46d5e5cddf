import numpy as np
import pytest

from hho2d import polybasis as pb
from hho2d.mesh import PolyMesh, generate, refine_nonconforming


@pytest.fixture
def unit_square():
    return PolyMesh([(0, 0), (1, 0), (1, 1), (0, 1)], [[0, 1, 2, 3]])


def random_polygons(seed=7):
    """Small corpus: triangles, squares, and pentagon-faced split cells."""
    rng = np.random.default_rng(seed)
    meshes = []
    for _ in range(4):
        # triangle with a guaranteed-decent angle
        a = rng.uniform(-1, 1, 2)
        b = a + rng.uniform(0.5, 1.5) * _unit(rng)
        mid = 0.5 * (a + b)
        normal = _perp(b - a)
        c = mid + rng.uniform(0.4, 1.2) * normal
        meshes.append((PolyMesh([a, b, c], [[0, 1, 2]]), 0))
    for _ in range(3):
        s, th = rng.uniform(0.3, 2.0), rng.uniform(0, np.pi)
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        sq = (np.array([(0, 0), (1, 0), (1, 1), (0, 1)]) * s) @ R.T + rng.uniform(-2, 2, 2)
        meshes.append((PolyMesh(sq, [[0, 1, 2, 3]]), 0))
    for _ in range(3):
        t = rng.uniform(0.25, 0.75)
        verts = [(0, 0), (1, 0), (2, 0), (2, t), (1, t), (2, 1), (1, 1), (0, 1)]
        loops = [[0, 1, 6, 7], [1, 2, 3, 4], [4, 3, 5, 6]]
        meshes.append((PolyMesh(verts, loops), 0))  # element 0 has 5 faces
    return meshes


def _unit(rng):
    th = rng.uniform(0, 2 * np.pi)
    return np.array([np.cos(th), np.sin(th)])


def _perp(v):
    return np.array([-v[1], v[0]]) / np.linalg.norm(v)


def test_cell_quadrature_measures(unit_square):
    q = pb.cell_quadrature(unit_square, 0, 0)
    assert abs(q.weights.sum() - 1.0) <= 1e-14
    assert (q.weights > 0).all()


def test_cell_quadrature_monomial(unit_square):
    q = pb.cell_quadrature(unit_square, 0, 3)
    assert q.integrate(lambda p: p[:, 0] ** 2 * p[:, 1]) == pytest.approx(1 / 6, rel=1e-14)


@pytest.mark.parametrize("order", [0, 2, 5, 8, 12])
def test_cell_quadrature_exactness(order):
    tri = PolyMesh([(0.1, -0.2), (1.3, 0.4), (0.2, 1.1)], [[0, 1, 2]])
    q = pb.cell_quadrature(tri, 0, order)
    dense = pb.cell_quadrature(tri, 0, order + 6)
    rng = np.random.default_rng(order)
    coef = rng.standard_normal((order + 1, order + 1))
    coef = np.tril(coef[::-1])[::-1]  # keep total degree <= order

    def poly(p):
        return np.polynomial.polynomial.polyval2d(p[:, 0], p[:, 1], coef)

    assert q.integrate(poly) == pytest.approx(dense.integrate(poly), rel=1e-13)
    assert (q.weights > 0).all()


def test_split_side_does_not_change_cell_integral():
    base = generate("cartesian", 2)
    split = refine_nonconforming(base, [0])
    pent = next(el for el in split.elements if el.n_faces == 5)
    same = next(
        el for el in base.elements if np.allclose(el.centroid, pent.centroid)
    )
    f = lambda p: np.exp(p[:, 0]) * np.cos(p[:, 1])
    v1 = pb.cell_quadrature(split, pent.id, 9).integrate(f)
    v2 = pb.cell_quadrature(base, same.id, 9).integrate(f)
    assert v1 == pytest.approx(v2, rel=1e-13)


def test_face_quadrature(unit_square):
    fid = next(f.id for f in unit_square.faces if np.allclose(f.midpoint, [0.5, 0]))
    q = pb.face_quadrature(unit_square, fid, 5)
    assert abs(q.weights.sum() - 1.0) <= 1e-14
    assert q.integrate(lambda p: p[:, 0] ** 4) == pytest.approx(1 / 5, rel=1e-14)


def test_grams_lowest_order(unit_square):
    M, G = pb.grams(unit_square, 0, 0)
    assert M == pytest.approx(np.array([[1.0]]))
    assert G == pytest.approx(np.array([[0.0]]))


def test_grams_affine_hand_integration(unit_square):
    # oracle: with basis {1, (x-1/2)/h, (y-1/2)/h}, h = sqrt(2), the
    # stiffness is |T|/h^2 on each gradient direction
    M, G = pb.grams(unit_square, 0, 1)
    assert G == pytest.approx(np.diag([0.0, 0.5, 0.5]), abs=1e-15)
    assert np.abs(G @ np.array([1.0, 0.0, 0.0])).max() == 0.0
    assert np.linalg.eigvalsh(M).min() > 0


def test_projection_reproduces_polynomials():
    for mesh, e in random_polygons():
        for deg in (0, 1, 2, 3):
            basis = pb.cell_basis(mesh, e, deg)
            rng = np.random.default_rng(deg)
            c = rng.standard_normal(basis.dim)
            got = pb.l2_project_cell(
                mesh, e, deg, lambda p: basis.eval(p) @ c, basis=basis
            )
            assert np.linalg.norm(got - c) <= 1e-12 * max(1, np.linalg.norm(c))


def test_projection_idempotent(unit_square):
    v = lambda p: np.sin(3 * p[:, 0]) + p[:, 1] ** 5
    basis = pb.cell_basis(unit_square, 0, 2)
    c1 = pb.l2_project_cell(unit_square, 0, 2, v, basis=basis)
    c2 = pb.l2_project_cell(
        unit_square, 0, 2, lambda p: basis.eval(p) @ c1, basis=basis
    )
    assert np.linalg.norm(c2 - c1) <= 1e-12 * np.linalg.norm(c1)


def test_projection_mean_value(unit_square):
    c = pb.l2_project_cell(unit_square, 0, 0, lambda p: p[:, 0])
    assert c[0] == pytest.approx(0.5, rel=1e-14)


def test_face_projection_cases(unit_square):
    bottom = next(f.id for f in unit_square.faces if np.allclose(f.midpoint, [0.5, 0]))
    # k=0 of an affine function is its midpoint value
    c = pb.l2_project_face(unit_square, bottom, 0, lambda p: 3 * p[:, 0] - 1)
    assert c[0] == pytest.approx(0.5, rel=1e-13)
    c = pb.l2_project_face(unit_square, bottom, 0, lambda p: p[:, 0] ** 2)
    assert c[0] == pytest.approx(1 / 3, rel=1e-13)
    # exact reproduction in P^k(F)
    basis = pb.face_basis(unit_square, bottom, 3)
    coeff = np.array([0.3, -1.2, 0.7, 2.0])
    got = pb.l2_project_face(
        unit_square, bottom, 3, lambda p: basis.eval(p) @ coeff, basis=basis
    )
    assert got == pytest.approx(coeff, rel=1e-12)


def test_gradient_stability_of_projection():
    # for v in P^(l+1), the projection's gradient never beats the gradient
    for mesh, e in random_polygons(seed=11):
        for deg in (0, 1, 2):
            rich = pb.cell_basis(mesh, e, deg + 1)
            rng = np.random.default_rng(deg + 1)
            c = rng.standard_normal(rich.dim)
            v = lambda p: rich.eval(p) @ c
            coarse = pb.cell_basis(mesh, e, deg)
            cp = pb.l2_project_cell(mesh, e, deg, v, basis=coarse)
            quad = pb.cell_quadrature(mesh, e, 2 * deg + 2)
            gp = np.einsum("pid,i->pd", coarse.grad(quad.points), cp)
            gv = np.einsum("pid,i->pd", rich.grad(quad.points), c)
            np_proj = np.einsum("pd,p,pd->", gp, quad.weights, gp)
            np_full = np.einsum("pd,p,pd->", gv, quad.weights, gv)
            assert np.sqrt(np_proj) <= np.sqrt(np_full) * (1 + 1e-10)


def test_trace_constant_bounded_across_refinement():
    consts = []
    for n in (2, 4, 8, 16):
        mesh = generate("cartesian", n)
        worst = 0.0
        for el in mesh.elements:
            basis = pb.cell_basis(mesh, el.id, 3)
            quad = pb.cell_quadrature(mesh, el.id, 8)
            V = basis.eval(quad.points)
            D = basis.grad(quad.points)
            l2 = np.sqrt(np.einsum("pi,p,pi->i", V, quad.weights, V))
            h1 = np.sqrt(np.einsum("pid,p,pid->i", D, quad.weights, D))
            bnd = np.zeros(basis.dim)
            for fid in el.face_ids:
                fq = pb.face_quadrature(mesh, fid, 8)
                Vf = basis.eval(fq.points)
                bnd += np.einsum("pi,p,pi->i", Vf, fq.weights, Vf)
            ratio = np.sqrt(el.diameter * bnd) / (l2 + el.diameter * h1)
            worst = max(worst, ratio.max())
        consts.append(worst)
    assert max(consts) <= 2.0 * consts[0]


def test_orthonormalization_threshold(unit_square):
    assert pb.cell_basis(unit_square, 0, 3).transform is None
    rich = pb.cell_basis(unit_square, 0, 4)
    assert rich.transform is not None
    M, _ = pb.grams(unit_square, 0, 4, basis=rich)
    assert M == pytest.approx(np.eye(rich.dim), abs=1e-12)


def test_quadrature_errors():
    mesh = generate("cartesian", 1)
    with pytest.raises(pb.BasisError):
        pb.cell_quadrature(mesh, 0, -1)
    with pytest.raises(pb.BasisError):
        pb.CellBasis([0, 0], 1.0, -2)
