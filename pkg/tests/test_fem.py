from functools import lru_cache

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from latmg.cycles import build_level_ops
from latmg.fem import (EbeOperator, assemble_dense, element_kernel, element_matrix_thermal,
                       element_stiffness_elastic, galerkin_coarse_kernel, local_prolongation)
from latmg.hierarchy import build_hierarchy
from latmg.transfer import build_stencil
from latmg.voxgeom import MaterialModel, VoxelGrid, random_occupancy

X, Y, Z = sp.symbols("x y z")
CORNERS = [(k & 1, (k >> 1) & 1, (k >> 2) & 1) for k in range(8)]


def _box_integral(expr, h):
    """Exact integral of a polynomial over [0,hx]x[0,hy]x[0,hz]."""
    poly = sp.Poly(sp.expand(expr), X, Y, Z)
    total = sp.Integer(0)
    for (a, b, c), coef in poly.terms():
        total += coef * h[0] ** (a + 1) * h[1] ** (b + 1) * h[2] ** (c + 1) / ((a + 1) * (b + 1) * (c + 1))
    return total


def _shape_functions(h):
    out = []
    for cx, cy, cz in CORNERS:
        fx = X / h[0] if cx else 1 - X / h[0]
        fy = Y / h[1] if cy else 1 - Y / h[1]
        fz = Z / h[2] if cz else 1 - Z / h[2]
        out.append(fx * fy * fz)
    return out


@lru_cache(maxsize=None)
def exact_thermal(h=(1, 1, 1)):
    h = tuple(sp.Rational(v) for v in h)
    N = _shape_functions(h)
    g = [[sp.diff(n, v) for v in (X, Y, Z)] for n in N]
    K = sp.zeros(8, 8)
    for i in range(8):
        for j in range(i, 8):
            K[i, j] = K[j, i] = _box_integral(sum(g[i][d] * g[j][d] for d in range(3)), h)
    return K


@lru_cache(maxsize=None)
def exact_elastic(E=1, nu=sp.Rational(3, 10)):
    E, nu = sp.Rational(E), sp.Rational(nu)
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    N = _shape_functions((1, 1, 1))
    B = sp.zeros(6, 24)
    for a, n in enumerate(N):
        dx, dy, dz = (sp.diff(n, v) for v in (X, Y, Z))
        B[0, 3 * a], B[1, 3 * a + 1], B[2, 3 * a + 2] = dx, dy, dz
        B[3, 3 * a + 1], B[3, 3 * a + 2] = dz, dy
        B[4, 3 * a], B[4, 3 * a + 2] = dz, dx
        B[5, 3 * a], B[5, 3 * a + 1] = dy, dx
    C = sp.zeros(6, 6)
    for i in range(3):
        for j in range(3):
            C[i, j] = lam
        C[i, i] = lam + 2 * mu
        C[i + 3, i + 3] = mu
    CB = C * B
    K = sp.zeros(24, 24)
    for i in range(24):
        for j in range(i, 24):
            K[i, j] = K[j, i] = _box_integral(sum(B[k, i] * CB[k, j] for k in range(6)), (1, 1, 1))
    return K


def rigid_modes(h=(1.0, 1.0, 1.0)):
    x = np.array(CORNERS, float) * h
    modes = []
    for d in range(3):
        t = np.zeros((8, 3))
        t[:, d] = 1
        modes.append(t.ravel())
    for a, b in ((0, 1), (1, 2), (0, 2)):
        r = np.zeros((8, 3))
        r[:, a] = -x[:, b]
        r[:, b] = x[:, a]
        modes.append(r.ravel())
    return np.array(modes).T


# -- element kernels -----------------------------------------------------------
def test_thermal_matches_exact():
    K = element_matrix_thermal(MaterialModel()).matrix
    ref = np.array(exact_thermal(), dtype=float)
    assert np.abs(K - ref).max() <= 1e-14
    assert np.allclose(np.diag(K), 1 / 3)
    assert (12 * K[0]).round(12).tolist() == [4, 0, 0, -1, 0, -1, -1, -1]


def test_thermal_matches_exact_on_stretched_box():
    h = (0.5, 0.25, 0.125)
    K = element_matrix_thermal(MaterialModel(), h).matrix
    ref = np.array(exact_thermal(tuple(sp.Rational(v) for v in ("1/2", "1/4", "1/8"))), dtype=float)
    assert np.abs(K - ref).max() <= 1e-13


def test_elastic_matches_exact():
    K = element_stiffness_elastic(MaterialModel()).matrix
    ref = np.array(exact_elastic(), dtype=float)
    assert abs(K[0, 0] - ref[0, 0]) <= 1e-14
    assert np.abs(K - ref).max() <= 1e-13


def test_element_invariants():
    ke = element_stiffness_elastic(MaterialModel())
    K = ke.matrix
    assert np.abs(K - K.T).max() <= 1e-12
    assert np.abs(K @ rigid_modes()).max() <= 1e-12
    w = np.linalg.eigvalsh(K)
    assert np.sum(np.abs(w) < 1e-10) == 6 and w.min() > -1e-12
    kt = element_matrix_thermal(MaterialModel()).matrix
    assert np.abs(kt @ np.ones(8)).max() <= 1e-14
    assert np.sum(np.abs(np.linalg.eigvalsh(kt)) < 1e-12) == 1


def test_material_linearity():
    k1 = element_stiffness_elastic(MaterialModel(E=1.0)).matrix
    k3 = element_stiffness_elastic(MaterialModel(E=3.0)).matrix
    assert np.array_equal(k3, k1 * 3.0) or np.abs(k3 - 3 * k1).max() <= 1e-15 * np.abs(k3).max()
    t1 = element_matrix_thermal(MaterialModel(kappa=1.0)).matrix
    t2 = element_matrix_thermal(MaterialModel(kappa=2.5)).matrix
    assert np.abs(t2 - 2.5 * t1).max() <= 1e-15


@pytest.mark.parametrize("physics", ["elasticity", "thermal"])
def test_reference_response_balances_loads(physics):
    k = element_kernel(physics, MaterialModel(), (0.25, 0.25, 0.25))
    assert np.abs(k.matrix @ k.reference - k.loads).max() <= 1e-14


def test_element_kernel_rejects_unknown():
    with pytest.raises(ValueError):
        element_kernel("acoustic", MaterialModel())


# -- operator ------------------------------------------------------------------
def _op(grid, physics, scale=None):
    k = element_kernel(physics, MaterialModel(), grid.spacing)
    h = build_hierarchy(grid, 1)
    return EbeOperator(h[1], k.dof, k.matrix, scale)


GRIDS = {
    "solid": lambda: VoxelGrid(np.ones((4, 4, 4))),
    "sparse": lambda: random_occupancy(4, 0.35, seed=2),
}


@pytest.mark.parametrize("physics", ["elasticity", "thermal"])
@pytest.mark.parametrize("name", sorted(GRIDS))
def test_apply_matches_dense(physics, name, rng):
    op = _op(GRIDS[name](), physics)
    K = assemble_dense(op)
    u = rng.standard_normal((op.num_nodes, op.dof, 4))
    ref = (K @ u.reshape(-1, 4)).reshape(u.shape)
    assert np.abs(op.apply(u) - ref).max() <= 1e-12
    assert np.abs(np.diag(K).reshape(-1, op.dof) - op.diagonal()).max() <= 1e-14
    assert np.abs(K - K.T).max() <= 1e-12
    w = np.linalg.eigvalsh(K)
    assert w.min() >= -1e-9 * np.abs(w).max()


@pytest.mark.parametrize("physics", ["elasticity", "thermal"])
def test_null_space_and_zero(physics):
    op = _op(VoxelGrid(np.ones((4, 4, 4))), physics)
    assert not np.any(op.apply(op.zeros(2)))
    c = np.ones((op.num_nodes, op.dof, 1)) * np.arange(1, op.dof + 1)[None, :, None]
    assert np.abs(op.apply(c)).max() <= 1e-10


def test_residual_linearity(rng):
    op = _op(random_occupancy(4, 0.5, seed=4), "elasticity")
    f = rng.standard_normal((op.num_nodes, 3, 2))
    u1, u2 = rng.standard_normal((2, op.num_nodes, 3, 2))
    assert np.array_equal(op.residual(op.zeros(2), f), f)
    lhs = op.residual(u1 + u2, f)
    rhs = f - op.apply(u1) - op.apply(u2)
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_single_element_diagonal():
    v = np.zeros((4, 4, 4))
    v[1, 2, 3] = 1
    op = _op(VoxelGrid(v), "elasticity")
    ke = element_stiffness_elastic(MaterialModel(), (0.25,) * 3).matrix
    assert np.allclose(op.diagonal().ravel(), np.diag(ke))


@given(st.integers(0, 2 ** 31 - 1))
def test_symmetry_random_vectors(seed):
    rng = np.random.default_rng(seed)
    g = random_occupancy(4, 0.5, seed)
    for physics in ("elasticity", "thermal"):
        op = _op(g, physics, scale=rng.uniform(0.01, 1.0, g.active.sum()))
        u, v = rng.standard_normal((2, op.num_nodes, op.dof, 1))
        a, b = np.vdot(op.apply(u), v), np.vdot(u, op.apply(v))
        assert abs(a - b) <= 1e-10 * np.linalg.norm(u) * np.linalg.norm(v)


def test_scale_linearity(rng):
    g = random_occupancy(4, 0.4, seed=8)
    s1, s2 = rng.uniform(0.1, 1.0, (2, int(g.active.sum())))
    u = rng.standard_normal((len(build_hierarchy(g, 1)[1].nodes), 3, 2))
    lhs = _op(g, "elasticity", s1 + s2).apply(u)
    rhs = _op(g, "elasticity", s1).apply(u) + _op(g, "elasticity", s2).apply(u)
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_apply_color_matches_rows(rng):
    op = _op(random_occupancy(4, 0.6, seed=3), "elasticity")
    u = rng.standard_normal((op.num_nodes, 3, 2))
    full = op.apply(u)
    seen = []
    for c in range(8):
        nodes = op.color_nodes(c)
        seen.extend(nodes.tolist())
        assert np.abs(op.apply_color(u, c) - full[nodes]).max() <= 1e-13
        x = op.topo.nodes[nodes] % 2
        assert np.all(x[:, 0] + 2 * x[:, 1] + 4 * x[:, 2] == c)
    assert sorted(seen) == list(range(op.num_nodes))


def test_operator_errors(rng):
    op = _op(VoxelGrid(np.ones((4, 4, 4))), "elasticity")
    with pytest.raises(ValueError):
        op.apply(np.zeros((op.num_nodes + 1, 3, 1)))
    with pytest.raises(ValueError):
        _op(VoxelGrid(np.ones((2, 2, 2))), "thermal", scale=np.zeros(8))
    with pytest.raises(ValueError):
        assemble_dense(_op(VoxelGrid(np.ones((12, 12, 12))), "elasticity"))


# -- Galerkin coarse operators -------------------------------------------------
def _dense_prolongation(stencil, dof):
    return np.kron(stencil.dense(), np.eye(dof))


@pytest.mark.parametrize("physics", ["elasticity", "thermal"])
@pytest.mark.parametrize("grid", [lambda: VoxelGrid(np.ones((8, 8, 8))),
                                  lambda: random_occupancy(8, 0.3, seed=11)])
def test_galerkin_equals_triple_product(physics, grid, rng):
    g = grid()
    k = element_kernel(physics, MaterialModel(), g.spacing)
    h = build_hierarchy(g, 2)
    s = rng.uniform(0.2, 1.0, h[1].num_elements)
    ops = build_level_ops(h, k, s)
    P = _dense_prolongation(build_stencil(h, 1), k.dof)
    Kf = assemble_dense(ops.op(1), cap=5000)
    Kc_ref = P.T @ Kf @ P
    Kc = assemble_dense(ops.op(2))
    assert np.abs(Kc - Kc_ref).max() <= 1e-10


def test_galerkin_three_levels(rng):
    g = random_occupancy(8, 0.5, seed=1)
    k = element_kernel("thermal", MaterialModel(), g.spacing)
    h = build_hierarchy(g, 3)
    ops = build_level_ops(h, k)
    P1 = _dense_prolongation(build_stencil(h, 1), 1)
    P2 = _dense_prolongation(build_stencil(h, 2), 1)
    ref = P2.T @ P1.T @ assemble_dense(ops.op(1)) @ P1 @ P2
    assert np.abs(assemble_dense(ops.op(3)) - ref).max() <= 1e-10


def test_coarse_kernel_null_space_and_single_child():
    g = VoxelGrid(np.ones((4, 4, 4)))
    k = element_kernel("elasticity", MaterialModel(), g.spacing)
    h = build_hierarchy(g, 2)
    op = EbeOperator(h[1], 3, k.matrix)
    kc = galerkin_coarse_kernel(op, (0, 0, 0), h[2])
    assert np.abs(kc - kc.T).max() <= 1e-14
    t = np.tile([1.0, 0.0, 0.0], 8)
    assert np.abs(kc @ t).max() <= 1e-12

    v = np.zeros((4, 4, 4))
    v[1, 0, 1] = 1  # child offset (1, 0, 1) of coarse element (0, 0, 0)
    g1 = VoxelGrid(v)
    h1 = build_hierarchy(g1, 2)
    op1 = EbeOperator(h1[1], 3, k.matrix)
    kc1 = galerkin_coarse_kernel(op1, (0, 0, 0), h1[2])
    P = local_prolongation(3)
    patch = [i + 3 * j + 9 * kk for kk in (1, 2) for j in (0, 1) for i in (1, 2)]
    lift = np.zeros((27 * 3, 24))
    for a, p in enumerate(patch):
        lift[3 * p:3 * p + 3, 3 * a:3 * a + 3] = np.eye(3)
    Kpatch = lift @ k.matrix @ lift.T
    assert np.abs(kc1 - P.T @ Kpatch @ P).max() <= 1e-14
    with pytest.raises(ValueError):
        galerkin_coarse_kernel(op1, (1, 1, 1), h1[2])
