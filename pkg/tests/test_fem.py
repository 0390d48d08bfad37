import numpy as np
import pytest
import scipy.sparse as sp

from mrlod import fem
from mrlod.mesh import BoundaryLayout, ElementId, build_hierarchy


@pytest.fixture(scope="module")
def setup():
    hier = build_hierarchy(0.5, 2, 2 ** -4)
    space = fem.FineSpace(hier)
    ops = fem.assemble_operators(space, 1.0)
    return hier, space, ops


def test_q1_element_matrices():
    # Single unit-square element: exact analytic entries.
    hier = build_hierarchy(1.0, 1, 1.0, boundary=BoundaryLayout(
        "neumann", "neumann", "neumann", "neumann"))
    space = fem.FineSpace(hier)
    ops = fem.assemble_operators(space, 0.0)
    K = ops.K1.toarray()
    assert np.allclose(np.diag(K), 2 / 3)
    assert np.isclose(K[0, 1], -1 / 6) and np.isclose(K[0, 2], -1 / 6)
    assert np.isclose(K[0, 3], -1 / 3) and np.isclose(K[1, 2], -1 / 3)
    M = ops.M.toarray()
    assert np.allclose(np.diag(M), 1 / 9)
    assert np.isclose(M[0, 1], 1 / 18) and np.isclose(M[0, 3], 1 / 36)


def test_kappa_scaling(setup):
    _, space, ops1 = setup
    ops2 = fem.assemble_operators(space, 2.0)
    diff = (ops2.Aop - ops1.Aop) - (-3.0 * ops1.M - 1j * ops1.B)
    assert abs(diff).max() < 1e-13


def test_hermitian_parts(setup):
    _, _, ops = setup
    for mat in (ops.K, ops.K1, ops.M, ops.B):
        assert (mat != mat.T).nnz == 0  # exact symmetric storage


def test_garding_identity(setup):
    _, space, ops = setup
    rng = np.random.default_rng(5)
    for _ in range(5):
        v = rng.standard_normal(space.n_free) + 1j * rng.standard_normal(space.n_free)
        lhs = np.imag(np.vdot(v, ops.Aop @ v))
        rhs = -ops.kappa * np.real(np.vdot(v, ops.B @ v))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))


def test_continuity_constant(setup):
    _, space, ops = setup
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        v = rng.standard_normal(space.n_free) + 1j * rng.standard_normal(space.n_free)
        w = rng.standard_normal(space.n_free) + 1j * rng.standard_normal(space.n_free)
        val = abs(np.vdot(w, ops.Aop @ v))
        worst = max(worst, val / (fem.v_norm(v, ops) * fem.v_norm(w, ops)))
    assert worst <= 2.0


def test_restricted_forms_sum_to_operator(setup):
    hier, space, ops = setup
    for level in (1, 2):
        total = sp.csr_matrix(ops.Aop.shape, dtype=complex)
        for ix, iy in hier.active_elements(level):
            total = total + fem.restricted_form(ops, ElementId(level, int(ix), int(iy)))
        assert abs(total - ops.Aop).max() < 1e-13


def test_restricted_form_interior_no_robin(setup):
    hier, space, ops = setup
    aT = fem.restricted_form(ops, ElementId(2, 1, 1))
    # Interior element: no boundary edge, hence no imaginary part.
    assert aT.nnz > 0
    assert abs(aT.imag).max() < 1e-15


def test_restricted_form_robin_edge_matches_global(setup):
    hier, space, ops = setup
    # Sum of the Robin parts over all elements recovers the global B.
    total = sp.csr_matrix(ops.B.shape, dtype=complex)
    for ix, iy in hier.active_elements(1):
        total = total + fem.restricted_form(ops, ElementId(1, int(ix), int(iy)))
    assert abs(-total.imag / ops.kappa - ops.B).max() < 1e-13


def test_load_vector_basics(setup):
    _, space, _ = setup

    zero = fem.load_vector(space, fem.CellSamplesSource(
        np.zeros((space.nf, space.nf))))
    assert np.all(zero == 0)

    one = fem.load_vector(space, fem.CellSamplesSource(
        np.ones((space.nf, space.nf))))
    assert np.isclose(one.real.sum(), 1.0)  # partition of unity, all-Robin


def test_bump_support_and_radius_validation():
    hier = build_hierarchy(0.5, 1, 2 ** -5)
    space = fem.FineSpace(hier)
    src = fem.BumpSource(0.125, 0.5, 0.5, 10000.0)
    load = fem.load_vector(space, src)
    x = space.node_x[space.free]
    y = space.node_y[space.free]
    far = np.hypot(x - 0.5, y - 0.5) > 0.125 + hier.h
    assert np.all(load[far] == 0)
    assert abs(load).max() > 0
    with pytest.raises(fem.FemError):
        fem.BumpSource(0.0, 0.5, 0.5)


def test_v_norm_values():
    hier = build_hierarchy(0.5, 1, 2 ** -6)
    space = fem.FineSpace(hier)
    ops = fem.assemble_operators(space, 3.0)
    one = np.ones(space.n_free, dtype=complex)
    assert abs(fem.v_norm(one, ops) - 3.0) < 1e-12
    assert fem.v_norm(np.zeros(space.n_free), ops) == 0.0
    # H1 seminorm of sin(pi x): pi/sqrt(2), via the kappa=0 operator
    ops0 = fem.assemble_operators(space, 0.0)
    v = np.sin(np.pi * space.node_x[space.free]).astype(complex)
    assert abs(fem.v_norm(v, ops0) - np.pi / np.sqrt(2)) < 1e-2


def test_reference_solve_consistency(setup):
    _, space, ops = setup
    rng = np.random.default_rng(7)
    k = rng.integers(space.n_free)
    e = np.zeros(space.n_free, dtype=complex)
    e[k] = 1.0
    x = fem.reference_solve(ops, ops.Aop @ e)
    assert np.linalg.norm(x - e) < 1e-10


def test_reference_solve_garding(setup):
    _, space, ops = setup
    f = fem.load_vector(space, fem.SinCosSource())
    x = fem.reference_solve(ops, f)
    lhs = np.imag(np.vdot(x, ops.Aop @ x))
    rhs = -ops.kappa * np.real(np.vdot(x, ops.B @ x))
    assert abs(lhs - rhs) < 1e-9


def test_coefficient_bounds():
    hier = build_hierarchy(0.5, 1, 2 ** -4)
    space = fem.FineSpace(hier)
    with pytest.raises(fem.FemError):
        fem.CoefficientField(np.zeros((space.nf, space.nf)), space)
    with pytest.raises(fem.FemError):
        fem.CoefficientField(-np.ones((space.nf, space.nf)), space)


def test_helmholtz_requires_robin():
    hier = build_hierarchy(0.5, 1, 2 ** -4, boundary=BoundaryLayout.all_dirichlet())
    space = fem.FineSpace(hier)
    with pytest.raises(fem.FemError):
        fem.assemble_operators(space, 1.0)
    fem.assemble_operators(space, 0.0)  # elliptic mode is fine


def test_matrix_market_export(tmp_path, setup):
    _, _, ops = setup
    path = tmp_path / "aop.mtx"
    fem.export_matrix_market(path, ops.Aop)
    header = path.read_text().splitlines()[0]
    assert header == "%%MatrixMarket matrix coordinate complex general"
