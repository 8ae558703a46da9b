import math

import numpy as np
import pytest

from homoglab.discrete import (
    Grid,
    GridFunction,
    KrylovError,
    ResolutionError,
    assemble,
    energy_product,
    export_csv,
    export_hgf1,
    gradient,
    import_hgf1,
    krylov_solve,
    l2_avg_ball,
    lp_norm,
    mean,
)
from homoglab.field import Mode, TensorField, isotropic_field


def identity_field(d):
    return isotropic_field(d, 1.0)


def full_tensor_field(d, symmetric, seed=0):
    """Random full-tensor trig field (small amplitudes keep it elliptic)."""
    rng = np.random.default_rng(seed)
    mean_t = np.eye(d).reshape(d, d, 1, 1) * 2.0
    off = 0.2 * rng.normal(size=(d, d, 1, 1))
    mean_t = mean_t + (off + off.transpose(1, 0, 3, 2)) / 2 if symmetric else mean_t + off
    modes = []
    for _ in range(2):
        freq = rng.integers(-2, 3, size=d).astype(float)
        if not freq.any():
            freq[0] = 1.0
        ca = 0.15 * rng.normal(size=(d, d, 1, 1))
        sa = 0.15 * rng.normal(size=(d, d, 1, 1))
        if symmetric:
            ca = (ca + ca.transpose(1, 0, 3, 2)) / 2
            sa = (sa + sa.transpose(1, 0, 3, 2)) / 2
        modes.append(Mode(freq, ca, sa))
    return TensorField(d, 1, mean_t, tuple(modes), 0.5)


def periodic_grid(d, n, side=1.0):
    return Grid(d, np.zeros(d), np.full(d, side), np.full(d, n), np.ones(d, bool))


def box_grid(d, n, side=1.0):
    return Grid(d, np.zeros(d), np.full(d, side), np.full(d, n), np.zeros(d, bool))


# -- assembly ---------------------------------------------------------------

def test_symbol_relation_1d():
    # Fourier symbol of the three-point stencil: 4/h^2 sin^2(pi h / L)
    g = periodic_grid(1, 64)
    op = assemble(identity_field(1), g, 1.0, 0.0, "periodic")
    u = GridFunction.from_callable(g, lambda p: np.cos(2 * np.pi * p[:, 0]))
    h = g.h[0]
    sym = 4 / h ** 2 * math.sin(math.pi * h) ** 2
    res = op.apply(u)
    assert np.abs(res.values[:, 0] - sym * u.values[:, 0]).max() <= 1e-12 * sym


def test_symbol_relation_2d_separable():
    g = periodic_grid(2, 32)
    op = assemble(identity_field(2), g, 1.0, 0.0, "periodic")
    u = GridFunction.from_callable(g, lambda p: np.cos(2 * np.pi * p[:, 0]))
    h = g.h[0]
    sym = 4 / h ** 2 * math.sin(math.pi * h) ** 2
    res = op.apply(u)
    assert np.abs(res.values[:, 0] - sym * u.values[:, 0]).max() <= 1e-12 * sym


def test_dirichlet_quadratic_exact():
    # three-point second difference is exact on quadratics
    g = box_grid(2, 32)
    op = assemble(identity_field(2), g, 1.0, 0.0, "dirichlet")
    u = GridFunction.from_callable(g, lambda p: p[:, 0] * (1 - p[:, 0]))
    res = op.apply(u)
    interior = res.values[op.unknown_nodes, 0]
    assert np.abs(interior - 2.0).max() <= 1e-10


def test_row_sums_vanish():
    f = full_tensor_field(2, symmetric=False, seed=4)
    g = periodic_grid(2, 32, side=2 * np.pi)
    op = assemble(f, g, 1.0, 0.0, "periodic")
    assert np.abs(op.row_sums()).max() <= 1e-12 * op.row_abs_sums().max()


def test_symmetry_for_pointwise_symmetric_tensor():
    f = full_tensor_field(2, symmetric=True, seed=7)
    g = periodic_grid(2, 32, side=2 * np.pi)
    op = assemble(f, g, 1.0, 0.1, "periodic")
    assert op.symmetric
    n = op.n_unknowns
    dense = np.zeros((n, n))
    for i in range(n):
        dense[i, op.indices[op.indptr[i]:op.indptr[i + 1]]] = (
            op.data[op.indptr[i]:op.indptr[i + 1]]
        )
    assert np.abs(dense - dense.T).max() == 0.0


def test_integration_by_parts():
    # CSR action against the independently recomputed quadrature energy
    f = full_tensor_field(2, symmetric=False, seed=11)
    g = periodic_grid(2, 32, side=2 * np.pi)
    zo = 0.37
    op = assemble(f, g, 1.0, zo, "periodic")
    rng = np.random.default_rng(1)
    vol = float(np.prod(g.side))
    for _ in range(5):
        u = GridFunction(g, 1, rng.normal(size=(g.n_nodes, 1)))
        v = GridFunction(g, 1, rng.normal(size=(g.n_nodes, 1)))
        lhs = float(v.values.reshape(-1) @ (op.apply(u).values.reshape(-1) * op.weights)) / vol
        rhs = energy_product(f, g, 1.0, u, v, zo) / vol
        assert lhs == pytest.approx(rhs, rel=1e-10)


def test_resolution_rule():
    f = isotropic_field(1, 2.0, [(np.array([1.0]), 0.0, 1.0)])
    g = periodic_grid(1, 8, side=2 * np.pi)  # h = pi/4 vs eps*2pi/8 at eps=0.1
    with pytest.raises(ResolutionError):
        assemble(f, g, 0.1, 0.0, "periodic")
    assemble(f, g, 0.1, 0.0, "periodic", override_resolution=True)


def test_bc_grid_mismatch():
    f = identity_field(2)
    with pytest.raises(ValueError):
        assemble(f, periodic_grid(2, 8), 1.0, 0.0, "dirichlet")
    with pytest.raises(ValueError):
        assemble(f, box_grid(2, 8), 1.0, 0.0, "periodic")


# -- krylov -----------------------------------------------------------------

def test_krylov_recovers_known_vector():
    g = periodic_grid(2, 16)
    op = assemble(identity_field(2), g, 1.0, 1.0, "periodic")
    rng = np.random.default_rng(2)
    want = rng.normal(size=op.n_unknowns)
    rhs = op.matvec(want)
    got = krylov_solve(op, rhs, tol=1e-12)
    assert np.abs(got.values.reshape(-1) - want).max() < 1e-9


def test_krylov_1d_poisson_symbol():
    g = periodic_grid(1, 128)
    op = assemble(identity_field(1), g, 1.0, 0.0, "periodic")
    u = GridFunction.from_callable(g, lambda p: np.cos(2 * np.pi * p[:, 0]))
    h = g.h[0]
    sym = 4 / h ** 2 * math.sin(math.pi * h) ** 2
    rhs = op.weights * u.values.reshape(-1)
    got = krylov_solve(op, rhs, tol=1e-12)
    assert np.abs(got.values[:, 0] - u.values[:, 0] / sym).max() < 1e-12


def test_krylov_zero_rhs():
    g = periodic_grid(1, 16)
    op = assemble(identity_field(1), g, 1.0, 0.0, "periodic")
    out = krylov_solve(op, np.zeros(op.n_unknowns))
    assert (out.values == 0).all()


def test_krylov_nonconvergence_raises():
    g = periodic_grid(2, 16)
    op = assemble(identity_field(2), g, 1.0, 0.0, "periodic")
    rng = np.random.default_rng(3)
    rhs = rng.normal(size=op.n_unknowns)
    rhs -= rhs.mean()
    with pytest.raises(KrylovError) as exc:
        krylov_solve(op, rhs, tol=1e-12, maxiter=3)
    assert exc.value.residual > 0


def test_krylov_bicgstab_branch():
    f = full_tensor_field(2, symmetric=False, seed=13)
    g = periodic_grid(2, 32, side=2 * np.pi)
    op = assemble(f, g, 1.0, 0.5, "periodic")
    assert not op.symmetric
    rng = np.random.default_rng(4)
    want = rng.normal(size=op.n_unknowns)
    rhs = op.matvec(want)
    got = krylov_solve(op, rhs, tol=1e-11)
    assert np.abs(got.values.reshape(-1) - want).max() < 1e-7


def test_krylov_deterministic():
    g = periodic_grid(2, 16)
    op = assemble(identity_field(2), g, 1.0, 1.0, "periodic")
    rng = np.random.default_rng(5)
    rhs = rng.normal(size=op.n_unknowns)
    a = krylov_solve(op, rhs, tol=1e-10).values
    b = krylov_solve(op, rhs, tol=1e-10).values
    assert (a == b).all()


# -- means, norms, gradient ---------------------------------------------------

def test_mean_and_sup_of_constant():
    g = box_grid(2, 8)
    u = GridFunction(g, 1, np.full((g.n_nodes, 1), -2.5))
    assert mean(u)[0] == pytest.approx(-2.5)
    assert lp_norm(u, np.inf) == pytest.approx(2.5)


def test_mean_of_sine_cancels_on_periodic_grid():
    g = periodic_grid(2, 32)
    u = GridFunction.from_callable(g, lambda p: np.sin(2 * np.pi * p[:, 0]))
    assert abs(mean(u)[0]) <= 1e-14


def test_gradient_exact_on_quadratic_interior():
    g = box_grid(1, 32)
    u = GridFunction.from_callable(g, lambda p: p[:, 0] ** 2)
    grad = gradient(u)
    x = g.points()[:, 0]
    interior = slice(1, -1)
    assert np.abs(grad.values[interior, 0] - 2 * x[interior]).max() < 1e-12


def test_ball_average_requires_containment():
    g = box_grid(2, 16)
    u = GridFunction.zeros(g, 1)
    with pytest.raises(ValueError):
        l2_avg_ball(u, [0.9, 0.5], 0.3)
    assert l2_avg_ball(u, [0.5, 0.5], 0.3) == 0.0


def test_grid_refinement_second_order():
    # manufactured Dirichlet Poisson solution, L2 error ratio ~ 4 per halving
    f = identity_field(2)

    def exact(p):
        return np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])

    errs = []
    for n in (16, 32, 64):
        g = box_grid(2, n)
        op = assemble(f, g, 1.0, 0.0, "dirichlet")
        pts = g.points()
        rhs_fun = 2 * np.pi ** 2 * exact(pts)
        dofs = op.unknown_nodes
        rhs = (g.node_volumes() * rhs_fun)[dofs]
        u = krylov_solve(op, rhs, tol=1e-12)
        diff = GridFunction(g, 1, u.values[:, 0] - exact(pts))
        errs.append(lp_norm(diff, 2))
    for e0, e1 in zip(errs, errs[1:]):
        assert e0 / e1 == pytest.approx(4.0, rel=0.2)


def test_grid_requires_min_cells():
    with pytest.raises(ValueError):
        Grid(1, [0.0], [1.0], [3], [True])


# -- io -----------------------------------------------------------------------

def test_hgf1_round_trip(tmp_path):
    g = box_grid(2, 8)
    rng = np.random.default_rng(6)
    u = GridFunction(g, 3, rng.normal(size=(g.n_nodes, 3)))
    path = tmp_path / "u.hgf1"
    export_hgf1(u, path)
    v = import_hgf1(path, g)
    assert (u.values == v.values).all()
    raw = path.read_bytes()
    assert raw[:4] == b"HGF1"


def test_hgf1_grid_mismatch(tmp_path):
    g = box_grid(2, 8)
    u = GridFunction.zeros(g, 1)
    path = tmp_path / "u.hgf1"
    export_hgf1(u, path)
    with pytest.raises(ValueError):
        import_hgf1(path, box_grid(2, 16))


def test_csv_export_schema(tmp_path):
    g = box_grid(1, 4)
    u = GridFunction.from_callable(g, lambda p: p[:, 0])
    path = tmp_path / "u.csv"
    export_csv(u, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k0,x1,v0"
    assert len(lines) == g.n_nodes + 1
