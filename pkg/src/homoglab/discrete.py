"""Uniform-grid discretization of div(A grad .) with zero-order term.

The scheme is conservative flux-form finite differences: fluxes across cell
faces use the coefficient at the face midpoint and exact differences, so row
sums of the divergence block vanish to roundoff and the weak-form matrix is
exactly symmetric whenever the tensor is pointwise symmetric (off-diagonal
tensor couplings are quadratured at cell centers for that reason).

The matrix stored is the weak form B(u, v) plus zero_order * (u, v); the
pointwise operator action divides by the dual-cell volumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .field import TensorField

__all__ = [
    "Grid",
    "GridFunction",
    "DiscreteOperator",
    "ResolutionError",
    "KrylovError",
    "assemble",
    "krylov_solve",
    "mean",
    "lp_norm",
    "l2_avg_ball",
    "gradient",
    "energy_product",
    "affine_stiffness_rhs",
    "export_hgf1",
    "import_hgf1",
    "export_csv",
]


class ResolutionError(ValueError):
    """Grid too coarse for the requested oscillation scale."""


class KrylovError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    """Axis-aligned box with n cells per axis.

    Non-periodic axes carry n+1 nodes (both endpoints), periodic axes n
    (endpoint identified); spacing is side/n either way.
    """

    d: int
    origin: np.ndarray
    side: np.ndarray
    n: np.ndarray
    periodic: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, float).reshape(self.d))
        object.__setattr__(self, "side", np.asarray(self.side, float).reshape(self.d))
        object.__setattr__(self, "n", np.asarray(self.n, np.int64).reshape(self.d))
        object.__setattr__(self, "periodic", np.asarray(self.periodic, bool).reshape(self.d))
        if (self.n < 4).any():
            raise ValueError("need at least 4 cells per axis")
        if (self.side <= 0).any():
            raise ValueError("box sides must be positive")

    @property
    def h(self) -> np.ndarray:
        return self.side / self.n

    @property
    def nodes_per_axis(self) -> np.ndarray:
        return self.n + np.where(self.periodic, 0, 1)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.nodes_per_axis))

    def axis_coords(self, ax: int) -> np.ndarray:
        return self.origin[ax] + self.h[ax] * np.arange(self.nodes_per_axis[ax])

    def points(self) -> np.ndarray:
        """All node coordinates, (n_nodes, d), node-major C order."""
        axes = [self.axis_coords(ax) for ax in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def trapezoid_weights(self, ax: int) -> np.ndarray:
        """1D quadrature weights along one axis (dual-cell lengths)."""
        h = self.h[ax]
        if self.periodic[ax]:
            return np.full(self.n[ax], h)
        w = np.full(self.n[ax] + 1, h)
        w[0] = w[-1] = h / 2
        return w

    def node_volumes(self) -> np.ndarray:
        """Dual-cell volume of every node, (n_nodes,)."""
        vols = self.trapezoid_weights(0)
        for ax in range(1, self.d):
            vols = np.multiply.outer(vols, self.trapezoid_weights(ax))
        return vols.reshape(-1)

    def multi_indices(self) -> np.ndarray:
        """(n_nodes, d) integer node coordinates."""
        idx = np.unravel_index(np.arange(self.n_nodes), tuple(self.nodes_per_axis))
        return np.stack(idx, axis=1)

    def ball_mask(self, center, r: float) -> np.ndarray:
        pts = self.points()
        return np.linalg.norm(pts - np.asarray(center, float)[None, :], axis=1) <= r

    def require_ball_inside(self, center, r: float, margin: float = 0.0):
        center = np.asarray(center, float)
        lo = self.origin + r + margin
        hi = self.origin + self.side - r - margin
        if (center < lo - 1e-12).any() or (center > hi + 1e-12).any():
            raise ValueError("ball leaves the grid box")

    def same_layout(self, other: "Grid") -> bool:
        return (
            self.d == other.d
            and np.array_equal(self.n, other.n)
            and np.allclose(self.origin, other.origin)
            and np.allclose(self.side, other.side)
            and np.array_equal(self.periodic, other.periodic)
        )


@dataclass
class GridFunction:
    grid: Grid
    components: int
    values: np.ndarray  # (n_nodes, components)

    def __post_init__(self):
        self.values = np.asarray(self.values, float).reshape(
            self.grid.n_nodes, self.components
        )
        if not np.isfinite(self.values).all():
            raise ValueError("grid function values must be finite")

    @classmethod
    def zeros(cls, grid: Grid, components: int = 1) -> "GridFunction":
        return cls(grid, components, np.zeros((grid.n_nodes, components)))

    @classmethod
    def from_callable(cls, grid: Grid, fn, components: int = 1) -> "GridFunction":
        vals = np.asarray(fn(grid.points()), float).reshape(grid.n_nodes, components)
        return cls(grid, components, vals)

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.components, self.values.copy())

    def __add__(self, other):
        return GridFunction(self.grid, self.components, self.values + other.values)

    def __sub__(self, other):
        return GridFunction(self.grid, self.components, self.values - other.values)


# ---------------------------------------------------------------------------
# quadrature geometry shared by assembly, rhs construction and energies
# ---------------------------------------------------------------------------

def _face_geometry(grid: Grid, ax: int):
    """Faces normal to axis ``ax``: (lower ids, upper ids, midpoints, dual area).

    One face per (cell along ax) x (node on the other axes); the dual area is
    the product of transverse trapezoid weights, so summing vol = h_ax * area
    over faces reproduces the box volume.
    """
    ranges = []
    for j in range(grid.d):
        if j == ax:
            ranges.append(np.arange(grid.n[j]))
        else:
            ranges.append(np.arange(grid.nodes_per_axis[j]))
    mesh = np.meshgrid(*ranges, indexing="ij")
    idx = np.stack([m.reshape(-1) for m in mesh], axis=1)  # (F, d)
    upper_idx = idx.copy()
    upper_idx[:, ax] += 1
    if grid.periodic[ax]:
        upper_idx[:, ax] %= grid.n[ax]
    shape = tuple(grid.nodes_per_axis)
    lower = np.ravel_multi_index(tuple(idx.T), shape)
    upper = np.ravel_multi_index(tuple(upper_idx.T), shape)
    mids = grid.origin[None, :] + idx * grid.h[None, :]
    mids[:, ax] += grid.h[ax] / 2
    area = np.ones(idx.shape[0])
    for j in range(grid.d):
        if j != ax:
            area *= grid.trapezoid_weights(j)[idx[:, j]]
    return lower, upper, mids, area


def _cell_geometry(grid: Grid):
    """Cells: (corner ids (C, 2^d), centers (C, d), volume)."""
    ranges = [np.arange(grid.n[j]) for j in range(grid.d)]
    mesh = np.meshgrid(*ranges, indexing="ij")
    idx = np.stack([m.reshape(-1) for m in mesh], axis=1)
    shape = tuple(grid.nodes_per_axis)
    n_corner = 1 << grid.d
    corners = np.empty((idx.shape[0], n_corner), dtype=np.int64)
    for c in range(n_corner):
        off = idx.copy()
        for j in range(grid.d):
            if (c >> j) & 1:
                off[:, j] += 1
                if grid.periodic[j]:
                    off[:, j] %= grid.n[j]
        corners[:, c] = np.ravel_multi_index(tuple(off.T), shape)
    centers = grid.origin[None, :] + (idx + 0.5) * grid.h[None, :]
    vol = float(np.prod(grid.h))
    return corners, centers, vol


def _corner_diff_weights(d: int, ax: int) -> np.ndarray:
    """Signs (+-1 / 2^(d-1)) of the cell-averaged difference along ``ax``."""
    w = np.empty(1 << d)
    for c in range(1 << d):
        w[c] = (1.0 if (c >> ax) & 1 else -1.0) / (1 << (d - 1))
    return w


def _has_cross_terms(field: TensorField) -> bool:
    def off(t):
        mask = ~np.eye(field.d, dtype=bool)
        return np.abs(t[mask]).max() if field.d > 1 else 0.0

    vals = [off(field.mean)] + [
        max(off(m.cos_amp), off(m.sin_amp)) for m in field.modes
    ]
    return max(vals, default=0.0) > 0.0


def check_resolution(field: TensorField, grid: Grid, epsilon_scale: float):
    wmax = field.max_frequency()
    if wmax == 0.0:
        return
    osc = 2.0 * np.pi / wmax
    if grid.h.max() > epsilon_scale * osc / 8.0:
        raise ResolutionError(
            f"h_max={grid.h.max():.3g} under-resolves oscillation scale "
            f"{epsilon_scale * osc:.3g} (need h <= scale/8); pass override to force"
        )


# ---------------------------------------------------------------------------
# operator assembly
# ---------------------------------------------------------------------------

@dataclass
class DiscreteOperator:
    """Weak-form matrix in CSR plus the metadata needed to use it."""

    grid: Grid
    m: int
    bc: str
    zero_order: float
    data: np.ndarray
    indices: np.ndarray
    indptr: np.ndarray
    weights: np.ndarray          # dual volume per unknown dof
    symmetric: bool
    unknown_nodes: np.ndarray    # node ids of unknowns
    boundary_nodes: np.ndarray   # node ids eliminated (dirichlet) or empty
    bnd_data: np.ndarray | None = None   # coupling CSR (dirichlet only)
    bnd_indices: np.ndarray | None = None
    bnd_indptr: np.ndarray | None = None

    @property
    def n_unknowns(self) -> int:
        return self.indptr.shape[0] - 1

    @property
    def singular(self) -> bool:
        return self.bc in ("periodic", "neumann") and self.zero_order == 0.0

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return kernels.csr_matvec(self.data, self.indices, self.indptr, x)

    def boundary_matvec(self, xb: np.ndarray) -> np.ndarray:
        if self.bnd_data is None:
            return np.zeros(self.n_unknowns)
        return kernels.csr_matvec(self.bnd_data, self.bnd_indices, self.bnd_indptr, xb)

    def _entry_rows(self) -> np.ndarray:
        return np.repeat(
            np.arange(self.n_unknowns), np.diff(self.indptr).astype(np.int64)
        )

    def diagonal(self) -> np.ndarray:
        rows = self._entry_rows()
        diag = np.zeros(self.n_unknowns)
        on_diag = self.indices == rows
        diag[rows[on_diag]] = self.data[on_diag]
        return diag

    def row_sums(self) -> np.ndarray:
        return np.bincount(self._entry_rows(), weights=self.data, minlength=self.n_unknowns)

    def row_abs_sums(self) -> np.ndarray:
        return np.bincount(
            self._entry_rows(), weights=np.abs(self.data), minlength=self.n_unknowns
        )

    def apply(self, u: GridFunction) -> GridFunction:
        """Pointwise operator action (weak residual / dual volumes).

        For dirichlet operators the returned function is zero at eliminated
        boundary nodes.
        """
        m = self.m
        flat = u.values.reshape(-1)
        dofs = (self.unknown_nodes[:, None] * m + np.arange(m)[None, :]).reshape(-1)
        x = flat[dofs]
        r = self.matvec(x)
        if self.bc == "dirichlet":
            bdofs = (self.boundary_nodes[:, None] * m + np.arange(m)[None, :]).reshape(-1)
            r = r + self.boundary_matvec(flat[bdofs])
        out = np.zeros_like(flat)
        out[dofs] = r / self.weights
        return GridFunction(u.grid, m, out.reshape(u.grid.n_nodes, m))


def _coo_to_csr(rows, cols, vals, n_rows):
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if rows.size:
        new = np.empty(rows.size, dtype=bool)
        new[0] = True
        new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.nonzero(new)[0]
        vals = np.add.reduceat(vals, starts)
        rows, cols = rows[starts], cols[starts]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return vals.astype(np.float64), cols.astype(np.int64), indptr


def assemble(
    field: TensorField,
    grid: Grid,
    epsilon_scale: float,
    zero_order: float,
    bc: str,
    override_resolution: bool = False,
) -> DiscreteOperator:
    """Assemble the weak form of -div(A(x/eps) grad u) + zero_order * u.

    bc is one of periodic / dirichlet / neumann.  Dirichlet eliminates the
    boundary nodes and stores their coupling block for rhs assembly; neumann
    keeps all nodes (the prescribed conormal flux enters through the rhs).
    """
    if bc not in ("periodic", "dirichlet", "neumann"):
        raise ValueError(f"unknown bc {bc!r}")
    if epsilon_scale <= 0:
        raise ValueError("epsilon_scale must be positive")
    if bc == "periodic" and not grid.periodic.all():
        raise ValueError("periodic bc needs a fully periodic grid")
    if bc in ("dirichlet", "neumann") and grid.periodic.any():
        raise ValueError(f"{bc} bc needs a non-periodic grid")
    if not override_resolution:
        check_resolution(field, grid, epsilon_scale)

    m = field.m
    d = grid.d
    rows_l, cols_l, vals_l = [], [], []

    def add_block(r_nodes, c_nodes, coeff):
        # coeff: (F, m, m) entries a^{alpha beta}; dof = node * m + comp
        for a in range(m):
            for b in range(m):
                rows_l.append(r_nodes * m + a)
                cols_l.append(c_nodes * m + b)
                vals_l.append(coeff[:, a, b])

    for ax in range(d):
        lower, upper, mids, area = _face_geometry(grid, ax)
        a_face = field.evaluate_many(mids / epsilon_scale)[:, ax, ax, :, :]
        c = (area * grid.h[ax] / grid.h[ax] ** 2)[:, None, None] * a_face
        add_block(lower, lower, c)
        add_block(upper, upper, c)
        add_block(lower, upper, -c)
        add_block(upper, lower, -c)

    if d > 1 and _has_cross_terms(field):
        corners, centers, vol = _cell_geometry(grid)
        a_cell = field.evaluate_many(centers / epsilon_scale)
        for i in range(d):
            wi = _corner_diff_weights(d, i) / grid.h[i]
            for j in range(d):
                if i == j:
                    continue
                wj = _corner_diff_weights(d, j) / grid.h[j]
                aij = a_cell[:, i, j, :, :]
                for ci in range(corners.shape[1]):
                    if wi[ci] == 0.0:
                        continue
                    for cj in range(corners.shape[1]):
                        coeff = (vol * wi[ci] * wj[cj]) * aij
                        add_block(corners[:, ci], corners[:, cj], coeff)

    node_vol = grid.node_volumes()
    if zero_order != 0.0:
        all_nodes = np.arange(grid.n_nodes)
        eye = np.eye(m)[None, :, :] * (zero_order * node_vol)[:, None, None]
        add_block(all_nodes, all_nodes, eye)

    rows = np.concatenate(rows_l)
    cols = np.concatenate(cols_l)
    vals = np.concatenate(vals_l)

    if bc == "dirichlet":
        mi = grid.multi_indices()
        interior = np.ones(grid.n_nodes, dtype=bool)
        for j in range(d):
            interior &= (mi[:, j] > 0) & (mi[:, j] < grid.n[j])
        unknown_nodes = np.nonzero(interior)[0]
        boundary_nodes = np.nonzero(~interior)[0]
        node_to_unknown = -np.ones(grid.n_nodes, dtype=np.int64)
        node_to_unknown[unknown_nodes] = np.arange(unknown_nodes.size)
        node_to_bnd = -np.ones(grid.n_nodes, dtype=np.int64)
        node_to_bnd[boundary_nodes] = np.arange(boundary_nodes.size)

        r_node, r_comp = rows // m, rows % m
        c_node, c_comp = cols // m, cols % m
        keep = interior[r_node]
        r_node, r_comp = r_node[keep], r_comp[keep]
        c_node, c_comp = c_node[keep], c_comp[keep]
        vals = vals[keep]
        rr = node_to_unknown[r_node] * m + r_comp
        col_int = interior[c_node]
        data, indices, indptr = _coo_to_csr(
            rr[col_int],
            node_to_unknown[c_node[col_int]] * m + c_comp[col_int],
            vals[col_int],
            unknown_nodes.size * m,
        )
        bdata, bindices, bindptr = _coo_to_csr(
            rr[~col_int],
            node_to_bnd[c_node[~col_int]] * m + c_comp[~col_int],
            vals[~col_int],
            unknown_nodes.size * m,
        )
        weights = np.repeat(node_vol[unknown_nodes], m)
        return DiscreteOperator(
            grid, m, bc, zero_order, data, indices, indptr, weights,
            field.is_symmetric(), unknown_nodes, boundary_nodes,
            bdata, bindices, bindptr,
        )

    data, indices, indptr = _coo_to_csr(rows, cols, vals, grid.n_nodes * m)
    weights = np.repeat(node_vol, m)
    return DiscreteOperator(
        grid, m, bc, zero_order, data, indices, indptr, weights,
        field.is_symmetric(), np.arange(grid.n_nodes), np.empty(0, dtype=np.int64),
    )


def affine_stiffness_rhs(
    field: TensorField, grid: Grid, epsilon_scale: float, grad: np.ndarray
) -> np.ndarray:
    """Weak vector of -div(A(x/eps) G) for a constant gradient G (m, d).

    This is the right-hand side produced by testing div(A grad P) against the
    nodal basis when P is the linear function with gradient G; it avoids ever
    evaluating the (non-periodic) linear function itself.
    """
    m, d = field.m, grid.d
    grad = np.asarray(grad, float).reshape(m, d)
    rhs = np.zeros(grid.n_nodes * m)
    for ax in range(d):
        lower, upper, mids, area = _face_geometry(grid, ax)
        a_face = field.evaluate_many(mids / epsilon_scale)  # (F, d, d, m, m)
        # flux component ax of A G sampled on ax-faces: only the k=ax column
        flux = np.einsum("fab,b->fa", a_face[:, ax, ax, :, :], grad[:, ax])
        contrib = (area * grid.h[ax] / grid.h[ax])[:, None] * flux
        for a in range(m):
            np.subtract.at(rhs, upper * m + a, contrib[:, a])
            np.add.at(rhs, lower * m + a, contrib[:, a])
    if d > 1 and _has_cross_terms(field):
        corners, centers, vol = _cell_geometry(grid)
        a_cell = field.evaluate_many(centers / epsilon_scale)
        for i in range(d):
            wi = _corner_diff_weights(d, i) / grid.h[i]
            for k in range(d):
                if i == k:
                    continue
                flux = np.einsum("fab,b->fa", a_cell[:, i, k, :, :], grad[:, k])
                for ci in range(corners.shape[1]):
                    contrib = (vol * wi[ci]) * flux
                    for a in range(m):
                        np.subtract.at(rhs, corners[:, ci] * m + a, contrib[:, a])
    return rhs


def energy_product(
    field: TensorField,
    grid: Grid,
    epsilon_scale: float,
    u: GridFunction,
    v: GridFunction,
    zero_order: float = 0.0,
) -> float:
    """B(u, v) + zero_order (u, v) recomputed from the quadrature directly.

    Independent of the assembled matrix; used to cross-check assembly and to
    certify discrete energy bounds.
    """
    m = u.components
    uu = u.values
    vv = v.values
    total = 0.0
    for ax in range(grid.d):
        lower, upper, mids, area = _face_geometry(grid, ax)
        a_face = field.evaluate_many(mids / epsilon_scale)[:, ax, ax, :, :]
        du = (uu[upper] - uu[lower]) / grid.h[ax]
        dv = (vv[upper] - vv[lower]) / grid.h[ax]
        total += float(np.einsum("f,fab,fb,fa->", area * grid.h[ax], a_face, du, dv))
    if grid.d > 1 and _has_cross_terms(field):
        corners, centers, vol = _cell_geometry(grid)
        a_cell = field.evaluate_many(centers / epsilon_scale)
        davg_u = {}
        davg_v = {}
        for ax in range(grid.d):
            w = _corner_diff_weights(grid.d, ax) / grid.h[ax]
            davg_u[ax] = np.einsum("c,fcb->fb", w, uu[corners])
            davg_v[ax] = np.einsum("c,fcb->fb", w, vv[corners])
        for i in range(grid.d):
            for j in range(grid.d):
                if i == j:
                    continue
                total += vol * float(
                    np.einsum("fab,fb,fa->", a_cell[:, i, j, :, :], davg_u[j], davg_v[i])
                )
    if zero_order != 0.0:
        w = grid.node_volumes()
        total += zero_order * float(np.einsum("n,nc,nc->", w, uu, vv))
    return total


# ---------------------------------------------------------------------------
# krylov solver
# ---------------------------------------------------------------------------

def _project_out_constants(vec: np.ndarray, m: int, weights: np.ndarray | None):
    v = vec.reshape(-1, m)
    if weights is None:
        v -= v.mean(axis=0)[None, :]
    else:
        w = weights.reshape(-1, m)
        v -= (np.sum(w * v, axis=0) / np.sum(w, axis=0))[None, :]
    return v.reshape(-1)


def krylov_solve(
    op: DiscreteOperator,
    rhs: np.ndarray,
    tol: float = 1e-10,
    maxiter: int | None = None,
) -> GridFunction:
    """Solve op u = rhs (weak form) with Jacobi-preconditioned CG/BiCGStab.

    CG when the operator is symmetric, BiCGStab otherwise.  For singular
    (constant-kernel) operators the rhs is projected compatible and the
    solution returned with weighted mean zero.  Raises KrylovError with the
    final residual on non-convergence.
    """
    rhs = np.asarray(rhs, float).reshape(-1)
    if rhs.shape[0] != op.n_unknowns:
        raise ValueError("rhs length does not match operator")
    if not np.isfinite(rhs).all():
        raise ValueError("rhs must be finite")
    if maxiter is None:
        maxiter = max(2000, 16 * int(op.grid.nodes_per_axis.max()))

    b = rhs.copy()
    if op.singular:
        b = _project_out_constants(b, op.m, None)

    x = np.zeros_like(b)
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return _unknowns_to_gridfunction(op, x)

    diag = op.diagonal()
    if (diag <= 0).any():
        diag = np.where(diag <= 0, 1.0, diag)
    inv_diag = 1.0 / diag

    def precondition(r):
        z = inv_diag * r
        if op.singular:
            # the Jacobi diagonal is not constant, so preconditioning leaks
            # kernel (constant) components back in; project them out to keep
            # the iterates from wandering along the kernel
            z = _project_out_constants(z, op.m, None)
        return z

    if op.symmetric:
        # recursive residuals drift from true ones at high condition number;
        # verify against the true residual and restart on disagreement
        r = b - op.matvec(x)
        z = precondition(r)
        p = z.copy()
        rz = float(r @ z)
        converged = False
        for _ in range(maxiter):
            ap = op.matvec(p)
            pap = float(p @ ap)
            if pap <= 0.0:
                break
            alpha = rz / pap
            x += alpha * p
            r -= alpha * ap
            if float(np.linalg.norm(r)) <= tol * norm_b:
                r = b - op.matvec(x)
                if float(np.linalg.norm(r)) <= tol * norm_b:
                    converged = True
                    break
                z = precondition(r)
                p = z.copy()
                rz = float(r @ z)
                continue
            z = precondition(r)
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        final = float(np.linalg.norm(b - op.matvec(x))) / norm_b
        if not converged and final > tol:
            raise KrylovError(
                f"CG failed to reach tol={tol:g} in {maxiter} iterations "
                f"(relative residual {final:.3e})",
                final,
            )
    else:
        converged = False
        iters_left = maxiter
        while iters_left > 0 and not converged:
            # (re)start from the current iterate; a restart also serves as
            # residual replacement when recursive and true residuals diverge
            r = b - op.matvec(x)
            if float(np.linalg.norm(r)) <= tol * norm_b:
                converged = True
                break
            r0 = r.copy()
            rho_old = alpha = omega_w = 1.0
            v = np.zeros_like(b)
            p = np.zeros_like(b)
            signal = False
            while iters_left > 0:
                iters_left -= 1
                rho = float(r0 @ r)
                if rho == 0.0 or omega_w == 0.0:
                    break  # breakdown: restart
                beta = (rho / rho_old) * (alpha / omega_w)
                p = r + beta * (p - omega_w * v)
                phat = precondition(p)
                v = op.matvec(phat)
                denom = float(r0 @ v)
                if denom == 0.0:
                    break
                alpha = rho / denom
                s = r - alpha * v
                if float(np.linalg.norm(s)) <= tol * norm_b:
                    x += alpha * phat
                    signal = True
                    break
                shat = precondition(s)
                t = op.matvec(shat)
                tt = float(t @ t)
                if tt == 0.0:
                    break
                omega_w = float(t @ s) / tt
                x += alpha * phat + omega_w * shat
                r = s - omega_w * t
                if float(np.linalg.norm(r)) <= tol * norm_b:
                    signal = True
                    break
                rho_old = rho
            if signal:
                true_res = float(np.linalg.norm(b - op.matvec(x)))
                if true_res <= tol * norm_b:
                    converged = True
        final = float(np.linalg.norm(b - op.matvec(x))) / norm_b
        if not converged and final > tol:
            raise KrylovError(
                f"BiCGStab failed to reach tol={tol:g} in {maxiter} iterations "
                f"(relative residual {final:.3e})",
                final,
            )

    if op.singular:
        x = _project_out_constants(x, op.m, op.weights)
    return _unknowns_to_gridfunction(op, x)


def _unknowns_to_gridfunction(op: DiscreteOperator, x: np.ndarray) -> GridFunction:
    m = op.m
    full = np.zeros((op.grid.n_nodes, m))
    full[op.unknown_nodes] = x.reshape(-1, m)
    return GridFunction(op.grid, m, full)


# ---------------------------------------------------------------------------
# means, norms, gradients
# ---------------------------------------------------------------------------

def mean(f: GridFunction) -> np.ndarray:
    """Per-component box mean (trapezoid / node-average quadrature)."""
    w = f.grid.node_volumes()
    return (w @ f.values) / w.sum()


def lp_norm(f: GridFunction, p) -> float:
    """Integral L^p norm over the box (Euclidean norm across components)."""
    mag = np.linalg.norm(f.values, axis=1)
    if p == np.inf or p == "inf":
        return float(mag.max()) if mag.size else 0.0
    w = f.grid.node_volumes()
    return float((w @ mag ** p) ** (1.0 / p))


def l2_avg_ball(f: GridFunction, center, r: float) -> float:
    """Root mean square over nodes inside the ball (node-center inclusion)."""
    f.grid.require_ball_inside(center, r)
    mask = f.grid.ball_mask(center, r)
    if not mask.any():
        raise ValueError("ball contains no grid nodes")
    vals = f.values[mask]
    return float(np.sqrt(np.mean(np.sum(vals ** 2, axis=1))))


def gradient(f: GridFunction) -> GridFunction:
    """Centered-difference gradient, (m*d) components ordered c*d + axis.

    Second-order one-sided stencils on non-periodic boundaries.
    """
    g = f.grid
    shape = tuple(g.nodes_per_axis) + (f.components,)
    u = f.values.reshape(shape)
    out = np.empty(tuple(g.nodes_per_axis) + (f.components, g.d))
    for ax in range(g.d):
        h = g.h[ax]
        if g.periodic[ax]:
            d = (np.roll(u, -1, axis=ax) - np.roll(u, 1, axis=ax)) / (2 * h)
        else:
            d = np.empty_like(u)
            sl = [slice(None)] * (g.d + 1)

            def at(i):
                s = list(sl)
                s[ax] = i
                return tuple(s)

            d[at(slice(1, -1))] = (u[at(slice(2, None))] - u[at(slice(0, -2))]) / (2 * h)
            d[at(0)] = (-3 * u[at(0)] + 4 * u[at(1)] - u[at(2)]) / (2 * h)
            d[at(-1)] = (3 * u[at(-1)] - 4 * u[at(-2)] + u[at(-3)]) / (2 * h)
        out[..., ax] = d
    return GridFunction(
        g, f.components * g.d, out.reshape(g.n_nodes, f.components * g.d)
    )


def subgrid_window(f: GridFunction, lo_corner, hi_corner) -> GridFunction:
    """Restriction of a grid function to the node window [lo, hi] (snapped
    outward to grid nodes); the result is a non-periodic grid."""
    g = f.grid
    if g.periodic.any():
        raise ValueError("window extraction needs a non-periodic grid")
    lo = np.asarray(lo_corner, float)
    hi = np.asarray(hi_corner, float)
    i_lo = np.maximum(0, np.floor((lo - g.origin) / g.h - 1e-9).astype(int))
    i_hi = np.minimum(g.n, np.ceil((hi - g.origin) / g.h + 1e-9).astype(int))
    if ((i_hi - i_lo) < 4).any():
        raise ValueError("window too small for a subgrid")
    shape = tuple(g.nodes_per_axis) + (f.components,)
    u = f.values.reshape(shape)
    sl = tuple(slice(int(a), int(b) + 1) for a, b in zip(i_lo, i_hi))
    sub = u[sl]
    new_grid = Grid(
        g.d,
        g.origin + i_lo * g.h,
        (i_hi - i_lo) * g.h,
        i_hi - i_lo,
        np.zeros(g.d, dtype=bool),
    )
    return GridFunction(new_grid, f.components, sub.reshape(-1, f.components))


# ---------------------------------------------------------------------------
# import / export
# ---------------------------------------------------------------------------

_MAGIC = b"HGF1"


def export_hgf1(f: GridFunction, path):
    """Flat binary: magic, d, nodes per axis, components, float64 payload."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", f.grid.d))
        for n in f.grid.nodes_per_axis:
            fh.write(struct.pack("<I", int(n)))
        fh.write(struct.pack("<I", f.components))
        fh.write(f.values.astype("<f8").tobytes(order="C"))


def import_hgf1(path, grid: Grid) -> GridFunction:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not an HGF1 file")
        (d,) = struct.unpack("<I", fh.read(4))
        if d != grid.d:
            raise ValueError("dimension mismatch")
        nodes = [struct.unpack("<I", fh.read(4))[0] for _ in range(d)]
        if list(grid.nodes_per_axis) != nodes:
            raise ValueError("node count mismatch")
        (components,) = struct.unpack("<I", fh.read(4))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    return GridFunction(grid, components, payload.reshape(grid.n_nodes, components))


def export_csv(f: GridFunction, path):
    """Node index, coordinates, and values, one node per row."""
    idx = f.grid.multi_indices()
    pts = f.grid.points()
    with open(path, "w", newline="") as fh:
        cols = (
            [f"k{j}" for j in range(f.grid.d)]
            + [f"x{j + 1}" for j in range(f.grid.d)]
            + [f"v{c}" for c in range(f.components)]
        )
        fh.write(",".join(cols) + "\n")
        for i in range(f.grid.n_nodes):
            row = (
                [str(int(k)) for k in idx[i]]
                + [repr(float(x)) for x in pts[i]]
                + [repr(float(v)) for v in f.values[i]]
            )
            fh.write(",".join(row) + "\n")
