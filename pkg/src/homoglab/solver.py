"""Boundary-value solves on rectangles and the empirical estimate probes.

Data (boundary values, source, conormal fluxes) enter as plain callables on
point arrays; the CLI layer wires the expression language into these.
Neumann data is prescribed per rectangle side so that discontinuous conormal
data (normal flips) stays expressible.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .discrete import (
    Grid,
    GridFunction,
    assemble,
    check_resolution,
    gradient,
    krylov_solve,
    l2_avg_ball,
    lp_norm,
    mean,
)
from .field import TensorField
from .homogenize import EffectiveTensor, ModulusTable, omega, theta

__all__ = [
    "BVPSpec",
    "RateReport",
    "solve_bvp",
    "rate_sweep",
    "lipschitz_probe",
    "w1p_probe",
    "boundary_lipschitz_probe",
    "parallel_map",
]

def parallel_map(fn, items):
    """Map preserving order; HOMOGLAB_THREADS > 1 runs members concurrently
    (each member solve is deterministic, so the result does not depend on
    scheduling)."""
    try:
        threads = int(os.environ.get("HOMOGLAB_THREADS", "1"))
    except ValueError:
        threads = 1
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class BVPSpec:
    """One boundary-value problem for the oscillating or homogenized operator.

    epsilon > 0 samples the coefficient at x/epsilon; epsilon == 0 solves the
    constant-coefficient problem with the supplied effective tensor.
    bc is "dirichlet" (boundary values ``f``) or "neumann" (per-side conormal
    data ``g[(axis, end)]``); ``source`` is the volume term.
    """

    field: TensorField
    epsilon: float
    origin: np.ndarray
    side: np.ndarray
    n: np.ndarray
    bc: str
    f: Callable | None = None
    g: dict | None = None
    source: Callable | None = None
    effective: EffectiveTensor | None = None
    tol: float = 1e-10
    override_resolution: bool = False

    def grid(self) -> Grid:
        d = self.field.d
        n = np.asarray(self.n, np.int64).reshape(-1) * np.ones(d, np.int64)
        return Grid(d, np.asarray(self.origin, float), np.asarray(self.side, float),
                    n, np.zeros(d, bool))


def _eval_data(fn, pts, m):
    if fn is None:
        return np.zeros((pts.shape[0], m))
    return np.asarray(fn(pts), float).reshape(pts.shape[0], m)


def _side_nodes(grid: Grid, axis: int, end: int):
    """(node ids, surface weights) of one rectangle side."""
    mi = grid.multi_indices()
    target = 0 if end == 0 else grid.n[axis]
    mask = mi[:, axis] == target
    ids = np.nonzero(mask)[0]
    w = np.ones(ids.size)
    for j in range(grid.d):
        if j != axis:
            w *= grid.trapezoid_weights(j)[mi[ids, j]]
    return ids, w


def solve_bvp(spec: BVPSpec) -> GridFunction:
    """Solve the problem; Neumann solutions are returned mean-zero."""
    grid = spec.grid()
    m = spec.field.m
    if spec.epsilon > 0:
        field, scale = spec.field, spec.epsilon
    else:
        if spec.effective is None:
            raise ValueError("epsilon == 0 needs an effective tensor")
        field, scale = spec.effective.as_field(spec.field.mu), 1.0

    op = assemble(field, grid, scale, 0.0, spec.bc,
                  override_resolution=spec.override_resolution)
    pts = grid.points()
    f_src = _eval_data(spec.source, pts, m)
    weak_src = (grid.node_volumes()[:, None] * f_src).reshape(-1)

    if spec.bc == "dirichlet":
        if spec.f is None:
            raise ValueError("dirichlet bc needs boundary data f")
        f_bdy = _eval_data(spec.f, pts[op.boundary_nodes], m).reshape(-1)
        dofs = (op.unknown_nodes[:, None] * m + np.arange(m)[None, :]).reshape(-1)
        rhs = weak_src[dofs] - op.boundary_matvec(f_bdy)
        sol = krylov_solve(op, rhs, tol=spec.tol)
        sol.values[op.boundary_nodes] = f_bdy.reshape(-1, m)
        return sol

    # neumann
    g = spec.g or {}
    rhs = weak_src.copy()
    surf_total = np.zeros(m)
    surf_scale = 0.0
    for (axis, end), fn in sorted(g.items()):
        ids, w = _side_nodes(grid, axis, end)
        gv = _eval_data(fn, pts[ids], m)
        for c in range(m):
            np.add.at(rhs, ids * m + c, w * gv[:, c])
        surf_total += w @ gv
        surf_scale += float(np.sum(w[:, None] * np.abs(gv)))
    vol_total = grid.node_volumes() @ f_src
    scale_chk = surf_scale + float(np.sum(grid.node_volumes()[:, None] * np.abs(f_src)))
    if np.abs(vol_total + surf_total).max() > 1e-8 * max(scale_chk, 1e-14):
        raise ValueError(
            "incompatible neumann data: volume source and boundary flux do "
            f"not balance ({(vol_total + surf_total)!r})"
        )
    return krylov_solve(op, rhs, tol=spec.tol)


# ---------------------------------------------------------------------------
# rate harness
# ---------------------------------------------------------------------------

@dataclass
class RateReport:
    mode: str
    rows: list
    slope: float | None
    degenerate: bool
    ratio_spread: float | None

    def csv_rows(self):
        for r in self.rows:
            yield (r["epsilon"], r["h"], r["l2_error"], r["omega"], r["theory_ratio"])


def rate_sweep(
    field: TensorField,
    eps_list,
    mode: str,
    spec_template: BVPSpec,
    moduli: ModulusTable,
    effective: EffectiveTensor,
    sigma: float,
    solver_tol: float = 1e-10,
) -> RateReport:
    """Solve the sweep and tabulate L2 errors against the rate modulus.

    Dirichlet rows compare the error with omega(eps)^(2/3); Neumann rows
    (after mean matching) with [Theta_sigma(1/eps) + corrector gap]^(1/2).
    The fitted slope is the log-log least-squares rate.
    """
    eps_list = list(eps_list)
    if len(eps_list) < 4:
        raise ValueError("need at least 4 sweep values")

    grid = spec_template.grid()
    spec0 = BVPSpec(
        field, 0.0, spec_template.origin, spec_template.side, spec_template.n,
        mode, spec_template.f, spec_template.g, spec_template.source,
        effective, tol=solver_tol,
    )
    u0 = solve_bvp(spec0)
    if mode == "neumann":
        u0.values -= mean(u0)[None, :]

    usable = []
    for eps in eps_list:
        try:
            check_resolution(field, grid, eps)
        except Exception as exc:
            warnings.warn(f"skipping epsilon={eps}: {exc}", stacklevel=2)
            continue
        usable.append(eps)

    def solve_one(eps):
        spec = BVPSpec(
            field, eps, spec_template.origin, spec_template.side, spec_template.n,
            mode, spec_template.f, spec_template.g, spec_template.source,
            None, tol=solver_tol,
        )
        return solve_bvp(spec)

    sols = parallel_map(solve_one, usable)

    rows = []
    for eps, ue in zip(usable, sols):
        ue = ue.copy()
        if mode == "neumann":
            ue.values -= mean(ue)[None, :]
        err = lp_norm(ue - u0, 2)
        om = omega(moduli, sigma, eps)
        if mode == "dirichlet":
            denom = om ** (2.0 / 3.0)
        else:
            denom = math.sqrt(
                theta(moduli.rho, sigma, 1.0 / eps) + moduli.psi_sup_from(1.0 / eps)
            )
        rows.append(
            {
                "epsilon": eps,
                "h": float(grid.h.max()),
                "l2_error": err,
                "omega": om,
                "theory_ratio": err / denom if denom > 0 else math.inf,
            }
        )

    err_scale = max(1.0, lp_norm(u0, 2))
    degenerate = all(r["l2_error"] <= 2 * solver_tol * err_scale for r in rows)
    slope = None
    spread = None
    if not degenerate and len(rows) >= 2:
        x = np.log([r["epsilon"] for r in rows])
        y = np.log([max(r["l2_error"], 1e-300) for r in rows])
        slope = float(np.polyfit(x, y, 1)[0])
        ratios = [r["theory_ratio"] for r in rows]
        spread = max(ratios) / min(ratios) if min(ratios) > 0 else math.inf
    return RateReport(mode, rows, slope, degenerate, spread)


# ---------------------------------------------------------------------------
# regularity probes
# ---------------------------------------------------------------------------

def _grad_sup_on_mask(u: GridFunction, mask: np.ndarray) -> float:
    g = gradient(u).values[mask]
    return float(np.sqrt(np.sum(g ** 2, axis=1)).max())


def _source_term(spec: BVPSpec, grid: Grid, center, r: float, beta: float) -> float:
    """r^beta * sup over dyadic t <= r of t^(1-beta) * ball-average of |F|."""
    if spec.source is None:
        return 0.0
    pts = grid.points()
    absf = np.abs(_eval_data(spec.source, pts, spec.field.m)).sum(axis=1)
    sup = 0.0
    t = r
    min_nodes = grid.d + 2
    while True:
        mask = grid.ball_mask(center, t)
        if mask.sum() < min_nodes:
            break
        sup = max(sup, t ** (1 - beta) * float(absf[mask].mean()))
        t /= 2
    return r ** beta * sup


def lipschitz_probe(
    field: TensorField,
    eps_list,
    spec_template: BVPSpec,
    center,
    r: float,
    beta: float = 0.5,
) -> dict:
    """Interior gradient bound ratio over an epsilon sweep.

    L(eps) = sup_B |grad u_eps| / [ (1/r) (avg_{2B} |u_eps|^2)^(1/2) + source ];
    max L / min L across the sweep is the empirical stand-in for the
    claimed eps-independence of the constant.
    """
    center = np.asarray(center, float)
    grid = spec_template.grid()
    grid.require_ball_inside(center, 2 * r, margin=4 * float(grid.h.max()))

    def one(eps):
        spec = BVPSpec(
            field, eps, spec_template.origin, spec_template.side, spec_template.n,
            spec_template.bc, spec_template.f, spec_template.g,
            spec_template.source, spec_template.effective, spec_template.tol,
        )
        u = solve_bvp(spec)
        num = _grad_sup_on_mask(u, grid.ball_mask(center, r))
        denom = l2_avg_ball(u, center, 2 * r) / r
        denom += _source_term(spec, grid, center, r, beta)
        return num / denom

    ratios = parallel_map(one, list(eps_list))
    rows = [{"epsilon": e, "ratio": rv} for e, rv in zip(eps_list, ratios)]
    return {
        "rows": rows,
        "max_ratio": max(ratios) / min(ratios) if min(ratios) > 0 else math.inf,
    }


def w1p_probe(
    field: TensorField,
    epsilon: float,
    p: float,
    spec_template: BVPSpec,
    center,
    r: float,
) -> float:
    """Reverse-Holder ratio (avg_B |grad u|^p)^(1/p) / (avg_2B |grad u|^2)^(1/2)."""
    if p < 2:
        raise ValueError("p must be >= 2")
    center = np.asarray(center, float)
    grid = spec_template.grid()
    grid.require_ball_inside(center, 2 * r, margin=4 * float(grid.h.max()))
    spec = BVPSpec(
        field, epsilon, spec_template.origin, spec_template.side, spec_template.n,
        spec_template.bc, spec_template.f, spec_template.g, spec_template.source,
        spec_template.effective, spec_template.tol,
    )
    u = solve_bvp(spec)
    g = gradient(u).values
    mag = np.sqrt(np.sum(g ** 2, axis=1))
    num = float(np.mean(mag[grid.ball_mask(center, r)] ** p)) ** (1.0 / p)
    den = math.sqrt(float(np.mean(mag[grid.ball_mask(center, 2 * r)] ** 2)))
    return num / den


def _holder_seminorm(xs: np.ndarray, vals: np.ndarray, beta: float) -> float:
    """max over pairs of |v(x)-v(y)| / |x-y|^beta on a 1D node set."""
    if xs.size < 2:
        return 0.0
    dx = np.abs(xs[:, None] - xs[None, :])
    dv = np.abs(vals[:, None] - vals[None, :])
    mask = dx > 0
    return float((dv[mask] / dx[mask] ** beta).max())


def boundary_lipschitz_probe(
    field: TensorField,
    eps_list,
    mode: str,
    spec_template: BVPSpec,
    r: float,
    beta: float = 0.5,
) -> dict:
    """Flat-boundary gradient bound ratio on the half-ball at the bottom edge.

    Dirichlet surrogate denominator: (1/r) rms_{D_2r}(u) + r |f|_inf +
    |tangential f'|_inf + r^beta [tangential f']_beta, all on the boundary
    patch of radius 2r.  Neumann: rms_{D_2r}(|grad u|) + |g|_inf +
    r^beta [g]_beta.  Norms are boundary-node surrogates.
    """
    grid = spec_template.grid()
    if grid.d != 2:
        raise ValueError("boundary probe supports d == 2 rectangles")
    ax = grid.d - 1
    center = grid.origin.copy()
    center[:ax] += grid.side[:ax] / 2
    for j in range(ax):
        if center[j] - 2 * r < grid.origin[j] or center[j] + 2 * r > grid.origin[j] + grid.side[j]:
            raise ValueError("probe region leaves the domain")
    if 2 * r > grid.side[ax]:
        raise ValueError("probe region leaves the domain")

    pts = grid.points()
    dist = np.linalg.norm(pts - center[None, :], axis=1)
    mask_r = dist <= r
    mask_2r = dist <= 2 * r
    edge_ids, _ = _side_nodes(grid, ax, 0)
    edge_pts = pts[edge_ids]
    edge_dist = np.linalg.norm(edge_pts - center[None, :], axis=1)
    edge_2r = edge_ids[edge_dist <= 2 * r]
    edge_x = pts[edge_2r][:, 0]  # tangential coordinate (d == 2)
    order = np.argsort(edge_x)
    edge_2r = edge_2r[order]
    edge_x = edge_x[order]

    def one(eps):
        spec = BVPSpec(
            field, eps, spec_template.origin, spec_template.side, spec_template.n,
            mode, spec_template.f, spec_template.g, spec_template.source,
            spec_template.effective, spec_template.tol,
        )
        u = solve_bvp(spec)
        num = _grad_sup_on_mask(u, mask_r)
        if mode == "dirichlet":
            fv = _eval_data(spec.f, pts[edge_2r], field.m).sum(axis=1)
            dtan = np.gradient(fv, edge_x)
            denom = (
                float(np.sqrt(np.mean(np.sum(u.values[mask_2r] ** 2, axis=1)))) / r
                + r * float(np.abs(fv).max())
                + float(np.abs(dtan).max())
                + r ** beta * _holder_seminorm(edge_x, dtan, beta)
            )
        else:
            g_fn = (spec.g or {}).get((ax, 0))
            gv = _eval_data(g_fn, pts[edge_2r], field.m).sum(axis=1)
            grad_rms = float(
                np.sqrt(np.mean(np.sum(gradient(u).values[mask_2r] ** 2, axis=1)))
            )
            denom = (
                grad_rms
                + float(np.abs(gv).max())
                + r ** beta * _holder_seminorm(edge_x, gv, beta)
            )
        return num / denom

    ratios = parallel_map(one, list(eps_list))
    rows = [{"epsilon": e, "ratio": rv} for e, rv in zip(eps_list, ratios)]
    return {
        "rows": rows,
        "max_ratio": max(ratios) / min(ratios) if min(ratios) > 0 else math.inf,
    }
