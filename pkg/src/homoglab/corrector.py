"""Approximate correctors: the cell problems with zero-order term T^-2.

For each coordinate direction j and system component beta we solve, on a
periodic computational box,

    -div(A(y) grad chi) + T^-2 chi = div(A(y) grad P),   P(y) = y_j e^beta,

and keep the mean-zero representative (the exact periodized solution has
mean zero because both divergence terms integrate to zero over the box).
Irrational frequencies are rounded to the box lattice; the rounding
magnitude is reported, not hidden.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .discrete import (
    Grid,
    GridFunction,
    _face_geometry,
    affine_stiffness_rhs,
    assemble,
    export_hgf1,
    gradient,
    import_hgf1,
    krylov_solve,
    mean,
)
from .field import Mode, TensorField

__all__ = [
    "CorrectorSet",
    "solve_corrector",
    "corrector_bounds",
    "psi_distance",
    "save_corrector_set",
    "load_corrector_set",
    "default_box_side",
    "periodize",
]


@dataclass
class CorrectorSet:
    """Solved cell problems chi_{T,j}^beta on one periodic box.

    ``chi[(j, beta)]`` is an m-component mean-zero grid function and
    ``grad_chi[(j, beta)]`` its nodal centered gradient (components alpha*d
    + axis).  ``energy[(j, beta)]`` is the face-quadrature Dirichlet energy
    mean plus the zero-order part, the quantity controlled by the
    Lax-Milgram constant mu^-2 ||A||_inf^2.
    """

    T: float
    field: TensorField
    pfield: TensorField
    box: Grid
    chi: dict
    grad_chi: dict
    residuals: dict
    energy: dict
    periodization_error: float

    @property
    def directions(self):
        return sorted(self.chi.keys())

    def chi_stack(self) -> np.ndarray:
        """(n_nodes, d*m*m) array ordered (j, beta, alpha) along columns."""
        cols = []
        for j in range(self.field.d):
            for b in range(self.field.m):
                cols.append(self.chi[(j, b)].values)
        return np.concatenate(cols, axis=1)

    def grad_stack(self) -> np.ndarray:
        """(n_nodes, d*m*m*d) gradients ordered (j, beta, alpha, axis)."""
        cols = []
        for j in range(self.field.d):
            for b in range(self.field.m):
                cols.append(self.grad_chi[(j, b)].values)
        return np.concatenate(cols, axis=1)


def default_box_side(field: TensorField, T: float) -> np.ndarray:
    """Default periodic box: the period lattice when the field has one,
    otherwise max(2 pi T, 64 * shortest oscillation period)."""
    if field.period_lattice is not None:
        return np.asarray(field.period_lattice, float)
    wmin = field.min_frequency()
    base = 64.0 * 2.0 * np.pi / wmin if wmin > 0 else 2.0 * np.pi * max(T, 1.0)
    return np.full(field.d, max(2.0 * np.pi * T, base))


def periodize(field: TensorField, box_side: np.ndarray):
    """Round every frequency onto the box lattice 2 pi / L per axis.

    Returns (periodized field, max |w - w_rounded|).  Quality for a given
    irrational frequency is set by how close L/(2 pi) comes to a continued-
    fraction denominator; the caller picks the box.
    """
    box_side = np.asarray(box_side, float).reshape(field.d)
    err = 0.0
    new_modes = []
    for md in field.modes:
        k = np.round(md.freq * box_side / (2 * np.pi))
        wnew = 2 * np.pi * k / box_side
        err = max(err, float(np.linalg.norm(wnew - md.freq)))
        new_modes.append(Mode(wnew, md.cos_amp, md.sin_amp))
    pfield = TensorField(
        field.d, field.m, field.mean, tuple(new_modes), field.mu, box_side.copy()
    )
    return pfield, err


def _dirichlet_energy_mean(u: GridFunction) -> float:
    """Mean over the box of |grad u|^2 in the face-difference quadrature."""
    g = u.grid
    vol = float(np.prod(g.side))
    total = 0.0
    for ax in range(g.d):
        lower, upper, _, area = _face_geometry(g, ax)
        du = (u.values[upper] - u.values[lower]) / g.h[ax]
        total += float(np.sum(area * g.h[ax] * np.sum(du ** 2, axis=1)))
    return total / vol


def solve_cell_problems(
    field: TensorField,
    grid: Grid,
    zero_order: float,
    tol: float = 1e-10,
    maxiter: int | None = None,
):
    """Solve the corrector problem for every (direction, component) pair.

    Returns (chi, grad_chi, residuals, energy) dicts keyed by (j, beta).
    zero_order = 0 runs the singular mean-zero branch (exact cell problem).
    """
    op = assemble(field, grid, 1.0, zero_order, "periodic")
    w = grid.node_volumes()
    chi, grads, residuals, energy = {}, {}, {}, {}
    for j in range(field.d):
        for b in range(field.m):
            grad_p = np.zeros((field.m, field.d))
            grad_p[b, j] = 1.0
            rhs = affine_stiffness_rhs(field, grid, 1.0, grad_p)
            sol = krylov_solve(op, rhs, tol=tol, maxiter=maxiter)
            # exact periodized solution is mean-zero; kill solver drift
            sol.values -= (w @ sol.values) / w.sum()
            rhs_norm = float(np.linalg.norm(rhs))
            if rhs_norm > 0:
                dofvals = sol.values.reshape(-1)
                res = float(np.linalg.norm(op.matvec(dofvals) - rhs)) / rhs_norm
            else:
                res = 0.0
            chi[(j, b)] = sol
            grads[(j, b)] = gradient(sol)
            e = _dirichlet_energy_mean(sol)
            if zero_order > 0:
                e += zero_order * float((w @ np.sum(sol.values ** 2, axis=1)) / w.sum())
            residuals[(j, b)] = res
            energy[(j, b)] = e
    return chi, grads, residuals, energy


def solve_corrector(
    field: TensorField,
    T: float,
    box_side=None,
    n: int | np.ndarray = 1024,
    tol: float = 1e-9,
    maxiter: int | None = None,
) -> CorrectorSet:
    """Solve the approximate corrector problems at localization scale T."""
    if T < 1:
        raise ValueError("T must be >= 1")
    side = (
        np.asarray(box_side, float).reshape(-1) * np.ones(field.d)
        if box_side is not None
        else default_box_side(field, T)
    )
    pfield, perr = periodize(field, side)
    if perr > 0 and side.min() < 2 * np.pi * T:
        warnings.warn(
            f"box side {side.min():.3g} below the recommended 2*pi*T = "
            f"{2 * np.pi * T:.3g}; the zero-order localization scale is not contained",
            stacklevel=2,
        )
    if perr > 1.0 / side.min():
        warnings.warn(
            f"frequency rounding {perr:.3g} exceeds 1/boxSide; "
            "grow the box for a better rational approximation",
            stacklevel=2,
        )
    n_vec = np.asarray(n, np.int64).reshape(-1) * np.ones(field.d, np.int64)
    grid = Grid(field.d, np.zeros(field.d), side, n_vec, np.ones(field.d, bool))
    chi, grads, residuals, energy = solve_cell_problems(
        pfield, grid, T ** -2, tol=tol, maxiter=maxiter
    )
    return CorrectorSet(T, field, pfield, grid, chi, grads, residuals, energy, perr)


def corrector_bounds(
    cs: CorrectorSet, sigma: float, pair_samples: int = 10_000, seed: int = 0
) -> dict:
    """Measured corrector bounds.

    sup_over_t: T^-1 max |chi|; lipschitz: max nodal |grad chi|;
    energy: worst per-direction energy mean; holder_ratio: sampled sup of
    |chi(x)-chi(y)| / (T^(1-sigma) |x-y|^sigma) over random node pairs
    (torus distance).
    """
    if not 0 < sigma < 1:
        raise ValueError("sigma must lie in (0, 1)")
    t_scale = cs.T if math.isfinite(cs.T) else 1.0
    sup_chi = max(float(np.abs(c.values).max()) for c in cs.chi.values())
    lip = 0.0
    for g in cs.grad_chi.values():
        pt = np.sqrt(np.sum(g.values ** 2, axis=1)).max()
        lip = max(lip, float(pt))
    energy = max(cs.energy.values())

    rng = np.random.default_rng(seed)
    n_nodes = cs.box.n_nodes
    ia = rng.integers(0, n_nodes, size=pair_samples)
    ib = rng.integers(0, n_nodes, size=pair_samples)
    keep = ia != ib
    ia, ib = ia[keep], ib[keep]
    pts = cs.box.points()
    delta = np.abs(pts[ia] - pts[ib])
    delta = np.minimum(delta, cs.box.side[None, :] - delta)  # torus metric
    dist = np.linalg.norm(delta, axis=1)
    ratio = 0.0
    for c in cs.chi.values():
        dchi = np.linalg.norm(c.values[ia] - c.values[ib], axis=1)
        ratio = max(ratio, float((dchi / (t_scale ** (1 - sigma) * dist ** sigma)).max()))
    return {
        "sup_over_t": sup_chi / t_scale if math.isfinite(cs.T) else sup_chi,
        "lipschitz": lip,
        "energy": energy,
        "holder_ratio": ratio,
    }


def psi_distance(cs: CorrectorSet, reference: CorrectorSet) -> float:
    """Box mean of the pointwise Frobenius gap between the two corrector
    gradients; the computable stand-in for the gap to the exact gradient
    field.  The reference must be solved at T >= 4x (or the exact cell
    problem) on the same grid."""
    if reference is cs:
        return 0.0
    if not cs.box.same_layout(reference.box):
        raise ValueError("corrector sets live on different grids")
    if math.isfinite(reference.T) and reference.T < 4 * cs.T:
        raise ValueError("reference corrector must have T >= 4 * cs.T")
    a = cs.grad_stack()
    b = reference.grad_stack()
    w = cs.box.node_volumes()
    fro = np.sqrt(np.sum((a - b) ** 2, axis=1))
    return float((w @ fro) / w.sum())


# ---------------------------------------------------------------------------
# serialization: directory of HGF1 binaries plus a JSON manifest
# ---------------------------------------------------------------------------

def save_corrector_set(cs: CorrectorSet, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "T": cs.T if math.isfinite(cs.T) else "inf",
        "d": cs.field.d,
        "m": cs.field.m,
        "box": {
            "origin": cs.box.origin.tolist(),
            "side": cs.box.side.tolist(),
            "n": cs.box.n.tolist(),
            "periodic": cs.box.periodic.tolist(),
        },
        "residuals": {f"{j},{b}": cs.residuals[(j, b)] for (j, b) in cs.directions},
        "periodization_error": cs.periodization_error,
        "files": {},
    }
    for (j, b) in cs.directions:
        name = f"chi_j{j}_b{b}.hgf1"
        export_hgf1(cs.chi[(j, b)], directory / name)
        manifest["files"][f"{j},{b}"] = name
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_corrector_set(directory, field: TensorField) -> CorrectorSet:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    box = Grid(
        manifest["d"],
        np.array(manifest["box"]["origin"]),
        np.array(manifest["box"]["side"]),
        np.array(manifest["box"]["n"]),
        np.array(manifest["box"]["periodic"]),
    )
    t_val = manifest["T"]
    T = math.inf if t_val == "inf" else float(t_val)
    pfield, perr = periodize(field, box.side)
    chi, grads, residuals, energy = {}, {}, {}, {}
    for key, name in manifest["files"].items():
        j, b = (int(s) for s in key.split(","))
        f = import_hgf1(directory / name, box)
        chi[(j, b)] = f
        grads[(j, b)] = gradient(f)
        residuals[(j, b)] = float(manifest["residuals"][key])
        zo = 0.0 if math.isinf(T) else T ** -2
        e = _dirichlet_energy_mean(f)
        if zo > 0:
            w = box.node_volumes()
            e += zo * float((w @ np.sum(f.values ** 2, axis=1)) / w.sum())
        energy[(j, b)] = e
    return CorrectorSet(
        T, field, pfield, box, chi, grads, residuals, energy,
        float(manifest["periodization_error"]),
    )
