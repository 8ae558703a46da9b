"""Executable large-scale Lipschitz scheme.

Two halves: a purely arithmetic sequence lemma (two coupled sequences whose
hypotheses force geometric decay plus a summable perturbation, with a fully
constructive constant), and grid-level machinery measuring the affine excess
of solutions across scales.  The witness constant is derived by forward-
propagating the explicit bounds; the derivation is reproduced in the README
manual section and regression-tested.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .discrete import GridFunction, subgrid_window
from .field import TensorField
from .homogenize import EffectiveTensor
from .solver import BVPSpec, solve_bvp

__all__ = [
    "LemmaInstance",
    "ExcessProfile",
    "affine_excess",
    "lemma_check",
    "lemma_constant",
    "generate_equality_instance",
    "flatness_profile",
    "improvement_step_audit",
]


# ---------------------------------------------------------------------------
# sequence lemma
# ---------------------------------------------------------------------------

@dataclass
class LemmaInstance:
    """Sequences (F_j, p_j) with perturbation weights eta_j and budget C1.

    Hypotheses:
      (H1) p_{j+1} <= p_j + C0 max(F_j, F_{j+1})          for 0 <= j <= l-1
      (H2) F_{j+1} <= F_j/2 + eta_j (K + max p_{<j} + max F_{<j})
                                                          for 1 <= j <= l-1
    with eta nondecreasing, eta_{l-1} = eta_l, sum eta <= C1.
    """

    F: np.ndarray
    p: np.ndarray
    eta: np.ndarray
    K: float
    C0: float
    C1: float

    def __post_init__(self):
        self.F = np.asarray(self.F, float)
        self.p = np.asarray(self.p, float)
        self.eta = np.asarray(self.eta, float)
        ell = self.F.size - 1
        if self.p.size != ell + 1 or self.eta.size != ell:
            raise ValueError("lengths: F, p have l+1 entries, eta has l")
        if (self.F < 0).any() or (self.p < 0).any() or self.K < 0:
            raise ValueError("sequences must be nonnegative")
        if (np.diff(self.eta) < -1e-12).any():
            raise ValueError("eta must be nondecreasing")
        if ell >= 2 and abs(self.eta[-1] - self.eta[-2]) > 1e-12:
            raise ValueError("eta must satisfy eta_{l-1} = eta_l")
        if self.eta.sum() > self.C1 + 1e-12:
            raise ValueError("sum of eta exceeds the budget C1")

    @property
    def ell(self) -> int:
        return self.F.size - 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "F": self.F.tolist(),
                "p": self.p.tolist(),
                "eta": self.eta.tolist(),
                "K": self.K,
                "C0": self.C0,
                "C1": self.C1,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "LemmaInstance":
        obj = json.loads(text)
        return cls(
            np.array(obj["F"]), np.array(obj["p"]), np.array(obj["eta"]),
            obj["K"], obj["C0"], obj["C1"],
        )


def lemma_log_constant(C0: float, C1: float) -> float:
    """log of the constructive constant for the sequence lemma conclusions.

    Chain: the halving recursion gives F_j <= C2 [ (2^-j + eta_j) G +
    eta_j max p_{<j} ] with C2 = 2 exp(2 C1) and G = F_0 + F_1 (product
    bound via log(1+x) <= x); feeding that into (H1) and unrolling gives
    max_j p_j <= Cp (p_0 + G) with Cp = exp(C0 C2 C1) max(1, C0 C2 (2 + C1)),
    and then F_j <= C2 (1 + Cp)(2^-j + eta_j)(p_0 + G).  K is absorbed by
    shifting p.  Monotone nondecreasing in both arguments; held in log form
    because the exponent C0 C2 C1 overflows float64 already at modest
    budgets (the derivation is explicit, not small).
    """
    if C0 < 0 or C1 < 0:
        raise ValueError("C0, C1 must be nonnegative")
    log_c2 = math.log(2.0) + 2.0 * C1
    c2 = math.exp(log_c2)
    poly = C0 * c2 * (2.0 + C1)
    log_cp = C0 * c2 * C1 + (math.log(poly) if poly > 1.0 else 0.0)
    log_cf = log_c2 + np.logaddexp(0.0, log_cp)
    return float(max(log_cp, log_cf))


def lemma_constant(C0: float, C1: float) -> float:
    """exp of ``lemma_log_constant``; inf when not representable."""
    log_c = lemma_log_constant(C0, C1)
    return math.exp(log_c) if log_c < 700.0 else math.inf


def lemma_check(inst: LemmaInstance, log_witness: float | None = None) -> dict:
    """Verify the hypotheses and the conclusions with the witness constant.

    Returns hypotheses_ok (with the first violating index), conclusions_ok,
    and the witness used (log form).  Conclusions checked, in log space so
    that large constructive constants stay exact:
      p_j <= C (K + p_0 + F_0 + F_1),
      F_j <= C (2^-j + eta_j)(K + p_0 + F_0 + F_1)  for 1 <= j <= l.
    """
    ell = inst.ell
    F, p, eta = inst.F, inst.p, inst.eta
    slack = 1e-12

    bad = None
    for j in range(ell):
        bound = p[j] + inst.C0 * max(F[j], F[j + 1])
        if p[j + 1] > bound * (1 + 1e-12) + slack:
            bad = j
            break
    if bad is None:
        for j in range(1, ell):
            bound = 0.5 * F[j] + eta[j - 1] * (
                inst.K + p[: j].max(initial=0.0) + F[: j].max(initial=0.0)
            )
            if F[j + 1] > bound * (1 + 1e-12) + slack:
                bad = j
                break
    hypotheses_ok = bad is None

    log_c = lemma_log_constant(inst.C0, inst.C1) if log_witness is None else log_witness
    base = inst.K + p[0] + F[0] + (F[1] if ell >= 1 else 0.0)
    conclusions_ok = True
    if base == 0.0:
        conclusions_ok = bool((p[1:] == 0).all() and (F[1:] == 0).all())
    else:
        log_base = math.log(base)
        for j in range(1, ell + 1):
            if p[j] > 0 and math.log(p[j]) > log_c + log_base + slack:
                conclusions_ok = False
                break
            decay = 2.0 ** (-j) + eta[j - 1]
            if F[j] > 0 and math.log(F[j]) > log_c + math.log(decay) + log_base + slack:
                conclusions_ok = False
                break
    return {
        "hypotheses_ok": hypotheses_ok,
        "first_violation": bad,
        "conclusions_ok": conclusions_ok,
        "log_witness": log_c,
    }


def generate_equality_instance(
    ell: int, C0: float, C1: float, K: float, rng: np.random.Generator
) -> LemmaInstance:
    """Extremal instance: both hypotheses taken with equality.

    eta is a sorted positive draw rescaled to sum C1 (last two tied); the
    sequences then evolve by the equality versions of (H1)/(H2).
    """
    if ell < 3:
        raise ValueError("need ell >= 3")
    raw = np.sort(rng.uniform(0.1, 1.0, size=ell - 1))
    eta = np.concatenate([raw, raw[-1:]])
    eta *= C1 / eta.sum()
    F = np.empty(ell + 1)
    p = np.empty(ell + 1)
    F[0] = rng.uniform(0.1, 2.0)
    F[1] = rng.uniform(0.1, 2.0)
    p[0] = rng.uniform(0.0, 2.0)
    p[1] = p[0] + C0 * max(F[0], F[1])
    for j in range(1, ell):
        F[j + 1] = 0.5 * F[j] + eta[j - 1] * (K + p[:j].max() + F[:j].max())
        p[j + 1] = p[j] + C0 * max(F[j], F[j + 1])
    return LemmaInstance(F, p, eta, K, C0, C1)


# ---------------------------------------------------------------------------
# affine excess on grids
# ---------------------------------------------------------------------------

def affine_excess(u: GridFunction, center, r: float) -> dict:
    """Exact least-squares flatness on the ball: minimize the node mean of
    |u - M x - q|^2 over (M, q); F = sqrt(mean)/r.

    The Gram matrix of {1, x} on any ball with >= d+2 non-collinear nodes is
    positive definite, so the minimizer is unique.
    """
    grid = u.grid
    center = np.asarray(center, float)
    grid.require_ball_inside(center, r)
    mask = grid.ball_mask(center, r)
    n_nodes = int(mask.sum())
    if n_nodes < grid.d + 2:
        raise ValueError(f"ball holds {n_nodes} nodes; need at least d+2")
    x = grid.points()[mask] - center[None, :]
    design = np.concatenate([np.ones((n_nodes, 1)), x], axis=1)
    rhs = u.values[mask]
    coef, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    resid = rhs - design @ coef
    f_val = math.sqrt(float(np.mean(np.sum(resid ** 2, axis=1)))) / r
    m_mat = coef[1:].T.copy()  # (m, d)
    return {
        "F": f_val,
        "M": m_mat,
        "q": coef[0] - m_mat @ center,  # offset in absolute coordinates
        "nodes": n_nodes,
    }


def constant_excess(u: GridFunction, center, r: float) -> float:
    """(1/r) inf_q rms over the ball of |u - q| (constants only)."""
    grid = u.grid
    mask = grid.ball_mask(center, r)
    vals = u.values[mask]
    resid = vals - vals.mean(axis=0)[None, :]
    return math.sqrt(float(np.mean(np.sum(resid ** 2, axis=1)))) / r


@dataclass
class ExcessProfile:
    theta: float
    epsilon: float
    K: float
    radii: np.ndarray
    F: np.ndarray
    p: np.ndarray
    M: list
    contractions: np.ndarray
    dyadic_t: np.ndarray
    constant_excess: np.ndarray
    truncated: bool

    def csv_rows(self):
        for j in range(self.radii.size):
            contr = self.contractions[j] if j < self.contractions.size else ""
            yield (j, self.radii[j], self.F[j], self.p[j], contr)


def flatness_profile(
    u: GridFunction,
    epsilon: float,
    theta: float,
    K: float = 0.0,
    center=None,
) -> ExcessProfile:
    """Affine excess at the scales r_j = theta^(j+1) down to the floor.

    The scale index stops at theta^(l+2) < epsilon <= theta^(l+1); scales
    whose ball holds fewer than d+2 nodes truncate the profile with a
    truncation flag.  Also tabulates the constant-only normalized excess on
    dyadic scales down to max(2 epsilon, grid floor).
    """
    if not 0 < theta < 0.25:
        raise ValueError("theta must lie in (0, 1/4)")
    if not 0 < epsilon < theta:
        raise ValueError("need epsilon < theta")
    grid = u.grid
    if center is None:
        center = grid.origin + grid.side / 2
    center = np.asarray(center, float)

    ell = 0
    while theta ** (ell + 2) >= epsilon:
        ell += 1
    radii, fs, ps, ms = [], [], [], []
    truncated = False
    for j in range(ell + 1):
        r = theta ** (j + 1)
        try:
            res = affine_excess(u, center, r)
        except ValueError:
            truncated = True
            break
        radii.append(r)
        fs.append(res["F"])
        ps.append(float(np.linalg.norm(res["M"])))
        ms.append(res["M"])
    fs = np.array(fs)
    with np.errstate(divide="ignore", invalid="ignore"):
        contr = np.where(fs[:-1] > 0, fs[1:] / np.where(fs[:-1] > 0, fs[:-1], 1.0), np.nan)

    t_vals, d_vals = [], []
    t = 0.25  # the normalized-excess conclusion covers t in (epsilon, 1/4)
    floor = max(2 * epsilon, (grid.d + 2) ** (1.0 / grid.d) * float(grid.h.max()))
    while t >= floor:
        mask = grid.ball_mask(center, t)
        if mask.sum() < grid.d + 2:
            break
        t_vals.append(t)
        d_vals.append(constant_excess(u, center, t))
        t /= 2
    return ExcessProfile(
        theta, epsilon, K, np.array(radii), fs, np.array(ps), ms,
        contr, np.array(t_vals), np.array(d_vals), truncated,
    )


def improvement_step_audit(
    u_eps: GridFunction,
    r: float,
    theta: float,
    effective: EffectiveTensor,
    field: TensorField,
    center=None,
    tol: float = 1e-10,
) -> dict:
    """Measure one improvement step: transfer u_eps as Dirichlet data onto a
    homogenized solve on the bounding box of B_r and report

      approx_error = rms_{B_r}(u_eps - w) / inf_q rms_{B_2r}(u_eps - q),
      contraction  = affine excess of w at theta r over excess at r.
    """
    grid = u_eps.grid
    if center is None:
        center = grid.origin + grid.side / 2
    center = np.asarray(center, float)
    grid.require_ball_inside(center, 2 * r)

    window = subgrid_window(u_eps, center - r, center + r)
    wgrid = window.grid
    bvals = {}

    def f_boundary(pts):
        # nearest-node transfer of u_eps onto the window boundary
        idx = np.round((pts - grid.origin[None, :]) / grid.h[None, :]).astype(int)
        flat = np.ravel_multi_index(tuple(idx.T), tuple(grid.nodes_per_axis))
        return u_eps.values[flat]

    spec = BVPSpec(
        field, 0.0, wgrid.origin, wgrid.side, wgrid.n, "dirichlet",
        f_boundary, None, None, effective, tol=tol,
    )
    w = solve_bvp(spec)

    diff = window.values - w.values
    mask_r = wgrid.ball_mask(center, r * (1 - 1e-12))
    num = math.sqrt(float(np.mean(np.sum(diff[mask_r] ** 2, axis=1))))
    den = constant_excess(u_eps, center, 2 * r) * 2 * r
    approx_error = num / den if den > 0 else (0.0 if num == 0 else math.inf)

    exc_r = affine_excess(w, center, r * (1 - 4 * float(wgrid.h.max()) / r))["F"]
    exc_tr = affine_excess(w, center, theta * r)["F"]
    contraction = exc_tr / exc_r if exc_r > 0 else 0.0
    return {"approx_error": approx_error, "contraction": contraction, "w": w}
