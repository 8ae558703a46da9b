"""Coefficient tensors A(y) as real trigonometric polynomials.

A field is a mean tensor plus a finite sum of cosine/sine modes; that class
is closed under the operations the workbench needs and keeps the structural
moduli (ellipticity range, Lipschitz bound, almost-periodicity modulus)
computable by direct search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "TensorField",
    "Mode",
    "RhoSearch",
    "RhoTable",
    "EllipticityReport",
    "isotropic_field",
    "ellipticity_check",
    "holder_modulus",
    "rho",
    "decay_fit",
]


@dataclass(frozen=True)
class Mode:
    """One oscillation: cos_amp*cos(freq.y) + sin_amp*sin(freq.y)."""

    freq: np.ndarray      # (d,)
    cos_amp: np.ndarray   # (d, d, m, m), indexed (i, j, alpha, beta)
    sin_amp: np.ndarray


@dataclass(frozen=True)
class TensorField:
    """Tensor coefficient a_ij^ab(y) = mean + trigonometric modes.

    ``mu`` is the claimed two-sided ellipticity constant: the quadratic form
    should stay within [mu, 1/mu] on unit test matrices.  ``period_lattice``
    is set when every frequency is commensurate with 2*pi/period per axis.
    Immutable; all operations on fields are pure.
    """

    d: int
    m: int
    mean: np.ndarray  # (d, d, m, m)
    modes: tuple[Mode, ...]
    mu: float
    period_lattice: np.ndarray | None = None

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError("need d >= 1 and m >= 1")
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        shape = (self.d, self.d, self.m, self.m)
        if self.mean.shape != shape:
            raise ValueError(f"mean must have shape {shape}")
        for md in self.modes:
            if md.freq.shape != (self.d,) or md.cos_amp.shape != shape:
                raise ValueError("mode arrays inconsistent with (d, m)")

    # -- packed views used by the kernels ---------------------------------
    @property
    def entry_count(self) -> int:
        return self.d * self.d * self.m * self.m

    def packed(self):
        """(mean (E,), freqs (K,d), cos (K,E), sin (K,E)) float64 views."""
        e = self.entry_count
        k = len(self.modes)
        freqs = np.zeros((k, self.d))
        cos = np.zeros((k, e))
        sin = np.zeros((k, e))
        for idx, md in enumerate(self.modes):
            freqs[idx] = md.freq
            cos[idx] = md.cos_amp.reshape(e)
            sin[idx] = md.sin_amp.reshape(e)
        return self.mean.reshape(e).astype(float), freqs, cos, sin

    def evaluate(self, y) -> np.ndarray:
        """A(y) at a single point, shape (d, d, m, m)."""
        return self.evaluate_many(np.asarray(y, dtype=float).reshape(1, self.d))[0]

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """A at each row of ``points`` (N, d); returns (N, d, d, m, m)."""
        points = np.ascontiguousarray(points, dtype=np.float64)
        mean, freqs, cos, sin = self.packed()
        flat = kernels.trig_eval(points, mean, freqs, cos, sin)
        return flat.reshape(points.shape[0], self.d, self.d, self.m, self.m)

    def sup_norm(self) -> float:
        """Entrywise upper bound |mean| + sum_k (|cos| + |sin|)."""
        bound = np.abs(self.mean).astype(float)
        for md in self.modes:
            bound = bound + np.abs(md.cos_amp) + np.abs(md.sin_amp)
        return float(bound.max()) if bound.size else 0.0

    def max_frequency(self) -> float:
        return max((float(np.linalg.norm(m.freq)) for m in self.modes), default=0.0)

    def min_frequency(self) -> float:
        norms = [float(np.linalg.norm(m.freq)) for m in self.modes]
        norms = [n for n in norms if n > 0]
        return min(norms) if norms else 0.0

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        """Pointwise a_ij^ab == a_ji^ba, checked on mean and amplitudes."""
        def sym(t):
            return np.allclose(t, t.transpose(1, 0, 3, 2), atol=tol)

        return sym(self.mean) and all(
            sym(m.cos_amp) and sym(m.sin_amp) for m in self.modes
        )

    def is_constant(self) -> bool:
        return len(self.modes) == 0

    def translated(self, shift) -> "TensorField":
        """The field A(. + shift); same moduli, different phases."""
        shift = np.asarray(shift, dtype=float)
        new_modes = []
        for md in self.modes:
            ph = float(md.freq @ shift)
            c, s = math.cos(ph), math.sin(ph)
            new_modes.append(
                Mode(
                    md.freq,
                    c * md.cos_amp + s * md.sin_amp,
                    c * md.sin_amp - s * md.cos_amp,
                )
            )
        return TensorField(
            self.d, self.m, self.mean, tuple(new_modes), self.mu, self.period_lattice
        )


def isotropic_field(
    d: int,
    mean_value: float,
    modes: list[tuple[np.ndarray, float, float]] = (),
    mu: float | None = None,
    period_lattice=None,
) -> TensorField:
    """Scalar field a(y) * Identity with a(y) = mean + sum of scalar modes.

    ``modes`` entries are (freq_vector, cos_amp, sin_amp).  When ``mu`` is
    omitted it is set from the amplitude budget: lo = mean - sum|amps|,
    hi = mean + sum|amps|, mu = min(lo, 1/hi).
    """
    eye = np.eye(d).reshape(d, d, 1, 1)
    mode_objs = []
    amp_sum = 0.0
    for freq, ca, sa in modes:
        freq = np.asarray(freq, dtype=float).reshape(d)
        mode_objs.append(Mode(freq, ca * eye, sa * eye))
        amp_sum += abs(ca) + abs(sa)
    if mu is None:
        lo = mean_value - amp_sum
        hi = mean_value + amp_sum
        if lo <= 0:
            raise ValueError("field not uniformly elliptic")
        mu = min(lo, 1.0 / hi)
    lattice = None
    if period_lattice is not None:
        lattice = np.asarray(period_lattice, dtype=float).reshape(d)
    return TensorField(d, 1, mean_value * eye, tuple(mode_objs), mu, lattice)


@dataclass
class EllipticityReport:
    mu_lower: float
    mu_upper: float
    passed: bool


def ellipticity_check(
    field: TensorField, sample_count: int, seed: int = 0, y_range: float = 50.0
) -> EllipticityReport:
    """Sample the quadratic form at random (y, xi) with |xi| = 1.

    Reports the min/max observed values and pass iff the claimed mu
    brackets them: mu <= min and max <= 1/mu, within 1e-12 slack.
    A fail report signals a misconfigured field, it is not an exception.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    ys = rng.uniform(-y_range, y_range, size=(sample_count, field.d))
    xis = rng.normal(size=(sample_count, field.m, field.d))
    xis /= np.linalg.norm(xis.reshape(sample_count, -1), axis=1)[:, None, None]
    a = field.evaluate_many(ys)  # (N, d, d, m, m)
    # q = a_ij^ab xi_i^a xi_j^b
    q = np.einsum("nijab,nai,nbj->n", a, xis, xis)
    lo, hi = float(q.min()), float(q.max())
    passed = (field.mu <= lo + 1e-12) and (hi <= 1.0 / field.mu + 1e-12)
    return EllipticityReport(lo, hi, passed)


def holder_modulus(field: TensorField) -> dict:
    """Certified Lipschitz bound: tau = sum_k |w_k| (|cos_k| + |sin_k|).

    Entrywise sup over the tensor; guarantees |A(x)-A(y)| <= tau |x-y|
    in the max-entry norm. Exponent lambda is 1 for trig polynomials.
    """
    shape = (field.d, field.d, field.m, field.m)
    per_entry = np.zeros(shape)
    for md in field.modes:
        per_entry += float(np.linalg.norm(md.freq)) * (
            np.abs(md.cos_amp) + np.abs(md.sin_amp)
        )
    tau = float(per_entry.max()) if per_entry.size else 0.0
    return {"tau": tau, "lambda": 1.0}


@dataclass
class RhoSearch:
    """Grid-search resolution for the almost-periodicity modulus.

    y is sampled (``y_samples`` points in [-y_range, y_range]^d), z scanned
    on a grid of step ``z_grid_step`` refined by halving until the value
    changes less than ``refine_tol`` (at most ``refine_levels`` rounds), and
    each sup-norm is sampled over a window of half-side ``domain_radius``
    with step ``window_step``.
    """

    y_samples: int = 32
    z_grid_step: float = 0.25
    domain_radius: float = 50.0
    window_step: float = 0.05
    y_range: float = 100.0
    seed: int = 0
    refine_levels: int = 3
    refine_tol: float = 1e-3

    def __post_init__(self):
        if min(self.y_samples, self.refine_levels) < 1:
            raise ValueError("search parameters must be positive")
        if min(self.z_grid_step, self.domain_radius, self.window_step) <= 0:
            raise ValueError("search parameters must be positive")


@dataclass
class RhoTable:
    """Sampled almost-periodicity modulus: value and bias interval per R."""

    radii: np.ndarray
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    search: RhoSearch | None = None

    def __post_init__(self):
        order = np.argsort(self.radii)
        self.radii = np.asarray(self.radii, dtype=float)[order]
        self.values = np.asarray(self.values, dtype=float)[order]
        self.lower = np.asarray(self.lower, dtype=float)[order]
        self.upper = np.asarray(self.upper, dtype=float)[order]
        if (self.values < 0).any():
            raise ValueError("modulus values must be nonnegative")

    def interpolate(self, r: float) -> float:
        """Monotone interpolation of the sampled modulus (log-log where
        positive, linear across zeros); clamped outside the table."""
        rs, vs = self.radii, self.values
        if r <= rs[0]:
            return float(vs[0])
        if r >= rs[-1]:
            return float(vs[-1])
        k = int(np.searchsorted(rs, r) - 1)
        r0, r1, v0, v1 = rs[k], rs[k + 1], vs[k], vs[k + 1]
        if v0 > 0 and v1 > 0:
            t = (math.log(r) - math.log(r0)) / (math.log(r1) - math.log(r0))
            return float(math.exp((1 - t) * math.log(v0) + t * math.log(v1)))
        t = (r - r0) / (r1 - r0)
        return float((1 - t) * v0 + t * v1)


def _window_points(field: TensorField, radius: float, step: float) -> np.ndarray:
    """Deterministic sup-norm sample points in [-radius, radius]^d.

    In 1D the window is the full grid; in higher dimensions a dense grid is
    unaffordable, so axis grids are combined with a low-discrepancy lattice
    of the same budget.
    """
    n1 = max(3, int(round(2 * radius / step)) + 1)
    if field.d == 1:
        return np.linspace(-radius, radius, n1).reshape(-1, 1)
    budget = min(n1 ** field.d, 20000)
    # Kronecker lattice: equidistributed, deterministic
    alphas = np.array([0.7548776662466927, 0.5698402909980532, 0.3287880547963946])
    k = np.arange(budget)[:, None]
    pts = np.mod(k * alphas[None, : field.d], 1.0)
    return (2 * pts - 1.0) * radius


def rho(field: TensorField, radius: float, search: RhoSearch | None = None) -> dict:
    """Almost-periodicity modulus at radius R.

    Estimates sup over sampled translates y of the best sup-norm match by a
    translate z with |z| <= R.  The sampled sup (over y and over the window)
    can only under-estimate and the gridded inf can only over-estimate, so
    the result carries a bias interval: ``lower`` subtracts the z-grid fill
    error tau * step * sqrt(d) / 2, ``upper`` adds the window sampling error
    tau * window_step * sqrt(d) / 2.  The y-sampling gap is not quantified.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    search = search or RhoSearch()
    tau = holder_modulus(field)["tau"]
    if field.is_constant():
        return {"value": 0.0, "lower": 0.0, "upper": 0.0, "argmin_z": None}

    mean, freqs, cos_amp, sin_amp = field.packed()
    win = _window_points(field, search.domain_radius, search.window_step)
    phase_win = win @ freqs.T
    cos_p = np.ascontiguousarray(np.cos(phase_win))
    sin_p = np.ascontiguousarray(np.sin(phase_win))

    rng = np.random.default_rng(search.seed)
    ys = rng.uniform(-search.y_range, search.y_range, size=(search.y_samples, field.d))

    def z_candidates(step: float, center: np.ndarray | None) -> np.ndarray:
        if center is None:
            axes = [np.arange(-radius, radius + step / 2, step) for _ in range(field.d)]
        else:
            axes = [
                center[ax] + np.arange(-step, step + step / 4, step / 2)
                for ax in range(field.d)
            ]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, field.d)
        keep = np.linalg.norm(grid, axis=1) <= radius + 1e-12
        return grid[keep]

    sup_val = 0.0
    step_used = search.z_grid_step
    for y in ys:
        phase_y = freqs @ y
        step = search.z_grid_step
        zs = z_candidates(step, None)
        best, iz = kernels.shift_inf(
            cos_p, sin_p, cos_amp, sin_amp, phase_y, np.ascontiguousarray(zs @ freqs.T)
        )
        best_z = zs[iz]
        for _ in range(search.refine_levels - 1):
            step /= 2
            zs = z_candidates(step, best_z)
            val, iz = kernels.shift_inf(
                cos_p, sin_p, cos_amp, sin_amp, phase_y,
                np.ascontiguousarray(zs @ freqs.T),
            )
            if val < best:
                improved = best - val
                best, best_z = val, zs[iz]
                if improved < search.refine_tol:
                    break
            else:
                break
        if best > sup_val:
            sup_val = best
        step_used = min(step_used, step)

    half_fill = tau * step_used * math.sqrt(field.d) / 2
    win_bias = tau * search.window_step * math.sqrt(field.d) / 2
    return {
        "value": sup_val,
        "lower": max(0.0, sup_val - half_fill),
        "upper": sup_val + win_bias,
        "z_step": step_used,
    }


def rho_table(field: TensorField, radii, search: RhoSearch | None = None) -> RhoTable:
    """Sweep ``rho`` over the given radii."""
    rows = [rho(field, r, search) for r in radii]
    return RhoTable(
        np.asarray(list(radii), dtype=float),
        np.array([r["value"] for r in rows]),
        np.array([r["lower"] for r in rows]),
        np.array([r["upper"] for r in rows]),
        search,
    )


def decay_fit(table: RhoTable) -> dict:
    """Least-squares fit rho(R) ~ C0 [log R]^(-N) on entries with R >= 4.

    Entries with rho == 0 are skipped and reported via the
    ``compactly_supported`` flag; a degenerate fit (all rho equal) leaves N
    undefined.  N is the empirical decay exponent to hold against the
    3/2, 5/2 and 3 thresholds that gate the workbench's estimates.
    """
    mask = (table.radii >= 4.0) & (table.values > 0)
    if not mask.any():
        return {
            "C0": 0.0,
            "N": None,
            "residual": 0.0,
            "compactly_supported": True,
            "degenerate": False,
        }
    if mask.sum() < 3:
        raise ValueError("need at least 3 entries with R >= 4 and rho > 0")
    x = np.log(np.log(table.radii[mask]))
    y = np.log(table.values[mask])
    if np.ptp(y) < 1e-12:
        return {
            "C0": float(np.exp(y[0])),
            "N": None,
            "residual": 0.0,
            "compactly_supported": False,
            "degenerate": True,
        }
    coeffs = np.polyfit(x, y, 1)
    fit = np.polyval(coeffs, x)
    residual = float(np.sqrt(np.mean((y - fit) ** 2)))
    return {
        "C0": float(np.exp(coeffs[1])),
        "N": float(-coeffs[0]),
        "residual": residual,
        "compactly_supported": False,
        "degenerate": False,
    }
