"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``_numba``; the two must agree to
floating-point roundoff (summation order may differ).
"""

import numpy as np


def csr_matvec(data, indices, indptr, x):
    """y = M @ x for a CSR matrix given by (data, indices, indptr)."""
    prod = data * x[indices]
    # reduceat misbehaves on empty rows; guard by prepending a zero segment sum
    n_rows = indptr.shape[0] - 1
    y = np.zeros(n_rows, dtype=np.float64)
    nonempty = indptr[:-1] != indptr[1:]
    if prod.size:
        sums = np.add.reduceat(prod, indptr[:-1][nonempty])
        y[nonempty] = sums
    return y


def trig_eval(points, mean, freqs, cos_amp, sin_amp):
    """Evaluate mean + sum_k cos_amp_k cos(w_k.x) + sin_amp_k sin(w_k.x).

    points: (N, d); mean: (E,); freqs: (K, d); cos_amp/sin_amp: (K, E).
    Returns (N, E).
    """
    out = np.tile(mean, (points.shape[0], 1))
    if freqs.shape[0]:
        phase = points @ freqs.T  # (N, K)
        out += np.cos(phase) @ cos_amp + np.sin(phase) @ sin_amp
    return out


def shift_inf(cos_p, sin_p, cos_amp, sin_amp, phase_y, phase_z):
    """inf over shifts z of sup over window x of the largest entry of
    |A(x+y) - A(x+z)|.

    cos_p/sin_p: (Nx, K) precomputed cos/sin of the window phases w_k.x;
    phase_y: (K,) phases w_k.y; phase_z: (Nz, K) phases w_k.z.
    Returns (inf_value, argmin_z).
    """
    cy, sy = np.cos(phase_y), np.sin(phase_y)
    cz, sz = np.cos(phase_z), np.sin(phase_z)  # (Nz, K)
    alpha = cy[None, :] - cz  # (Nz, K)
    beta = sy[None, :] - sz
    best = np.inf
    best_iz = 0
    for iz in range(phase_z.shape[0]):
        p = cos_amp * alpha[iz][:, None] + sin_amp * beta[iz][:, None]
        q = sin_amp * alpha[iz][:, None] - cos_amp * beta[iz][:, None]
        diff = cos_p @ p + sin_p @ q  # (Nx, E)
        sup = np.abs(diff).max() if diff.size else 0.0
        if sup < best:
            best = sup
            best_iz = iz
    return best, best_iz


def interp_periodic(values, n_axis, origin, h, points):
    """Multilinear interpolation on a periodic node grid.

    values: (nnodes, C) node-major (C-order over the d axes);
    n_axis: (d,) nodes per axis; points: (N, d). Returns (N, C).
    """
    d = n_axis.shape[0]
    npts = points.shape[0]
    t = (points - origin[None, :]) / h[None, :]
    i0 = np.floor(t).astype(np.int64)
    frac = t - i0
    i0 = np.mod(i0, n_axis[None, :])
    strides = np.ones(d, dtype=np.int64)
    for ax in range(d - 2, -1, -1):
        strides[ax] = strides[ax + 1] * n_axis[ax + 1]
    out = np.zeros((npts, values.shape[1]), dtype=np.float64)
    for corner in range(1 << d):
        idx = np.zeros(npts, dtype=np.int64)
        w = np.ones(npts, dtype=np.float64)
        for ax in range(d):
            hi = (corner >> ax) & 1
            k = np.mod(i0[:, ax] + hi, n_axis[ax])
            idx += k * strides[ax]
            w *= frac[:, ax] if hi else 1.0 - frac[:, ax]
        out += w[:, None] * values[idx]
    return out
