"""Compiled loops for the fused selective scan (sequential order).

Same arithmetic as the numpy path in :func:`numcore.selective_scan_fused`,
but one pass over ``[B, L, D, N]`` instead of a chain of full-size
temporaries.  Only imported when numba is installed.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def forward(x, delta, A, Bm, Cm):
    Bsz, L, D = x.shape
    N = A.shape[1]
    h = np.empty((Bsz, L, D, N))
    e = np.empty((Bsz, L, D, N))
    y = np.zeros((Bsz, L, D))
    for b in range(Bsz):
        for t in range(L):
            for d in range(D):
                dt = delta[b, t, d]
                xv = x[b, t, d]
                acc = 0.0
                for n in range(N):
                    z = dt * A[d, n]
                    em1 = np.expm1(z)
                    e[b, t, d, n] = em1
                    prev = h[b, t - 1, d, n] if t > 0 else 0.0
                    hv = (em1 + 1.0) * prev + em1 * (Bm[b, t, n] / A[d, n]) * xv
                    h[b, t, d, n] = hv
                    acc += Cm[b, t, n] * hv
                y[b, t, d] = acc
    return y, h, e


@numba.njit(cache=True)
def backward(gy, x, delta, A, Bm, Cm, h, e):
    """``e`` holds ``expm1(delta * A)`` saved by :func:`forward`."""
    Bsz, L, D = x.shape
    N = A.shape[1]
    gx = np.zeros((Bsz, L, D))
    gdelta = np.zeros((Bsz, L, D))
    gA = np.zeros((D, N))
    gB = np.zeros((Bsz, L, N))
    gC = np.zeros((Bsz, L, N))
    gh = np.zeros((D, N))
    for b in range(Bsz):
        gh[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for d in range(D):
                dt = delta[b, t, d]
                xv = x[b, t, d]
                g = gy[b, t, d]
                gxa = 0.0
                gda = 0.0
                for n in range(N):
                    a_val = A[d, n]
                    if t + 1 < L:
                        ghv = gh[d, n] * (e[b, t + 1, d, n] + 1.0) + g * Cm[b, t, n]
                    else:
                        ghv = g * Cm[b, t, n]
                    gh[d, n] = ghv
                    gC[b, t, n] += g * h[b, t, d, n]
                    em1 = e[b, t, d, n]
                    w = Bm[b, t, n] / a_val * xv
                    prev = h[b, t - 1, d, n] if t > 0 else 0.0
                    gz = (em1 + 1.0) * ghv * (prev + w)
                    q = ghv * em1 / a_val
                    gxa += q * Bm[b, t, n]
                    gB[b, t, n] += xv * q
                    gA[d, n] += gz * dt - q * w
                    gda += gz * a_val
                gx[b, t, d] = gxa
                gdelta[b, t, d] = gda
    return gx, gdelta, gA, gB, gC
