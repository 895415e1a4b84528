"""Fused selective-scan kernels (numba).

Single-core counterpart of the vectorized path in :mod:`textssm.selective`.
The recurrence runs in time order with the ``(D, N)`` state held in a small
contiguous buffer, so ``A_bar`` and ``B_bar * x`` are never materialized.
Only the states needed for the backward pass are written out.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _phi(x, em1, delta, a):
    # em1 = expm1(x), x = delta * a
    if abs(x) < 1e-6:
        return delta * (1.0 + x / 2.0 + x * x / 6.0)
    return em1 / a


@njit(cache=True)
def _dphi_da(x, em1, delta, a):
    if abs(x) < 1e-3:
        return delta * delta * (0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x / 30.0)))
    return (x * (em1 + 1.0) - em1) / (a * a)


@njit(cache=True)
def scan_forward(u, delta, A, B, C, h_out, y_out):
    M, L, D = u.shape
    N = A.shape[1]
    h = np.zeros((D, N))
    for m in range(M):
        h[:] = 0.0
        for t in range(L):
            for d in range(D):
                dl = delta[m, t, d]
                ud = u[m, t, d]
                acc = 0.0
                for n in range(N):
                    an = A[d, n]
                    x = dl * an
                    em1 = math.expm1(x)
                    hn = (em1 + 1.0) * h[d, n] + _phi(x, em1, dl, an) * B[m, t, n] * ud
                    h[d, n] = hn
                    h_out[m, t, d, n] = hn
                    acc += C[m, t, n] * hn
                y_out[m, t, d] = acc


@njit(cache=True)
def scan_backward(u, delta, A, B, C, h, gy, g_u, g_delta, g_A, g_B, g_C):
    M, L, D = u.shape
    N = A.shape[1]
    # lam carries dL/dh_t; carry holds A_bar_{t+1} * lam_{t+1}
    carry = np.zeros((D, N))
    for m in range(M):
        carry[:] = 0.0
        for t in range(L - 1, -1, -1):
            for d in range(D):
                dl = delta[m, t, d]
                ud = u[m, t, d]
                g = gy[m, t, d]
                gu = 0.0
                gd = 0.0
                for n in range(N):
                    an = A[d, n]
                    x = dl * an
                    em1 = math.expm1(x)
                    ab = em1 + 1.0
                    bn = B[m, t, n]
                    lt = g * C[m, t, n] + carry[d, n]
                    hp = h[m, t - 1, d, n] if t > 0 else 0.0
                    g_abar = lt * hp
                    g_C[m, t, n] += g * h[m, t, d, n]
                    lp = lt * _phi(x, em1, dl, an)
                    gu += lp * bn
                    g_B[m, t, n] += lp * ud
                    g_phi = lt * bn * ud
                    gd += (g_abar * an + g_phi) * ab
                    g_A[d, n] += g_abar * ab * dl + g_phi * _dphi_da(x, em1, dl, an)
                    carry[d, n] = ab * lt
                g_u[m, t, d] = gu
                g_delta[m, t, d] = gd


def fused_forward(u, delta, A, B, C):
    lead = u.shape[:-2]
    L, D = u.shape[-2:]
    N = A.shape[1]
    M = int(np.prod(lead)) if lead else 1
    uf = np.ascontiguousarray(u.reshape(M, L, D))
    df = np.ascontiguousarray(delta.reshape(M, L, D))
    Bf = np.ascontiguousarray(B.reshape(M, L, N))
    Cf = np.ascontiguousarray(C.reshape(M, L, N))
    h = np.empty((M, L, D, N))
    y = np.zeros((M, L, D))
    scan_forward(uf, df, np.ascontiguousarray(A), Bf, Cf, h, y)
    return y.reshape(u.shape), h


def fused_backward(u, delta, A, B, C, h, gy):
    lead = u.shape[:-2]
    L, D = u.shape[-2:]
    N = A.shape[1]
    M = int(np.prod(lead)) if lead else 1
    uf = np.ascontiguousarray(u.reshape(M, L, D))
    df = np.ascontiguousarray(delta.reshape(M, L, D))
    Bf = np.ascontiguousarray(B.reshape(M, L, N))
    Cf = np.ascontiguousarray(C.reshape(M, L, N))
    gyf = np.ascontiguousarray(gy.reshape(M, L, D))
    g_u = np.zeros((M, L, D))
    g_delta = np.zeros((M, L, D))
    g_A = np.zeros((D, N))
    g_B = np.zeros((M, L, N))
    g_C = np.zeros((M, L, N))
    scan_backward(uf, df, np.ascontiguousarray(A), Bf, Cf, h, gyf, g_u, g_delta, g_A, g_B, g_C)
    return (
        g_u.reshape(u.shape),
        g_delta.reshape(u.shape),
        g_A,
        g_B.reshape(B.shape),
        g_C.reshape(C.shape),
    )
