"""Compiled trilinear sampling kernels and their adjoints.

All positions are in continuous *index* coordinates: the center of cell
``(i, j, k)`` sits at ``(i, j, k)``. Positions outside the cell-center hull
are clamped before interpolation, so the derivative with respect to a
clamped coordinate is zero.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _axis(g, n):
    # returns (lower index, upper index, fraction, d fraction / d g)
    if g <= 0.0:
        return 0, min(1, n - 1), 0.0, 0.0
    if g >= n - 1:
        return n - 1, n - 1, 0.0, 0.0
    i0 = int(math.floor(g))
    if i0 > n - 1:
        i0 = n - 1
    i1 = min(i0 + 1, n - 1)
    return i0, i1, g - i0, 1.0


@njit(cache=True)
def interp(F, P, out):
    """out[c, m] = trilinear sample of F[c] at P[:, m]."""
    C, nx, ny, nz = F.shape
    for m in range(P.shape[1]):
        i0, i1, tx, _ = _axis(P[0, m], nx)
        j0, j1, ty, _ = _axis(P[1, m], ny)
        k0, k1, tz, _ = _axis(P[2, m], nz)
        for c in range(C):
            f = F[c]
            a = f[i0, j0, k0] + tx * (f[i1, j0, k0] - f[i0, j0, k0])
            b = f[i0, j1, k0] + tx * (f[i1, j1, k0] - f[i0, j1, k0])
            d = f[i0, j0, k1] + tx * (f[i1, j0, k1] - f[i0, j0, k1])
            e = f[i0, j1, k1] + tx * (f[i1, j1, k1] - f[i0, j1, k1])
            lo = a + ty * (b - a)
            hi = d + ty * (e - d)
            out[c, m] = lo + tz * (hi - lo)


@njit(cache=True)
def interp_bounds(F, P, lo, hi):
    """Min and max of the 8 source values used by each sample."""
    C, nx, ny, nz = F.shape
    for m in range(P.shape[1]):
        i0, i1, _, _ = _axis(P[0, m], nx)
        j0, j1, _, _ = _axis(P[1, m], ny)
        k0, k1, _, _ = _axis(P[2, m], nz)
        for c in range(C):
            f = F[c]
            v = f[i0, j0, k0]
            mn = v
            mx = v
            for ii in (i0, i1):
                for jj in (j0, j1):
                    for kk in (k0, k1):
                        v = f[ii, jj, kk]
                        if v < mn:
                            mn = v
                        if v > mx:
                            mx = v
            lo[c, m] = mn
            hi[c, m] = mx


@njit(cache=True)
def interp_adjoint(G, P, F, gF, gP):
    """Accumulate adjoints of ``interp``.

    G is the output cotangent (C, M). Adds the transpose scatter into gF
    (shape of F) and, if gP has columns, the position cotangent into gP.
    """
    C, nx, ny, nz = gF.shape
    want_pos = gP.shape[1] > 0
    for m in range(P.shape[1]):
        i0, i1, tx, sx = _axis(P[0, m], nx)
        j0, j1, ty, sy = _axis(P[1, m], ny)
        k0, k1, tz, sz = _axis(P[2, m], nz)
        wx0 = 1.0 - tx
        wy0 = 1.0 - ty
        wz0 = 1.0 - tz
        px = 0.0
        py = 0.0
        pz = 0.0
        for c in range(C):
            g = G[c, m]
            if g == 0.0:
                continue
            h = gF[c]
            h[i0, j0, k0] += g * wx0 * wy0 * wz0
            h[i1, j0, k0] += g * tx * wy0 * wz0
            h[i0, j1, k0] += g * wx0 * ty * wz0
            h[i1, j1, k0] += g * tx * ty * wz0
            h[i0, j0, k1] += g * wx0 * wy0 * tz
            h[i1, j0, k1] += g * tx * wy0 * tz
            h[i0, j1, k1] += g * wx0 * ty * tz
            h[i1, j1, k1] += g * tx * ty * tz
            if want_pos:
                f = F[c]
                f000 = f[i0, j0, k0]
                f100 = f[i1, j0, k0]
                f010 = f[i0, j1, k0]
                f110 = f[i1, j1, k0]
                f001 = f[i0, j0, k1]
                f101 = f[i1, j0, k1]
                f011 = f[i0, j1, k1]
                f111 = f[i1, j1, k1]
                if sx != 0.0:
                    px += g * (wy0 * wz0 * (f100 - f000) + ty * wz0 * (f110 - f010)
                               + wy0 * tz * (f101 - f001) + ty * tz * (f111 - f011))
                if sy != 0.0:
                    py += g * (wx0 * wz0 * (f010 - f000) + tx * wz0 * (f110 - f100)
                               + wx0 * tz * (f011 - f001) + tx * tz * (f111 - f101))
                if sz != 0.0:
                    pz += g * (wx0 * wy0 * (f001 - f000) + tx * wy0 * (f101 - f100)
                               + wx0 * ty * (f011 - f010) + tx * ty * (f111 - f110))
        if want_pos:
            gP[0, m] += px
            gP[1, m] += py
            gP[2, m] += pz


def sample(F, P):
    """Trilinear samples of ``F`` (C, nx, ny, nz) at index positions ``P`` (3, M)."""
    out = np.empty((F.shape[0], P.shape[1]))
    interp(F, P, out)
    return out


def bounds(F, P):
    lo = np.empty((F.shape[0], P.shape[1]))
    hi = np.empty_like(lo)
    interp_bounds(F, P, lo, hi)
    return lo, hi


_NO_POS = np.zeros((3, 0))


def sample_adjoint(G, P, F, gF, gP=None):
    interp_adjoint(G, P, F, gF, _NO_POS if gP is None else gP)
