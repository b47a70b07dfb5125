"""Vectorised adaptive Dormand-Prince 5(4) stepping.

Many independent ODE systems are advanced in lock step, each with its own
step size and its own interval length.  The right-hand side only ever sees
the still-active systems, selected by an index array.
"""
from __future__ import annotations

import numpy as np

from .errors import PoleError

RTOL = 1e-9
ATOL = 1e-11
CLAMP = 0.2

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                    -92097 / 339200, 187 / 2100, 1 / 40])


def integrate(rhs, y0, length, *, h0=None, dist=None, swallow_eps=0.0,
              rtol=RTOL, atol=ATOL, clamp=CLAMP, max_iter=200000):
    """Advance each system over sigma in [0, length[i]].

    Parameters
    ----------
    rhs : callable
        ``rhs(sigma, y, idx)`` returning dy/dsigma for the rows ``idx``;
        ``sigma`` and ``y`` are already restricted to those rows.
    y0 : ndarray, shape (m, d), complex or real
    length : ndarray, shape (m,)
    h0 : ndarray, optional
        Initial step guesses.
    dist : callable, optional
        ``dist(sigma, y, idx)`` giving the distance to the nearest
        singularity; steps are clamped so that one step moves the first
        state component by at most ``clamp * dist``.  Further components
        (derivatives, clocks) ride along unclamped.
    swallow_eps : float
        Systems whose distance drops below this are frozen and flagged.

    Returns
    -------
    y : ndarray
        State at the end of the interval (or at the freeze point).
    h : ndarray
        Last accepted step, usable as the next initial guess.
    status : ndarray of int
        0 finished, 1 swallowed, 2 step underflow.
    sigma : ndarray
        Parameter reached by each system.
    """
    y = np.array(y0, copy=True)
    m = y.shape[0]
    length = np.broadcast_to(np.asarray(length, dtype=float), (m,)).copy()
    sig = np.zeros(m)
    h = np.full(m, 1e-3) if h0 is None else np.array(h0, dtype=float, copy=True)
    h = np.minimum(np.maximum(h, 1e-14), np.maximum(length, 1e-300))
    status = np.zeros(m, dtype=int)
    active = length > 0
    it = 0
    while active.any():
        it += 1
        if it > max_iter:
            status[active] = 2
            break
        idx = np.flatnonzero(active)
        s = sig[idx]
        yy = y[idx]
        hh = np.minimum(h[idx], length[idx] - s)
        if dist is not None:
            d = dist(s, yy, idx)
            sw = d < swallow_eps
            if sw.any():
                status[idx[sw]] = 1
                active[idx[sw]] = False
                keep = ~sw
                idx, s, yy, hh, d = idx[keep], s[keep], yy[keep], hh[keep], d[keep]
                if idx.size == 0:
                    continue
        k = [None] * 7
        try:
            k[0] = rhs(s, yy, idx)
        except PoleError:
            status[idx] = 2
            active[idx] = False
            continue
        if dist is not None:
            speed = np.abs(k[0][:, 0])
            with np.errstate(divide="ignore"):
                hh = np.minimum(hh, np.where(speed > 0, clamp * d / speed, np.inf))
        hcol = hh[:, None]
        try:
            for j in range(1, 7):
                acc = sum(a * kk for a, kk in zip(_A[j], k[:j]) if a != 0.0)
                k[j] = rhs(s + _C[j] * hh, yy + hcol * acc, idx)
        except PoleError:
            h[idx] = 0.25 * hh
            bad = h[idx] < 1e-15 * np.maximum(1.0, np.abs(s))
            status[idx[bad]] = 2
            active[idx[bad]] = False
            continue
        ynew = yy + hcol * sum(b * kk for b, kk in zip(_B, k) if b != 0.0)
        err = hcol * sum(e * kk for e, kk in zip(_E, k) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(yy), np.abs(ynew))
        en = np.max(np.abs(err) / scale, axis=1)
        en = np.where(np.isfinite(en), en, np.inf)
        ok = en <= 1.0
        fac = np.where(en > 0, 0.9 * np.power(np.maximum(en, 1e-30), -0.2), 5.0)
        fac = np.clip(fac, 0.2, 5.0)
        acc_idx = idx[ok]
        y[acc_idx] = ynew[ok]
        sig[acc_idx] = np.where(length[acc_idx] - (s[ok] + hh[ok]) <= 1e-15 * np.maximum(1.0, length[acc_idx]),
                                length[acc_idx], s[ok] + hh[ok])
        hn = hh * fac
        # a step cut short by the interval end says nothing about accuracy
        short = ok & (hh < h[idx])
        hn = np.where(short, np.maximum(hn, h[idx]), hn)
        h[idx] = hn
        under = (~ok) & (hn < 1e-15 * np.maximum(1.0, np.abs(s)))
        status[idx[under]] = 2
        done = sig >= length
        active &= ~done
        active[idx[under]] = False
    return y, h, status, sig
