"""Annulus SLE_{8/3} and the candidate restriction martingale.

A slit hull A is generated by constant driving c for time tau, so that
A_p minus A has modulus p0 = p - tau and phi~_A is the covering flow of
that deterministic evolution recentred to fix 0.  Along an SLE_{8/3} path
the map f~_t = psi~_{h(t)} o phi~_A o phi~_t^{-1} is real analytic near
xi(t) and obeys the transport equation

    d_t f~_t(w) = f~_t'(xi)^2 H_{p0-h}(f~_t(w) - f~_t(xi)) - f~_t'(w) H_{p-t}(w - xi),

with the capacity clock h'(t) = f~_t'(xi(t))^2.  We carry f~_t on seven
real nodes xi(t) + j delta, j = -3..3, that move with the driving; the
node at xi(t) uses the removable limit -3 f~''(xi).  The stencil is only
locally closed and drifts from f~ over longer times, so it serves the
short-time checks.

The Monte Carlo instead carries points of the slit's image A_t under the
covering flow and recovers f~_t'(xi) and h(t) by unzipping A_t with
vertical slits.  A path hits A when an image point is swallowed or xi(t)
comes within ``HIT_EPS`` of the image polyline; from then on M = 0.

The functional

    M_t = f~_t'(xi)^{5/8} exp(-(5/8) int_{p0-h(t)}^{p-t} (S_r - 1/6) dr)

is the bounded martingale under test.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _ode
from . import loewner as lw
from .endpoint import sample_paths
from .errors import (BoundViolationError, DomainError, IntegratorError,
                     StencilCollapseError, SwallowedError)
from .specialfn import PI, h_kernel, integral_S

KAPPA = 8.0 / 3.0
ALPHA = 5.0 / 8.0
EPS_HIT = 1e-3
F_PRIME_FLOOR = 1e-4
DELTA_MIN = 1e-3
WIDTH_RATIO = 12.0  # required distance to A_t in units of delta
RTOL = 1e-8
ATOL = 1e-10

_J = np.arange(-3, 4)
_V = np.vander(_J.astype(float), 7, increasing=True)
_VINV = np.linalg.inv(_V)
_K = np.arange(7)


def _eval_rows(v, order=0):
    # rows mapping node values (unit spacing) to the order-th derivative at v
    v = np.atleast_1d(np.asarray(v, dtype=complex))
    k = _K[order:]
    coef = np.ones(k.size)
    for j in range(order):
        coef = coef * (k - j)
    rows = np.zeros((v.size, 7), dtype=complex)
    rows[:, order:] = coef * v[:, None] ** (k - order)
    out = rows @ _VINV
    return out.real if np.all(v.imag == 0) else out


_D1 = _eval_rows(_J, 1)
_D2 = _eval_rows(_J, 2)
_D3 = _eval_rows(_J, 3)
_HALF = _eval_rows(_J / 2.0)


def default_delta(dt: float, kappa: float = KAPPA) -> float:
    """Node spacing max(1e-3, 5 sqrt(kappa dt))."""
    return max(DELTA_MIN, 5.0 * math.sqrt(kappa * dt))


# ----------------------------------------------------------------- the hull

@dataclass
class HullSpec:
    """Slit hull generated by constant driving ``c`` over ``[0, tau]``."""

    p: float
    c: float
    tau: float
    p0: float
    phiA_prime_0: float
    shift: float
    driving: lw.DrivingPath
    polyline: np.ndarray  # lifted points of the slit, base first

    def phi_A(self, z):
        """phi~_A(z), NaN for points swallowed by the slit."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        d = self.driving
        vals = np.broadcast_to(d.values, (z.size, d.values.size))
        _, out, _ = lw.evolve_batch(self.p, d.times, vals, z, self.tau,
                                    swallow_eps=1e-12, record=False)
        return out[:, 0] - self.shift

    def image_points(self, n: int) -> np.ndarray:
        """Base and ``n`` points of the (vertical) slit, equally spaced in height."""
        top = float(self.polyline[-1].imag)
        return self.c + 1j * top * np.linspace(0.0, 1.0, n + 1)

    def formula(self, alpha: float = ALPHA) -> float:
        """phi~_A'(0)^alpha exp(-alpha int_{p0}^{p} (S_r - 1/6) dr)."""
        e = float(integral_S(self.p0, self.p)) - (self.p - self.p0) / 6.0
        return self.phiA_prime_0 ** alpha * math.exp(-alpha * e)


def make_slit_hull(p: float, c: float, tau: float, n_poly: int = 9,
                   dt: float | None = None) -> HullSpec:
    """Hull of the annulus Loewner evolution driven by the constant ``c``.

    Raises
    ------
    DomainError
        If tau is not in (0, p) or c is a multiple of 2 pi.
    """
    if not 0 < tau < p:
        raise DomainError(f"tau must lie in (0, p), got {tau}")
    if abs(lw.wrap(c)) < 1e-9:
        raise DomainError("the hull must avoid the start point: c mod 2 pi != 0")
    dt = tau / 400 if dt is None else dt
    drv = lw.constant_driving(c, p, dt, tau)
    _, phi, dphi = lw.evolve_derivative(drv, 0j, tau)
    shift, d0 = float(phi[-1].real), float(dphi[-1].real)
    s = tau * np.linspace(0.0, 1.0, n_poly)[1:]
    poly = np.concatenate([[complex(c)], lw.compute_trace(drv, s).lifts])
    return HullSpec(float(p), float(c), float(tau), float(p - tau), d0, shift, drv, poly)


# --------------------------------------------------------------- pair flow

@dataclass
class RestrictionSample:
    """One path of the pair flow, recorded at ``t_grid``.

    After a stop (``survived`` false) the arrays hold the stopped values.
    """

    t_grid: np.ndarray
    xi: np.ndarray
    f_prime: np.ndarray
    f_second: np.ndarray
    eta: np.ndarray
    h: np.ndarray
    p: float
    p0: float
    survived: bool
    T_A: float
    nodes: np.ndarray = field(default=None)
    delta: float = float("nan")


@dataclass
class PairBatch:
    """Many paths of the pair flow recorded at common times."""

    t_grid: np.ndarray
    f_prime: np.ndarray
    f_second: np.ndarray
    eta: np.ndarray
    h: np.ndarray
    xi: np.ndarray
    p: float
    p0: float
    T_A: np.ndarray  # nan for paths that were never stopped
    nodes: np.ndarray
    delta: np.ndarray

    @property
    def survived(self):
        return np.isnan(self.T_A)

    def sample(self, i: int) -> RestrictionSample:
        return RestrictionSample(self.t_grid, self.xi[i], self.f_prime[i], self.f_second[i],
                                 self.eta[i], self.h[i], self.p, self.p0, bool(self.survived[i]),
                                 float(self.p if self.survived[i] else self.T_A[i]),
                                 self.nodes[i], float(self.delta[i]))


def _rhs_factory(p, p0, xa, slope, ta, n_poly):
    def rhs(s, yy, idx, delta):
        t = ta + s
        x = xa[idx] + slope[idx] * s
        d = delta[idx][:, None]
        F = yy[:, :7].real
        hh = yy[:, 7].real
        dF = (F @ _D1.T) / d
        d2 = (F @ _D2[3]) / d[:, 0] ** 2
        fp = dF[:, 3]
        u = _J * d
        r_img = (p0 - hh)[:, None]
        r_dom = (p - t)[:, None]
        off = np.array([0, 1, 2, 4, 5, 6])
        a = h_kernel(F[:, off] - F[:, 3:4] + 0j, np.broadcast_to(r_img, (F.shape[0], 6)))[0].real
        b = h_kernel(u[:, off] + 0j, np.broadcast_to(r_dom, (F.shape[0], 6)))[0].real
        out = np.empty(yy.shape, dtype=complex)
        out[:, off] = fp[:, None] ** 2 * a - dF[:, off] * b
        out[:, 3] = -3.0 * d2
        out[:, :7] += slope[idx][:, None] * dF
        out[:, 7] = fp ** 2
        if n_poly:
            z = yy[:, 8:]
            out[:, 8:] = h_kernel(z - x[:, None], np.broadcast_to(r_dom, z.shape))[0]
        return out
    return rhs


def _pair_flow(hull: HullSpec, times, vals, t_end, delta0, rec_times, rtol=RTOL, atol=ATOL,
               eps_hit=EPS_HIT, floor=F_PRIME_FLOOR, track_hull=True):
    times = np.asarray(times, dtype=float)
    vals = np.atleast_2d(np.asarray(vals, dtype=float))
    m = vals.shape[0]
    p, p0 = hull.p, hull.p0
    rec_times = np.asarray(rec_times, dtype=float)
    if np.any(rec_times > t_end + 1e-12):
        raise DomainError("record times must not exceed t_end")
    grid = np.union1d(times[times < t_end - 1e-14], np.append(rec_times, t_end))
    grid = grid[np.concatenate([[True], np.diff(grid) > 1e-12])]
    xg = np.stack([np.interp(grid, times, v) for v in vals])
    rec_idx = np.searchsorted(grid, rec_times - 1e-12)
    poly = hull.polyline if track_hull else np.zeros(0, dtype=complex)
    n_poly = poly.size
    # initial stencil: shrink until it fits the distance to A
    d_init = float(np.min(lw._cdist(poly))) if n_poly else np.inf
    delta = delta0
    while WIDTH_RATIO * delta > d_init and delta / 2 >= DELTA_MIN:
        delta /= 2
    F0 = hull.phi_A(_J * delta).real
    if np.any(~np.isfinite(F0)):
        raise StencilCollapseError("initial stencil meets the hull")
    y = np.zeros((m, 8 + n_poly), dtype=complex)
    y[:, :7] = F0
    y[:, 8:] = poly
    dl = np.full(m, delta)
    hstep = np.full(m, grid[1] - grid[0] if grid.size > 1 else 1e-3)
    stopped = np.full(m, np.nan)
    shape = (m, rec_times.size)
    rec = {k: np.full(shape, np.nan) for k in ("fp", "f2", "eta", "h")}

    def snapshot(rows, col):
        d = dl[rows]
        F = y[rows, :7].real
        rec["fp"][rows, col] = (F @ _D1[3]) / d
        rec["f2"][rows, col] = (F @ _D2[3]) / d ** 2
        rec["eta"][rows, col] = F[:, 3]
        rec["h"][rows, col] = y[rows, 7].real

    alive = np.ones(m, dtype=bool)
    for c in np.flatnonzero(rec_idx == 0):
        snapshot(np.arange(m), c)
    for j in range(grid.size - 1):
        ta, tb = grid[j], grid[j + 1]
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xa = xg[idx, j]
        slope = (xg[idx, j + 1] - xa) / (tb - ta)
        base = _rhs_factory(p, p0, xa, slope, ta, n_poly)
        dsub = dl[idx]

        def rhs(s, yy, sub, base=base, dsub=dsub):
            return base(s, yy, sub, dsub)

        yn, hn, st, _ = _ode.integrate(rhs, y[idx], tb - ta, h0=hstep[idx],
                                       rtol=rtol, atol=atol)
        if np.any(st != 0):
            raise IntegratorError(f"pair flow failed near t={ta:.6g}")
        y[idx] = yn
        hstep[idx] = hn
        # stopping and stencil adaptation at the new grid time
        F = yn[:, :7].real
        fp = (F @ _D1[3]) / dl[idx]
        dist = np.min(lw._cdist(yn[:, 8:] - xg[idx, j + 1][:, None]), axis=1) if n_poly \
            else np.full(idx.size, np.inf)
        for _ in range(30):
            wide = (WIDTH_RATIO * dl[idx] > dist) & (dl[idx] / 2 >= DELTA_MIN)
            if not wide.any():
                break
            w = idx[wide]
            # re-sample the interpolant on the halved stencil
            y[w, :7] = y[w, :7].real @ _HALF.T
            dl[w] /= 2
        too_close = (dist < eps_hit) | (WIDTH_RATIO * dl[idx] > 4 * dist)
        too_flat = fp < floor
        modulus_gone = y[idx, 7].real >= p0 - 1e-9
        stop = too_close | too_flat | modulus_gone
        for c in np.flatnonzero(rec_idx == j + 1):
            snapshot(idx, c)
        if stop.any():
            s_rows = idx[stop]
            stopped[s_rows] = tb
            alive[s_rows] = False
            # hold the stopped values at later record times
            later = rec_idx > j + 1
            for c in np.flatnonzero(later):
                snapshot(s_rows, c)
    xi_rec = np.stack([np.interp(rec_times, times, v) for v in vals])
    return PairBatch(rec_times, rec["fp"], rec["f2"], rec["eta"], rec["h"], xi_rec, p, p0,
                     stopped, y[:, :7].real.copy(), dl.copy())


def evolve_pair(hull: HullSpec, xi: lw.DrivingPath, stencil_halfwidth: float | None = None,
                t_end: float | None = None, record_times=None,
                rtol: float = RTOL, atol: float = ATOL) -> RestrictionSample:
    """Advance f~_t on a moving stencil along one driving path.

    Parameters
    ----------
    hull : HullSpec
    xi : DrivingPath
        Driving with kappa = 8/3 (other values only for diagnostics).
    stencil_halfwidth : float, optional
        Initial half-width 3 delta of the stencil; the default uses
        delta = max(1e-3, 5 sqrt(kappa dt)).
    t_end : float, optional
        Defaults to the end of the driving grid.
    record_times : array_like, optional
        Defaults to the driving grid up to ``t_end``.
    """
    if xi.p != hull.p:
        raise DomainError("driving and hull moduli differ")
    t_end = xi.t_max if t_end is None else t_end
    if not 0 < t_end <= xi.t_max + 1e-12:
        raise DomainError("t_end must lie in (0, t_max]")
    delta = default_delta(xi.dt) if stencil_halfwidth is None else stencil_halfwidth / 3
    if record_times is None:
        record_times = np.append(xi.times[xi.times < t_end - 1e-14], t_end)
    b = _pair_flow(hull, xi.times, xi.values[None, :], t_end, delta, record_times, rtol, atol)
    return b.sample(0)


# --------------------------------------------------------------- functional

def _exponent(p, p0, t, h):
    a = p0 - np.asarray(h, dtype=float)
    b = p - np.asarray(t, dtype=float)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    sign = np.where(b >= a, 1.0, -1.0)
    ok = lo > 0
    I = np.full(np.shape(lo), np.nan)
    I[ok] = integral_S(lo[ok], hi[ok])
    return sign * I - (b - a) / 6.0


def _held_times(sample):
    # time at which each recorded value was frozen (the record time before a stop)
    t = np.asarray(sample.t_grid, dtype=float)
    shape = np.shape(sample.f_prime)
    T = np.broadcast_to(np.asarray(sample.T_A, dtype=float), shape[:-1])
    if isinstance(sample, RestrictionSample) and sample.survived:
        T = np.full(shape[:-1], np.nan)
    return np.where(np.isfinite(T)[..., None] & (t >= T[..., None]), T[..., None], t)


def compute_M(sample, alpha: float = ALPHA, check: bool = True):
    """M_t along a sample (RestrictionSample or PairBatch).

    For stopped paths M is held at its value at the stopping time.

    Raises
    ------
    BoundViolationError
        If ``check`` and some M_t falls outside [0, exp(5p/48)(1 + 1e-9)].
    """
    fp = np.asarray(sample.f_prime, dtype=float)
    h = np.asarray(sample.h, dtype=float)
    t_eff = _held_times(sample)
    with np.errstate(invalid="ignore"):
        M = np.abs(fp) ** alpha * np.sign(fp) * np.exp(-alpha * _exponent(sample.p, sample.p0, t_eff, h))
    # f' = 0 is the limit at a hit of the slit, where M vanishes
    M = np.where(fp == 0, 0.0, M)
    if check:
        bound = math.exp(5 * sample.p / 48) * (1 + 1e-9)
        if np.any(M < 0) or np.any(M > bound) or np.any(~np.isfinite(M)):
            raise BoundViolationError("M_t left [0, exp(5p/48)]")
    return M


def gap_statistic(sample, t):
    """G(t) = int_{p0-h(t)}^{p-t} S_r dr at record time ``t`` (one value per path)."""
    col = int(np.argmin(np.abs(np.asarray(sample.t_grid) - t)))
    h = np.asarray(sample.h)[..., col]
    a, b = sample.p0 - h, sample.p - sample.t_grid[col]
    return _exponent(sample.p, sample.p0, sample.t_grid[col], h) + (b - a) / 6.0


# -------------------------------------------------------------- diagnostics

def lemma_loc_residual(hull: HullSpec, t: float, dt: float = 1e-4, offset: float = 1e-3):
    """|d_t f~_t(w) + 3 f~''(xi)| as w -> xi along xi = 0, at time ``t``.

    f~_t is advanced on the stencil with the default spacing for ``dt``;
    the transport right-hand side is then evaluated by its singular formula
    at xi +- offset/2 from the interpolant and averaged, which must match
    the removable limit -3 f~_t''(xi(t)).
    """
    drv = lw.constant_driving(0.0, hull.p, dt, t)
    b = _pair_flow(hull, drv.times, drv.values[None, :], t, default_delta(dt), [t],
                   track_hull=False)
    F = b.nodes[0]
    d = float(b.delta[0])
    v = np.array([-0.5, 0.5]) * offset / d
    Fv = _eval_rows(v) @ F
    dFv = (_eval_rows(v, 1) @ F) / d
    fp = float(_D1[3] @ F) / d
    f2 = float(_D2[3] @ F) / d ** 2
    r_img, r_dom = hull.p0 - b.h[0, -1], hull.p - t
    R = fp ** 2 * h_kernel(Fv - F[3] + 0j, r_img)[0].real - dFv * h_kernel(v * d + 0j, r_dom)[0].real
    return abs(R.mean() + 3 * f2)


def fprime_lemma_residual(hull: HullSpec, t: float, dt: float = 1e-4):
    """Check d_t f~'(xi)/f~' against its closed form along xi = 0.

    Compares the node flow, differentiated at xi, with
    (1/2)(f''/f')^2 - (4/3) f'''/f' + f'^2 (S_{p0-h} - 1/6) - (S_{p-t} - 1/6).
    """
    from .specialfn import s_constant
    drv = lw.constant_driving(0.0, hull.p, dt, t)
    b = _pair_flow(hull, drv.times, drv.values[None, :], t, default_delta(dt), [t],
                   track_hull=False)
    F = b.nodes[0]
    d = np.array([b.delta[0]])
    y = np.zeros((1, 8), dtype=complex)
    y[0, :7] = F
    y[0, 7] = b.h[0, -1]
    rhs = _rhs_factory(hull.p, hull.p0, np.zeros(1), np.zeros(1), t, 0)
    dy = rhs(np.zeros(1), y, np.array([0]), d)[0, :7].real
    f1 = (_D1[3] @ F) / d[0]
    f2 = (_D2[3] @ F) / d[0] ** 2
    f3 = (_D3[3] @ F) / d[0] ** 3
    lhs = ((_D1[3] @ dy) / d[0]) / f1
    r_img, r_dom = hull.p0 - y[0, 7].real, hull.p - t
    rhs_cf = 0.5 * (f2 / f1) ** 2 - 4 / 3 * f3 / f1 + f1 ** 2 * (s_constant(r_img) - 1 / 6) \
        - (s_constant(r_dom) - 1 / 6)
    return abs(lhs - rhs_cf)


def composition_check(hull: HullSpec, xi: lw.DrivingPath, t: float, offsets=None,
                      stencil_halfwidth: float | None = None):
    """Stencil f~_t against psi~_{h(t)} o phi~_A o phi~_t^{-1} at complex points.

    Returns
    -------
    stencil, composed : ndarray of complex
        Values at xi(t) + offsets * delta (default offsets j + i, j = -2..2).
    """
    if offsets is None:
        offsets = np.arange(-2, 3) + 1j
    offsets = np.asarray(offsets, dtype=complex)
    delta = default_delta(xi.dt) if stencil_halfwidth is None else stencil_halfwidth / 3
    rec = np.append(xi.times[xi.times < t - 1e-14], t)
    b = _pair_flow(hull, xi.times, xi.values[None, :], t, delta, rec)
    if not b.survived[0]:
        raise SwallowedError("path stopped before the check time")
    F = b.nodes[0]
    d = float(b.delta[0])
    stencil = _eval_rows(offsets) @ F
    x_t = float(np.interp(t, xi.times, xi.values))
    w = x_t + offsets * d
    m = w.size
    z = lw.backward_lift(hull.p, xi.times, np.broadcast_to(xi.values, (m, xi.values.size)),
                         np.full(m, t), start=w)
    za = hull.phi_A(z)
    s_grid, eta = b.h[0], b.eta[0]
    _, out, _ = lw.evolve_batch(hull.p0, s_grid, np.broadcast_to(eta, (m, eta.size)), za,
                                float(s_grid[-1]), swallow_eps=0.0, record=False)
    return stencil, out[:, 0]


# ------------------------------------------------------------- Monte Carlo

@dataclass
class RestrictionReport:
    """Ensemble summary of the restriction martingale."""

    p: float
    c: float
    tau: float
    n_paths: int
    times: np.ndarray
    M0: float
    mean_M: np.ndarray
    se_M: np.ndarray
    survival: float
    survival_se: float
    formula: float
    gap_times: np.ndarray
    gap_median: np.ndarray
    gap_ratio_max: float
    violations: dict
    stop_reasons: dict = field(default_factory=dict)

    @property
    def discrepancy(self):
        d = self.survival - self.formula
        return d, (d - 1.96 * self.survival_se, d + 1.96 * self.survival_se)

    def to_json(self, path):
        d, ci = self.discrepancy
        out = {"p": self.p, "c": self.c, "tau": self.tau, "n_paths": self.n_paths,
               "M0": self.M0, "times": self.times.tolist(), "mean_M": self.mean_M.tolist(),
               "se_M": self.se_M.tolist(), "survival": self.survival,
               "survival_se": self.survival_se, "formula": self.formula,
               "discrepancy": d, "discrepancy_ci95": list(ci),
               "gap_times": self.gap_times.tolist(), "gap_median": self.gap_median.tolist(),
               "gap_ratio_max": self.gap_ratio_max, "violations": self.violations}
        with open(path, "w") as fh:
            json.dump(out, fh, indent=2)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean_M", "se"])
            for row in zip(self.times, self.mean_M, self.se_M):
                w.writerow([repr(float(x)) for x in row])


def _num(x):
    return float(x) if np.isfinite(x) else None


def write_paths_jsonl(batch, path, alpha: float = ALPHA):
    """One JSON line per path and record time: t, f', h, M, survived."""
    M = compute_M(batch, alpha, check=False)
    with open(path, "w") as fh:
        for i in range(batch.f_prime.shape[0]):
            for k, t in enumerate(batch.t_grid):
                fh.write(json.dumps({"path": i, "t": float(t), "f_prime": float(batch.f_prime[i, k]),
                                     "h": _num(batch.h[i, k]), "M": float(M[i, k]),
                                     "survived": bool(batch.survived[i])}) + "\n")


# ------------------------------------------------------------------ unzip

N_IMAGE = 24
SWALLOW_EPS = 1e-7
HIT_EPS = 1e-6
UNZIP_EPS = 1e-5


def _segment_distance(W, x):
    # distance from x to the polyline W (rows), in the covering strip mod 2 pi
    Z = W - x[:, None]
    Z = lw.wrap(Z.real) + 1j * Z.imag
    a, b = Z[:, :-1], Z[:, 1:]
    d = b - a
    # segments that straddle the cut at +-pi are far from 0 anyway
    ok = np.abs(d.real) < PI
    L2 = np.maximum(np.abs(d) ** 2, 1e-300)
    s = np.clip(-(np.conj(d) * a).real / L2, 0.0, 1.0)
    dist = np.abs(a + s * d)
    dist = np.where(ok, dist, np.abs(a))
    return np.minimum(dist.min(axis=1), np.abs(Z[:, -1]))


def unzip(r, x, W, eps: float = UNZIP_EPS, rtol: float = 1e-9, atol: float = 1e-11,
          n_derivs: int = 1):
    """Map out a curve from the strip by successive vertical slits.

    Row i holds a curve in S_{r_i} attached to the real line, given by its
    interior points W[i] from base to tip.  Step k removes the vertical
    slit under the current image of W[:, k], i.e. runs the covering flow
    with constant driving Re w_k until w_k reaches the real line, and
    carries the remaining points, the real point x and the derivatives
    there along.  For a vertical slit the result is exact; in general it
    converges quickly in the number of points.

    Returns
    -------
    f_prime : ndarray
        Derivative of the uniformizing map at x.  With ``n_derivs`` 2 or 3
        an array of shape (m, n_derivs) with the first derivatives in order.
    r_end : ndarray
        Modulus of the image strip.
    x_end : ndarray
        Image of x (up to the real translation of the map).
    """
    if n_derivs not in (1, 2, 3):
        raise DomainError("n_derivs must be 1, 2 or 3")
    W = np.array(np.atleast_2d(W), dtype=complex)
    m, N = W.shape
    r = np.broadcast_to(np.asarray(r, dtype=float), (m,)).copy()
    xs = np.broadcast_to(np.asarray(x, dtype=float), (m,)).astype(complex)
    nd = n_derivs
    jet = np.zeros((m, nd), dtype=complex)
    jet[:, 0] = 1.0
    orders = tuple(range(1, nd + 1))

    def jet_rate(z, rr, J):
        # chain rule for the derivatives of the flow map at x
        H = h_kernel(z, rr, orders)
        out = np.empty_like(J)
        out[:, 0] = H[0] * J[:, 0]
        if nd > 1:
            out[:, 1] = H[1] * J[:, 0] ** 2 + H[0] * J[:, 1]
        if nd > 2:
            out[:, 2] = H[2] * J[:, 0] ** 3 + 3 * H[1] * J[:, 0] * J[:, 1] + H[0] * J[:, 2]
        return out

    for k in range(N):
        lam = W[:, k].real.copy()

        def rhs(s, yy, idx, lam=lam):
            rr = r[idx] - s
            z = yy[:, :-nd] - lam[idx][:, None]
            out = np.empty_like(yy)
            out[:, :-nd] = h_kernel(z, rr[:, None])[0]
            out[:, -nd:] = jet_rate(z[:, -1], rr, yy[:, -nd:])
            return out

        def dist(s, yy, idx, lam=lam):
            return np.abs(yy[:, 0] - lam[idx])

        y0 = np.concatenate([W[:, k:], xs[:, None], jet], axis=1)
        y, _, st, sg = _ode.integrate(rhs, y0, r * (1 - 1e-12), dist=dist,
                                      swallow_eps=eps, rtol=rtol, atol=atol)
        if np.any(st != 1):
            raise IntegratorError("unzip: a slit tip failed to reach the real line")
        # the tip is eps away: finish with y^2/4, one Euler step for the rest
        extra = np.abs(y[:, 0] - lam) ** 2 / 4
        rr = r - sg
        z = y[:, 1:-nd] - lam[:, None]
        rate = jet_rate(z[:, -1], rr, y[:, -nd:])
        # points already within eps of the tip are left for their own step
        near = np.abs(z) < eps
        zs = np.where(near, 1.0, z)
        y[:, 1:-nd] += np.where(near, 0.0, h_kernel(zs, rr[:, None])[0] * extra[:, None])
        y[:, -nd:] += rate * extra[:, None]
        r = rr - extra
        W[:, k + 1:] = y[:, 1:-nd - 1]
        xs, jet = y[:, -nd - 1], y[:, -nd:]
    f = jet.real[:, 0] if nd == 1 else jet.real
    return f, r, xs.real


@dataclass
class ImageBatch:
    """f~_t'(xi) and h(t) from unzipping the slit image A_t, per path and time.

    A path whose SLE curve hits the slit is stopped at the hitting time
    ``T_A``; from then on f' is held at its limit 0 (so M = 0) and h is NaN.
    A hit is a swallowed image point or xi(t) within ``HIT_EPS`` of the
    image polyline at a grid time.
    """

    t_grid: np.ndarray
    xi: np.ndarray
    f_prime: np.ndarray
    h: np.ndarray
    p: float
    p0: float
    T_A: np.ndarray  # nan for paths that never hit the slit
    min_distance: np.ndarray  # closest approach of xi(t) to A_t on the grid

    @property
    def survived(self):
        return np.isnan(self.T_A)


def _image_flow(hull: HullSpec, times, vals, t_end, rec_times, n_image=N_IMAGE,
                swallow_eps=SWALLOW_EPS, hit_eps=HIT_EPS, rtol=RTOL, atol=ATOL):
    # one row per (path, slit point) so that every point gets its own step
    # clamp and swallow detection; a swallowed point, or xi(t) within
    # hit_eps of the image polyline, means the curve hit A
    times = np.asarray(times, dtype=float)
    vals = np.atleast_2d(np.asarray(vals, dtype=float))
    m = vals.shape[0]
    k = n_image + 1
    p = hull.p
    rec_times = np.asarray(rec_times, dtype=float)
    if np.any(rec_times > t_end + 1e-12):
        raise DomainError("record times must not exceed t_end")
    # record times join the grid so snapshots are taken exactly there
    grid = np.union1d(times[times < t_end - 1e-14], np.append(rec_times, t_end))
    grid = grid[np.concatenate([[True], np.diff(grid) > 1e-12])]
    xg = np.stack([np.interp(grid, times, v) for v in vals])
    rec_idx = np.searchsorted(grid, rec_times - 1e-12)
    W = np.tile(hull.image_points(n_image), (m, 1))
    hstep = np.full((m, k), grid[1] - grid[0] if grid.size > 1 else 1e-3)
    hit = np.full(m, np.nan)
    dmin = np.full(m, np.inf)
    snaps = np.full((m, rec_times.size, k), np.nan, dtype=complex)
    alive = np.ones(m, dtype=bool)
    for c in np.flatnonzero(rec_idx == 0):
        snaps[:, c] = W
    for j in range(grid.size - 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        ta, tb = grid[j], grid[j + 1]
        xa = np.repeat(xg[idx, j], k)
        slope = (np.repeat(xg[idx, j + 1], k) - xa) / (tb - ta)

        def rhs(s, yy, sub, xa=xa, slope=slope, ta=ta):
            return h_kernel(yy[:, 0] - (xa[sub] + slope[sub] * s), p - ta - s)[0][:, None]

        def dist(s, yy, sub, xa=xa, slope=slope):
            return lw._cdist(yy[:, 0] - (xa[sub] + slope[sub] * s))

        yn, hn, st, sg = _ode.integrate(rhs, W[idx].reshape(-1, 1), tb - ta,
                                        h0=hstep[idx].ravel(), dist=dist,
                                        swallow_eps=swallow_eps, rtol=rtol, atol=atol)
        if np.any(st == 2):
            raise IntegratorError(f"slit image flow failed near t={ta:.6g}")
        W[idx] = yn.reshape(-1, k)
        hstep[idx] = hn.reshape(-1, k)
        st = st.reshape(-1, k)
        swallowed = np.any(st == 1, axis=1)
        if swallowed.any():
            rows = idx[swallowed]
            sg = sg.reshape(-1, k)
            hit[rows] = ta + np.where(st[swallowed] == 1, sg[swallowed], np.inf).min(axis=1)
            alive[rows] = False
        keep = idx[~swallowed]
        # the curve can touch A between two tracked points: use the polyline
        d = _segment_distance(W[keep], xg[keep, j + 1])
        dmin[keep] = np.minimum(dmin[keep], d)
        touched = d < hit_eps
        hit[keep[touched]] = tb
        alive[keep[touched]] = False
        keep = keep[~touched]
        for c in np.flatnonzero(rec_idx == j + 1):
            snaps[keep, c] = W[keep]
    return snaps, hit, dmin


def _unzip_snapshots(hull, snaps, rec_times, xi):
    m, n_rec, _ = snaps.shape
    fp = np.full((m, n_rec), hull.phiA_prime_0)
    h = np.zeros((m, n_rec))
    t = np.broadcast_to(rec_times, (m, n_rec))
    ok = np.all(np.isfinite(snaps), axis=2)
    # after a hit f' is held at its limit 0
    fp[~ok], h[~ok] = 0.0, np.nan
    # at t = 0 the image is the slit itself and the values are exact
    todo = ok & (t > 0)
    if todo.any():
        f, r_end, _ = unzip(hull.p - t[todo], xi[todo], snaps[todo][:, 1:])
        fp[todo] = f
        h[todo] = hull.p0 - r_end
    return fp, h


def run_batch(hull: HullSpec, n_paths: int, dt: float, record_times, seed: int = 0,
              start: int = 0, chunk: int = 250, kappa: float = KAPPA,
              n_image: int = N_IMAGE) -> ImageBatch:
    """f~_t'(xi(t)) and h(t) for paths ``start .. start + n_paths``.

    Each path carries ``n_image`` points of the slit (equally spaced in
    height) and its base under the SLE flow; at the record times the image
    curve is unzipped.  A path stops when one of these points is swallowed,
    i.e. when its curve hits the slit.
    """
    record_times = np.asarray(record_times, dtype=float)
    t_end = float(record_times.max())
    parts = []
    for lo in range(start, start + n_paths, chunk):
        cnt = min(chunk, start + n_paths - lo)
        if t_end > 0:
            times, vals = sample_paths(kappa, hull.p, dt, t_end, seed, lo, cnt)
        else:
            times, vals = np.array([0.0]), np.zeros((cnt, 1))
        snaps, hit, dmin = _image_flow(hull, times, vals, t_end, record_times, n_image)
        xi = np.stack([np.interp(record_times, times, v) for v in vals])
        fp, h = _unzip_snapshots(hull, snaps, record_times, xi)
        parts.append((xi, fp, h, hit, dmin))
    cat = lambda k: np.concatenate([q[k] for q in parts])  # noqa: E731
    return ImageBatch(record_times, cat(0), cat(1), cat(2), hull.p, hull.p0, cat(3), cat(4))


def mc_restriction(hull: HullSpec, n_paths: int, dt: float, sample_times, seed: int = 0,
                   gap_times=None, alpha: float = ALPHA, chunk: int = 500,
                   batch: ImageBatch | None = None, kappa: float = KAPPA) -> RestrictionReport:
    """Flatness of M, survival and the late-time gap statistic.

    Parameters
    ----------
    sample_times : array_like
        Times in (0, p) where E[M_t] is compared with M_0.
    gap_times : array_like, optional
        Late times for G(t) on surviving paths; default 0.9 p.
    batch : ImageBatch, optional
        Reuse a precomputed batch (must be recorded at 0, the sample
        times and the gap times).
    kappa : float
        8/3 except for negative controls.
    """
    ts = np.sort(np.atleast_1d(np.asarray(sample_times, dtype=float)))
    if np.any(ts <= 0) or np.any(ts >= hull.p):
        raise DomainError("sample times must lie in (0, p)")
    gts = np.array([0.9 * hull.p]) if gap_times is None \
        else np.sort(np.atleast_1d(np.asarray(gap_times, dtype=float)))
    rec = np.unique(np.concatenate([[0.0], ts, gts]))
    if batch is None:
        batch = run_batch(hull, n_paths, dt, rec, seed, chunk=chunk, kappa=kappa)
    n_paths = batch.f_prime.shape[0]
    M = compute_M(batch, alpha, check=False)
    col_of = lambda t: int(np.argmin(np.abs(batch.t_grid - t)))  # noqa: E731
    cols = [col_of(t) for t in ts]
    M0 = float(M[0, col_of(0.0)])
    dev = M[:, cols] - M0
    mean = M0 + dev.mean(axis=0)
    se = dev.std(axis=0, ddof=1) / math.sqrt(n_paths)
    surv = batch.survived
    s_frac = float(surv.mean())
    s_se = math.sqrt(max(s_frac * (1 - s_frac), 1e-300) / n_paths)
    gaps = np.array([np.median(gap_statistic(batch, t)[surv]) if surv.any() else np.nan
                     for t in gts])
    # (p - t) - (p0 - h) relative to (p - t)^2 at the latest gap time
    cl = col_of(gts[-1])
    tl = batch.t_grid[cl]
    ratio = ((hull.p - tl) - (hull.p0 - batch.h[surv, cl])) / (hull.p - tl) ** 2
    bound = math.exp(5 * hull.p / 48) * (1 + 1e-9)
    fp = batch.f_prime
    viol = {
        "M_range": int(np.sum((M < 0) | (M > bound) | ~np.isfinite(M))),
        "f_prime_range": int(np.sum(~((fp > 0) & (fp < 1)) & np.isfinite(batch.h))),
        "modulus_order": int(np.sum(hull.p0 - batch.h > hull.p - _held_times(batch) + 1e-9)),
    }
    return RestrictionReport(hull.p, hull.c, hull.tau, n_paths, ts, M0, mean, se, s_frac, s_se,
                             hull.formula(alpha), gts, gaps,
                             float(np.max(ratio)) if ratio.size else float("nan"), viol)
