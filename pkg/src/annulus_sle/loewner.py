"""Annulus Loewner flows: driving functions, point flows, derivative flows, traces.

Conventions
-----------
The annulus of modulus p is A_p = {e^{-p} < |z| < 1}; its covering strip is
S_p = {0 < Im z < p} under z -> e^{iz}.  The covering flow solves

    d/dt phi_t(z) = H_{p-t}(phi_t(z) - xi(t)),    phi_0(z) = z,

and the base flow is its image under e^{i.}.  The degree-n lifted flow uses
the kernel T^(n)_r(z) = H_r(nz)/n in covering coordinates with driving
xi/n, so that n psi_t = phi_t(n .) modulo 2 pi.

Between samples the driving function is interpolated linearly; every
Loewner chain computed here is therefore the exact chain of that
piecewise-linear driving, up to the ODE tolerance.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _ode
from .errors import DomainError, IntegratorError, SwallowedError
from .specialfn import TWO_PI, h_kernel

MODES = ("base", "covering", "lifted2", "lifted4")


@dataclass
class DrivingPath:
    """Driving function sampled at ``times`` (linear in between).

    ``dt`` is the nominal spacing; the last interval may be shorter so that
    the grid ends exactly at ``t_max``.
    """

    kappa: float
    p: float
    dt: float
    values: np.ndarray
    seed: int | None = None
    kind: str = "brownian"
    times: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.times is None:
            self.times = self.dt * np.arange(self.values.size)
        self.times = np.asarray(self.times, dtype=float)
        if self.values.size < 2 or self.times.size != self.values.size:
            raise DomainError("a driving path needs at least two samples")
        if self.times[-1] >= self.p:
            raise DomainError("driving grid must end before the modulus p")
        if self.kind == "brownian" and self.values[0] != 0.0:
            raise DomainError("brownian driving must start at 0")

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    def shifted(self, T: float) -> "DrivingPath":
        """Driving xi(T + t) - xi(T) of the flow restarted at time T (modulus p - T)."""
        if not 0 <= T < self.t_max:
            raise DomainError("shift time outside the driving range")
        x0 = float(self(T))
        keep = self.times > T
        times = np.concatenate([[0.0], self.times[keep] - T])
        vals = np.concatenate([[0.0], self.values[keep] - x0])
        return DrivingPath(self.kappa, self.p - T, self.dt, vals, self.seed, "custom", times)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "xi"])
            for t, x in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(x))])

    @classmethod
    def from_csv(cls, path, kappa: float, p: float) -> "DrivingPath":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t, x = data[:, 0], data[:, 1]
        dt = float(t[1] - t[0])
        return cls(kappa, p, dt, x, None, "custom", t)


def _grid(dt, t_max):
    n = int(math.floor(t_max / dt + 1e-9))
    t = dt * np.arange(n + 1)
    if t_max - t[-1] > 1e-12 * max(1.0, t_max):
        t = np.append(t, t_max)
    else:
        t[-1] = t_max
    return t


def _check_range(p, dt, t_max):
    if not p > 0:
        raise DomainError(f"modulus p must be positive, got {p}")
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    if not 0 < t_max < p:
        raise DomainError(f"need 0 < t_max < p, got t_max={t_max}, p={p}")


def sample_driving(kappa: float, p: float, dt: float, t_max: float, seed=0) -> DrivingPath:
    """Brownian driving sqrt(kappa) B on a grid of spacing ``dt`` up to ``t_max``.

    ``seed`` may be an integer, a ``numpy.random.SeedSequence`` or a
    ``Generator``.
    """
    if kappa < 0:
        raise DomainError("kappa must be nonnegative")
    _check_range(p, dt, t_max)
    t = _grid(dt, t_max)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    inc = rng.standard_normal(t.size - 1) * np.sqrt(kappa * np.diff(t))
    vals = np.concatenate([[0.0], np.cumsum(inc)])
    s = seed if isinstance(seed, (int, np.integer)) else None
    return DrivingPath(kappa, p, dt, vals, s, "brownian", t)


def constant_driving(c: float, p: float, dt: float, t_max: float) -> DrivingPath:
    """Deterministic driving identically equal to ``c``."""
    _check_range(p, dt, t_max)
    t = _grid(dt, t_max)
    return DrivingPath(0.0, p, dt, np.full(t.size, float(c)), None, "constant", t)


def custom_driving(fn, p: float, dt: float, t_max: float, kappa: float = 0.0) -> DrivingPath:
    """Driving sampled from a callable ``fn(t)``."""
    _check_range(p, dt, t_max)
    t = _grid(dt, t_max)
    return DrivingPath(kappa, p, dt, np.asarray(fn(t), dtype=float), None, "custom", t)


def default_swallow_eps(driving: DrivingPath, tol: float = _ode.RTOL) -> float:
    return 10.0 * math.sqrt(driving.dt * driving.kappa + tol)


def wrap(x):
    """Reduce real numbers to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x), TWO_PI)


def _cdist(z):
    # distance from z to the lattice 2 pi Z
    return np.abs(wrap(z.real) + 1j * z.imag)


@dataclass
class FlowResult:
    """Trajectory of one starting point (values are NaN after swallowing)."""

    z0: complex
    times: np.ndarray
    values: np.ndarray
    swallow_time: float | None
    mode: str

    @property
    def trajectory(self):
        keep = np.isfinite(self.values)
        return list(zip(self.times[keep], self.values[keep]))

    @property
    def final(self) -> complex:
        return complex(self.values[-1])


def _mode_fns(mode, p):
    """Right-hand side and singular distance for a mode.

    Both take absolute time ``t``, the state ``z`` and the driving value
    ``x`` at that time.
    """
    if mode == "covering":
        def f(t, z, x):
            return h_kernel(z - x, p - t)[0]

        def d(t, z, x):
            return _cdist(z - x)
    elif mode in ("lifted2", "lifted4"):
        n = 2 if mode == "lifted2" else 4

        def f(t, z, x):
            return h_kernel(n * z - x, p - t)[0] / n

        def d(t, z, x):
            return _cdist(n * z - x) / n
    elif mode == "base":
        def f(t, z, x):
            # phi S(phi e^{-i xi}) with S(u) = i H(-i log u)
            return 1j * z * h_kernel(-1j * np.log(z) - x, p - t)[0]

        def d(t, z, x):
            return _cdist(-1j * np.log(z) - x)
    else:
        raise DomainError(f"unknown mode {mode!r}; expected one of {MODES}")
    return f, d


def _run_grid(f, d, y0, times, vals, t_end, swallow_eps, rtol, atol, record=True):
    """Integrate row i of y0 under driving row i of ``vals`` up to ``t_end``.

    Returns the grid, the values at grid times (or only the final column
    when ``record`` is false) and the swallow times (NaN if none).
    """
    grid = times[times < t_end]
    grid = np.append(grid, t_end) if grid.size == 0 or grid[-1] < t_end else grid
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid])
    m = y0.shape[0]
    xg = np.stack([np.interp(grid, times, v) for v in vals]) if vals.shape[0] > 1 \
        else np.broadcast_to(np.interp(grid, times, vals[0]), (m, grid.size))
    out = np.full((m, grid.size if record else 1), np.nan + 0j, dtype=complex)
    out[:, 0] = y0
    swallow = np.full(m, np.nan)
    y = y0.astype(complex).reshape(m, 1)
    h = np.full(m, (grid[1] - grid[0]) if grid.size > 1 else 1e-3)
    alive = np.ones(m, dtype=bool)
    for j in range(grid.size - 1):
        ta, tb = grid[j], grid[j + 1]
        idx_alive = np.flatnonzero(alive)
        if idx_alive.size == 0:
            break
        xa = xg[idx_alive, j]
        slope = (xg[idx_alive, j + 1] - xa) / (tb - ta)

        def rhs(s, yy, idx, ta=ta, xa=xa, slope=slope):
            x = (xa[idx] + slope[idx] * s)[:, None]
            return f(ta + s[:, None], yy, x)

        def dist(s, yy, idx, ta=ta, xa=xa, slope=slope):
            return d(ta + s, yy[:, 0], xa[idx] + slope[idx] * s)

        yn, hn, st, sg = _ode.integrate(rhs, y[idx_alive], tb - ta, h0=h[idx_alive], dist=dist,
                                        swallow_eps=swallow_eps, rtol=rtol, atol=atol)
        y[idx_alive] = yn
        h[idx_alive] = hn
        if np.any(st == 2):
            bad = idx_alive[st == 2]
            raise IntegratorError(
                f"step size underflow near t={ta:.6g} for rows {bad.tolist()[:10]}")
        sw = st == 1
        swallow[idx_alive[sw]] = ta + sg[sw]
        alive[idx_alive[sw]] = False
        y[idx_alive[sw]] = np.nan
        if record:
            out[idx_alive[~sw], j + 1] = yn[~sw, 0]
    if not record:
        out[:, 0] = y[:, 0]
    return grid, out, swallow


def evolve_points(driving: DrivingPath, points, t_end: float, mode: str = "covering",
                  swallow_eps: float | None = None, rtol: float = _ode.RTOL,
                  atol: float = _ode.ATOL) -> list[FlowResult]:
    """Flow starting points under the Loewner equation of the chosen mode.

    Parameters
    ----------
    driving : DrivingPath
    points : array_like of complex
        Starting points: annulus points for ``mode="base"``, strip points
        otherwise.
    t_end : float
        Final time, at most ``driving.t_max``.
    mode : {"base", "covering", "lifted2", "lifted4"}
    swallow_eps : float, optional
        Distance to the driving singularity at which a point counts as
        swallowed.  Defaults to ``10 sqrt(dt kappa + rtol)``.

    Returns
    -------
    list of FlowResult
        Trajectories sampled at the driving grid times up to ``t_end``.
    """
    if mode not in MODES:
        raise DomainError(f"unknown mode {mode!r}; expected one of {MODES}")
    if t_end < 0 or t_end > driving.t_max + 1e-12:
        raise DomainError("t_end must lie in [0, t_max] of the driving path")
    pts = np.atleast_1d(np.asarray(points, dtype=complex))
    eps = default_swallow_eps(driving, rtol) if swallow_eps is None else swallow_eps
    if t_end == 0:
        return [FlowResult(complex(z), np.array([0.0]), np.array([z]), None, mode) for z in pts]
    f, d = _mode_fns(mode, driving.p)
    grid, out, sw = _run_grid(f, d, pts, driving.times, driving.values[None, :], t_end,
                              eps, rtol, atol)
    return [FlowResult(complex(z), grid, out[i], None if np.isnan(sw[i]) else float(sw[i]), mode)
            for i, z in enumerate(pts)]


def evolve_batch(p: float, times, values, points, t_end: float, mode: str = "covering",
                 swallow_eps: float = 0.0, rtol: float = _ode.RTOL, atol: float = _ode.ATOL,
                 record: bool = True):
    """Flow one starting point per driving path, all paths in lock step.

    Parameters
    ----------
    p : float
    times : ndarray, shape (n,)
        Common sample grid of the driving paths.
    values : ndarray, shape (m, n)
        Driving samples, one row per path.
    points : array_like of complex, shape (m,)
    t_end : float
    record : bool
        Keep the whole trajectory on the grid (otherwise only the end).

    Returns
    -------
    grid : ndarray
    out : ndarray of complex, shape (m, len(grid)) or (m, 1)
        NaN after swallowing.
    swallow : ndarray
        Swallow times, NaN for points that survive.
    """
    if mode not in MODES:
        raise DomainError(f"unknown mode {mode!r}; expected one of {MODES}")
    times = np.asarray(times, dtype=float)
    if not 0 < t_end <= times[-1] + 1e-12:
        raise DomainError("t_end must lie in (0, t_max] of the driving grid")
    vals = np.atleast_2d(np.asarray(values, dtype=float))
    pts = np.broadcast_to(np.asarray(points, dtype=complex), (vals.shape[0],))
    f, d = _mode_fns(mode, p)
    return _run_grid(f, d, pts.copy(), times, vals, t_end, swallow_eps, rtol, atol, record)


def evolve_derivative(driving: DrivingPath, z0: complex, t_end: float,
                      rtol: float = _ode.RTOL, atol: float = _ode.ATOL):
    """Covering flow of ``z0`` together with its spatial derivative.

    Returns
    -------
    times, phi, dphi : ndarray
        Grid times, phi_t(z0) and phi_t'(z0).

    Raises
    ------
    SwallowedError
        If ``z0`` is swallowed before ``t_end``.
    """
    if t_end < 0 or t_end > driving.t_max + 1e-12:
        raise DomainError("t_end must lie in [0, t_max] of the driving path")
    if t_end == 0:
        return np.array([0.0]), np.array([complex(z0)]), np.array([1.0 + 0j])
    p = driving.p
    grid = driving.times[driving.times < t_end]
    grid = np.append(grid, t_end)
    y = np.array([[complex(z0), 1.0 + 0j]])
    eps = default_swallow_eps(driving, rtol)
    phi = [complex(z0)]
    dphi = [1.0 + 0j]
    h = np.array([grid[1] - grid[0]])
    for ta, tb in zip(grid[:-1], grid[1:]):
        def rhs(s, yy, idx, ta=ta):
            t = ta + s
            h0, h1 = h_kernel(yy[:, 0] - driving(t), p - t, (0, 1))
            return np.stack([h0, h1 * yy[:, 1]], axis=1)

        def dist(s, yy, idx, ta=ta):
            return _cdist(yy[:, 0] - driving(ta + s))

        y, h, st, sg = _ode.integrate(rhs, y, tb - ta, h0=h, dist=dist, swallow_eps=eps,
                                      rtol=rtol, atol=atol)
        if st[0] == 1:
            raise SwallowedError(f"point {z0} swallowed near t={ta + sg[0]:.6g}")
        if st[0] == 2:
            raise IntegratorError(f"step size underflow near t={ta:.6g}")
        phi.append(y[0, 0])
        dphi.append(y[0, 1])
    return grid, np.array(phi), np.array(dphi)


@dataclass
class Trace:
    """Trace points beta(t) in the closed annulus, with their lifts."""

    p: float
    times: np.ndarray
    points: np.ndarray
    kappa: float
    lifts: np.ndarray | None = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "re_beta", "im_beta"])
            for t, b in zip(self.times, self.points):
                w.writerow([repr(float(t)), repr(float(b.real)), repr(float(b.imag))])


def lift_eps(p: float, t) -> np.ndarray:
    return 1e-6 * (p - np.asarray(t, dtype=float))


def backward_lift(p, times, values, t_ends, rtol=_ode.RTOL, atol=_ode.ATOL, start=None):
    """Lifted trace points phi_t^{-1}(xi(t)) for many paths at once.

    Parameters
    ----------
    p : float
    times : ndarray, shape (n,)
        Common sample grid.
    values : ndarray, shape (m, n)
        Driving samples of ``m`` paths (or shape (n,) shared by all rows).
    t_ends : ndarray, shape (m,)
        Time at which each row's trace point is wanted.
    start : ndarray of complex, shape (m,), optional
        Points of S_{p-t} to pull back instead of xi(t) + i eps_lift, which
        gives phi_t^{-1} at arbitrary points.

    Returns
    -------
    ndarray of complex, shape (m,)
        Points of the covering strip; ``exp(1j * z)`` is the trace point.
    """
    times = np.asarray(times, dtype=float)
    t_ends = np.atleast_1d(np.asarray(t_ends, dtype=float))
    m = t_ends.size
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = np.broadcast_to(vals, (m, vals.size))
    if np.any(t_ends > times[-1] + 1e-12) or np.any(t_ends < 0):
        raise DomainError("trace times must lie within the driving grid")
    xi_end = np.array([np.interp(t, times, v) for t, v in zip(t_ends, vals)])
    z0 = xi_end + 1j * lift_eps(p, t_ends) if start is None else np.asarray(start, dtype=complex)
    z = np.array(z0, dtype=complex).reshape(m, 1)
    # walk each row down its own breakpoints: t_end, then the grid below it
    lower = np.searchsorted(times, t_ends, side="left") - 1
    t_hi = t_ends.copy()
    x_hi = xi_end.copy()
    h = np.full(m, 1e-3)
    active = t_ends > 0
    while active.any():
        idx = np.flatnonzero(active)
        li = lower[idx]
        th, xh = t_hi[idx], x_hi[idx]
        t_lo = times[li]
        x_lo = vals[idx, li]
        span = th - t_lo
        slope = (xh - x_lo) / np.where(span > 0, span, 1.0)

        def rhs(s, yy, sub, th=th, xh=xh, slope=slope):
            t = th[sub] - s
            return -h_kernel(yy[:, 0] - (xh[sub] - slope[sub] * s), p - t)[0][:, None]

        def dist(s, yy, sub, xh=xh, slope=slope):
            return _cdist(yy[:, 0] - (xh[sub] - slope[sub] * s))

        yn, hn, st, _ = _ode.integrate(rhs, z[idx], span, h0=h[idx], dist=dist,
                                       rtol=rtol, atol=atol)
        if np.any(st == 2):
            raise IntegratorError("step size underflow in the backward trace flow")
        z[idx] = yn
        h[idx] = hn
        t_hi[idx] = t_lo
        x_hi[idx] = x_lo
        lower[idx] = li - 1
        active[idx] = t_lo > 0
    return z[:, 0]


def compute_trace(driving: DrivingPath, sample_times, rtol: float = _ode.RTOL,
                  atol: float = _ode.ATOL) -> Trace:
    """Trace points beta(t) = e^{i phi_t^{-1}(xi(t))} by the backward flow.

    Each point starts at xi(t) + i eps_lift with eps_lift = 1e-6 (p - t) and
    is flowed backward to time 0 under the time-reversed covering equation.
    """
    ts = np.atleast_1d(np.asarray(sample_times, dtype=float))
    lifts = backward_lift(driving.p, driving.times, driving.values, ts, rtol, atol)
    lifts = np.where(ts == 0, driving(0.0) + 0j, lifts)
    pts = np.exp(1j * lifts)
    return Trace(driving.p, ts, pts, driving.kappa, lifts)
