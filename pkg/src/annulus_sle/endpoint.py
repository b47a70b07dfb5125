"""Terminal point of the annulus SLE trace and the kappa = 2 density.

Three pieces live here:

* Monte Carlo estimation of the law of arg beta(p - eps), a proxy for the
  point where the trace lands on the inner circle;
* the backward-Kolmogorov PDEs that the density and its antiderivative
  satisfy, with residuals evaluated for closed-form candidates;
* the rescaled flow X_s / s on the top line of the strip, whose limit is an
  odd integer.

Densities are normalised against the Lebesgue measure on (-pi, pi]; the
candidate ``lambda2`` integrates to 2 pi over a period, so its probability
density is ``lambda2 / (2 pi)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import loewner as lw
from .errors import DomainError, IntegratorError
from .specialfn import PI, TWO_PI, KernelConfig, eval_G, eval_H_hat

DEFAULT_BINS = 64
FD_STEP = 1e-4
MAX_DROP = 0.01


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for path ``index`` of a run with master ``seed``.

    The stream depends only on the pair, so adding paths never reshuffles
    the earlier ones.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(index),)))


def sample_paths(kappa: float, p: float, dt: float, t_max: float, seed: int, start: int,
                 count: int):
    """Driving samples of paths ``start .. start+count-1`` on a common grid."""
    rows = [lw.sample_driving(kappa, p, dt, t_max, path_rng(seed, start + i))
            for i in range(count)]
    return rows[0].times, np.stack([d.values for d in rows])


# ---------------------------------------------------------------- histogram

@dataclass
class EndpointHistogram:
    """Histogram of terminal arguments on (-pi, pi]."""

    kappa: float
    p: float
    bin_edges: np.ndarray
    counts: np.ndarray
    n_paths: int
    eps_stop: float
    samples: np.ndarray = field(default_factory=lambda: np.empty(0))
    n_dropped: int = 0

    @classmethod
    def from_samples(cls, kappa, p, angles, eps_stop, bins=DEFAULT_BINS, n_dropped=0):
        edges = np.linspace(-PI, PI, bins + 1)
        a = lw.wrap(np.asarray(angles, dtype=float))
        # bins are half-open on the left: (e_j, e_{j+1}]
        idx = np.clip(np.searchsorted(edges, a, side="left") - 1, 0, bins - 1)
        counts = np.bincount(idx, minlength=bins)
        return cls(kappa, p, edges, counts, int(a.size), eps_stop, a, n_dropped)

    def merge(self, other: "EndpointHistogram") -> "EndpointHistogram":
        if not np.array_equal(self.bin_edges, other.bin_edges):
            raise DomainError("cannot merge histograms with different bins")
        return EndpointHistogram(self.kappa, self.p, self.bin_edges, self.counts + other.counts,
                                 self.n_paths + other.n_paths, self.eps_stop,
                                 np.concatenate([self.samples, other.samples]),
                                 self.n_dropped + other.n_dropped)

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def density(self):
        return self.counts / (self.n_paths * np.diff(self.bin_edges))

    def mean_and_se(self):
        """Mean terminal argument and its standard error."""
        a = self.samples
        return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))

    def circular_variance(self) -> float:
        return float(1.0 - abs(np.mean(np.exp(1j * self.samples))))

    def tv_distance(self, other: "EndpointHistogram") -> float:
        return float(0.5 * np.abs(self.counts / self.n_paths - other.counts / other.n_paths).sum())

    def to_csv(self, path, candidate: "DensityCandidate | None" = None):
        cand = None
        if candidate is not None:
            cand = candidate.density(self.p, self.centers) / TWO_PI
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "empirical_density", "candidate_density"])
            for i, (c, d) in enumerate(zip(self.centers, self.density())):
                w.writerow([repr(float(c)), repr(float(d)),
                            "" if cand is None else repr(float(cand[i]))])


def estimate_endpoint(kappa: float, p: float, n_paths: int, dt: float, eps_stop: float,
                      seed: int = 0, bins: int = DEFAULT_BINS, chunk: int = 250,
                      start: int = 0) -> EndpointHistogram:
    """Histogram of arg beta(p - eps_stop) over independent annulus SLE paths.

    Each path's driving function comes from its own seed stream, and trace
    points are computed by the backward flow in vectorised chunks.

    Raises
    ------
    IntegratorError
        If more than 1% of the paths fail to integrate.
    """
    if not 0 < eps_stop < p / 10:
        raise DomainError(f"eps_stop must lie in (0, p/10), got {eps_stop}")
    if n_paths < 1:
        raise DomainError("n_paths must be at least 1")
    t_end = p - eps_stop
    angles = []
    dropped = 0
    for lo in range(start, start + n_paths, chunk):
        cnt = min(chunk, start + n_paths - lo)
        times, vals = sample_paths(kappa, p, dt, t_end, seed, lo, cnt)
        try:
            z = lw.backward_lift(p, times, vals, np.full(cnt, t_end))
            angles.append(z.real)
        except IntegratorError:
            # isolate the failing rows
            for row in vals:
                try:
                    angles.append(lw.backward_lift(p, times, row[None, :], [t_end]).real)
                except IntegratorError:
                    dropped += 1
    if dropped > MAX_DROP * n_paths:
        raise IntegratorError(f"{dropped} of {n_paths} paths failed to integrate")
    return EndpointHistogram.from_samples(kappa, p, np.concatenate(angles), eps_stop, bins,
                                          dropped)


def chi2_test(hist: EndpointHistogram, candidate: "DensityCandidate", min_expected: float = 5.0):
    """Chi-square goodness of fit of ``hist`` against ``candidate / (2 pi)``.

    Adjacent bins are merged until every expected count reaches
    ``min_expected``.

    Returns
    -------
    statistic, p_value, dof
    """
    cdf = candidate.antiderivative(hist.p, hist.bin_edges) / TWO_PI
    expected = hist.n_paths * np.diff(cdf)
    obs, exp = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(hist.counts, expected):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            obs.append(o_acc)
            exp.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if exp:
            obs[-1] += o_acc
            exp[-1] += e_acc
        else:
            obs.append(o_acc)
            exp.append(e_acc)
    obs = np.array(obs)
    exp = np.array(exp)
    stat = float(((obs - exp) ** 2 / exp).sum())
    dof = obs.size - 1
    return stat, float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0, dof


# ---------------------------------------------------------------- densities

def _fd_derivs(fn, u, v, order, h=1e-3):
    # five-point stencils in the second variable
    if order == 0:
        return fn(u, v)
    w = {1: np.array([1, -8, 0, 8, -1]) / (12 * h),
         2: np.array([-1, 16, -30, 16, -1]) / (12 * h * h),
         3: np.array([-1, 2, 0, -2, 1]) / (2 * h ** 3)}[order]
    # weights sum to zero, so differencing against the centre keeps constants exact
    f0 = fn(u, v)
    return sum(c * (fn(u, v + k * h) - f0) for c, k in zip(w, range(-2, 3)) if c != 0)


CANDIDATES = ("lambda1", "lambda2", "P1", "P2", "custom")


@dataclass(frozen=True)
class DensityCandidate:
    """A candidate solution of the endpoint PDEs.

    ``lambda1`` and ``lambda2`` are densities in (r, x) with antiderivatives
    H-hat_r(x) and r H-hat_r(x) + x.  ``P1`` = G_s(y) and ``P2`` =
    s G_s(y) + y are antiderivatives in the variables (s, y), s < 0.  A
    ``custom`` candidate carries ``fn(u, v)`` at the level named by
    ``params["level"]`` ("antiderivative" by default) and coordinates
    ``params["coords"]`` ("rx" or "sy").
    """

    id: str
    params: dict = field(default_factory=dict)
    fn: Callable | None = None

    def __post_init__(self):
        if self.id not in CANDIDATES:
            raise DomainError(f"unknown candidate {self.id!r}")
        if self.id == "custom" and self.fn is None:
            raise DomainError("a custom candidate needs fn")

    @property
    def coords(self) -> str:
        if self.id in ("P1", "P2"):
            return "sy"
        if self.id == "custom":
            return self.params.get("coords", "rx")
        return "rx"

    def _check(self, u):
        u = float(u)
        if self.coords == "rx" and not u > 0:
            raise DomainError(f"modulus must be positive, got {u}")
        if self.coords == "sy" and not u < 0:
            raise DomainError(f"s must be negative, got {u}")
        return u

    def antiderivative(self, u, v, order: int = 0):
        """Antiderivative level (Lambda or P) and its derivatives in the second variable."""
        u = self._check(u)
        v = np.asarray(v, dtype=complex if self.id != "custom" else float)
        if self.id == "lambda1":
            return np.real(eval_H_hat(KernelConfig(u), v, order))
        if self.id == "lambda2":
            val = u * np.real(eval_H_hat(KernelConfig(u), v, order))
            if order == 0:
                val = val + v.real
            elif order == 1:
                val = val + 1.0
            return val
        if self.id == "P1":
            return np.real(eval_G(u, v, order))
        if self.id == "P2":
            val = u * np.real(eval_G(u, v, order))
            if order == 0:
                val = val + v.real
            elif order == 1:
                val = val + 1.0
            return val
        if self.params.get("level", "antiderivative") == "antiderivative":
            return _fd_derivs(self.fn, u, v, order)
        raise DomainError("custom density candidates have no antiderivative")

    def density(self, u, v, order: int = 0):
        """Density level (lambda) and its derivatives in the second variable."""
        if self.id == "custom" and self.params.get("level") == "density":
            return _fd_derivs(self.fn, self._check(u), np.asarray(v, dtype=float), order)
        if self.coords == "sy":
            raise DomainError("the (s, y) candidates are antiderivatives only")
        return self.antiderivative(u, v, order + 1)


def _coeff(coords, u, v, order):
    # drift coefficient of the PDE: H-hat_r in (r, x), G_s in (s, y)
    if coords == "rx":
        return np.real(eval_H_hat(KernelConfig(u), np.asarray(v, dtype=complex), order))
    return np.real(eval_G(u, np.asarray(v, dtype=complex), order))


VARIANTS = ("density", "antiderivative", "changed_vars")


def pde_residual(candidate: DensityCandidate, kappa: float, variant: str, at):
    """Residual of one of the endpoint PDEs for ``candidate`` at ``at = (u, v)``.

    density:         -d_r l + H-hat' l + H-hat l' + (kappa/2) l''
    antiderivative:  -d_r L + H-hat L' + (kappa/2) L''
    changed_vars:    -d_s P + G P' + (kappa/2) P''

    The first-variable derivative is a central difference with step
    ``1e-4 |u|``; ``v`` may be an array.
    """
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}")
    if not kappa > 0:
        raise DomainError("kappa must be positive")
    u, v = at
    u = float(u)
    want = "sy" if variant == "changed_vars" else "rx"
    if candidate.coords != want:
        raise DomainError(f"variant {variant!r} needs a candidate in {want} coordinates")
    f = candidate.density if variant == "density" else candidate.antiderivative
    h = FD_STEP * abs(u)
    du = (np.asarray(f(u + h, v)) - np.asarray(f(u - h, v))) / (2 * h)
    a0 = _coeff(want, u, v, 0)
    res = -du + a0 * f(u, v, 1) + 0.5 * kappa * f(u, v, 2)
    if variant == "density":
        res = res + _coeff(want, u, v, 1) * f(u, v, 0)
    return res


def residual_grid(candidate: DensityCandidate, kappa: float, variant: str, us, vs):
    """Residuals on the tensor grid ``us x vs``, shape (len(us), len(vs))."""
    vs = np.asarray(vs, dtype=float)
    return np.stack([np.asarray(pde_residual(candidate, kappa, variant, (u, vs))) for u in us])


def residual_grid_csv(path, us, vs, grid):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "x", "residual"])
        for i, u in enumerate(us):
            for j, v in enumerate(vs):
                w.writerow([repr(float(u)), repr(float(v)), repr(float(grid[i, j]))])


# ---------------------------------------------------------------- rescaled flow

@dataclass
class RescaledFlow:
    """The flow of one strip point in the variables s = pi^2/(p - t), W = pi Z / (p - t)."""

    s_grid: np.ndarray
    W: np.ndarray

    @property
    def X(self):
        return self.W.real

    @classmethod
    def from_covering(cls, p, times, z, xi):
        """Build from covering-flow values ``z`` and driving ``xi`` at ``times``."""
        times = np.asarray(times, dtype=float)
        rem = p - times
        return cls(PI * PI / rem, PI * (np.asarray(z) - np.asarray(xi)) / rem)


def drift_ratio(kappa: float, p: float, start_x: float, s_max: float, n_paths: int,
                dt: float, seed: int = 0, return_flows: bool = False, start: int = 0):
    """X_{s_max}(start_x + ip) / s_max for independent paths.

    The covering flow of the top-line point is run to t = p - pi^2/s_max;
    since s = pi^2/(p - t) and X = pi Re Z / (p - t), the ratio equals
    Re(phi_t(z) - xi(t)) / pi.

    Returns
    -------
    ratios : ndarray
    flows : list of RescaledFlow
        Only when ``return_flows`` is true.
    """
    s0 = PI * PI / p
    if not s_max > s0:
        raise DomainError(f"s_max must exceed pi^2/p = {s0:.4g}")
    t_end = p - PI * PI / s_max
    times, vals = sample_paths(kappa, p, dt, t_end, seed, start, n_paths)
    z0 = np.full(n_paths, start_x + 1j * p)
    grid, out, _ = lw.evolve_batch(p, times, vals, z0, t_end, record=return_flows)
    xi_end = vals[:, -1]
    zf = out[:, -1]
    ratios = (zf.real - xi_end) / PI
    if not return_flows:
        return ratios
    xg = np.stack([np.interp(grid, times, v) for v in vals])
    flows = [RescaledFlow.from_covering(p, grid, out[i], xg[i]) for i in range(n_paths)]
    return ratios, flows


def odd_fraction(ratios, tol: float = 0.15) -> float:
    """Fraction of ratios within ``tol`` of an odd integer."""
    r = np.asarray(ratios)
    nearest = 2.0 * np.floor(r / 2.0) + 1.0
    return float(np.mean(np.abs(r - nearest) < tol))
