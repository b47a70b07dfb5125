"""The annulus SLE_4 observable built from the square-wave harmonic map J_r.

J_r lives on the annulus A_{r/2} = {e^{-r/2} < |w| < 1}.  Its imaginary
part is the bounded harmonic function equal to +1 on the upper half of the
unit circle and -1 on the lower half, with either a zero Dirichlet value
("slit") or a zero normal derivative ("crosscut") on the inner circle
|w| = q, q = e^{-r/2}.  Expanding the square wave,

    Im J(rho e^{i theta}) = sum_{k odd} (a_k rho^k + b_k rho^{-k}) sin(k theta),
    a_k + b_k = 4 / (k pi),
    a_k q^k + b_k q^{-k} = 0 (slit)   or   a_k q^k - b_k q^{-k} = 0 (crosscut),

so J(w) = sum_{k odd} (a_k w^k - b_k w^{-k}).  The disk part
sum 4 w^k / (k pi) = (4/pi) artanh(w) is summed in closed form, leaving a
remainder whose coefficients decay like q^{2k}; the truncation at K terms
therefore holds uniformly up to the outer circle.

In covering coordinates J~(z) = J(e^{iz}) on the strip 0 < Im z < r/2, and
the closed-form part has derivative -2 / (pi sin z).
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import loewner as lw
from .endpoint import sample_paths
from .errors import ConvergenceWarning, DomainError
from .specialfn import PI, h_kernel

DEFAULT_K = 201
TAIL_TOL = 1e-12
DR_STEP = 1e-4
KAPPA = 4.0
MODES = ("slit", "crosscut")


@dataclass(frozen=True)
class AnnulusHarmonicMap:
    """Truncated Laurent representation of J_r."""

    r: float
    mode: str
    K: int
    a: np.ndarray
    b: np.ndarray

    @property
    def q(self) -> float:
        return math.exp(-self.r / 2)

    @property
    def ks(self) -> np.ndarray:
        return np.arange(1, self.K + 1, 2)

    def tail_bound(self) -> float:
        """Bound on the dropped remainder terms anywhere in the closed strip."""
        k = np.arange(self.K + 2, self.K + 400, 2)
        q = self.q
        term = 4.0 / (k * PI) * 2.0 * q ** k / np.abs(1.0 - q ** (2 * k))
        return float(term.sum())

    # the remainder coefficients: a_k minus the disk part, and b_k
    @property
    def _c(self):
        return self.a - 4.0 / (self.ks * PI)

    def jt(self, z, order: int = 0):
        """J~_r(z) = J_r(e^{iz}) or its z-derivative of the given order (0..2)."""
        z = np.asarray(z, dtype=complex)
        k = self.ks
        e = np.exp(1j * z[..., None] * k)
        einv = np.exp(-1j * z[..., None] * k)
        c, b = self._c, self.b
        ik = (1j * k) ** order
        rem = (c * ik * e - b * (-1j * k) ** order * einv).sum(axis=-1)
        if order == 0:
            # (4/pi) artanh(e^{iz}); log1p keeps the branch on the strip
            w = np.exp(1j * z)
            main = (2.0 / PI) * (np.log1p(w) - np.log1p(-w))
        elif order == 1:
            main = -2.0 / (PI * np.sin(z))
        elif order == 2:
            main = 2.0 * np.cos(z) / (PI * np.sin(z) ** 2)
        else:
            raise DomainError("order must be 0, 1 or 2")
        return main + rem

    def __call__(self, w):
        """J_r(w) for w in the closed annulus minus {1, -1}."""
        w = np.asarray(w, dtype=complex)
        return self.jt(-1j * np.log(w))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"r": self.r, "mode": self.mode, "K": self.K,
                       "a": self.a.tolist(), "b": self.b.tolist()}, fh)


def build_J(r: float, mode: str = "slit", K: int = DEFAULT_K,
            tol: float = TAIL_TOL) -> AnnulusHarmonicMap:
    """Coefficients of J_r from the 2x2 system of each odd harmonic.

    Warns with ConvergenceWarning when the truncation tail exceeds ``tol``.
    """
    if not r > 0:
        raise DomainError(f"r must be positive, got {r}")
    if K < 1 or K % 2 == 0:
        raise DomainError("K must be a positive odd integer")
    if mode not in MODES:
        raise DomainError(f"unknown mode {mode!r}; expected one of {MODES}")
    k = np.arange(1, K + 1, 2)
    q2k = np.exp(-r * k)
    s = 1.0 if mode == "crosscut" else -1.0
    # a + b = 4/(k pi); b = s a q^{2k}
    a = 4.0 / (k * PI) / (1.0 + s * q2k)
    b = s * a * q2k
    J = AnnulusHarmonicMap(float(r), mode, int(K), a, b)
    tb = J.tail_bound()
    if tb > tol:
        warnings.warn(f"Laurent tail {tb:.2e} exceeds {tol:.0e}; increase K", ConvergenceWarning)
    return J


def t2_lifted(z, r):
    """Lifted degree-2 kernel T~^(2)_r(z) = H_r(2z)/2."""
    return h_kernel(2 * np.asarray(z, dtype=complex), r)[0] / 2


def lemma_residual(J: AnnulusHarmonicMap, z, step: float = DR_STEP):
    """F_r(z) = -d_r J~ + J~' T~^(2) + J~''/2, with d_r by rebuilding at r +- step."""
    z = np.asarray(z, dtype=complex)
    if np.any(z.imag <= 0) or np.any(z.imag > J.r / 2 + 1e-12):
        raise DomainError("z must satisfy 0 < Im z <= r/2")
    if np.any(np.abs(np.sin(z)) < 1e-8):
        raise DomainError("z too close to a singular point k pi")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        up = build_J(J.r + step, J.mode, J.K)
        dn = build_J(J.r - step, J.mode, J.K)
    dr = (up.jt(z) - dn.jt(z)) / (2 * step)
    return -dr + J.jt(z, 1) * t2_lifted(z, J.r) + 0.5 * J.jt(z, 2)


# ---------------------------------------------------------------- Monte Carlo

@dataclass
class ObservableReport:
    """Per-time ensemble statistics of Im h_t(z0)."""

    times: np.ndarray
    mean: np.ndarray
    std_error: np.ndarray
    n_effective: np.ndarray
    n_swallowed: np.ndarray
    n_ambiguous: np.ndarray
    initial: float
    reliable: bool
    samples: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean", "std_error", "n_effective"])
            for row in zip(self.times, self.mean, self.std_error, self.n_effective):
                w.writerow([repr(float(x)) for x in row[:3]] + [int(row[3])])


def run_observable(p: float, z0: complex, n_paths: int, dt: float, sample_times,
                   mode: str = "slit", seed: int = 0, K: int = DEFAULT_K,
                   swallow_eps: float = 1e-7, chunk: int = 1000,
                   kappa: float = KAPPA) -> ObservableReport:
    """Ensemble of Im h_t(z0), h_t = J_{p-t}(psi_t(z0) / e^{i xi(t)/2}), under SLE_4.

    The point is carried by the degree-2 lifted flow in covering
    coordinates.  A path whose point comes within ``swallow_eps`` of the
    singular set contributes the sign of Im h at that moment (the side of
    the curve it was enclosed from); if |Im h| < 1/2 there, the side is
    ambiguous and the path is excluded from later times.  Statistics are
    flagged unreliable when more than 20% of paths are ambiguous.

    ``kappa`` other than 4 is only meant for negative controls.
    """
    z0 = complex(z0)
    if not math.exp(-p / 2) < abs(z0) < 1:
        raise DomainError("z0 must lie in the open annulus A_{p/2}")
    ts = np.sort(np.atleast_1d(np.asarray(sample_times, dtype=float)))
    if np.any(ts < 0) or np.any(ts >= p):
        raise DomainError("sample times must lie in [0, p)")
    zt0 = -1j * np.log(z0)
    maps = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for t in np.concatenate([[0.0], ts]):
            maps[t] = build_J(p - t, mode, K)
    init = float(maps[0.0].jt(zt0).imag)
    out = np.full((n_paths, ts.size), np.nan)
    sw_count = np.zeros(ts.size, dtype=int)
    amb_count = np.zeros(ts.size, dtype=int)
    t_max = ts.max() if ts.max() > 0 else None
    for lo in range(0, n_paths, chunk):
        cnt = min(chunk, n_paths - lo)
        if t_max is None:
            out[lo:lo + cnt] = init
            continue
        times, vals = sample_paths(kappa, p, dt, t_max, seed, lo, cnt)
        # sample times join the grid (the driving is piecewise linear between)
        fine = np.union1d(times, ts[ts > 0])
        fine = fine[np.concatenate([[True], np.diff(fine) > 1e-12])]
        vals = np.stack([np.interp(fine, times, v) for v in vals])
        times = fine
        grid, traj, swallow = lw.evolve_batch(p, times, vals, np.full(cnt, zt0), t_max,
                                              mode="lifted2", swallow_eps=swallow_eps)
        xg = np.stack([np.interp(grid, times, v) for v in vals])
        # side of each swallowed path, read just before it was frozen
        side = np.zeros(cnt)
        for i in np.flatnonzero(np.isfinite(swallow)):
            last = np.flatnonzero(np.isfinite(traj[i]))[-1]
            Z = traj[i, last] - xg[i, last] / 2
            v = float(maps[0.0].jt(Z).imag) if last == 0 else \
                float(build_J(p - grid[last], mode, K).jt(Z).imag)
            side[i] = np.sign(v) if abs(v) >= 0.5 else 0.0
        for j, t in enumerate(ts):
            col = np.searchsorted(grid, t - 1e-12)
            col = min(col, grid.size - 1)
            if t == 0:
                out[lo:lo + cnt, j] = init
                continue
            Z = traj[:, col] - xg[:, col] / 2
            alive = np.isfinite(Z)
            out[lo + np.flatnonzero(alive), j] = maps[t].jt(Z[alive]).imag
            dead = ~alive
            sw_count[j] += np.count_nonzero(dead)
            amb = dead & (side == 0)
            amb_count[j] += np.count_nonzero(amb)
            out[lo + np.flatnonzero(dead & ~amb), j] = side[dead & ~amb]
    n_eff = np.sum(np.isfinite(out), axis=0)
    dev = out - init  # exact zeros at t = 0
    mean = init + np.nanmean(dev, axis=0)
    se = np.nanstd(dev, axis=0, ddof=1) / np.sqrt(np.maximum(n_eff, 1))
    reliable = bool(np.all(amb_count <= 0.2 * n_paths))
    return ObservableReport(ts, mean, se, n_eff, sw_count, amb_count, init, reliable, out)
