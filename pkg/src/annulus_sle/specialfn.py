"""Series kernels of the annulus Loewner equation.

The basic object is the covering kernel

    H_r(z) = cot(z/2) + sum_{k>=1} 2 sin z / (cosh 2kr - cos z),

an odd, 2*pi periodic meromorphic function with H_r(z + 2ir) = H_r(z) - 2i
and simple poles of residue 2 at 2k*pi + 2imr.  Everything else here
(S_r, H-hat, G_s, the lifted kernels T^(n)) is a rewrite of H_r.

Evaluation strategy
-------------------
The argument is first reduced to the fundamental cell |Re z| <= pi,
|Im z| <= r using periodicity and quasi-periodicity.  H_r is then written
as a sum of cotangents, each expanded in the geometric variable
q = exp(+-iz - 2kr), so no term overflows.  For r below ``modular_switch``
the Jacobi-type transformation

    H_r(z) = i (pi/r) H_{pi^2/r}(i pi z / r) - z / r

is applied first, which keeps the geometric ratio at most exp(-2 pi).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, PoleError

TAIL_TOL = 1e-12
POLE_GUARD = 1e-8
DR_STEP = 1e-4
PI = math.pi
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class KernelConfig:
    """Truncation settings for the kernels at a fixed modulus ``r``.

    Parameters
    ----------
    r : float
        Modulus parameter, positive.
    max_terms : int
        Hard cap on the number of series terms.
    tail_tol : float
        Target bound on the truncated tail.
    modular_switch : float
        Below this modulus the evaluation goes through the modular identity.
    """

    r: float
    max_terms: int = 64
    tail_tol: float = TAIL_TOL
    modular_switch: float = PI

    def __post_init__(self):
        if not (self.r > 0 and math.isfinite(self.r)):
            raise DomainError(f"r must be positive and finite, got {self.r}")
        if self.max_terms < 1:
            raise DomainError("max_terms must be >= 1")
        if not self.tail_tol > 0:
            raise DomainError("tail_tol must be positive")
        if not self.modular_switch > 0:
            raise DomainError("modular_switch must be positive")
        n = _n_terms(self.working_r, self.tail_tol)
        if n > self.max_terms:
            raise DomainError(
                f"max_terms={self.max_terms} cannot reach tail_tol={self.tail_tol} "
                f"at working modulus {self.working_r:.4g} (needs {n})")

    @property
    def working_r(self) -> float:
        """Modulus at which the series is actually summed."""
        return self.r if self.r >= self.modular_switch else PI * PI / self.r

    def tail_bound(self, n_terms: int | None = None) -> float:
        """Bound on the series remainder after ``n_terms`` terms."""
        rw = self.working_r
        n = _n_terms(rw, self.tail_tol) if n_terms is None else n_terms
        return _tail(rw, n)


def _tail(r, n):
    return 8.0 * math.exp(-(2 * n + 1) * r) / (1.0 - math.exp(-2.0 * r))


def _n_terms(r, tol):
    n = max(1, math.ceil((math.log(8.0 / tol) / r - 1.0) / 2.0))
    while _tail(r, n) > tol:
        n += 1
    return n


def _lambert(x, n, d=None):
    # (x d/dx)^n of x/(1-x); d = 1 - x may be supplied for accuracy
    if d is None:
        d = 1.0 - x
    if n == 0:
        return x / d
    if n == 1:
        return x / (d * d)
    if n == 2:
        return x * (1.0 + x) / (d * d * d)
    if n == 3:
        return x * (1.0 + x * (4.0 + x)) / (d * d * d * d)
    raise ValueError("order must be 0..3")


def _cot_half(z, n):
    """n-th derivative of cot(z/2), stable for large |Im z|."""
    up = z.imag >= 0
    iz = 1j * np.where(up, z, -z)
    g = _lambert(np.exp(iz), n, -np.expm1(iz))
    if n == 0:
        return np.where(up, -1j * (1.0 + 2.0 * g), 1j * (1.0 + 2.0 * g))
    return np.where(up, -2j * (1j ** n) * g, 2j * ((-1j) ** n) * g)


def _reduce(z, r):
    m_re = np.round(z.real / TWO_PI)
    m_im = np.round(z.imag / (2.0 * r))
    z0 = (z.real - TWO_PI * m_re) + 1j * (z.imag - 2.0 * r * m_im)
    return z0, m_im


def _direct(z0, r, orders, tol):
    """Sum the series for reduced z0 (|Im z0| <= r); returns list per order."""
    n = _n_terms(float(np.min(r)), tol)
    k = np.arange(1, n + 1)
    rr = np.asarray(r)[..., None]
    zz = z0[..., None]
    q = np.exp(1j * zz - 2.0 * k * rr)
    v = np.exp(-1j * zz - 2.0 * k * rr)
    out = []
    for o in orders:
        s = ((-1j) ** o * _lambert(v, o) - (1j ** o) * _lambert(q, o)).sum(axis=-1)
        out.append(_cot_half(z0, o) + 2j * s)
    return out


def h_kernel(z, r, orders=(0,), tol=TAIL_TOL, switch=PI):
    """Vectorised H_r and its z-derivatives.

    Parameters
    ----------
    z : array_like of complex
    r : float or array_like broadcastable against ``z``
    orders : sequence of int in 0..3
    tol : float
        Tail tolerance of the series.
    switch : float
        Modulus below which the modular route is used.

    Returns
    -------
    list of ndarray
        One array per requested order.

    Raises
    ------
    PoleError
        If any point is within the pole guard of a pole.
    """
    z = np.asarray(z, dtype=complex)
    r = np.broadcast_to(np.asarray(r, dtype=float), z.shape)
    if np.any(r <= 0):
        raise DomainError("modulus must be positive")
    z0, m = _reduce(z, r)
    if np.any(np.abs(z0) < POLE_GUARD * np.minimum(1.0, r)):
        raise PoleError("evaluation point within the pole guard")

    res = [np.empty(z.shape, dtype=complex) for _ in orders]
    direct = r >= switch
    if np.any(direct):
        vals = _direct(z0[direct], r[direct], orders, tol)
        for dst, val in zip(res, vals):
            dst[direct] = val
    mod = ~direct
    if np.any(mod):
        rm = r[mod]
        zm = z0[mod]
        rp = PI * PI / rm
        w = 1j * PI * zm / rm
        vals = _direct(w, rp, orders, tol)
        for dst, o, val in zip(res, orders, vals):
            scale = 1j * (PI / rm) * (1j * PI / rm) ** o
            val = scale * val
            if o == 0:
                val = val - zm / rm
            elif o == 1:
                val = val - 1.0 / rm
            dst[mod] = val
    for dst, o in zip(res, orders):
        if o == 0:
            dst -= 2j * m
    return res


def h0(z, r):
    """Shortcut for H_r(z) with default tolerances."""
    return h_kernel(z, r, (0,))[0]


def _scalar(x):
    x = np.asarray(x)
    return x.item() if x.ndim == 0 else x


def _check_order(order):
    if order not in (0, 1, 2, 3):
        raise DomainError(f"order must be 0..3, got {order}")


def eval_H(cfg: KernelConfig, z, order: int = 0):
    """H_r(z) or one of its first three z-derivatives."""
    _check_order(order)
    out = h_kernel(z, cfg.r, (order,), cfg.tail_tol, cfg.modular_switch)[0]
    return _scalar(out)


def eval_S(cfg: KernelConfig, z):
    """The annulus kernel S_r(z) = i H_r(-i log z)."""
    z = np.asarray(z, dtype=complex)
    if np.any(np.abs(z) < np.finfo(float).tiny):
        raise PoleError("S_r is singular at 0")
    zeta = -1j * np.log(z)
    return _scalar(1j * h_kernel(zeta, cfg.r, (0,), cfg.tail_tol, cfg.modular_switch)[0])


def eval_H_hat(cfg: KernelConfig, z, order: int = 0):
    """H-hat_r(z) = H_r(z + ir) + i, real on the real line."""
    _check_order(order)
    z = np.asarray(z, dtype=complex)
    out = h_kernel(z + 1j * cfg.r, cfg.r, (order,), cfg.tail_tol, cfg.modular_switch)[0]
    if order == 0:
        out = out + 1j
    return _scalar(out)


def eval_G(s: float, y, order: int = 0, tol: float = TAIL_TOL):
    """G_s(y) = i H_{-s}(iy - pi) for s < 0, with y-derivatives."""
    _check_order(order)
    if not s < 0:
        raise DomainError(f"G_s needs s < 0, got {s}")
    y = np.asarray(y, dtype=complex)
    out = h_kernel(1j * y - PI, -s, (order,), tol)[0]
    return _scalar(1j * (1j ** order) * out)


def eval_T(n: int, cfg: KernelConfig, z, lifted: bool = True, order: int = 0):
    """Degree-n kernel T^(n)_r(z) = S_r(z^n)/n, or its lift (1/i) T^(n)_r(e^{iz}).

    Only the lifted form supports ``order > 0``.
    """
    if n not in (2, 4):
        raise DomainError("degree must be 2 or 4")
    _check_order(order)
    z = np.asarray(z, dtype=complex)
    if lifted:
        out = h_kernel(n * z, cfg.r, (order,), cfg.tail_tol, cfg.modular_switch)[0]
        return _scalar(out * float(n) ** (order - 1))
    if order:
        raise DomainError("derivatives are provided for the lifted kernel only")
    return _scalar(np.asarray(eval_S(cfg, z ** n)) / n)


def s_constant(r):
    """Laurent constant S_r = sum_{k>=1} 2/(cosh 2kr - 1) = sum 1/sinh^2(kr).

    This is the series for which H_r(z) = 2/z + (S_r - 1/6) z + O(z^3).
    Small moduli use S_r = 1/6 - 1/r + (pi/r)^2 (1/6 - S_{pi^2/r}).
    Vectorised over ``r``.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("r must be positive")
    small = r < PI
    rw = np.where(small, PI * PI / r, r)
    n = _n_terms(float(np.min(rw)), 1e-16)
    k = np.arange(1, n + 1)
    e = np.exp(-2.0 * k * rw[..., None])
    direct = (4.0 * e / (1.0 - e) ** 2).sum(axis=-1)
    out = np.where(small, 1.0 / 6.0 - 1.0 / r + (PI * PI / r ** 2) * (1.0 / 6.0 - direct), direct)
    return _scalar(out)


def S_const(cfg: KernelConfig) -> float:
    """The Laurent constant S_r of the configured modulus."""
    return float(s_constant(cfg.r))


def _phi(x):
    # int_x^infinity S_r dr
    x = np.asarray(x, dtype=float)
    small = x < PI
    xw = np.where(small, PI * PI / x, x)
    n = _n_terms(float(np.min(xw)), 1e-17)
    k = np.arange(1, n + 1)
    e = np.exp(-2.0 * k * xw[..., None])
    tail = (2.0 * e / (k * (1.0 - e))).sum(axis=-1)
    return np.where(small, PI * PI / (6.0 * x) - x / 6.0 - np.log(PI / x) + tail, tail)


def integral_S(a, b):
    """Closed form of int_a^b S_r dr = sum_k (coth(ka) - coth(kb))/k.

    Vectorised; requires 0 < a <= b elementwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b < a):
        raise DomainError("integral_S needs 0 < a <= b")
    return _scalar(_phi(a) - _phi(b))


def d_dr(fn, r: float, step: float = DR_STEP):
    """Central difference of ``fn`` in its modulus argument, step scaled by r."""
    h = step * r
    return (np.asarray(fn(r + h)) - np.asarray(fn(r - h))) / (2.0 * h)


def identity_residuals(r: float, n_grid: int = 30, step: float = DR_STEP):
    """Maximum residuals of the kernel identities at modulus ``r``.

    The grid has ``n_grid`` points in each direction over |Re z| <= 3,
    |Im z| <= 0.9 r, minus points within 0.05 of a pole.  The modular
    identity compares the direct series (no modular routing) with the
    transformed one.  The heat identities -d_r F + F F' + F'' = 0 for H_r,
    H-hat_r and G_{-r} use a central difference in r and are relative to
    max(1, |F|^3).  The Laurent entry is |(H_r(x) - 2/x)/x - (S_r - 1/6)|
    at x = 1e-3.

    Returns
    -------
    dict
        identity name -> max residual.
    """
    if not r > 0:
        raise DomainError(f"r must be positive, got {r}")
    x = np.linspace(-3.0, 3.0, n_grid)
    y = np.linspace(-0.9, 0.9, n_grid) * r
    z = (x[None, :] + 1j * y[:, None]).ravel()
    z = z[np.abs(_reduce(z, np.full(z.shape, float(r)))[0]) > 0.05]
    out = {}
    direct = h_kernel(z, r, switch=0.0)[0]
    rp = PI * PI / r
    w = 1j * PI * z / r
    ok = np.abs(_reduce(w, np.full(w.shape, rp))[0]) > 0.05
    modular = 1j * (PI / r) * h_kernel(w[ok], rp, switch=0.0)[0] - z[ok] / r
    out["modular"] = float(np.max(np.abs(direct[ok] - modular)))

    def heat(fn, zz):
        f, f1, f2 = fn(r, zz, (0, 1, 2))
        dr = (fn(r + step * r, zz, (0,))[0] - fn(r - step * r, zz, (0,))[0]) / (2 * step * r)
        return float(np.max(np.abs(-dr + f * f1 + f2) / np.maximum(1.0, np.abs(f) ** 3)))

    out["heat_H"] = heat(lambda rr, zz, o: h_kernel(zz, rr, o), z)

    def h_hat(rr, zz, o):
        vals = h_kernel(zz + 1j * rr, rr, o)
        return [v + 1j if k == 0 else v for k, v in zip(o, vals)]

    zh = z[np.abs(_reduce(z + 1j * r, np.full(z.shape, float(r)))[0]) > 0.05]
    out["heat_H_hat"] = heat(h_hat, zh)

    def g(rr, yy, o):
        # G_s(y) = i H_{-s}(iy - pi) with s = -rr; d/ds = -d/drr
        vals = h_kernel(1j * yy - PI, rr, o)
        return [1j * (1j ** k) * v for k, v in zip(o, vals)]

    yg = z[np.abs(_reduce(1j * z - PI, np.full(z.shape, float(r)))[0]) > 0.05]
    f, f1, f2 = g(r, yg, (0, 1, 2))
    ds = -(g(r + step * r, yg, (0,))[0] - g(r - step * r, yg, (0,))[0]) / (2 * step * r)
    out["heat_G"] = float(np.max(np.abs(-ds + f * f1 + f2) / np.maximum(1.0, np.abs(f) ** 3)))
    xl = 1e-3
    out["laurent"] = float(abs((h_kernel(xl, r)[0].real - 2 / xl) / xl - (s_constant(r) - 1 / 6)))
    return out
