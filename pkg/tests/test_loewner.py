import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from annulus_sle import loewner as lw
from annulus_sle.errors import DomainError, SwallowedError

TIGHT = dict(rtol=1e-12, atol=1e-14)


def test_zero_kappa_gives_zero_path():
    d = lw.sample_driving(0.0, 1.0, 0.01, 0.5, seed=3)
    assert np.all(d.values == 0.0)


def test_brownian_variance():
    vals = np.array([lw.sample_driving(2.0, 1.0, 0.05, 0.5, seed=i).values[-1]
                     for i in range(10_000)])
    assert 0.94 <= vals.var(ddof=1) <= 1.06


def test_driving_deterministic_and_grid():
    a = lw.sample_driving(2.0, 1.0, 1e-3, 0.37, seed=11)
    b = lw.sample_driving(2.0, 1.0, 1e-3, 0.37, seed=11)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values[0] == 0.0
    assert a.times[-1] == pytest.approx(0.37)


def test_driving_rejects_t_max_at_p():
    with pytest.raises(DomainError):
        lw.sample_driving(2.0, 1.0, 0.01, 1.0)
    d = lw.sample_driving(2.0, 1.0, 0.01, 0.5)
    with pytest.raises(DomainError):
        lw.evolve_points(d, [0.1 + 0.5j], 0.6)


def test_driving_csv_roundtrip(tmp_path):
    d = lw.sample_driving(2.0, 1.0, 0.01, 0.5, seed=5)
    d.to_csv(tmp_path / "xi.csv")
    e = lw.DrivingPath.from_csv(tmp_path / "xi.csv", kappa=2.0, p=1.0)
    np.testing.assert_array_equal(d.values, e.values)
    np.testing.assert_array_equal(d.times, e.times)


def test_t_end_zero():
    d = lw.sample_driving(2.0, 1.0, 0.01, 0.5, seed=1)
    (res,) = lw.evolve_points(d, [0.3 + 0.4j], 0.0)
    assert res.trajectory == [(0.0, 0.3 + 0.4j)]
    assert res.swallow_time is None


def test_boundary_height_is_p_minus_t():
    d = lw.sample_driving(2.0, 1.0, 1e-3, 0.8, seed=2)
    res = lw.evolve_points(d, np.linspace(-3, 3, 7) + 1.0j, 0.8)
    for r in res:
        assert np.max(np.abs(r.values.imag - (1.0 - r.times))) < 1e-6


def test_translation_equivariance():
    d = lw.sample_driving(2.0, 1.0, 1e-3, 0.6, seed=4)
    z = np.array([0.4 + 0.7j, 1.9 + 0.2j])
    a = lw.evolve_points(d, z, 0.6, swallow_eps=1e-6)
    b = lw.evolve_points(d, z + 2 * np.pi, 0.6, swallow_eps=1e-6)
    for x, y in zip(a, b):
        assert abs(y.final - x.final - 2 * np.pi) < 1e-8


def test_covering_consistency_with_base_flow():
    d = lw.sample_driving(2.0, 1.0, 1e-3, 0.5, seed=6)
    z = np.array([0.7 + 0.5j, -2.0 + 0.3j, 3.0 + 0.9j])
    cov = lw.evolve_points(d, z, 0.5)
    base = lw.evolve_points(d, np.exp(1j * z), 0.5, mode="base")
    for c, b in zip(cov, base):
        assert abs(np.exp(1j * c.final) - b.final) < 1e-8


@pytest.mark.parametrize("n", [2, 4])
def test_lifted_semiconjugacy(n):
    p = 1.2
    d = lw.sample_driving(2.0, p, 1e-3, 0.5, seed=7 + n)
    z = np.array([0.3, 1.1, -0.8]) + 1j * np.array([0.2, 0.6, 0.9]) * p / n
    lifted = lw.evolve_points(d, z, 0.5, mode=f"lifted{n}", swallow_eps=1e-6)
    base = lw.evolve_points(d, np.exp(1j * n * z), 0.5, mode="base", swallow_eps=1e-6)
    for a, b in zip(lifted, base):
        assert a.swallow_time is None and b.swallow_time is None
        assert abs(np.exp(1j * n * a.final) - b.final) < 1e-6


def test_semigroup_with_shifted_driving():
    d = lw.sample_driving(2.0, 1.0, 1e-3, 0.6, seed=8)
    z = np.array([0.5 + 0.6j, 2.0 + 0.95j])
    t1 = 0.25
    direct = [r.final for r in lw.evolve_points(d, z, 0.6)]
    mid = np.array([r.final for r in lw.evolve_points(d, z, t1)])
    x1 = float(d(t1))
    tail = lw.evolve_points(d.shifted(t1), mid - x1, 0.6 - t1)
    for a, b in zip(direct, tail):
        assert abs(a - (b.final + x1)) < 1e-7


def test_richardson_in_dt():
    # smooth driving: the piecewise-linear chains converge at second order
    fn = lambda t: np.sin(3 * t)
    z = 0.2 + 0.5j
    ends = []
    for dt in (4e-2, 2e-2, 1e-2):
        d = lw.custom_driving(fn, 1.0, dt, 0.6)
        ends.append(lw.evolve_points(d, [z], 0.6, **TIGHT)[0].final)
    e1 = abs(ends[1] - ends[0])
    e2 = abs(ends[2] - ends[1])
    local = e1 / 3.0  # Richardson error estimate of the dt/2 run
    assert e2 < 4 * local
    assert e2 < e1


def test_derivative_matches_finite_difference():
    d = lw.sample_driving(2.0, 1.0, 1e-3, 0.4, seed=9)
    z0 = 0.6 + 0.5j
    _, phi, dphi = lw.evolve_derivative(d, z0, 0.4, **TIGHT)
    h = 1e-5
    fp = lw.evolve_points(d, [z0 + h, z0 - h], 0.4, **TIGHT)
    fd = (fp[0].final - fp[1].final) / (2 * h)
    assert abs(dphi[-1] - fd) < 1e-5 * abs(fd)
    assert abs(phi[-1] - lw.evolve_points(d, [z0], 0.4, **TIGHT)[0].final) < 1e-10


def test_derivative_at_time_zero():
    d = lw.sample_driving(2.0, 1.0, 1e-3, 0.4, seed=9)
    t, phi, dphi = lw.evolve_derivative(d, 0.3 + 0.3j, 0.0)
    assert dphi[0] == 1.0


def test_constant_driving_derivative_real_positive():
    d = lw.constant_driving(0.0, 1.0, 1e-2, 0.7)
    _, phi, dphi = lw.evolve_derivative(d, 1.3 + 1.0j, 0.7)
    assert np.all(np.abs(dphi.imag) < 1e-9)
    assert np.all(dphi.real > 0)


def test_derivative_swallowed_raises():
    d = lw.constant_driving(0.0, 1.0, 1e-2, 0.9)
    with pytest.raises(SwallowedError):
        lw.evolve_derivative(d, 0.01j, 0.9)


def test_swallow_time_recorded():
    d = lw.constant_driving(0.0, 1.0, 1e-2, 0.9)
    res = lw.evolve_points(d, [0.02j, 0.5 + 1.0j], 0.9)
    assert res[0].swallow_time is not None and res[0].swallow_time < 0.01
    assert res[1].swallow_time is None
    assert np.isnan(res[0].values[-1])


def test_trace_basic_properties(tmp_path):
    p = 1.0
    d = lw.sample_driving(2.0, p, 1e-3, 0.9, seed=10)
    tr = lw.compute_trace(d, [0.0, 0.1, 0.4, 0.9])
    assert tr.points[0] == 1.0
    r = np.abs(tr.points)
    assert np.all(r <= 1 + 1e-12) and np.all(r >= np.exp(-p))
    tr.to_csv(tmp_path / "trace.csv")
    back = np.loadtxt(tmp_path / "trace.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(back[:, 1] + 1j * back[:, 2], tr.points)


def test_trace_forward_backward_consistency():
    d = lw.sample_driving(2.0, 1.0, 1e-3, 0.5, seed=12)
    t = 0.5
    tr = lw.compute_trace(d, [t])
    res = lw.evolve_points(d, tr.lifts, t, swallow_eps=0.0, **TIGHT)[0]
    xi = d(res.times)
    gap = np.abs(lw.wrap(res.values.real - xi) + 1j * res.values.imag)
    late = gap[res.times >= 0.4]
    assert gap[-1] < 1e-4
    assert late[-1] < late[0]


@settings(max_examples=20, deadline=None)
@given(x=st.floats(-np.pi, np.pi), y=st.floats(0.05, 0.95), seed=st.integers(0, 10_000))
def test_flow_stays_in_strip(x, y, seed):
    d = lw.sample_driving(2.0, 1.0, 5e-3, 0.3, seed=seed)
    res = lw.evolve_points(d, [x + 1j * y], 0.3)[0]
    v = res.values[np.isfinite(res.values)]
    assert np.all(v.imag > -1e-9)
    assert np.all(v.imag <= 1.0 - res.times[: v.size] + 1e-9)


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-3, 3), gap=st.floats(0.05, 2.0), seed=st.integers(0, 10_000))
def test_order_preserved_on_top_line(a, gap, seed):
    d = lw.sample_driving(2.0, 1.0, 5e-3, 0.5, seed=seed)
    lo, hi = lw.evolve_points(d, [a + 1j, a + gap + 1j], 0.5, swallow_eps=1e-9)
    assert np.all(np.diff(np.c_[lo.values.real, hi.values.real], axis=1) > 0)
