import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from annulus_sle import martingale4 as m4
from annulus_sle.errors import ConvergenceWarning, DomainError
from annulus_sle.specialfn import h_kernel

Z0 = 0.8 * np.exp(1j * np.pi / 3)


def _direct_im(J, rho, theta, kmax=801):
    # independent oracle: raw square-wave Laurent sum with no closed-form part
    k = np.arange(1, kmax + 1, 2)
    q2k = np.exp(-J.r * k)
    s = 1.0 if J.mode == "crosscut" else -1.0
    a = 4 / (k * np.pi) / (1 + s * q2k)
    inner = s * a * np.exp(-k * (J.r + np.log(rho)))  # b_k rho^{-k}
    return np.sum((a * rho ** k + inner) * np.sin(k * theta))


@pytest.mark.parametrize("mode", m4.MODES)
def test_coefficient_invariants(mode):
    J = m4.build_J(1.3, mode)
    k, q = J.ks, J.q
    np.testing.assert_allclose(J.a + J.b, 4 / (k * np.pi), rtol=1e-14)
    sign = 1.0 if mode == "slit" else -1.0
    np.testing.assert_allclose(J.a * q ** k + sign * J.b * q ** (-k), 0.0, atol=1e-14)


@pytest.mark.parametrize("mode", m4.MODES)
def test_outer_boundary_values(mode):
    J = m4.build_J(1.0, mode)
    assert abs(J(0.999j).imag - 1.0) < 1e-2
    assert abs(J(-0.999j).imag + 1.0) < 1e-2
    for rho, th in [(0.9, np.pi / 2), (0.9, 0.4), (0.7, 2.5)]:
        assert abs(J(rho * np.exp(1j * th)).imag - _direct_im(J, rho, th)) < 1e-6


def test_inner_circle_slit():
    for r in (0.5, 1.0, 2.0):
        J = m4.build_J(r, "slit")
        th = np.linspace(-np.pi, np.pi, 37)
        assert np.abs(J(J.q * np.exp(1j * th)).imag).max() < 1e-8


def test_inner_circle_crosscut_neumann():
    J = m4.build_J(1.0, "crosscut")
    th = np.linspace(0.1, 3.0, 15)
    h = 1e-5
    # d/d rho of Im J on the inner circle
    up = J((J.q + h) * np.exp(1j * th)).imag
    dn = J((J.q - h) * np.exp(1j * th)).imag
    assert np.abs((up - dn) / (2 * h)).max() < 1e-6


@pytest.mark.parametrize("mode", m4.MODES)
def test_symmetries(mode):
    J = m4.build_J(1.5, mode)
    w = np.array([0.7 * np.exp(0.4j), 0.55 * np.exp(2.1j), 0.95 * np.exp(-1.0j)])
    np.testing.assert_allclose(J(np.conj(w)), np.conj(J(w)), atol=1e-10)
    np.testing.assert_allclose(J(-w), -J(w), atol=1e-10)


@pytest.mark.parametrize("mode", m4.MODES)
def test_mean_value_property(mode):
    J = m4.build_J(1.0, mode)
    c, rad = 0.75 * np.exp(0.9j), 0.05
    th = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    assert abs(J(c + rad * np.exp(1j * th)).imag.mean() - J(c).imag) < 1e-8


def test_bounded_by_one():
    J = m4.build_J(0.8, "crosscut")
    rho = np.linspace(J.q, 0.999, 30)
    th = np.linspace(-np.pi, np.pi, 40)
    w = rho[:, None] * np.exp(1j * th[None, :])
    assert np.abs(J(w).imag).max() <= 1 + J.tail_bound()


def test_z_derivatives_match_finite_differences():
    J = m4.build_J(1.0, "slit")
    z = np.array([0.4 + 0.2j, -2.0 + 0.45j])
    h = 1e-5
    d1 = (J.jt(z + h) - J.jt(z - h)) / (2 * h)
    d2 = (J.jt(z + h) - 2 * J.jt(z) + J.jt(z - h)) / h ** 2
    np.testing.assert_allclose(J.jt(z, 1), d1, rtol=1e-8)
    np.testing.assert_allclose(J.jt(z, 2), d2, rtol=1e-4, atol=1e-4)


def test_build_errors_and_tail_warning(tmp_path):
    with pytest.raises(DomainError):
        m4.build_J(-1.0)
    with pytest.raises(DomainError):
        m4.build_J(1.0, K=4)
    with pytest.raises(DomainError):
        m4.build_J(1.0, "neumann")
    with pytest.warns(ConvergenceWarning):
        m4.build_J(0.05, K=11)
    J = m4.build_J(1.0)
    J.to_json(tmp_path / "J.json")
    d = json.load(open(tmp_path / "J.json"))
    assert d["K"] == 201 and len(d["a"]) == 101


@pytest.mark.parametrize("mode", m4.MODES)
@pytest.mark.parametrize("r", [1.0, 2.0])
def test_lemma_residual_grid(mode, r):
    J = m4.build_J(r, mode)
    x = np.linspace(-np.pi, np.pi, 20, endpoint=False) + 0.07
    y = np.linspace(0, r / 2, 12)[1:-1]
    z = x[None, :] + 1j * y[:, None]
    F = m4.lemma_residual(J, z)
    assert np.abs(F).max() < 1e-4
    np.testing.assert_allclose(m4.lemma_residual(J, z + np.pi), -F, atol=1e-6)


@pytest.mark.parametrize("r", [1.0, 2.0])
def test_lemma_residual_inner_line(r):
    J = m4.build_J(r, "slit")
    x = np.linspace(-3.0, 3.0, 25)
    assert np.abs(m4.lemma_residual(J, x + 1j * r / 2).imag).max() < 1e-6


def test_wrong_kernel_fails_lemma():
    # negative control: the degree-1 kernel in place of T^(2)
    J = m4.build_J(1.0, "slit")
    z = np.array([0.5 + 0.2j, 1.7 + 0.3j])
    up, dn = m4.build_J(1.0 + 1e-4), m4.build_J(1.0 - 1e-4)
    dr = (up.jt(z) - dn.jt(z)) / 2e-4
    F = -dr + J.jt(z, 1) * h_kernel(z, 1.0)[0] + 0.5 * J.jt(z, 2)
    assert np.abs(F).min() > 1e-2


def test_lemma_domain_errors():
    J = m4.build_J(1.0)
    with pytest.raises(DomainError):
        m4.lemma_residual(J, 0.3 + 0.6j)
    with pytest.raises(DomainError):
        m4.lemma_residual(J, 0.3 - 0.1j)


@settings(max_examples=25, deadline=None)
@given(x=st.floats(-3.0, 3.0), frac=st.floats(0.05, 1.0), r=st.floats(0.5, 3.0))
def test_lemma_property(x, frac, r):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        J = m4.build_J(r, "crosscut")
    z = x + 1j * frac * r / 2
    if abs(np.sin(z)) < 1e-2:
        return
    assert abs(m4.lemma_residual(J, z)) < 1e-4


def test_observable_initial_time_is_deterministic():
    rep = m4.run_observable(1.5, Z0, 20, 1e-3, [0.0], seed=1)
    assert rep.std_error[0] == 0.0
    assert rep.mean[0] == rep.initial == pytest.approx(m4.build_J(1.5).jt(-1j * np.log(Z0)).imag)


def test_observable_bounded_and_reproducible(tmp_path):
    a = m4.run_observable(1.5, Z0, 40, 2e-3, [0.5, 1.2], "crosscut", seed=2, chunk=15)
    b = m4.run_observable(1.5, Z0, 40, 2e-3, [0.5, 1.2], "crosscut", seed=2)
    np.testing.assert_allclose(a.samples, b.samples, atol=1e-12)
    assert np.all(np.abs(a.samples) <= 1.0)
    assert a.reliable
    a.to_csv(tmp_path / "obs.csv")
    rows = np.loadtxt(tmp_path / "obs.csv", delimiter=",", skiprows=1)
    assert rows.shape == (2, 4)


def test_observable_domain_errors():
    with pytest.raises(DomainError):
        m4.run_observable(1.5, 0.3, 5, 1e-3, [0.5])
    with pytest.raises(DomainError):
        m4.run_observable(1.5, Z0, 5, 1e-3, [1.5])


@pytest.mark.parametrize("mode", m4.MODES)
def test_observable_flat_small_run(mode):
    rep = m4.run_observable(1.5, Z0, 600, 1e-3, [0.4, 1.0], mode, seed=21)
    assert np.all(np.abs(rep.mean - rep.initial) < 3 * rep.std_error)


def test_observable_wrong_kappa_drifts():
    rep = m4.run_observable(1.5, Z0, 300, 1e-3, [0.6], "slit", seed=22, kappa=1.0)
    assert abs(rep.mean[0] - rep.initial) > 5 * rep.std_error[0]


def test_observable_off_grid_sample_time():
    # 0.25 is not a multiple of dt; the value must not come from the next grid point
    a = m4.run_observable(1.5, Z0, 4, 4e-3, [0.25], seed=3)
    b = m4.run_observable(1.5, Z0, 4, 4e-3, [0.252], seed=3)
    assert np.all(a.samples != b.samples)
