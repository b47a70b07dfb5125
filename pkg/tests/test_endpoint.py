import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from annulus_sle import endpoint as ep
from annulus_sle.errors import DomainError
from annulus_sle.specialfn import KernelConfig, eval_H

RS = np.linspace(0.3, 3.0, 20)
XS = np.linspace(-3.0, 3.0, 20)
SS = -RS[::-1]


@pytest.mark.parametrize("cid", ["lambda1", "lambda2"])
@pytest.mark.parametrize("variant", ["density", "antiderivative"])
def test_closed_forms_solve_pde(cid, variant):
    res = ep.residual_grid(ep.DensityCandidate(cid), 2.0, variant, RS, XS)
    assert np.abs(res).max() < 1e-5


@pytest.mark.parametrize("cid", ["P1", "P2"])
def test_changed_variable_forms_solve_pde(cid):
    res = ep.residual_grid(ep.DensityCandidate(cid), 2.0, "changed_vars", SS, XS)
    assert np.abs(res).max() < 1e-5


def test_closed_forms_fail_for_other_kappa():
    res = ep.residual_grid(ep.DensityCandidate("lambda2"), 4.0, "density", RS, XS)
    assert np.abs(res).max() > 1e-2


def test_constant_candidate_exact_zero():
    c = ep.DensityCandidate("custom", {"level": "antiderivative"}, fn=lambda r, x: 0 * x + 0.7)
    res = ep.pde_residual(c, 3.0, "antiderivative", (1.3, XS))
    assert np.all(res == 0.0)


def test_unhatted_lambda2_is_not_a_solution():
    # the kernel without the ir shift is not the density of the endpoint
    fn = lambda r, x: r * np.real(eval_H(KernelConfig(r), x + 0j, 1)) + 1.0
    c = ep.DensityCandidate("custom", {"level": "density"}, fn=fn)
    res = ep.pde_residual(c, 2.0, "density", (1.0, np.array([0.5, 1.0, 1.5])))
    assert np.abs(res).min() > 1e-2


def test_lambda2_is_a_probability_density():
    c = ep.DensityCandidate("lambda2")
    for r in (0.3, 1.0, 2.5):
        total, _ = integrate.quad(lambda x: float(c.density(r, x)), -np.pi, np.pi,
                                  epsabs=1e-12, epsrel=1e-12)
        assert abs(total - 2 * np.pi) < 1e-8
        xs = np.linspace(-np.pi, np.pi, 101)
        d = c.density(r, xs)
        assert np.all(d > 0)
        np.testing.assert_allclose(d, d[::-1], atol=1e-12)
        cdf = c.antiderivative(r, np.array([-np.pi, np.pi]))
        assert abs(cdf[1] - cdf[0] - 2 * np.pi) < 1e-10


def test_changed_variable_correspondence():
    # P2 is -pi Lambda1 and P1 is +Lambda2/pi after (r, x) = (-pi^2/s, -pi y/s)
    s = -1.7
    y = np.linspace(-1.2, 1.2, 9)
    r, x = -np.pi ** 2 / s, -np.pi * y / s
    P1 = ep.DensityCandidate("P1").antiderivative(s, y)
    P2 = ep.DensityCandidate("P2").antiderivative(s, y)
    L1 = ep.DensityCandidate("lambda1").antiderivative(r, x)
    L2 = ep.DensityCandidate("lambda2").antiderivative(r, x)
    np.testing.assert_allclose(P2, -np.pi * L1, atol=1e-10)
    np.testing.assert_allclose(P1, L2 / np.pi, atol=1e-10)


def test_candidate_domain_errors():
    with pytest.raises(DomainError):
        ep.DensityCandidate("lambda1").density(-1.0, 0.3)
    with pytest.raises(DomainError):
        ep.DensityCandidate("P1").antiderivative(1.0, 0.3)
    with pytest.raises(DomainError):
        ep.pde_residual(ep.DensityCandidate("P1"), 2.0, "density", (-1.0, 0.2))
    with pytest.raises(DomainError):
        ep.DensityCandidate("nonsense")


@settings(max_examples=30, deadline=None)
@given(r=st.floats(0.3, 3.0), x=st.floats(-3.0, 3.0))
def test_lambda2_residual_property(r, x):
    assert abs(ep.pde_residual(ep.DensityCandidate("lambda2"), 2.0, "density", (r, x))) < 1e-5


def test_histogram_normalisation_and_merge(tmp_path):
    rng = np.random.default_rng(0)
    a = ep.EndpointHistogram.from_samples(2.0, 1.0, rng.uniform(-4, 4, 300), 0.02)
    b = ep.EndpointHistogram.from_samples(2.0, 1.0, rng.uniform(-4, 4, 200), 0.02)
    assert a.counts.sum() == a.n_paths == 300
    assert np.all(a.samples > -np.pi) and np.all(a.samples <= np.pi)
    m = a.merge(b)
    assert m.counts.sum() == 500
    np.testing.assert_array_equal(a.merge(b).counts, b.merge(a).counts)
    assert np.sum(m.density() * np.diff(m.bin_edges)) == pytest.approx(1.0)
    m.to_csv(tmp_path / "h.csv", ep.DensityCandidate("lambda2"))
    rows = np.loadtxt(tmp_path / "h.csv", delimiter=",", skiprows=1)
    assert rows.shape == (64, 3)


def test_histogram_edge_convention():
    h = ep.EndpointHistogram.from_samples(2.0, 1.0, [np.pi, -np.pi, 0.0], 0.02, bins=4)
    # -pi wraps to pi, which belongs to the last bin (pi/2, pi]
    assert h.counts.tolist() == [0, 1, 0, 2]


def test_chi2_merging_and_rejection():
    rng = np.random.default_rng(1)
    h = ep.EndpointHistogram.from_samples(2.0, 1.0, rng.uniform(-np.pi, np.pi, 400), 0.02)
    uniform = ep.DensityCandidate("custom", fn=lambda r, x: x)
    stat, pval, dof = ep.chi2_test(h, uniform)
    assert pval > 1e-3 and dof == 63
    stat, pval, dof = ep.chi2_test(h, ep.DensityCandidate("lambda2"))
    assert pval < 1e-6
    assert dof < 63  # tails of lambda2 at p = 1 need merging


def test_endpoint_determinism_and_prefix_stability():
    a = ep.estimate_endpoint(2.0, 1.0, 12, 2e-3, 0.05, seed=4)
    b = ep.estimate_endpoint(2.0, 1.0, 12, 2e-3, 0.05, seed=4)
    c = ep.estimate_endpoint(2.0, 1.0, 6, 2e-3, 0.05, seed=4)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.samples[:6], c.samples)
    with pytest.raises(DomainError):
        ep.estimate_endpoint(2.0, 1.0, 5, 1e-3, 0.2)


def test_endpoint_eps_sensitivity():
    a = ep.estimate_endpoint(2.0, 1.0, 150, 1e-3, 0.02, seed=5)
    b = ep.estimate_endpoint(2.0, 1.0, 150, 1e-3, 0.04, seed=5)
    assert a.tv_distance(b) < 0.05


def test_small_modulus_concentrates():
    wide = ep.estimate_endpoint(2.0, 1.0, 150, 1e-3, 0.05, seed=6)
    narrow = ep.estimate_endpoint(2.0, 0.2, 150, 2e-4, 0.01, seed=6)
    assert narrow.circular_variance() < wide.circular_variance()


def test_drift_translation_covariance():
    a, fa = ep.drift_ratio(2.0, 1.0, 0.5, 20.0, 5, 1e-3, seed=7, return_flows=True)
    b, fb = ep.drift_ratio(2.0, 1.0, 0.5 + 2 * np.pi, 20.0, 5, 1e-3, seed=7, return_flows=True)
    np.testing.assert_allclose(b - a, 2.0, atol=1e-8)
    for x, y in zip(fa, fb):
        np.testing.assert_allclose(y.X - x.X, 2 * x.s_grid, atol=1e-6)
        assert x.s_grid[0] == pytest.approx(np.pi ** 2)
        np.testing.assert_allclose(x.W.imag, np.pi, atol=1e-6)


def test_drift_monotone_in_start():
    starts = [0.05, 1.0, 3.0, 6.2]
    runs = [ep.drift_ratio(2.0, 1.0, x, 25.0, 8, 1e-3, seed=8, return_flows=True)[1]
            for x in starts]
    for k in range(8):
        X = np.stack([r[k].X for r in runs])
        assert np.all(np.diff(X, axis=0) > 0)


def test_drift_ratio_fluctuation_scale():
    # X_s = s + sqrt(kappa) B(s) + O(1) inside the sector (0, 2s)
    s0, s = np.pi ** 2, 40.0
    r = ep.drift_ratio(2.0, 1.0, np.pi, s, 300, 1e-3, seed=9)
    assert abs(np.median(r) - 1.0) < 0.05
    assert r.std() == pytest.approx(np.sqrt(2.0 * (s - s0)) / s, rel=0.15)


def test_drift_requires_large_s():
    with pytest.raises(DomainError):
        ep.drift_ratio(2.0, 1.0, np.pi, 5.0, 3, 1e-3)


def test_odd_fraction():
    assert ep.odd_fraction([1.0, -1.1, 3.2, 2.0, 0.0]) == pytest.approx(0.4)
