import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from pedloc import distributions as D

params_st = st.builds(
    D.JohnsonSuParams,
    gamma=st.floats(-3, 3),
    delta=st.floats(0.3, 5),
    lam=st.floats(0.05, 10),
    xi=st.floats(-50, 50),
)


def random_params(rng, n):
    return [D.JohnsonSuParams(rng.uniform(-3, 3), rng.uniform(0.3, 5), rng.uniform(0.05, 10),
                              rng.uniform(-50, 50)) for _ in range(n)]


def scipy_jsu(p):
    return stats.johnsonsu(a=p.gamma, b=p.delta, loc=p.xi, scale=p.lam)


def test_log_pdf_matches_scipy():
    # [DERIVED] scipy.stats.johnsonsu is an independent implementation
    rng = np.random.default_rng(0)
    for p in random_params(rng, 30):
        x = p.xi + p.lam * rng.normal(size=5) * 3
        for xv in x:
            assert D.jsu_log_pdf(xv, p) == pytest.approx(scipy_jsu(p).logpdf(xv), rel=1e-9, abs=1e-9)


def test_cdf_ppf_match_scipy():
    rng = np.random.default_rng(1)
    for p in random_params(rng, 20):
        dist = scipy_jsu(p)
        for q in (0.01, 0.3, 0.5, 0.9, 0.999):
            assert D.jsu_ppf(q, p) == pytest.approx(dist.ppf(q), rel=1e-9, abs=1e-9)
            assert D.jsu_cdf(D.jsu_ppf(q, p), p) == pytest.approx(q, abs=1e-12)
        assert D.jsu_median(p) == pytest.approx(dist.median(), rel=1e-9, abs=1e-9)


def test_normalization_by_quadrature():
    # integrate in the standard-normal coordinate: x = xi + lam*sinh(y), no truncation issues
    rng = np.random.default_rng(2)
    for p in random_params(rng, 50):
        def integrand(y):
            x = p.xi + p.lam * math.sinh(y)
            return D.jsu_pdf(x, p) * p.lam * math.cosh(y)
        centre = -p.gamma / p.delta
        half = 12.0 / p.delta  # twelve standard deviations of the underlying normal
        total, _ = integrate.quad(integrand, centre - half, centre + half, points=[centre],
                                  epsabs=1e-12, epsrel=1e-12, limit=200)
        assert abs(total - 1.0) < 1e-6


def test_standard_nll_is_negative_log_density():
    p = D.JohnsonSuParams(0.5, 1.5, 2.0, 10.0)
    for x in (5.0, 10.0, 13.3):
        assert D.jsu_nll(x, p) == pytest.approx(-D.jsu_log_pdf(x, p), rel=1e-14)


def test_paper_literal_hand_value():
    # [TRIVIAL] at x = xi, gamma = 0: a = 0, z = 0 -> -log(delta) - log(lam) - log sqrt(2 pi)
    p = D.JohnsonSuParams(0.0, 2.0, 3.0, 1.0)
    expect = -math.log(2.0) - math.log(3.0) - 0.5 * math.log(2 * math.pi)
    assert D.jsu_nll(1.0, p, mode=D.PAPER_LITERAL) == pytest.approx(expect, rel=1e-14)


def _fd_grad(f, theta, h=1e-6):
    g = np.zeros(len(theta))
    for i in range(len(theta)):
        tp, tm = list(theta), list(theta)
        step = h * max(1.0, abs(theta[i]))
        tp[i] += step
        tm[i] -= step
        g[i] = (f(tp) - f(tm)) / (2 * step)
    return g


@pytest.mark.parametrize("mode", D.NLL_MODES)
def test_nll_gradient_finite_differences(mode):
    rng = np.random.default_rng(3)
    worst = 0.0
    for p in random_params(rng, 100):
        x = float(p.xi + p.lam * rng.normal() * 2)
        analytic = D.jsu_nll_grad(x, p, mode=mode)
        numeric = _fd_grad(lambda t: D.jsu_nll(x, D.JohnsonSuParams(*t), mode=mode), list(p.as_tuple()))
        scale = np.maximum(np.abs(numeric), 1e-3)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
    assert worst < 1e-5


def test_symmetric_baseline_gradients():
    rng = np.random.default_rng(4)
    for _ in range(50):
        mu, s = rng.normal() * 5, rng.uniform(0.2, 3)
        x = mu + rng.normal() * 2
        for nll, grad in ((D.gaussian_nll, D.gaussian_nll_grad), (D.laplace_nll, D.laplace_nll_grad)):
            num = _fd_grad(lambda t: nll(x, D.SymmetricParams(*t)), [mu, s])
            np.testing.assert_allclose(grad(x, D.SymmetricParams(mu, s)), num, rtol=1e-6, atol=1e-8)


def test_symmetric_baseline_values():
    # [DERIVED] scipy densities
    x, mu, s = 1.3, 0.4, 0.7
    assert D.gaussian_nll(x, D.SymmetricParams(mu, s)) == pytest.approx(-stats.norm(mu, s).logpdf(x))
    assert D.laplace_nll(x, D.SymmetricParams(mu, s)) == pytest.approx(-stats.laplace(mu, s).logpdf(x))


def test_sampling_ks_100k():
    p = D.JohnsonSuParams(-1.2, 1.4, 2.5, 12.0)
    draws = D.jsu_sample(p, np.random.default_rng(5), size=100_000)
    stat = stats.kstest(draws, lambda x: D.jsu_cdf_arrays(x, *p.as_tuple())).statistic
    assert stat < stats.kstwo.ppf(0.99, 100_000)


def test_sampling_deterministic():
    p = D.JohnsonSuParams(0.3, 1.0, 1.0, 0.0)
    a = D.jsu_sample(p, np.random.default_rng(7), size=10)
    b = D.jsu_sample(p, np.random.default_rng(7), size=10)
    assert np.array_equal(a, b)
    assert isinstance(D.jsu_sample(p, np.random.default_rng(7)), float)


@given(params_st, st.floats(0, 30))
def test_gamma_zero_symmetry_exact(p, t):
    q = D.JohnsonSuParams(0.0, p.delta, p.lam, p.xi)
    # exact when the offsets are representable; use xi = 0 to stay exact
    q0 = D.JohnsonSuParams(0.0, p.delta, p.lam, 0.0)
    assert D.jsu_pdf(t, q0) == D.jsu_pdf(-t, q0)
    assert D.jsu_median(q) == q.xi


@given(params_st, st.floats(-20, 20))
def test_gamma_reflection(p, x):
    # negating gamma mirrors the density about xi
    mirrored = D.JohnsonSuParams(-p.gamma, p.delta, p.lam, p.xi)
    assert D.jsu_pdf(p.xi + x, p) == pytest.approx(D.jsu_pdf(p.xi - x, mirrored), rel=1e-12, abs=1e-300)


@settings(max_examples=50)
@given(params_st, st.floats(-5, 5), st.floats(0.1, 10), st.floats(-30, 30))
def test_affine_equivariance(p, shift, scale, x):
    moved = D.JohnsonSuParams(p.gamma, p.delta, p.lam * scale, p.xi * scale + shift)
    lhs = D.jsu_log_pdf(x * scale + shift, moved)
    rhs = D.jsu_log_pdf(x, p) - math.log(scale)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


@given(params_st, st.floats(0.001, 0.999), st.floats(0.001, 0.999))
def test_ppf_monotone(p, a, b):
    lo, hi = sorted((a, b))
    assert D.jsu_ppf(lo, p) <= D.jsu_ppf(hi, p)


@pytest.mark.parametrize("kwargs", [
    dict(gamma=0, delta=0, lam=1, xi=0),
    dict(gamma=0, delta=1, lam=-1, xi=0),
    dict(gamma=math.nan, delta=1, lam=1, xi=0),
    dict(gamma=0, delta=1, lam=1, xi=math.inf),
])
def test_invalid_params_rejected(kwargs):
    with pytest.raises(D.DomainError):
        D.JohnsonSuParams(**kwargs)


def test_invalid_inputs_rejected():
    p = D.JohnsonSuParams(0, 1, 1, 0)
    with pytest.raises(D.DomainError):
        D.jsu_nll(math.nan, p)
    for q in (0.0, 1.0, -0.1):
        with pytest.raises(D.DomainError):
            D.jsu_ppf(q, p)
    with pytest.raises(D.DomainError):
        D.jsu_nll(0.0, p, mode="bogus")


def test_paper_literal_unbounded_below():
    # the literal variant keeps -log(lam) with the wrong sign, so growing lam (or delta)
    # at x = xi drives it down without bound; documented, not the default
    losses = [D.jsu_nll(0.0, D.JohnsonSuParams(0.0, 1.0, lam, 0.0), mode=D.PAPER_LITERAL)
              for lam in (1.0, 1e3, 1e6, 1e12)]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < -20
    standard = [D.jsu_nll(0.0, D.JohnsonSuParams(0.0, 1.0, lam, 0.0)) for lam in (1.0, 1e3)]
    assert standard[1] > standard[0]
