import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

import dipper.model as model
from dipper.model import (
    LIKELIHOODS,
    PARAMETERIZATIONS,
    PRESETS,
    Layout,
    ParameterVector,
    Posterior,
    PriorConfig,
    al_cdf,
    al_logpdf,
    al_sample,
    beta_draws,
    init_params,
    inverse_transform,
    log_jacobian,
    log_likelihood,
    log_posterior_and_grad,
    log_prior,
    mixture_coefficients,
    transform_params,
)

CONFIGS = list(itertools.product(sorted(PRESETS), LIKELIHOODS))


def _problem(rng, n=10, k=2, m=0, lik="bernoulli_logit"):
    X = np.column_stack([np.arange(n) % 2, rng.normal(size=n), rng.normal(size=(n, m))])
    Y = rng.integers(0, 2, (n, k)).astype(float) if lik == "bernoulli_logit" else rng.normal(size=(n, k))
    return X, Y


# asymmetric Laplace

def test_al_peak_and_symmetry():
    assert al_logpdf(0.0, 0.0, 1.0, 0.5) == pytest.approx(math.log(0.25), abs=1e-12)
    x = np.linspace(-7, 7, 29)
    for tau in (0.3, 1.0, 5.0):
        np.testing.assert_array_equal(al_logpdf(x, 0, tau, 0.5), al_logpdf(-x, 0, tau, 0.5))


def _al_masses(tau, nu, lo, hi, mu=0.0):
    f = lambda x: math.exp(al_logpdf(x, mu, tau, nu))  # noqa: E731
    left = integrate.quad(f, lo, mu, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    right = integrate.quad(f, mu, hi, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    return left, right


def test_al_quadrature_example():
    left, right = _al_masses(1.0, 0.3, -200, 200)
    assert abs(left + right - 1) < 1e-6
    assert abs(left - 0.3) < 1e-6


@pytest.mark.parametrize("tau,nu", list(itertools.product([0.25, 1.0, 4.0], [0.1, 0.3, 0.5, 0.7, 0.9])))
def test_al_normalization_and_quantile(tau, nu):
    left, right = _al_masses(tau, nu, -np.inf, np.inf, mu=0.3)
    assert abs(left + right - 1) < 1e-6
    assert abs(left / (left + right) - nu) < 1e-6
    assert abs(left - nu) < 1e-6


def test_al_symmetric_slice_is_laplace():
    x = np.linspace(-30, 30, 301)
    for tau in (0.1, 1.0, 3.0):
        np.testing.assert_allclose(al_logpdf(x, 0.4, tau, 0.5),
                                   stats.laplace.logpdf(x, loc=0.4, scale=2 * tau), atol=1e-12, rtol=0)


def test_al_domain_errors():
    for tau, nu in [(0.0, 0.5), (-1.0, 0.5), (1.0, 0.0), (1.0, 1.0), (1.0, 1.5)]:
        with pytest.raises(ValueError):
            al_logpdf(0.0, 0.0, tau, nu)


def test_al_finite_for_finite_x():
    assert np.isfinite(al_logpdf(np.array([-1e300, 1e300]), 0, 1, 0.3)).all()


def test_al_sampler_and_mixture_form(rng):
    tau, nu = 0.7, 0.8
    x = al_sample(rng, 20_000, 0.0, tau, nu)
    assert stats.kstest(x, lambda v: al_cdf(v, 0.0, tau, nu)).pvalue > 0.01
    theta, psi = mixture_coefficients(nu)
    w = rng.exponential(size=20_000)
    y = tau * (theta * w + psi * np.sqrt(w) * rng.standard_normal(20_000))
    assert stats.kstest(y, lambda v: al_cdf(v, 0.0, tau, nu)).pvalue > 0.01


# priors

def _independent_log_prior(p, cfg, gaussian):
    """Term-by-term sum from scipy densities."""
    lp = stats.halfnorm.logpdf(p.tau0, scale=cfg.tau0_scale)
    if cfg.nu_mode == "free":
        lap = stats.laplace(cfg.nu_location, cfg.nu_scale)
        lp += lap.logpdf(p.nu0) - np.log(lap.cdf(1) - lap.cdf(0))
    elif cfg.nu_mode == "beta_hyperprior":
        lp += stats.beta.logpdf(p.nu0, *cfg.beta_shape)
    nu = p.nu0
    for b in p.beta:
        u = b / p.tau0
        lp += np.log(nu * (1 - nu) / p.tau0) - (u * nu if u >= 0 else u * (nu - 1))
    lp += stats.norm.logpdf(p.alpha, 0, cfg.alpha_sd).sum()
    lp += stats.norm.logpdf(p.beta_reads, cfg.reads_prior_mean, cfg.reads_prior_sd).sum()
    lp += stats.norm.logpdf(p.beta_cov, 0, cfg.covariate_sd).sum()
    if gaussian:
        lp += stats.gamma.logpdf(p.sigma, 1.0, scale=1.0).sum()
    return lp


@pytest.mark.parametrize("preset,lik", CONFIGS)
def test_log_prior_term_by_term(rng, preset, lik):
    cfg = PRESETS[preset]
    lay = Layout.for_model(3, 2, cfg, lik)
    for _ in range(5):
        p = transform_params(rng.uniform(-2, 2, lay.size), lay)
        assert log_prior(p, cfg) == pytest.approx(_independent_log_prior(p, cfg, lik == "gaussian"), abs=1e-10)


def _params(beta, nu=0.5, tau=1.0):
    k = len(beta)
    return ParameterVector(tau, nu, np.zeros(k), np.asarray(beta, float), np.full(k, 2.0), np.zeros((k, 0)))


def test_log_prior_al_peak_contribution():
    cfg = PriorConfig()
    p = _params([0.0])
    rest = (stats.halfnorm.logpdf(1.0) + model.nu_hyperprior_logpdf(0.5, cfg)
            + stats.norm.logpdf(0, 0, 5) + stats.norm.logpdf(2, 2, 2))
    assert log_prior(p, cfg) - rest == pytest.approx(math.log(0.25), abs=1e-12)


def test_symm_equals_pinned_free_minus_hyperprior(rng):
    free, symm = PriorConfig(), PRESETS["symm"]
    p = _params(rng.normal(size=4), nu=0.5, tau=0.8)
    assert log_prior(p, symm) == pytest.approx(
        log_prior(p, free) - model.nu_hyperprior_logpdf(0.5, free), abs=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(0.05, 5))
def test_symmetric_prior_invariant_under_sign_flip(beta, tau):
    cfg = PRESETS["symm"]
    assert log_prior(_params(beta, tau=tau), cfg) == pytest.approx(
        log_prior(_params(-np.asarray(beta), tau=tau), cfg), abs=1e-9)


def test_prior_config_validation_and_json():
    with pytest.raises(ValueError):
        PriorConfig(nu_location=1.2)
    with pytest.raises(ValueError):
        PriorConfig(tau0_scale=0)
    with pytest.raises(ValueError):
        PriorConfig.preset("nope")
    for cfg in PRESETS.values():
        assert PriorConfig.from_json(cfg.to_json()) == cfg
    assert PRESETS["wide"].tau0_scale == 2.0 and PRESETS["narrow"].tau0_scale == 0.5
    assert PRESETS["skewed"].beta_shape == (5.0, 5.0)


# likelihood

def test_likelihood_midpoint_and_saturation():
    p = _params([0.0])
    p.beta_reads[:] = 0.0
    assert log_likelihood(p, np.zeros((1, 2)), [[1.0]]) == pytest.approx(math.log(0.5))
    for eta, y, expected in [(800.0, 1.0, 0.0), (800.0, 0.0, -800.0), (-800.0, 0.0, 0.0)]:
        p.alpha[:] = eta
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            val = log_likelihood(p, np.zeros((1, 2)), [[y]])
        assert val == pytest.approx(expected, abs=1e-12)
        assert val <= 0.0


def test_likelihood_high_precision_oracle(rng):
    X, Y = _problem(rng, n=6, k=2, m=1)
    lay = Layout(2, 1)
    p = transform_params(rng.uniform(-3, 3, lay.size), lay)
    mpmath.mp.dps = 50
    A = np.column_stack([np.ones(6), X])
    C = p.coefficient_matrix()
    total = mpmath.mpf(0)
    for i in range(6):
        for j in range(2):
            eta = sum(mpmath.mpf(float(A[i, c])) * mpmath.mpf(float(C[j, c])) for c in range(4))
            total += int(Y[i, j]) * eta - mpmath.log(1 + mpmath.exp(eta))
    assert log_likelihood(p, X, Y) == pytest.approx(float(total), abs=1e-12)


def test_gaussian_likelihood_matches_scipy(rng):
    X, Y = _problem(rng, n=8, k=3, lik="gaussian")
    lay = Layout(3, 0, gaussian=True)
    p = transform_params(rng.uniform(-1, 1, lay.size), lay)
    eta = np.column_stack([np.ones(8), X]) @ p.coefficient_matrix().T
    expected = stats.norm.logpdf(Y, eta, p.sigma).sum()
    assert log_likelihood(p, X, Y, "gaussian") == pytest.approx(expected, abs=1e-10)


@given(st.integers(0, 10_000))
def test_alpha_gradient_monotone_in_y(seed):
    rng = np.random.default_rng(seed)
    X, Y = _problem(rng, n=6, k=2)
    lay = Layout(2, 0, has_nu=True)
    z = rng.uniform(-2, 2, lay.size)
    post = Posterior(X, Y)
    i, j = rng.integers(6), rng.integers(2)
    Y0, Y1 = Y.copy(), Y.copy()
    Y0[i, j], Y1[i, j] = 0.0, 1.0
    a = lay.n_hyper + j * lay.block_size
    g0 = Posterior(X, Y0)(z)[1][a]
    g1 = Posterior(X, Y1)(z)[1][a]
    assert g1 > g0
    assert post.dim == lay.size


# layout and transforms

@pytest.mark.parametrize("has_nu,m,gaussian", list(itertools.product([True, False], [0, 2], [False, True])))
def test_layout_size(has_nu, m, gaussian):
    k = 4
    lay = Layout(k, m, has_nu=has_nu, gaussian=gaussian)
    assert lay.size == (2 if has_nu else 1) + k * (3 + m) + (k if gaussian else 0)
    assert len(lay.names()) == lay.size
    mix = Layout(k, m, has_nu=has_nu, gaussian=gaussian, parameterization="mixture")
    assert mix.size == lay.size + k
    np.testing.assert_array_equal(
        [n for n in np.array(lay.names())[lay.beta_index()]], [f"beta[{j}]" for j in range(k)])


def test_transform_basics():
    lay = Layout(2, 0)
    p = transform_params(np.zeros(lay.size), lay)
    assert p.tau0 == 1.0 and p.nu0 == 0.5


@pytest.mark.parametrize("param", PARAMETERIZATIONS)
@pytest.mark.parametrize("gaussian", [False, True])
def test_transform_round_trip(rng, param, gaussian):
    lay = Layout(3, 1, gaussian=gaussian, parameterization=param)
    worst = 0.0
    for _ in range(1000):
        z = rng.uniform(-3, 3, lay.size)
        p = transform_params(z, lay)
        assert p.tau0 > 0 and 0 < p.nu0 < 1
        worst = max(worst, np.max(np.abs(inverse_transform(p, lay) - z)))
    assert worst < 1e-12


def test_beta_draws_matches_transform(rng):
    for param in PARAMETERIZATIONS:
        lay = Layout(3, 0, parameterization=param)
        z = rng.uniform(-2, 2, (2, 5, lay.size))
        b = beta_draws(z, lay)
        assert b.shape == (2, 5, 3)
        np.testing.assert_allclose(b[1, 3], transform_params(z[1, 3], lay).beta, rtol=1e-14)


def test_init_params():
    lay = Layout(5, 1)
    a, b = init_params(7, lay, 4), init_params(7, lay, 4)
    np.testing.assert_array_equal(a, b)
    assert len({tuple(r) for r in a}) == 4
    big = init_params(3, Layout(10_000, 7), 1).ravel()[:100_000]
    assert big.min() >= -2 and big.max() <= 2
    assert stats.kstest(big, stats.uniform(-2, 4).cdf).pvalue > 0.01


# log posterior and gradient

def _fd_check(post, z, h=1e-5):
    lp, g = post(z)
    fd = np.array([(post(z + e)[0] - post(z - e)[0]) / (2 * h) for e in np.eye(len(z)) * h])
    return np.abs(fd - g) / np.maximum(np.abs(g), 1.0)


@pytest.mark.parametrize("preset,lik", CONFIGS)
@pytest.mark.parametrize("param", PARAMETERIZATIONS)
def test_gradient_finite_differences(rng, preset, lik, param):
    X, Y = _problem(rng, n=10, k=2, m=1, lik=lik)
    post = Posterior(X, Y, PRESETS[preset], lik, param)
    b = post.layout.beta_index()
    for _ in range(10):
        z = rng.uniform(-2, 2, post.dim)
        z[b] = np.where(np.abs(z[b]) < 1e-3, 0.5, z[b])
        assert _fd_check(post, z).max() < 1e-6


@pytest.mark.parametrize("param", PARAMETERIZATIONS)
def test_fused_and_vectorized_likelihood_agree(rng, monkeypatch, param):
    X, Y = _problem(rng, n=12, k=4, m=1)
    z = rng.uniform(-2, 2, Layout(4, 1, parameterization=param).size)
    monkeypatch.setattr(model, "_FUSED_MAX_CELLS", 10**9)
    fused = Posterior(X, Y, parameterization=param)
    monkeypatch.setattr(model, "_FUSED_MAX_CELLS", 0)
    vector = Posterior(X, Y, parameterization=param)
    assert fused._fused and not vector._fused
    lp1, g1 = fused(z)
    lp2, g2 = vector(z)
    assert lp1 == pytest.approx(lp2, abs=1e-10)
    np.testing.assert_allclose(g1, g2, atol=1e-10)


@pytest.mark.parametrize("preset,lik", CONFIGS)
@pytest.mark.parametrize("param", ["centered", "noncentered"])
def test_decomposition(rng, preset, lik, param):
    X, Y = _problem(rng, n=9, k=3, m=2, lik=lik)
    cfg = PRESETS[preset]
    post = Posterior(X, Y, cfg, lik, param)
    for _ in range(5):
        z = rng.uniform(-2, 2, post.dim)
        p = transform_params(z, post.layout)
        expected = log_prior(p, cfg) + log_likelihood(p, X, Y, lik) + log_jacobian(z, post.layout)
        assert post(z)[0] == pytest.approx(expected, abs=1e-9)


def test_mixture_marginal_prior_density():
    """Integrating the latent weight out of the mixture form recovers the AL prior."""
    tau = 0.7
    for nu in (0.2, 0.5, 0.85):
        theta, psi = mixture_coefficients(nu)
        for beta in (-1.3, 0.0, 0.4, 2.0):
            def f(w):
                return stats.norm.pdf(beta, tau * theta * w, tau * psi * math.sqrt(w)) * math.exp(-w)
            val = integrate.quad(f, 0, np.inf, epsabs=1e-14, limit=200)[0]
            assert math.log(val) == pytest.approx(al_logpdf(beta, 0, tau, nu), abs=1e-7)


def test_reads_gradient_at_prior_mean():
    X = np.column_stack([np.r_[0, 0, 1, 1], np.zeros(4)])
    Y = np.zeros((4, 2))
    post = Posterior(X, Y)
    lay = post.layout
    z = np.zeros(lay.size)
    z[lay.n_hyper + 2::lay.block_size] = 2.0
    g = post(z)[1]
    # flat reads column: likelihood gradient in beta_reads is zero, and so is the prior's at its mean
    np.testing.assert_array_equal(g[lay.n_hyper + 2::lay.block_size], 0.0)


def test_nonfinite_and_shape_errors():
    X, Y = _problem(np.random.default_rng(0))
    post = Posterior(X, Y)
    z = np.zeros(post.dim)
    for bad in (np.nan, np.inf, -np.inf):
        z2 = z.copy()
        z2[3] = bad
        lp, g = post(z2)
        assert lp == -math.inf and not g.any()
    with pytest.raises(ValueError):
        post(np.zeros(post.dim + 1))
    assert log_posterior_and_grad(z, X, Y)[0] == post(z)[0]


@pytest.mark.parametrize("param", PARAMETERIZATIONS)
def test_extreme_coordinates_are_finite_or_rejected(param):
    rng = np.random.default_rng(5)
    for lik in LIKELIHOODS:
        X, Y = _problem(rng, n=10, k=3, lik=lik)
        post = Posterior(X, Y, PriorConfig(), lik, param)
        for v, k in itertools.product((-800.0, -60.0, 60.0, 800.0), (0, 1, 2, 3, post.dim - 1)):
            z = np.zeros(post.dim)
            z[k] = v
            lp, g = post(z)
            assert (math.isfinite(lp) and np.isfinite(g).all()) or (lp == -math.inf and not g.any())


@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    k = 4
    X, Y = _problem(rng, n=8, k=k)
    post = Posterior(X, Y)
    lay = post.layout
    z = rng.uniform(-2, 2, lay.size)
    perm = rng.permutation(k)
    zp = np.r_[z[:lay.n_hyper], lay.blocks(z)[perm].ravel()]
    lp, g = post(z)
    lpp, gp = Posterior(X, Y[:, perm])(zp)
    assert lpp == pytest.approx(lp, abs=1e-9)
    np.testing.assert_allclose(lay.blocks(gp), lay.blocks(g)[perm], atol=1e-9)
