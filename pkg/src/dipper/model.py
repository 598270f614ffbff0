"""Hierarchical log-posterior for per-feature differential prevalence.

Every feature ``j`` gets a logistic (or Gaussian) regression

    eta_ij = alpha_j + beta_j * group_i + beta_reads_j * reads_i + sum_m beta_jm * x_im

and the group effects share an asymmetric Laplace prior whose scale ``tau0``
and skewness ``nu0`` are themselves given hyperpriors.

The asymmetric Laplace uses the quantile (check-function) form

    log p(x) = log(nu (1 - nu) / tau) - rho_nu((x - mu) / tau),
    rho_nu(u) = u * (nu - 1{u < 0}),

so ``P(X <= mu) = nu``. At ``nu = 0.5`` this is a Laplace with scale ``2 tau``.

Unconstrained layout (see :class:`Layout`)::

    [z_tau0, (z_nu0), block_1, ..., block_K]
    block_j = [alpha_j, b_j, beta_reads_j, beta_j1 .. beta_jM, (z_sigma_j), (log w_j)]

with ``tau0 = exp(z_tau0)``, ``nu0 = logistic(z_nu0)``, ``sigma_j = exp(z_sigma_j)``.
``b_j`` is ``beta_j`` itself (centered), ``beta_j / tau0`` (non-centered) or
the normal part of the exponential-normal mixture (mixture, which also adds
the log mixing weight ``log w_j``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import betaln, expit

from . import _kernels

_LOG_2PI = math.log(2.0 * math.pi)

NU_MODES = ("free", "fixed_symmetric", "beta_hyperprior")
LIKELIHOODS = ("bernoulli_logit", "gaussian")


def al_logpdf(x, mu=0.0, tau=1.0, nu=0.5):
    """Asymmetric Laplace log-density in the check-function parameterization."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau!r}")
    if not 0.0 < nu < 1.0:
        raise ValueError(f"nu must lie in (0, 1), got {nu!r}")
    u = (np.asarray(x, dtype=float) - mu) / tau
    rho = u * (nu - (u < 0))
    out = math.log(nu * (1.0 - nu) / tau) - rho
    return out if np.ndim(out) else float(out)


def al_cdf(x, mu=0.0, tau=1.0, nu=0.5):
    u = (np.asarray(x, dtype=float) - mu) / tau
    left = nu * np.exp(np.minimum(u, 0.0) * (1.0 - nu))
    right = 1.0 - (1.0 - nu) * np.exp(-np.maximum(u, 0.0) * nu)
    return np.where(u < 0, left, right)


def al_sample(rng, size, mu=0.0, tau=1.0, nu=0.5):
    """Inverse-CDF draws from the asymmetric Laplace."""
    p = rng.random(size)
    left = np.log(np.maximum(p, 1e-300) / nu) / (1.0 - nu)
    right = -np.log(np.maximum((1.0 - p) / (1.0 - nu), 1e-300)) / nu
    return mu + tau * np.where(p < nu, left, right)


@dataclass(frozen=True)
class PriorConfig:
    tau0_scale: float = 1.0
    nu_mode: str = "free"
    nu_location: float = 0.50
    nu_scale: float = 0.05
    beta_shape: tuple = (5.0, 5.0)
    alpha_sd: float = 5.0
    reads_prior_mean: float = 2.0
    reads_prior_sd: float = 2.0
    covariate_sd: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta_shape", tuple(float(b) for b in self.beta_shape))
        if self.nu_mode not in NU_MODES:
            raise ValueError(f"nu_mode must be one of {NU_MODES}, got {self.nu_mode!r}")
        for name in ("tau0_scale", "nu_scale", "alpha_sd", "reads_prior_sd", "covariate_sd"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if len(self.beta_shape) != 2 or min(self.beta_shape) <= 0:
            raise ValueError("beta_shape must be two positive numbers")
        if not 0.0 < self.nu_location < 1.0:
            raise ValueError("nu_location must lie in (0, 1)")

    @classmethod
    def preset(cls, name: str) -> "PriorConfig":
        try:
            return PRESETS[name]
        except KeyError:
            raise ValueError(
                f"unknown prior preset {name!r}; choose from {sorted(PRESETS)}"
            ) from None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PriorConfig":
        return cls(**json.loads(text))


PRESETS = {
    "default": PriorConfig(),
    "symm": PriorConfig(nu_mode="fixed_symmetric"),
    "skewed": PriorConfig(nu_mode="beta_hyperprior", beta_shape=(5.0, 5.0)),
    "wide": PriorConfig(tau0_scale=2.0),
    "narrow": PriorConfig(tau0_scale=0.5),
}


PARAMETERIZATIONS = ("centered", "noncentered", "mixture")

# above this many sample x feature cells the vectorized likelihood is faster
_FUSED_MAX_CELLS = 600


def mixture_coefficients(nu):
    """``(theta, psi)`` of the exponential-normal mixture for AL(0, 1, nu).

    If ``w ~ Exp(1)`` and ``z ~ N(0, 1)`` then ``theta * w + psi * sqrt(w) * z``
    has density ``nu (1 - nu) exp(-rho_nu(x))``.
    """
    c = nu * (1.0 - nu)
    return (1.0 - 2.0 * nu) / c, math.sqrt(2.0 / c)


@dataclass(frozen=True)
class Layout:
    """Positions of every parameter in the flat unconstrained vector.

    ``parameterization`` selects the group-effect coordinate: ``beta_j``
    itself (centered), ``beta_j / tau0`` (noncentered), or a standard normal
    ``z_j`` plus a log mixing weight ``log w_j`` appended to the block
    (mixture), with ``beta_j = tau0 (theta w_j + psi sqrt(w_j) z_j)``.
    The mixture form has the same marginal prior for ``beta_j`` but a smooth
    log density, which NUTS handles far better than the Laplace kink.
    """

    n_features: int
    n_covariates: int = 0
    has_nu: bool = True
    gaussian: bool = False
    parameterization: str = "centered"

    def __post_init__(self):
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")

    @classmethod
    def for_model(cls, n_features, n_covariates, config: PriorConfig,
                  likelihood="bernoulli_logit", parameterization="centered"):
        return cls(
            n_features=n_features,
            n_covariates=n_covariates,
            has_nu=config.nu_mode != "fixed_symmetric",
            gaussian=likelihood == "gaussian",
            parameterization=parameterization,
        )

    @property
    def n_hyper(self) -> int:
        return 2 if self.has_nu else 1

    @property
    def n_coef(self) -> int:
        """Regression coefficients per feature (intercept, group, reads, covariates)."""
        return 3 + self.n_covariates

    @property
    def sigma_col(self):
        return self.n_coef if self.gaussian else None

    @property
    def mix_col(self):
        if self.parameterization != "mixture":
            return None
        return self.n_coef + (1 if self.gaussian else 0)

    @property
    def block_size(self) -> int:
        return self.n_coef + (1 if self.gaussian else 0) + (self.parameterization == "mixture")

    @property
    def size(self) -> int:
        return self.n_hyper + self.n_features * self.block_size

    def beta_index(self) -> np.ndarray:
        """Flat indices of the per-feature group-effect coordinates."""
        return self.n_hyper + 1 + self.block_size * np.arange(self.n_features)

    def blocks(self, z):
        return np.asarray(z)[..., self.n_hyper:].reshape(
            np.shape(z)[:-1] + (self.n_features, self.block_size)
        )

    def names(self, feature_ids=None, covariate_names=None) -> list:
        fids = feature_ids if feature_ids is not None else range(self.n_features)
        cnames = covariate_names or [f"x{m + 1}" for m in range(self.n_covariates)]
        bname = {"centered": "beta", "noncentered": "beta_std", "mixture": "beta_z"}
        out = ["log_tau0"] + (["logit_nu0"] if self.has_nu else [])
        for f in fids:
            out += [f"alpha[{f}]", f"{bname[self.parameterization]}[{f}]", f"beta_reads[{f}]"]
            out += [f"beta_{c}[{f}]" for c in cnames]
            if self.gaussian:
                out.append(f"log_sigma[{f}]")
            if self.parameterization == "mixture":
                out.append(f"log_w[{f}]")
        return out


@dataclass
class ParameterVector:
    """Constrained parameters (``mixing`` holds the latent weights of the mixture form)."""

    tau0: float
    nu0: float
    alpha: np.ndarray
    beta: np.ndarray
    beta_reads: np.ndarray
    beta_cov: np.ndarray
    sigma: np.ndarray | None = None
    mixing: np.ndarray | None = None

    def coefficient_matrix(self) -> np.ndarray:
        """K x (3 + M) matrix of ``[alpha, beta, beta_reads, beta_cov...]``."""
        return np.column_stack([self.alpha, self.beta, self.beta_reads, self.beta_cov])


def transform_params(z, layout: Layout) -> ParameterVector:
    """Map an unconstrained vector to constrained parameters."""
    z = np.asarray(z, dtype=float)
    tau0 = math.exp(z[0])
    nu0 = float(expit(z[1])) if layout.has_nu else 0.5
    blocks = layout.blocks(z)
    b = blocks[:, 1]
    mixing = None
    if layout.parameterization == "centered":
        beta = b.copy()
    elif layout.parameterization == "noncentered":
        beta = tau0 * b
    else:
        mixing = np.exp(blocks[:, layout.mix_col])
        theta, psi = mixture_coefficients(nu0)
        beta = tau0 * (theta * mixing + psi * np.sqrt(mixing) * b)
    m = layout.n_covariates
    return ParameterVector(
        tau0=tau0,
        nu0=nu0,
        alpha=blocks[:, 0].copy(),
        beta=beta,
        beta_reads=blocks[:, 2].copy(),
        beta_cov=blocks[:, 3:3 + m].copy(),
        sigma=np.exp(blocks[:, layout.sigma_col]) if layout.gaussian else None,
        mixing=mixing,
    )


def inverse_transform(params: ParameterVector, layout: Layout) -> np.ndarray:
    """Inverse of :func:`transform_params` (the mixture form needs ``params.mixing``)."""
    head = [math.log(params.tau0)]
    if layout.has_nu:
        head.append(math.log(params.nu0) - math.log1p(-params.nu0))
    if layout.parameterization == "centered":
        b = params.beta
    elif layout.parameterization == "noncentered":
        b = params.beta / params.tau0
    else:
        if params.mixing is None:
            raise ValueError("mixture parameterization needs the mixing weights")
        theta, psi = mixture_coefficients(params.nu0)
        w = params.mixing
        b = (params.beta / params.tau0 - theta * w) / (psi * np.sqrt(w))
    cols = [params.alpha, b, params.beta_reads, np.reshape(params.beta_cov, (layout.n_features, -1))]
    if layout.gaussian:
        cols.append(np.log(params.sigma))
    if layout.parameterization == "mixture":
        cols.append(np.log(params.mixing))
    blocks = np.column_stack(cols)
    return np.concatenate([np.asarray(head), blocks.ravel()])


def log_jacobian(z, layout: Layout) -> float:
    """log |d constrained / d unconstrained| (mixture: latent weights only)."""
    z = np.asarray(z, dtype=float)
    out = z[0]
    if layout.has_nu:
        out += -np.logaddexp(0.0, -z[1]) - np.logaddexp(0.0, z[1])
    if layout.parameterization == "noncentered":
        out += layout.n_features * z[0]
    blocks = layout.blocks(z)
    if layout.gaussian:
        out += blocks[:, layout.sigma_col].sum()
    if layout.parameterization == "mixture":
        out += blocks[:, layout.mix_col].sum()
    return float(out)


def beta_draws(draws, layout: Layout) -> np.ndarray:
    """Group effects from unconstrained draws of shape ``(..., layout.size)``."""
    z = np.asarray(draws, dtype=float)
    tau = np.exp(z[..., 0])[..., None]
    b = layout.blocks(z)[..., 1]
    if layout.parameterization == "centered":
        return b.copy()
    if layout.parameterization == "noncentered":
        return tau * b
    nu = expit(z[..., 1])[..., None] if layout.has_nu else np.full_like(tau, 0.5)
    c = nu * (1.0 - nu)
    theta, psi = (1.0 - 2.0 * nu) / c, np.sqrt(2.0 / c)
    w = np.exp(layout.blocks(z)[..., layout.mix_col])
    return tau * (theta * w + psi * np.sqrt(w) * b)


def _halfnormal_logpdf(x, scale):
    return math.log(2.0) - 0.5 * _LOG_2PI - math.log(scale) - 0.5 * (x / scale) ** 2


def _normal_logpdf_sum(x, mean, sd):
    x = np.asarray(x)
    return float(-x.size * (0.5 * _LOG_2PI + math.log(sd)) - 0.5 * np.sum(((x - mean) / sd) ** 2))


def _nu_log_norm(config: PriorConfig) -> float:
    # Laplace mass inside (0, 1)
    mu, s = config.nu_location, config.nu_scale
    return math.log1p(-0.5 * math.exp(-mu / s) - 0.5 * math.exp(-(1.0 - mu) / s))


def nu_hyperprior_logpdf(nu, config: PriorConfig) -> float:
    if config.nu_mode == "fixed_symmetric":
        return 0.0
    if not 0.0 < nu < 1.0:
        return -math.inf
    if config.nu_mode == "free":
        mu, s = config.nu_location, config.nu_scale
        return -math.log(2.0 * s) - abs(nu - mu) / s - _nu_log_norm(config)
    a, b = config.beta_shape
    return (a - 1.0) * math.log(nu) + (b - 1.0) * math.log1p(-nu) - float(betaln(a, b))


def log_prior(params: ParameterVector, config: PriorConfig) -> float:
    """Log prior density on the constrained scale (no Jacobian terms)."""
    nu = 0.5 if config.nu_mode == "fixed_symmetric" else params.nu0
    lp = _halfnormal_logpdf(params.tau0, config.tau0_scale)
    lp += nu_hyperprior_logpdf(nu, config)
    lp += float(np.sum(al_logpdf(params.beta, 0.0, params.tau0, nu)))
    lp += _normal_logpdf_sum(params.alpha, 0.0, config.alpha_sd)
    lp += _normal_logpdf_sum(params.beta_reads, config.reads_prior_mean, config.reads_prior_sd)
    lp += _normal_logpdf_sum(params.beta_cov, 0.0, config.covariate_sd)
    if params.sigma is not None:
        # Gamma(1, 1)
        lp += float(-np.sum(params.sigma))
    return lp


def model_matrix(design) -> np.ndarray:
    """Prepend the intercept column to a per-sample design."""
    design = np.asarray(design, dtype=float)
    return np.column_stack([np.ones(design.shape[0]), design])


def _bernoulli_terms(Y, eta):
    """Bernoulli-logit log-likelihood and residuals ``Y - p``, overflow-safe."""
    try:
        with np.errstate(over="raise", under="ignore"):
            e = np.exp(-eta)
    except FloatingPointError:
        with np.errstate(under="ignore"):
            a = np.abs(eta)
            e = np.exp(-a)
            # log(1 + exp(eta)) = max(eta, 0) + log1p(exp(-|eta|))
            softplus = 0.5 * (eta.sum() + a.sum()) + np.log1p(e).sum()
            inv = 1.0 / (1.0 + e)
            prob = np.where(eta >= 0.0, inv, e * inv)
        return float(np.vdot(Y, eta) - softplus), Y - prob
    ll = np.vdot(Y, eta) - eta.sum() - np.log1p(e).sum()
    e += 1.0
    np.divide(1.0, e, out=e)
    np.subtract(Y, e, out=e)
    return float(ll), e


def _linear_predictor(params: ParameterVector, A):
    return A @ params.coefficient_matrix().T


def log_likelihood(params: ParameterVector, design, response, kind="bernoulli_logit") -> float:
    """Sum of per-cell log-likelihood terms.

    ``design`` is the per-sample ``[group, reads, covariates...]`` matrix (or
    an :class:`~dipper.data.AnalysisInput`); ``response`` the N x K matrix.
    """
    if hasattr(design, "design_matrix"):
        design = design.design_matrix()
    A = model_matrix(design)
    Y = np.asarray(response, dtype=float)
    eta = _linear_predictor(params, A)
    if kind == "bernoulli_logit":
        return _bernoulli_terms(Y, eta)[0]
    if kind == "gaussian":
        sigma = params.sigma
        r = (Y - eta) / sigma
        return float(np.sum(-0.5 * _LOG_2PI - np.log(sigma) - 0.5 * r * r))
    raise ValueError(f"unknown likelihood {kind!r}")


class Posterior:
    """Callable ``z -> (log posterior, gradient)`` on the unconstrained scale.

    With the centered and noncentered parameterizations the group-effect
    prior is the asymmetric Laplace itself, differentiated with the
    subgradient ``nu - 1/2`` at its kink. The mixture parameterization
    samples the latent exponential-normal representation instead.
    Instances are picklable so chains can run in worker processes.
    """

    def __init__(self, design, response, config: PriorConfig = PriorConfig(),
                 likelihood="bernoulli_logit", parameterization="centered"):
        if likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        if hasattr(design, "design_matrix"):
            design = design.design_matrix()
        self.A = model_matrix(design)
        self.Y = np.asarray(response, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.Y.shape[0] != self.A.shape[0]:
            raise ValueError("design and response disagree on the number of samples")
        self.config = config
        self.likelihood = likelihood
        self.layout = Layout.for_model(
            self.Y.shape[1], self.A.shape[1] - 3, config, likelihood, parameterization
        )
        # plain constants for the compiled kernels
        lay = self.layout
        ints = np.zeros(8, dtype=np.int64)
        ints[_kernels.I_HYPER] = lay.n_hyper
        ints[_kernels.I_K] = lay.n_features
        ints[_kernels.I_BLOCK] = lay.block_size
        ints[_kernels.I_NCOEF] = lay.n_coef
        ints[_kernels.I_PARAM] = PARAMETERIZATIONS.index(parameterization)
        ints[_kernels.I_NU_MODE] = NU_MODES.index(config.nu_mode)
        ints[_kernels.I_SIGMA_COL] = lay.sigma_col if lay.gaussian else -1
        ints[_kernels.I_MIX_COL] = lay.mix_col if parameterization == "mixture" else -1
        self._ints = ints
        self._size = lay.size
        self._fused = not lay.gaussian and self.A.shape[0] * lay.n_features <= _FUSED_MAX_CELLS
        # alpha, beta_reads and covariate coefficients: independent normals
        m = lay.n_covariates
        mean = np.r_[0.0, config.reads_prior_mean, np.zeros(m)]
        sd = np.r_[config.alpha_sd, config.reads_prior_sd, np.full(m, config.covariate_sd)]
        self._nuis_mean = mean
        self._nuis_prec = 1.0 / sd**2
        consts = np.zeros(8)
        consts[_kernels.C_TAU_SCALE] = config.tau0_scale
        consts[_kernels.C_NU_LOC] = config.nu_location
        consts[_kernels.C_NU_SCALE] = config.nu_scale
        consts[_kernels.C_NU_LOGNORM] = _nu_log_norm(config) if config.nu_mode == "free" else 0.0
        consts[_kernels.C_BETA_A], consts[_kernels.C_BETA_B] = config.beta_shape
        consts[_kernels.C_BETA_LNORM] = float(betaln(*config.beta_shape))
        consts[_kernels.C_NUIS_CONST] = -lay.n_features * float(np.sum(0.5 * _LOG_2PI + np.log(sd)))
        self._consts = consts

    @property
    def dim(self) -> int:
        return self.layout.size

    def __call__(self, z):
        return self.logp_and_grad(z)

    def logp(self, z) -> float:
        return self.logp_and_grad(z)[0]

    def beta(self, draws) -> np.ndarray:
        return beta_draws(draws, self.layout)

    def logp_and_grad(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self._size,):
            raise ValueError(f"expected a vector of length {self._size}, got shape {z.shape}")
        grad = np.zeros_like(z)
        if self._fused:
            lp = _kernels.bernoulli_logp_grad(
                z, grad, self.A, self.Y, self._ints, self._consts, self._nuis_mean, self._nuis_prec
            )
            return lp, grad
        if not np.isfinite(z).all():
            return -math.inf, grad
        lp = self._evaluate(z, grad)
        if not math.isfinite(lp) or not np.isfinite(grad).all():
            return -math.inf, np.zeros_like(z)
        return lp, grad

    def _evaluate(self, z, grad):
        ints = self._ints
        K, n_coef = self.layout.n_features, self.layout.n_coef
        coef = np.empty((K, n_coef))
        hyper = np.empty(6)
        lp = _kernels.prior_terms(z, grad, coef, hyper, ints, self._consts,
                                  self._nuis_mean, self._nuis_prec)
        if not math.isfinite(lp):
            return -math.inf
        with np.errstate(all="ignore"):
            eta = self.A @ coef.T
            if self.layout.gaussian:
                h, bs = self.layout.n_hyper, self.layout.block_size
                sl = slice(h + self.layout.sigma_col, None, bs)
                zs = z[sl]
                inv_var = np.exp(-2.0 * zs)
                resid = self.Y - eta
                ss = np.einsum("ij,ij->j", resid, resid)
                n = self.Y.shape[0]
                lp += float(-n * K * 0.5 * _LOG_2PI - n * zs.sum() - 0.5 * np.dot(ss, inv_var))
                glik = (resid * inv_var).T @ self.A
                grad[sl] += ss * inv_var - n
            else:
                ll, r = _bernoulli_terms(self.Y, eta)
                glik = r.T @ self.A
                lp += ll
        _kernels.chain_rule(z, grad, np.ascontiguousarray(glik), coef, hyper, ints)
        return lp


def log_posterior_and_grad(z, design, response, config: PriorConfig = PriorConfig(),
                           likelihood="bernoulli_logit", parameterization="centered"):
    """One-shot evaluation; build a :class:`Posterior` to evaluate repeatedly."""
    return Posterior(design, response, config, likelihood, parameterization)(z)


def init_params(seed, layout: Layout, chains: int = 1, radius: float = 2.0) -> np.ndarray:
    """Uniform(-radius, radius) starting points, one independent stream per chain."""
    streams = np.random.SeedSequence(seed).spawn(chains)
    return np.stack(
        [np.random.default_rng(s).uniform(-radius, radius, layout.size) for s in streams]
    )

