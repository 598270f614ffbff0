"""Compiled pieces of the log-posterior.

The per-feature prior terms and the chain rule through the group-effect
parameterization are O(K) scalar work; done as numpy expressions they cost
dozens of tiny array calls per gradient, which dominates sampling time on
small problems. The Bernoulli likelihood has a fused loop for small N x K;
large problems use the vectorized numpy kernel in :mod:`dipper.model`.
"""

import math

import numpy as np
from numba import njit

CENTERED, NONCENTERED, MIXTURE = 0, 1, 2
NU_FREE, NU_FIXED, NU_BETA = 0, 1, 2

# layout of the integer and float constant vectors
I_HYPER, I_K, I_BLOCK, I_NCOEF, I_PARAM, I_NU_MODE, I_SIGMA_COL, I_MIX_COL = range(8)
C_TAU_SCALE, C_NU_LOC, C_NU_SCALE, C_NU_LOGNORM, C_BETA_A, C_BETA_B, C_BETA_LNORM, C_NUIS_CONST = range(8)

_LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True, error_model="numpy")
def _log_expit(x):
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True, error_model="numpy")
def prior_terms(z, grad, coef, hyper, ints, consts, nuis_mean, nuis_prec):
    """Prior, Jacobian and hyperprior terms.

    Fills ``grad`` with the prior gradient of every per-feature coordinate
    except the group effect, writes the constrained coefficients into
    ``coef`` (K x n_coef) and returns the log density. ``hyper`` receives
    ``[tau, nu, g_z0, g_tau, g_znu, g_nu]`` for :func:`chain_rule`, and
    ``coef[:, 1]``'s prior gradient (asymmetric Laplace forms) is returned
    through ``grad`` at the group-effect slots.
    """
    n_hyper, K, bs, n_coef = ints[I_HYPER], ints[I_K], ints[I_BLOCK], ints[I_NCOEF]
    param, nu_mode, sigma_col, mix_col = ints[I_PARAM], ints[I_NU_MODE], ints[I_SIGMA_COL], ints[I_MIX_COL]
    tau = math.exp(z[0])
    s = consts[C_TAU_SCALE]
    lp = math.log(2.0) - 0.5 * _LOG_2PI - math.log(s) - 0.5 * (tau / s) ** 2 + z[0]
    g_tau = -tau / (s * s)
    g_z0 = 1.0

    g_nu = 0.0
    g_znu = 0.0
    if nu_mode == NU_FIXED:
        nu = 0.5
    else:
        znu = z[1]
        log_nu = _log_expit(znu)
        log_1mnu = _log_expit(-znu)
        nu = math.exp(log_nu)
        if not (0.0 < nu < 1.0):
            return -np.inf
        lp += log_nu + log_1mnu
        g_znu = 1.0 - 2.0 * nu
        if nu_mode == NU_FREE:
            d = nu - consts[C_NU_LOC]
            sc = consts[C_NU_SCALE]
            lp += -math.log(2.0 * sc) - abs(d) / sc - consts[C_NU_LOGNORM]
            if d > 0:
                g_nu = -1.0 / sc
            elif d < 0:
                g_nu = 1.0 / sc
        else:
            a = consts[C_BETA_A]
            b = consts[C_BETA_B]
            lp += (a - 1.0) * log_nu + (b - 1.0) * log_1mnu - consts[C_BETA_LNORM]
            g_nu = (a - 1.0) / nu - (b - 1.0) / (1.0 - nu)

    c = nu * (1.0 - nu)
    theta = (1.0 - 2.0 * nu) / c
    psi = math.sqrt(2.0 / c)
    log_norm = math.log(c / tau)
    sum_rho = 0.0
    sum_u = 0.0
    lp += consts[C_NUIS_CONST]
    for j in range(K):
        o = n_hyper + j * bs
        bcoord = z[o + 1]
        if param == MIXTURE:
            lw = z[o + mix_col]
            w = math.exp(lw)
            sw = math.exp(0.5 * lw)
            beta = tau * (theta * w + psi * sw * bcoord)
            lp += -0.5 * _LOG_2PI - 0.5 * bcoord * bcoord + lw - w
            grad[o + 1] = -bcoord
            grad[o + mix_col] = 1.0 - w
        else:
            if param == NONCENTERED:
                beta = tau * bcoord
                u = bcoord
            else:
                beta = bcoord
                u = beta / tau
            if u < 0.0:
                rho = u * (nu - 1.0)
                slope = nu - 1.0
            elif u > 0.0:
                rho = u * nu
                slope = nu
            else:
                rho = 0.0
                slope = nu - 0.5
            sum_rho += rho
            sum_u += u
            lp += log_norm - rho
            # d/dbeta of the prior, completed by chain_rule
            grad[o + 1] = -slope / tau
        coef[j, 0] = z[o]
        coef[j, 1] = beta
        for k in range(2, n_coef):
            coef[j, k] = z[o + k]
        # normal priors on alpha, beta_reads and covariate coefficients
        dev = z[o] - nuis_mean[0]
        lp -= 0.5 * dev * dev * nuis_prec[0]
        grad[o] = -dev * nuis_prec[0]
        for k in range(2, n_coef):
            dev = z[o + k] - nuis_mean[k - 1]
            lp -= 0.5 * dev * dev * nuis_prec[k - 1]
            grad[o + k] = -dev * nuis_prec[k - 1]
        if sigma_col >= 0:
            zs = z[o + sigma_col]
            sigma = math.exp(zs)
            # Gamma(1, 1) on sigma with log-scale Jacobian
            lp += zs - sigma
            grad[o + sigma_col] = 1.0 - sigma
    if param != MIXTURE:
        g_tau += (-K + sum_rho) / tau
        if nu_mode != NU_FIXED:
            g_nu += K * (1.0 / nu - 1.0 / (1.0 - nu)) - sum_u
        if param == NONCENTERED:
            lp += K * z[0]
    hyper[0] = tau
    hyper[1] = nu
    hyper[2] = g_z0
    hyper[3] = g_tau
    hyper[4] = g_znu
    hyper[5] = g_nu
    return lp


@njit(cache=True, error_model="numpy")
def chain_rule(z, grad, glik, coef, hyper, ints):
    """Add the likelihood gradient ``glik`` (K x n_coef, w.r.t. coefficients)
    and push the group-effect gradient through the parameterization."""
    n_hyper, K, bs, n_coef = ints[I_HYPER], ints[I_K], ints[I_BLOCK], ints[I_NCOEF]
    param, nu_mode, mix_col = ints[I_PARAM], ints[I_NU_MODE], ints[I_MIX_COL]
    tau, nu, g_z0, g_tau, g_znu, g_nu = hyper[0], hyper[1], hyper[2], hyper[3], hyper[4], hyper[5]
    c = nu * (1.0 - nu)
    theta = (1.0 - 2.0 * nu) / c
    psi = math.sqrt(2.0 / c)
    d_theta = -(1.0 - 2.0 * nu + 2.0 * nu * nu) / (c * c)
    d_psi = -0.5 * psi * (1.0 - 2.0 * nu) / c
    for j in range(K):
        o = n_hyper + j * bs
        grad[o] += glik[j, 0]
        for k in range(2, n_coef):
            grad[o + k] += glik[j, k]
        beta = coef[j, 1]
        if param == MIXTURE:
            g_beta = glik[j, 1]
            bcoord = z[o + 1]
            w = math.exp(z[o + mix_col])
            sw = math.sqrt(w)
            grad[o + 1] += g_beta * tau * psi * sw
            grad[o + mix_col] += g_beta * tau * (theta * w + 0.5 * psi * sw * bcoord)
            g_z0 += g_beta * beta
            g_nu += tau * g_beta * (d_theta * w + d_psi * sw * bcoord)
        else:
            g_beta = grad[o + 1] + glik[j, 1]
            if param == NONCENTERED:
                grad[o + 1] = tau * g_beta
                g_z0 += g_beta * beta
            else:
                grad[o + 1] = g_beta
    if param == NONCENTERED:
        g_z0 += K
    grad[0] = g_z0 + tau * g_tau
    if nu_mode != NU_FIXED:
        grad[1] = g_znu + c * g_nu


@njit(cache=True, error_model="numpy")
def bernoulli_loop(A, Y, coef, glik):
    """Fused Bernoulli-logit log-likelihood; ``glik`` gets ``(Y - p)^T A``."""
    n, p = A.shape
    K = coef.shape[0]
    ll = 0.0
    for j in range(K):
        for k in range(p):
            glik[j, k] = 0.0
    for i in range(n):
        for j in range(K):
            eta = 0.0
            for k in range(p):
                eta += A[i, k] * coef[j, k]
            if eta >= 0:
                e = math.exp(-eta)
                ll += Y[i, j] * eta - eta - math.log1p(e)
                r = Y[i, j] - 1.0 / (1.0 + e)
            else:
                e = math.exp(eta)
                ll += Y[i, j] * eta - math.log1p(e)
                r = Y[i, j] - e / (1.0 + e)
            for k in range(p):
                glik[j, k] += r * A[i, k]
    return ll


@njit(cache=True, error_model="numpy")
def bernoulli_logp_grad(z, grad, A, Y, ints, consts, nuis_mean, nuis_prec):
    """Whole log posterior for the Bernoulli likelihood in one call.

    Returns ``-inf`` (and a zero gradient) wherever the density or its
    gradient is not finite.
    """
    for v in z:
        if not math.isfinite(v):
            return -np.inf
    K, n_coef = ints[I_K], ints[I_NCOEF]
    coef = np.empty((K, n_coef))
    glik = np.empty((K, n_coef))
    hyper = np.empty(6)
    lp = prior_terms(z, grad, coef, hyper, ints, consts, nuis_mean, nuis_prec)
    if math.isfinite(lp):
        lp += bernoulli_loop(A, Y, coef, glik)
        chain_rule(z, grad, glik, coef, hyper, ints)
    ok = math.isfinite(lp)
    for v in grad:
        ok = ok and math.isfinite(v)
    if not ok:
        grad[:] = 0.0
        return -np.inf
    return lp
