"""Multi-chain No-U-Turn sampler with windowed warmup adaptation.

Transitions use multinomial sampling over the trajectory, doubling tree
builds and the generalized no-U-turn criterion on sharp momenta (checked on
each merged subtree and across subtree boundaries). Warmup adapts the step
size by dual averaging and a diagonal inverse metric from sample variances
in expanding windows.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics
from ._validation import ConvergenceWarning

MAX_DELTA_H = 1000.0


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iterations: int = 3000
    warmup: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("need 0 <= warmup < iterations")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")

    @property
    def n_draws(self) -> int:
        return self.iterations - self.warmup


@dataclass
class PosteriorDraws:
    """Post-warmup draws, shape ``(chains, draws, parameters)``."""

    draws: np.ndarray
    divergence_count: int
    rhat: np.ndarray
    ess_bulk: np.ndarray
    names: list = field(default_factory=list)
    divergences_per_chain: list = field(default_factory=list)
    step_size: list = field(default_factory=list)
    inv_metric: list = field(default_factory=list)
    mean_accept: list = field(default_factory=list)
    mean_tree_depth: list = field(default_factory=list)
    n_leapfrog: int = 0
    runtime_s: float = 0.0

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def flat(self) -> np.ndarray:
        """All chains concatenated, shape ``(chains * draws, parameters)``."""
        return self.draws.reshape(-1, self.draws.shape[-1])

    def max_rhat(self, index=None) -> float:
        r = self.rhat if index is None else self.rhat[index]
        r = r[np.isfinite(r)]
        return float(r.max()) if r.size else float("nan")

    def min_ess(self, index=None) -> float:
        e = self.ess_bulk if index is None else self.ess_bulk[index]
        e = e[np.isfinite(e)]
        return float(e.min()) if e.size else float("nan")

    def converged(self, index=None, rhat_threshold: float = 1.02) -> bool:
        r = self.max_rhat(index)
        return self.divergence_count == 0 and (math.isnan(r) or r < rhat_threshold)

    def to_tsv(self, path, names=None) -> None:
        """Long format: chain, iteration, parameter, value."""
        names = names or self.names or [f"p{i}" for i in range(self.draws.shape[2])]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("chain\titeration\tparameter\tvalue\n")
            for c in range(self.n_chains):
                for t in range(self.n_draws):
                    row = self.draws[c, t].tolist()
                    for name, v in zip(names, row):
                        fh.write(f"{c}\t{t}\t{name}\t{v!r}\n")

    def summary_dict(self, index=None, include_runtime=True) -> dict:
        out = {
            "chains": self.n_chains,
            "draws_per_chain": self.n_draws,
            "rhat_max": _json_float(self.max_rhat(index)),
            "ess_bulk_min": _json_float(self.min_ess(index)),
            "divergences": int(self.divergence_count),
            "step_size": [float(s) for s in self.step_size],
            "mean_accept": [float(a) for a in self.mean_accept],
        }
        if include_runtime:
            out["runtime_s"] = self.runtime_s
        return out

    def to_json(self, index=None, include_runtime=True) -> str:
        return json.dumps(self.summary_dict(index, include_runtime), indent=1)


def _json_float(x):
    return None if not math.isfinite(x) else float(x)


class _State:
    __slots__ = ("q", "p", "logp", "grad")

    def __init__(self, q, p, logp, grad):
        self.q, self.p, self.logp, self.grad = q, p, logp, grad

    def copy(self):
        return _State(self.q, self.p, self.logp, self.grad)


class _Tree:
    """Output of a subtree build."""

    __slots__ = ("valid", "proposal", "log_weight", "rho", "p_beg", "p_end",
                 "ps_beg", "ps_end")


def _criterion(ps_minus, ps_plus, rho):
    return ps_plus.dot(rho) > 0.0 and ps_minus.dot(rho) > 0.0


def _logaddexp(a, b):
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a)) if b > -math.inf else a


class NUTSKernel:
    """Single-chain NUTS transition with a diagonal metric.

    ``target`` maps a position to ``(log density, gradient)``.
    """

    def __init__(self, target, dim, rng, max_tree_depth=10, max_delta_h=MAX_DELTA_H):
        self.target = target
        self.dim = dim
        self.rng = rng
        self.max_tree_depth = max_tree_depth
        self.max_delta_h = max_delta_h
        self.inv_metric = np.ones(dim)
        self.step_size = 1.0

    def _hamiltonian(self, s: _State) -> float:
        return -s.logp + 0.5 * s.p.dot(self.inv_metric * s.p)

    def _leapfrog(self, s: _State, eps: float) -> _State:
        half = 0.5 * eps
        p = s.p + half * s.grad
        q = s.q + (eps * self.inv_metric) * p
        logp, grad = self.target(q)
        p += half * grad
        return _State(q, p, logp, grad)

    def _build(self, s: _State, depth: int, eps: float, h0: float):
        """Build a subtree of ``2**depth`` leapfrog steps starting from ``s``.

        Returns the new edge state and the subtree summary.
        """
        if depth == 0:
            s = self._leapfrog(s, eps)
            self._n_leapfrog += 1
            ps = self.inv_metric * s.p
            h = -s.logp + 0.5 * ps.dot(s.p)
            if math.isnan(h):
                h = math.inf
            t = _Tree()
            if h - h0 > self.max_delta_h:
                self._divergent = True
                t.valid = False
                return s, t
            t.valid = True
            t.log_weight = h0 - h
            self._sum_accept += 1.0 if h0 - h > 0 else math.exp(h0 - h)
            t.proposal = s
            t.rho = s.p
            t.p_beg = t.p_end = s.p
            t.ps_beg = t.ps_end = ps
            return s, t

        s, init = self._build(s, depth - 1, eps, h0)
        if not init.valid:
            return s, init
        s, final = self._build(s, depth - 1, eps, h0)
        if not final.valid:
            return s, final

        t = _Tree()
        t.log_weight = _logaddexp(init.log_weight, final.log_weight)
        # uniform (within-subtree) multinomial choice
        if final.log_weight > t.log_weight:
            t.proposal = final.proposal
        elif self.rng.random() < math.exp(final.log_weight - t.log_weight):
            t.proposal = final.proposal
        else:
            t.proposal = init.proposal
        t.rho = init.rho + final.rho
        t.p_beg, t.ps_beg = init.p_beg, init.ps_beg
        t.p_end, t.ps_end = final.p_end, final.ps_end
        persist = _criterion(init.ps_beg, final.ps_end, t.rho)
        persist = persist and _criterion(init.ps_beg, final.ps_beg, init.rho + final.p_beg)
        persist = persist and _criterion(init.ps_end, final.ps_end, final.rho + init.p_end)
        t.valid = persist
        return s, t

    def transition(self, q, logp, grad):
        """One NUTS iteration from ``q``; returns ``(q, logp, grad, info)``."""
        rng = self.rng
        eps = self.step_size
        p0 = rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        start = _State(q, p0, logp, grad)
        h0 = self._hamiltonian(start)

        fwd = start
        bck = start
        sample = start
        log_sum_weight = 0.0
        rho = p0.copy()
        ps0 = self.inv_metric * p0
        # edge momenta of the backward- and forward-most subtrees
        p_bck_bck = p_bck_fwd = p_fwd_bck = p_fwd_fwd = p0
        ps_bck_bck = ps_bck_fwd = ps_fwd_bck = ps_fwd_fwd = ps0
        self._n_leapfrog = 0
        self._sum_accept = 0.0
        self._divergent = False
        depth = 0

        while depth < self.max_tree_depth:
            if rng.random() > 0.5:
                rho_bck = rho
                p_bck_fwd, ps_bck_fwd = p_fwd_fwd, ps_fwd_fwd
                fwd, sub = self._build(fwd, depth, eps, h0)
                if not sub.valid:
                    break
                rho_fwd = sub.rho
                p_fwd_bck, ps_fwd_bck = sub.p_beg, sub.ps_beg
                p_fwd_fwd, ps_fwd_fwd = sub.p_end, sub.ps_end
            else:
                rho_fwd = rho
                p_fwd_bck, ps_fwd_bck = p_bck_bck, ps_bck_bck
                bck, sub = self._build(bck, depth, -eps, h0)
                if not sub.valid:
                    break
                rho_bck = sub.rho
                p_bck_fwd, ps_bck_fwd = sub.p_beg, sub.ps_beg
                p_bck_bck, ps_bck_bck = sub.p_end, sub.ps_end
            depth += 1

            # biased progressive sampling between old tree and new subtree
            if sub.log_weight > log_sum_weight:
                sample = sub.proposal
            elif rng.random() < math.exp(sub.log_weight - log_sum_weight):
                sample = sub.proposal
            log_sum_weight = _logaddexp(log_sum_weight, sub.log_weight)

            rho = rho_bck + rho_fwd
            persist = _criterion(ps_bck_bck, ps_fwd_fwd, rho)
            persist = persist and _criterion(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
            persist = persist and _criterion(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            if not persist:
                break

        n = max(self._n_leapfrog, 1)
        info = {
            "accept_stat": self._sum_accept / n,
            "n_leapfrog": self._n_leapfrog,
            "depth": depth,
            "divergent": self._divergent,
            "energy": h0,
        }
        return sample.q, sample.logp, sample.grad, info

    def find_reasonable_step_size(self, q, logp, grad):
        """Double or halve the step size until one leapfrog step's acceptance crosses 0.8."""
        eps = self.step_size
        direction = 0
        for _ in range(100):
            p = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
            s0 = _State(q, p, logp, grad)
            h0 = self._hamiltonian(s0)
            s1 = self._leapfrog(s0, eps)
            h1 = self._hamiltonian(s1)
            if math.isnan(h1):
                h1 = math.inf
            delta = h0 - h1
            d = 1 if delta > math.log(0.8) else -1
            if direction == 0:
                direction = d
            elif d != direction:
                break
            eps = eps * 2.0 if direction == 1 else eps * 0.5
            if eps > 1e7 or eps < 1e-12:
                break
        self.step_size = eps
        return eps


class DualAveraging:
    """Step-size adaptation toward a target acceptance statistic."""

    def __init__(self, target_accept, gamma=0.05, kappa=0.75, t0=10.0):
        self.delta = target_accept
        self.gamma, self.kappa, self.t0 = gamma, kappa, t0
        self.restart(1.0)

    def restart(self, step_size):
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = x_eta * x + (1.0 - x_eta) * self.x_bar
        return math.exp(x)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.x_bar)


def adaptation_windows(warmup, init_buffer=75, term_buffer=50, base_window=25):
    """End iterations (exclusive) of the metric-adaptation windows.

    Returns ``(start, ends)``; buffers shrink to 15% / 10% / 75% of warmup
    when warmup is too short for the defaults.
    """
    if warmup < 20:
        return warmup, []
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - (init_buffer + term_buffer)
    ends = []
    start = init_buffer
    size = base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        # last window absorbs a too-short remainder
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start = end
        size *= 2
    return init_buffer, ends


def _run_chain(target, init, config: SamplerConfig, seed_seq, dim):
    rng = np.random.default_rng(seed_seq)
    q = np.asarray(init, dtype=float).copy()
    logp, grad = target(q)
    if not math.isfinite(logp):
        raise ValueError("target is not finite at the initial point")
    kernel = NUTSKernel(target, dim, rng, config.max_tree_depth)
    warmup = config.warmup
    da = DualAveraging(config.target_accept)
    if warmup > 0:
        kernel.find_reasonable_step_size(q, logp, grad)
        da.restart(kernel.step_size)
    win_start, win_ends = adaptation_windows(warmup)
    win_buffer = []
    n_draws = config.n_draws
    out = np.empty((n_draws, dim))
    divergences = 0
    accept = []
    depths = []
    n_leapfrog = 0
    for it in range(config.iterations):
        q, logp, grad, info = kernel.transition(q, logp, grad)
        n_leapfrog += info["n_leapfrog"]
        if it < warmup:
            kernel.step_size = da.update(info["accept_stat"])
            if win_start <= it and win_ends:
                win_buffer.append(q)
                if it + 1 == win_ends[0]:
                    win_ends.pop(0)
                    x = np.asarray(win_buffer)
                    n = x.shape[0]
                    var = x.var(axis=0, ddof=1) if n > 1 else np.ones(dim)
                    kernel.inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                    win_buffer = []
                    kernel.find_reasonable_step_size(q, logp, grad)
                    da.restart(kernel.step_size)
            if it + 1 == warmup:
                kernel.step_size = da.final_step_size
        else:
            out[it - warmup] = q
            accept.append(info["accept_stat"])
            depths.append(info["depth"])
            divergences += int(info["divergent"])
    return {
        "draws": out,
        "divergences": divergences,
        "step_size": kernel.step_size,
        "inv_metric": kernel.inv_metric.copy(),
        "mean_accept": float(np.mean(accept)) if accept else float("nan"),
        "mean_tree_depth": float(np.mean(depths)) if depths else float("nan"),
        "n_leapfrog": n_leapfrog,
    }


def chain_seeds(seed, chains):
    """Independent per-chain seed sequences derived from ``(seed, chain index)``."""
    return np.random.SeedSequence(seed).spawn(chains)


def run_nuts(target, config: SamplerConfig = SamplerConfig(), init=None,
             names=None, diagnostic_index=None, warn=True) -> PosteriorDraws:
    """Sample ``target`` with ``config.chains`` independent NUTS chains.

    Parameters
    ----------
    target
        Callable mapping a 1-D position to ``(log density, gradient)``.
    init
        Array of shape ``(chains, dim)`` (or ``(dim,)``, shared by all chains).
        Chains whose initial point is non-finite are re-started from another
        chain's initial point; if none is finite an error is raised.
    diagnostic_index
        Columns checked for convergence (all by default).
    warn
        Emit a :class:`ConvergenceWarning` when the check fails. Callers
        that judge convergence on derived quantities switch this off.
    """
    init = np.atleast_2d(np.asarray(init, dtype=float))
    if init.shape[0] == 1 and config.chains > 1:
        init = np.repeat(init, config.chains, axis=0)
    if init.shape[0] != config.chains:
        raise ValueError(f"init has {init.shape[0]} rows for {config.chains} chains")
    dim = init.shape[1]
    finite = np.array([math.isfinite(target(x)[0]) for x in init])
    if not finite.any():
        raise ValueError("target log density is non-finite at every initial point")
    if not finite.all():
        good = init[finite]
        init = np.stack([x if ok else good[i % len(good)] for i, (x, ok) in enumerate(zip(init, finite))])

    seeds = chain_seeds(config.seed, config.chains)
    t0 = time.perf_counter()
    if config.n_jobs == 1 or config.chains == 1:
        results = [_run_chain(target, init[c], config, seeds[c], dim) for c in range(config.chains)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=config.n_jobs)(
            delayed(_run_chain)(target, init[c], config, seeds[c], dim)
            for c in range(config.chains)
        )
    runtime = time.perf_counter() - t0

    draws = np.stack([r["draws"] for r in results])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", diagnostics.DegenerateDrawsWarning)
        if config.chains >= 2 and draws.shape[1] >= 4:
            rhat = diagnostics.split_rhat(draws)
        else:
            rhat = np.full(dim, np.nan)
        ess = diagnostics.ess_bulk(draws) if draws.shape[1] >= 4 else np.full(dim, np.nan)
    result = PosteriorDraws(
        draws=draws,
        divergence_count=sum(r["divergences"] for r in results),
        rhat=rhat,
        ess_bulk=ess,
        names=list(names) if names is not None else [],
        divergences_per_chain=[r["divergences"] for r in results],
        step_size=[r["step_size"] for r in results],
        inv_metric=[r["inv_metric"] for r in results],
        mean_accept=[r["mean_accept"] for r in results],
        mean_tree_depth=[r["mean_tree_depth"] for r in results],
        n_leapfrog=sum(r["n_leapfrog"] for r in results),
        runtime_s=runtime,
    )
    if warn and not result.converged(diagnostic_index):
        warnings.warn(
            f"sampler convergence check failed: max R-hat "
            f"{result.max_rhat(diagnostic_index):.4f}, "
            f"{result.divergence_count} divergent transitions",
            ConvergenceWarning,
            stacklevel=2,
        )
    return result
