"""BHM and EXNEX designs via a self-contained log-odds MCMC sampler.

The sampler is Metropolis-within-Gibbs: Gaussian random walks on each
basket's log-odds parameter and on log(sigma), a conjugate Gibbs draw for
mu, a joint translation move shifting mu and all log-odds together (the
walk that lets the nearly flat hyperprior mix when the data are weak), and
(for EXNEX) per-basket exchangeability indicators drawn from their mixture
responsibilities each sweep.  Proposal scales adapt toward a 0.4 acceptance
rate during burn-in and are frozen afterwards, so results are fully
determined by the seed.

Chains for many data sets run in lock-step as rows of one array, but every
replicate consumes its own counter-based random stream, so results are
independent of batching and safe to shard across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import BasketData

_SLAB = 256  # sweeps of randomness drawn per stream call; fixed for stream stability
_ADAPT_INTERVAL = 100
_ADAPT_TARGET = 0.4
_ACCEPT_BAND = (0.05, 0.95)
_SCALE_BOUNDS = (1e-3, 1e3)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class BhmParams:
    """Hierarchical log-odds model with target-rate offsets.

    The default mu prior mean is logit(0.15) - logit(0.35): the null
    response rate expressed relative to a common 0.35 target.
    """

    phi: float
    target_rates: tuple[float, ...] | float = 0.35
    mu_mean: float = -1.1156
    mu_sd: float = 100.0

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError(f"half-normal scale phi must be positive, got {self.phi}")

    def offsets(self, k: int) -> np.ndarray:
        rates = self.target_rates
        if isinstance(rates, (int, float)):
            rates = (float(rates),) * k
        if len(rates) != k:
            raise ValueError(f"expected {k} target rates, got {len(rates)}")
        return np.array([logit(p) for p in rates])


@dataclass(frozen=True)
class ExnexParams:
    """Mixture of an exchangeable component (weight q) and basket-specific
    nonexchangeable priors, on plain log-odds (no target offset)."""

    phi: float
    q: float
    mu_mean: float = -1.7346
    mu_sd: float = 100.0
    nex_means: tuple[float, ...] | float = -1.7346
    nex_sds: tuple[float, ...] | float = 100.0

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError(f"half-normal scale phi must be positive, got {self.phi}")
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"exchangeability weight q must lie in (0, 1], got {self.q}")

    def nex_arrays(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        means = self.nex_means
        sds = self.nex_sds
        if isinstance(means, (int, float)):
            means = (float(means),) * k
        if isinstance(sds, (int, float)):
            sds = (float(sds),) * k
        if len(means) != k or len(sds) != k:
            raise ValueError("nonexchangeable prior vectors must have one entry per basket")
        return np.asarray(means, dtype=float), np.asarray(sds, dtype=float)


@dataclass(frozen=True)
class McmcConfig:
    """Sampling protocol: chain length, burn-in share, seed, initial scales."""

    total_samples: int = 10_000
    burn_in_fraction: float = 1.0 / 3.0
    seed: int = 0
    theta_scale: float = 0.5
    sigma_scale: float = 0.5
    adapt: bool = True

    def __post_init__(self):
        if self.total_samples < 3:
            raise ValueError("total_samples must be at least 3")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ValueError("burn_in_fraction must lie in [0, 1)")

    @property
    def burn_in(self) -> int:
        return int(self.total_samples * self.burn_in_fraction)


@dataclass(frozen=True)
class PosteriorSummary:
    """Per-basket decision statistics from one chain, with diagnostics.

    ``chains`` holds the retained mu/sigma/p draws when collection was
    requested, otherwise None.
    """

    tail_probs: np.ndarray
    posterior_means: np.ndarray
    acceptance: dict
    warnings: tuple[str, ...]
    chains: dict | None = None


def tail_from_chain(chain: np.ndarray, threshold: float) -> float:
    """Fraction of retained samples exceeding the threshold."""
    chain = np.asarray(chain)
    if chain.size == 0:
        raise ValueError("tail_from_chain needs a nonempty chain")
    return float(np.mean(chain > threshold))


def _make_streams(seeds) -> list[np.random.Generator]:
    out = []
    for seed in seeds:
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        out.append(np.random.Generator(np.random.Philox(seed)))
    return out


class _RandomSlabs:
    """Fixed-size blocks of randomness, one independent stream per replicate.

    Each replicate's stream is consumed in a fixed call pattern (normals
    block, then uniforms block, per slab of 256 sweeps), so the draws a
    replicate sees do not depend on how replicates are batched.
    """

    def __init__(self, streams, n_norm: int, n_unif: int):
        self.streams = streams
        self.n_norm = n_norm
        self.n_unif = n_unif
        self.norm = np.empty((len(streams), _SLAB, n_norm))
        self.unif = np.empty((len(streams), _SLAB, n_unif))
        self.cursor = _SLAB

    def draw(self) -> tuple[np.ndarray, np.ndarray]:
        if self.cursor == _SLAB:
            for i, gen in enumerate(self.streams):
                self.norm[i] = gen.standard_normal((_SLAB, self.n_norm))
                self.unif[i] = gen.random((_SLAB, self.n_unif))
            self.cursor = 0
        t = self.cursor
        self.cursor += 1
        return self.norm[:, t, :], self.unif[:, t, :]


def _binomial_loglik(theta: np.ndarray, offsets: np.ndarray, r: np.ndarray,
                     n: np.ndarray) -> np.ndarray:
    z = theta + offsets
    return r * z - n * np.logaddexp(0.0, z)


def _adapt_scale(scale, accepted, count):
    rate_shift = np.where(
        np.asarray(count) > 0, accepted / np.maximum(count, 1.0) - _ADAPT_TARGET, 0.0
    )
    return np.clip(scale * np.exp(rate_shift), *_SCALE_BOUNDS)


def _run_chains(
    *,
    exnex: bool,
    r: np.ndarray,
    n: np.ndarray,
    offsets: np.ndarray,
    mu_mean: float,
    mu_sd: float,
    phi: float,
    q: float,
    nex_means: np.ndarray | None,
    nex_sds: np.ndarray | None,
    mcmc: McmcConfig,
    seeds,
    p0: float,
    collect: bool = False,
) -> tuple[np.ndarray, np.ndarray, dict, tuple[str, ...], dict | None]:
    n_reps, k = r.shape
    total, burn = mcmc.total_samples, mcmc.burn_in
    kept = total - burn
    chains = None
    if collect:
        chains = {
            "mu": np.empty((kept, n_reps)),
            "sigma": np.empty((kept, n_reps)),
            "p": np.empty((kept, n_reps, k)),
        }
    slabs = _RandomSlabs(
        _make_streams(seeds),
        n_norm=k + 3,
        n_unif=2 * k + 2 if exnex else k + 2,
    )

    # data-driven deterministic initialization
    theta = np.log((r + 0.5) / (n - r + 0.5)) - offsets
    mu = theta.mean(axis=1)
    log_sigma = np.full(n_reps, math.log(max(phi, 1e-6)))
    sigma = np.exp(log_sigma)
    is_ex = np.ones((n_reps, k), dtype=bool)
    ln_q = math.log(q) if q > 0 else -math.inf
    ln_1mq = math.log1p(-q) if q < 1 else -math.inf

    # EX and NEX states see very different conditional widths, so each keeps
    # its own adapted random-walk scale per basket
    theta_scale = np.full((n_reps, k), mcmc.theta_scale)
    nex_scale = np.full((n_reps, k), mcmc.theta_scale)
    sigma_scale = np.full(n_reps, mcmc.sigma_scale)
    shift_scale = np.full(n_reps, mcmc.theta_scale)
    theta_acc_win = np.zeros((n_reps, k))
    theta_cnt_win = np.zeros((n_reps, k))
    nex_acc_win = np.zeros((n_reps, k))
    nex_cnt_win = np.zeros((n_reps, k))
    sigma_acc_win = np.zeros(n_reps)
    shift_acc_win = np.zeros(n_reps)
    theta_acc_kept = np.zeros((n_reps, k))
    sigma_acc_kept = np.zeros(n_reps)
    shift_acc_kept = np.zeros(n_reps)

    tail_count = np.zeros((n_reps, k))
    p_sum = np.zeros((n_reps, k))
    threshold = logit(p0) - offsets

    loglik = _binomial_loglik(theta, offsets, r, n)
    mu_prec0 = 1.0 / mu_sd ** 2
    for sweep in range(total):
        norm, unif = slabs.draw()

        # component-wise Metropolis on theta: the full conditional factorizes
        # over baskets, so all K proposals are judged in parallel
        if exnex:
            prior_mean = np.where(is_ex, mu[:, None], nex_means[None, :])
            prior_sd = np.where(is_ex, sigma[:, None], nex_sds[None, :])
            step = np.where(is_ex, theta_scale, nex_scale)
        else:
            prior_mean = mu[:, None]
            prior_sd = sigma[:, None]
            step = theta_scale
        prop = theta + step * norm[:, :k]
        loglik_prop = _binomial_loglik(prop, offsets, r, n)
        log_ratio = (
            loglik_prop - loglik
            - 0.5 * ((prop - prior_mean) / prior_sd) ** 2
            + 0.5 * ((theta - prior_mean) / prior_sd) ** 2
        )
        with np.errstate(divide="ignore"):  # u = 0.0 means certain acceptance
            accept = np.log(unif[:, :k]) < log_ratio
        theta = np.where(accept, prop, theta)
        loglik = np.where(accept, loglik_prop, loglik)
        if exnex:
            theta_acc_win += accept & is_ex
            theta_cnt_win += is_ex
            nex_acc_win += accept & ~is_ex
            nex_cnt_win += ~is_ex
        else:
            theta_acc_win += accept
            theta_cnt_win += 1.0

        # exchangeability indicators from the mixture responsibilities
        if exnex:
            with np.errstate(divide="ignore", invalid="ignore"):
                lw_ex = ln_q - np.log(sigma[:, None]) - 0.5 * ((theta - mu[:, None]) / sigma[:, None]) ** 2
                lw_nex = ln_1mq - np.log(nex_sds[None, :]) - 0.5 * ((theta - nex_means[None, :]) / nex_sds[None, :]) ** 2
                p_ex = expit(lw_ex - lw_nex)
            is_ex = unif[:, k + 1: 2 * k + 1] < p_ex

        # random walk on log(sigma) over the exchangeable baskets
        m_ex = is_ex.sum(axis=1) if exnex else np.full(n_reps, float(k))
        dev_sq = ((theta - mu[:, None]) ** 2 * is_ex).sum(axis=1) if exnex \
            else ((theta - mu[:, None]) ** 2).sum(axis=1)
        ls_prop = log_sigma + sigma_scale * norm[:, k]
        sig_prop = np.exp(ls_prop)
        log_ratio_s = (
            m_ex * (log_sigma - ls_prop)
            - 0.5 * dev_sq * (1.0 / sig_prop ** 2 - 1.0 / sigma ** 2)
            - (sig_prop ** 2 - sigma ** 2) / (2.0 * phi ** 2)
            + (ls_prop - log_sigma)
        )
        with np.errstate(divide="ignore"):
            accept_s = np.log(unif[:, k]) < log_ratio_s
        log_sigma = np.where(accept_s, ls_prop, log_sigma)
        sigma = np.exp(log_sigma)
        sigma_acc_win += accept_s

        # conjugate Gibbs draw for mu given the exchangeable thetas
        theta_sum = (theta * is_ex).sum(axis=1) if exnex else theta.sum(axis=1)
        prec = mu_prec0 + m_ex / sigma ** 2
        mean = (mu_mean * mu_prec0 + theta_sum / sigma ** 2) / prec
        mu = mean + norm[:, k + 1] / np.sqrt(prec)

        # joint translation of (mu, theta): deviations from the exchangeable
        # mean cancel, so only the likelihood, the mu prior and any
        # nonexchangeable priors weigh in
        delta = shift_scale * norm[:, k + 2]
        theta_shift = theta + delta[:, None]
        loglik_shift = _binomial_loglik(theta_shift, offsets, r, n)
        mu_shift = mu + delta
        log_ratio_t = (
            (loglik_shift - loglik).sum(axis=1)
            - 0.5 * ((mu_shift - mu_mean) ** 2 - (mu - mu_mean) ** 2) * mu_prec0
        )
        if exnex:
            nex_dev = (
                ((theta_shift - nex_means[None, :]) / nex_sds[None, :]) ** 2
                - ((theta - nex_means[None, :]) / nex_sds[None, :]) ** 2
            )
            log_ratio_t -= 0.5 * (nex_dev * ~is_ex).sum(axis=1)
        with np.errstate(divide="ignore"):
            accept_t = np.log(unif[:, k + 1 if not exnex else 2 * k + 1]) < log_ratio_t
        theta = np.where(accept_t[:, None], theta_shift, theta)
        loglik = np.where(accept_t[:, None], loglik_shift, loglik)
        mu = np.where(accept_t, mu_shift, mu)
        shift_acc_win += accept_t

        in_burn = sweep < burn
        if mcmc.adapt and in_burn and (sweep + 1) % _ADAPT_INTERVAL == 0:
            theta_scale = _adapt_scale(theta_scale, theta_acc_win, theta_cnt_win)
            nex_scale = _adapt_scale(nex_scale, nex_acc_win, nex_cnt_win)
            sigma_scale = _adapt_scale(sigma_scale, sigma_acc_win, _ADAPT_INTERVAL)
            shift_scale = _adapt_scale(shift_scale, shift_acc_win, _ADAPT_INTERVAL)
            theta_acc_win[:] = theta_cnt_win[:] = 0.0
            nex_acc_win[:] = nex_cnt_win[:] = 0.0
            sigma_acc_win[:] = 0.0
            shift_acc_win[:] = 0.0
        if not in_burn:
            theta_acc_kept += accept
            sigma_acc_kept += accept_s
            shift_acc_kept += accept_t
            tail_count += theta > threshold
            p_now = expit(theta + offsets)
            p_sum += p_now
            if collect:
                chains["mu"][sweep - burn] = mu
                chains["sigma"][sweep - burn] = sigma
                chains["p"][sweep - burn] = p_now

    tails = tail_count / kept
    means = p_sum / kept
    rates = {
        "theta": theta_acc_kept / kept,
        "sigma": sigma_acc_kept / kept,
        "shift": shift_acc_kept / kept,
    }
    warnings = []
    lo, hi = _ACCEPT_BAND
    for name, rate in rates.items():
        bad = int(((rate < lo) | (rate > hi)).sum())
        if bad:
            warnings.append(
                f"{bad} {name} chain(s) with post-adaptation acceptance outside {_ACCEPT_BAND}"
            )
    return tails, means, rates, tuple(warnings), chains


def _as_batch(data: BasketData) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(data.responses, dtype=float)[None, :]
    n = np.asarray(data.sample_sizes, dtype=float)[None, :]
    return r, n


def bhm_posterior_batch(
    responses: np.ndarray,
    sample_sizes: np.ndarray,
    params: BhmParams,
    mcmc: McmcConfig,
    seeds: Sequence,
    p0: float = 0.15,
) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """Tail probabilities and posterior means for many data sets at once."""
    r = np.asarray(responses, dtype=float)
    n = np.broadcast_to(np.asarray(sample_sizes, dtype=float), r.shape)
    offsets = params.offsets(r.shape[1])
    tails, means, _, warn, _ = _run_chains(
        exnex=False, r=r, n=n, offsets=offsets,
        mu_mean=params.mu_mean, mu_sd=params.mu_sd, phi=params.phi,
        q=1.0, nex_means=None, nex_sds=None,
        mcmc=mcmc, seeds=seeds, p0=p0,
    )
    return tails, means, warn


def exnex_posterior_batch(
    responses: np.ndarray,
    sample_sizes: np.ndarray,
    params: ExnexParams,
    mcmc: McmcConfig,
    seeds: Sequence,
    p0: float = 0.15,
) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    r = np.asarray(responses, dtype=float)
    n = np.broadcast_to(np.asarray(sample_sizes, dtype=float), r.shape)
    k = r.shape[1]
    nex_means, nex_sds = params.nex_arrays(k)
    tails, means, _, warn, _ = _run_chains(
        exnex=True, r=r, n=n, offsets=np.zeros(k),
        mu_mean=params.mu_mean, mu_sd=params.mu_sd, phi=params.phi,
        q=params.q, nex_means=nex_means, nex_sds=nex_sds,
        mcmc=mcmc, seeds=seeds, p0=p0,
    )
    return tails, means, warn


def bhm_posterior(
    data: BasketData,
    params: BhmParams,
    mcmc: McmcConfig,
    p0: float = 0.15,
    collect_chains: bool = False,
) -> PosteriorSummary:
    """Run one BHM chain; deterministic given the config seed."""
    r, n = _as_batch(data)
    offsets = params.offsets(data.k)
    tails, means, acceptance, warn, chains = _run_chains(
        exnex=False, r=r, n=n, offsets=offsets,
        mu_mean=params.mu_mean, mu_sd=params.mu_sd, phi=params.phi,
        q=1.0, nex_means=None, nex_sds=None,
        mcmc=mcmc, seeds=[mcmc.seed], p0=p0, collect=collect_chains,
    )
    return PosteriorSummary(
        tail_probs=tails[0],
        posterior_means=means[0],
        acceptance={name: rate[0] for name, rate in acceptance.items()},
        warnings=warn,
        chains=_squeeze_chains(chains),
    )


def exnex_posterior(
    data: BasketData,
    params: ExnexParams,
    mcmc: McmcConfig,
    p0: float = 0.15,
    collect_chains: bool = False,
) -> PosteriorSummary:
    """Run one EXNEX chain; deterministic given the config seed."""
    r, n = _as_batch(data)
    nex_means, nex_sds = params.nex_arrays(data.k)
    tails, means, acceptance, warn, chains = _run_chains(
        exnex=True, r=r, n=n, offsets=np.zeros(data.k),
        mu_mean=params.mu_mean, mu_sd=params.mu_sd, phi=params.phi,
        q=params.q, nex_means=nex_means, nex_sds=nex_sds,
        mcmc=mcmc, seeds=[mcmc.seed], p0=p0, collect=collect_chains,
    )
    return PosteriorSummary(
        tail_probs=tails[0],
        posterior_means=means[0],
        acceptance={name: rate[0] for name, rate in acceptance.items()},
        warnings=warn,
        chains=_squeeze_chains(chains),
    )


def _squeeze_chains(chains: dict | None) -> dict | None:
    if chains is None:
        return None
    return {
        "mu": chains["mu"][:, 0],
        "sigma": chains["sigma"][:, 0],
        "p": chains["p"][:, 0, :],
    }
