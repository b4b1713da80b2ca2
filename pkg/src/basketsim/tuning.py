"""Two-stage tuning: threshold calibration, then ECD-maximizing grid search.

Stage one picks the smallest grid threshold holding the family-wise error
rate at alpha under the global null; stage two scores every parameter
combination by mean ECD over the six response patterns, reusing one
generated replicate bank per scenario so all combinations see the same
data.  Similarity statistics that do not depend on the tuning parameters
(scaled rate differences, JSD matrices, pooled block marginals) are
computed once per bank and shared across the grid.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import bma as bma_mod
from .bma import BmaParams
from .core import (
    BasketData,
    BetaShape,
    CalibrationError,
    ConfigurationError,
    NullRate,
    Scenario,
    beta_tail,
)
from .engine import (
    DesignConfig,
    decisions_from_tails,
    generate_responses,
    mcmc_seed_sequence,
    scenario_tails_means,
)
from .fujikawa import FujikawaParams, jsd_matrix
from .hierarchical import (
    BhmParams,
    ExnexParams,
    McmcConfig,
    bhm_posterior_batch,
    exnex_posterior_batch,
)
from .powerprior import (
    CppParams,
    alpha0_matrix,
    cpp_weights_from_scaled,
    gamma_matrix,
    scaled_ks_matrix,
)

LAMBDA_STEPS = 999  # grid 0.001 .. 0.999, three-decimal resolution


def _lambda_value(step: int) -> float:
    return step / 1000.0


def smallest_lambda(max_tails: np.ndarray, alpha: float, strict: bool) -> float:
    """Smallest grid threshold whose empirical FWER is at most alpha.

    On a global-null bank a replicate is a family-wise error iff its
    maximal tail statistic clears the threshold, so the search is a
    bisection over the sorted maxima (rejection is monotone in lambda).
    """
    max_tails = np.sort(np.asarray(max_tails))
    n = max_tails.size
    if n == 0:
        raise ValueError("calibration needs at least one replicate")
    allowed = alpha * n + 1e-9

    def errors(step: int) -> int:
        side = "right" if strict else "left"
        return n - int(np.searchsorted(max_tails, _lambda_value(step), side=side))

    if errors(LAMBDA_STEPS) > allowed:
        raise CalibrationError(
            "no grid threshold attains the requested error rate",
            min_fwer=errors(LAMBDA_STEPS) / n,
        )
    lo, hi = 1, LAMBDA_STEPS  # invariant: errors(hi) <= allowed
    if errors(lo) <= allowed:
        return _lambda_value(lo)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        e_mid = errors(mid)
        assert e_mid <= errors(lo), "rejection count must be nonincreasing in lambda"
        if e_mid <= allowed:
            hi = mid
        else:
            lo = mid
    assert errors(hi) <= allowed < errors(hi - 1)  # minimality on this bank
    return _lambda_value(hi)


def calibrate_lambda(
    config: DesignConfig,
    null_scenario: Scenario,
    n_reps: int,
    alpha: float = 0.05,
    seed: int = 0,
    p0: NullRate | float = NullRate(),
    jobs: int = 1,
    tails: np.ndarray | None = None,
) -> float:
    """Calibrate the decision threshold on a global-null replicate bank.

    ``tails`` may carry precomputed tail statistics for the same bank, so
    callers holding evaluated banks skip the re-evaluation.
    """
    threshold = p0.p0 if isinstance(p0, NullRate) else float(p0)
    if any(p > threshold for p in null_scenario.true_rates):
        raise ValueError("calibration scenario must have all true rates at or below p0")
    if tails is None:
        tails, _ = scenario_tails_means(
            config, null_scenario, n_reps, seed, threshold, jobs=jobs
        )
    return smallest_lambda(tails.max(axis=1), alpha, config.strict)


# ---------------------------------------------------------------------------
# Parameter grids
# ---------------------------------------------------------------------------

PHI_GRID = tuple(0.125 + j * (1.875 / 7.0) for j in range(8))


def default_grid(design: str) -> list:
    """The tuning grid of each design, in lexicographic order."""
    if design in ("CPP", "LCPP"):
        values = [i / 2.0 for i in range(1, 11)]  # 0.5 .. 5
        return [CppParams(a, b) for a in values for b in values]
    if design == "Fujikawa":
        eps = [i / 2.0 for i in range(1, 7)]  # 0.5 .. 3
        taus = [i / 10.0 for i in range(6)]  # 0 .. 0.5
        return [FujikawaParams(e, t) for e in eps for t in taus]
    if design == "BMA":
        return [BmaParams(i / 2.0) for i in range(-8, 9)]  # -4 .. 4
    if design == "BHM":
        return [BhmParams(phi=phi) for phi in PHI_GRID]
    if design == "EXNEX":
        qs = [i / 10.0 for i in range(1, 10)]  # 0.1 .. 0.9
        return [ExnexParams(phi=phi, q=q) for phi in PHI_GRID for q in qs]
    if design == "APP":
        return [None]
    raise ConfigurationError(f"unknown design {design!r}")


# ---------------------------------------------------------------------------
# Bank evaluators: parameter-independent statistics computed once per bank
# ---------------------------------------------------------------------------


def _fujikawa_jsd_chunk(args):
    responses, sizes, priors_ab, tol = args
    n_reps, k = responses.shape
    out = np.empty((n_reps, k, k))
    for i in range(n_reps):
        posts = [
            BetaShape(a + r, b + (n - r))
            for (a, b), r, n in zip(priors_ab, responses[i], sizes)
        ]
        out[i] = jsd_matrix(posts, tol=tol)
    return out


class BankEvaluator:
    """Tail statistics for one (design, scenario bank) across a parameter grid.

    MCMC designs have no parameter-independent precomputation, so their
    ``tails_means`` reruns the sampler per combination on per-replicate
    streams keyed exactly like the engine's.
    """

    def __init__(
        self,
        design: str,
        scenario: Scenario,
        n_reps: int,
        master_seed: int,
        p0: NullRate | float = NullRate(),
        priors: list[BetaShape] | None = None,
        mcmc: McmcConfig | None = None,
        jobs: int = 1,
    ):
        self.design = design
        self.scenario = scenario
        self.n_reps = n_reps
        self.master_seed = master_seed
        self.p0 = p0.p0 if isinstance(p0, NullRate) else float(p0)
        self.priors = priors or [BetaShape(1.0, 1.0)] * scenario.k
        self.mcmc = mcmc or McmcConfig()
        self.jobs = jobs
        self.responses = generate_responses(scenario, n_reps, master_seed)
        self._sizes = np.asarray(scenario.sample_sizes, dtype=float)
        self._prior_alpha = np.array([p.alpha for p in self.priors])
        self._prior_beta = np.array([p.beta for p in self.priors])
        if design in ("CPP", "LCPP"):
            self._scaled = np.stack([
                scaled_ks_matrix(self._data(i)) for i in range(n_reps)
            ])
            self._alpha0 = alpha0_matrix(scenario.sample_sizes)
        elif design == "APP":
            a0 = alpha0_matrix(scenario.sample_sizes)
            weights = np.stack([
                a0 * (1.0 - gamma_matrix(self._data(i))) for i in range(n_reps)
            ])
            self._set_unit_diagonal(weights)
            self._app_stats = self._power_prior_stats(weights)
        elif design == "Fujikawa":
            self._jsd = self._jsd_matrices(jobs)
            self._post_alpha = self._prior_alpha[None, :] + self.responses
            self._post_beta = (
                self._prior_beta[None, :] + self._sizes[None, :] - self.responses
            )
        elif design == "BMA":
            self._init_bma()
        elif design not in ("BHM", "EXNEX"):
            raise ConfigurationError(f"unknown design {design!r}")

    # -- construction helpers ------------------------------------------------

    def _data(self, i: int) -> BasketData:
        return BasketData(
            tuple(int(v) for v in self.responses[i]), self.scenario.sample_sizes
        )

    @staticmethod
    def _set_unit_diagonal(weights: np.ndarray) -> None:
        k = weights.shape[-1]
        idx = np.arange(k)
        weights[:, idx, idx] = 1.0

    def _jsd_matrices(self, jobs: int) -> np.ndarray:
        priors_ab = [(p.alpha, p.beta) for p in self.priors]
        sizes = self.scenario.sample_sizes
        if jobs <= 1 or self.n_reps < 2 * jobs:
            return _fujikawa_jsd_chunk((self.responses, sizes, priors_ab, 1e-8))
        bounds = np.linspace(0, self.n_reps, jobs + 1, dtype=int)
        tasks = [
            (self.responses[a:b], sizes, priors_ab, 1e-8)
            for a, b in zip(bounds[:-1], bounds[1:]) if b > a
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_fujikawa_jsd_chunk, tasks))
        return np.concatenate(parts)

    def _init_bma(self):
        space = bma_mod._model_space(self.scenario.k)
        prior = self.priors[0]
        pooled_r = self.responses @ space.member_matrix.T
        pooled_n = (
            np.broadcast_to(self._sizes, self.responses.shape) @ space.member_matrix.T
        )
        alphas = prior.alpha + pooled_r
        betas = prior.beta + (pooled_n - pooled_r)
        lb0 = (
            gammaln(prior.alpha) + gammaln(prior.beta)
            - gammaln(prior.alpha + prior.beta)
        )
        self._subset_lm = gammaln(alphas) + gammaln(betas) - gammaln(alphas + betas) - lb0
        self._subset_tails = self._tails_of(alphas, betas)
        self._subset_means = alphas / (alphas + betas)
        self._space = space
        self._partition_matrix = np.zeros(
            (len(space.partition_subsets), len(space.subsets))
        )
        for j, indices in enumerate(space.partition_subsets):
            self._partition_matrix[j, list(indices)] = 1.0

    # -- evaluation ----------------------------------------------------------

    def _tails_of(self, alphas: np.ndarray, betas: np.ndarray) -> np.ndarray:
        tails = np.empty_like(alphas)
        flat_t, flat_a, flat_b = tails.reshape(-1), alphas.reshape(-1), betas.reshape(-1)
        for i in range(flat_a.size):
            flat_t[i] = beta_tail(BetaShape(flat_a[i], flat_b[i]), self.p0)
        return tails

    def _power_prior_stats(self, weights: np.ndarray):
        r = self.responses.astype(float)
        misses = self._sizes[None, :] - r
        alphas = self._prior_alpha[None, :] + np.einsum("rki,ri->rk", weights, r)
        betas = self._prior_beta[None, :] + np.einsum("rki,ri->rk", weights, misses)
        return self._tails_of(alphas, betas), alphas / (alphas + betas)

    def tails_means(self, params) -> tuple[np.ndarray, np.ndarray]:
        """Per-replicate tails and posterior means at one grid point."""
        design = self.design
        if design == "APP":
            return self._app_stats
        if design in ("CPP", "LCPP"):
            weights = cpp_weights_from_scaled(self._scaled, params)
            if design == "LCPP":
                weights = weights * self._alpha0[None, :, :]
            self._set_unit_diagonal(weights)
            return self._power_prior_stats(weights)
        if design == "Fujikawa":
            weights = (1.0 - self._jsd) ** params.epsilon
            weights[weights <= params.tau] = 0.0
            self._set_unit_diagonal(weights)
            alphas = np.einsum("rki,ri->rk", weights, self._post_alpha)
            betas = np.einsum("rki,ri->rk", weights, self._post_beta)
            return self._tails_of(alphas, betas), alphas / (alphas + betas)
        if design == "BMA":
            log_w = (
                self._space.block_counts[None, :] * params.psi
                + self._subset_lm @ self._partition_matrix.T
            )
            log_w -= log_w.max(axis=1, keepdims=True)
            probs = np.exp(log_w)
            probs /= probs.sum(axis=1, keepdims=True)
            rows = np.arange(self.n_reps)[:, None, None]
            gather = self._space.basket_subset[None, :, :]
            tails = np.einsum("rj,rjk->rk", probs, self._subset_tails[rows, gather])
            means = np.einsum("rj,rjk->rk", probs, self._subset_means[rows, gather])
            return tails, means
        # MCMC designs: a fresh run per grid point, streams keyed per replicate
        config = DesignConfig(design, params, mcmc=self.mcmc)
        seeds = [
            mcmc_seed_sequence(self.master_seed, self.scenario.id, design, i)
            for i in range(self.n_reps)
        ]
        runner = bhm_posterior_batch if design == "BHM" else exnex_posterior_batch
        tails, means, _ = runner(
            self.responses, self.scenario.sample_sizes, config.params,
            self.mcmc, seeds, self.p0,
        )
        return tails, means


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TuningRecord:
    """One grid point: parameters, calibrated threshold, per-pattern ECD."""

    params: object
    lambda_: float
    pattern_ecd: dict
    mean_ecd: float
    feasible: bool = True


@dataclass(frozen=True)
class TuningResult:
    design: str
    records: tuple[TuningRecord, ...]
    selected_index: int

    @property
    def selected(self) -> TuningRecord:
        return self.records[self.selected_index]


def mean_correct_decisions(
    decisions: np.ndarray, true_rates, p0: float
) -> float:
    truth = np.asarray(true_rates, dtype=float) > p0
    correct = (decisions == truth[None, :]).sum(axis=1)
    return math.fsum(correct.astype(float).tolist()) / decisions.shape[0]


def grid_search(
    design: str,
    scenarios: list[Scenario],
    n_reps: int,
    alpha: float = 0.05,
    seed: int = 0,
    grid: list | None = None,
    priors: list[BetaShape] | None = None,
    mcmc: McmcConfig | None = None,
    p0: NullRate | float = NullRate(),
    jobs: int = 1,
) -> TuningResult:
    """Score every parameter combination on one size family.

    For each grid point the threshold is calibrated on the family's
    global-null pattern, ECD is evaluated on every pattern with that
    threshold, and the combination maximizing the mean ECD wins (ties
    break toward the earliest grid point).
    """
    threshold = p0.p0 if isinstance(p0, NullRate) else float(p0)
    null_scenarios = [
        s for s in scenarios if all(p <= threshold for p in s.true_rates)
    ]
    if not null_scenarios:
        raise ConfigurationError("grid_search needs the family's global-null scenario")
    grid = default_grid(design) if grid is None else list(grid)
    if not grid:
        raise ConfigurationError("grid_search needs a nonempty parameter grid")
    strict = DesignConfig(design, grid[0], mcmc=mcmc or McmcConfig()).strict
    evaluators = [
        BankEvaluator(
            design, scenario, n_reps, seed,
            p0=threshold, priors=priors, mcmc=mcmc, jobs=jobs,
        )
        for scenario in scenarios
    ]
    records = []
    for params in grid:
        per_scenario = [ev.tails_means(params)[0] for ev in evaluators]
        null_tails = per_scenario[scenarios.index(null_scenarios[0])]
        try:
            lam = smallest_lambda(null_tails.max(axis=1), alpha, strict)
        except CalibrationError:
            records.append(TuningRecord(params, math.nan, {}, -math.inf, feasible=False))
            continue
        pattern_ecd = {}
        for scenario, tails in zip(scenarios, per_scenario):
            decisions = decisions_from_tails(tails, lam, strict)
            pattern_ecd[scenario.pattern] = mean_correct_decisions(
                decisions, scenario.true_rates, threshold
            )
        mean_ecd = math.fsum(pattern_ecd.values()) / len(pattern_ecd)
        records.append(TuningRecord(params, lam, pattern_ecd, mean_ecd))
    feasible = [i for i, rec in enumerate(records) if rec.feasible]
    if not feasible:
        raise CalibrationError("no grid combination could be calibrated", min_fwer=math.nan)
    best = max(feasible, key=lambda i: records[i].mean_ecd)
    # max() keeps the earliest index on ties, matching lexicographic order
    assert all(records[best].mean_ecd >= records[i].mean_ecd for i in feasible)
    return TuningResult(design=design, records=tuple(records), selected_index=best)
