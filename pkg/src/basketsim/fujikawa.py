"""Fujikawa-style borrowing: JSD similarity weights over basket-wise posteriors.

Unlike the power-prior posterior, the weighted sum here also carries each
basket's prior parameters, so prior information is shared alongside the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    BasketData,
    BetaShape,
    ConfigurationError,
    DEFAULT_QUAD_TOL,
    EDGE_EPS,
    beta_log_pdf,
    integrate,
    validate_weight_matrix,
)

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class FujikawaParams:
    """Sharpness (epsilon) and similarity threshold (tau) of the JSD weights."""

    epsilon: float
    tau: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


def individual_posteriors(data: BasketData, priors: list[BetaShape]) -> list[BetaShape]:
    """Basket-wise conjugate updates with no borrowing."""
    if len(priors) != data.k:
        raise ConfigurationError(f"expected {data.k} priors, got {len(priors)}")
    return [
        BetaShape(prior.alpha + r, prior.beta + (n - r))
        for prior, (r, n) in zip(priors, zip(data.responses, data.sample_sizes))
    ]


def jsd(f: BetaShape, g: BetaShape, tol: float = DEFAULT_QUAD_TOL) -> float:
    """Jensen-Shannon divergence between two beta densities, base-2 logs.

    The equal mixture M = (W + Q)/2 is evaluated pointwise inside the
    integrand (it is a genuine two-component mixture, not a beta), and the
    two divergence halves are integrated jointly in one adaptive pass over
    the edge-truncated unit interval.  Base-2 logs bound the result by 1.
    """
    if f == g:
        return 0.0

    def integrand(x: np.ndarray) -> np.ndarray:
        lw = beta_log_pdf(f, x)
        lq = beta_log_pdf(g, x)
        lm = np.logaddexp(lw, lq) - _LN2
        # exp underflow makes the 0 * log 0 convention automatic here
        return (np.exp(lw) * (lw - lm) + np.exp(lq) * (lq - lm)) / (2.0 * _LN2)

    value = integrate(integrand, EDGE_EPS, 1.0 - EDGE_EPS, tol=tol)
    return min(1.0, max(0.0, value))


def jsd_matrix(posteriors: list[BetaShape], tol: float = DEFAULT_QUAD_TOL) -> np.ndarray:
    """Pairwise JSD matrix; each unordered pair is integrated once per call."""
    k = len(posteriors)
    out = np.zeros((k, k))
    cache: dict[tuple, float] = {}
    for a in range(k):
        for b in range(a + 1, k):
            f, g = posteriors[a], posteriors[b]
            key = (f.alpha, f.beta, g.alpha, g.beta)
            if key not in cache:
                cache[key] = jsd(f, g, tol=tol)
            out[a, b] = out[b, a] = cache[key]
    return out


def weights_from_jsd(jsd_mat: np.ndarray, params: FujikawaParams) -> np.ndarray:
    """Threshold the similarity (1 - JSD)^epsilon at tau (strictly above)."""
    w = (1.0 - np.asarray(jsd_mat)) ** params.epsilon
    w[w <= params.tau] = 0.0
    np.fill_diagonal(w, 1.0)
    return w


def fujikawa_weights(posteriors: list[BetaShape], params: FujikawaParams) -> np.ndarray:
    return weights_from_jsd(jsd_matrix(posteriors), params)


def fujikawa_posterior(
    data: BasketData,
    priors: list[BetaShape],
    weights: np.ndarray,
) -> list[BetaShape]:
    """Weighted sum of all basket-wise posterior parameters, priors included."""
    matrix = validate_weight_matrix(weights)
    if matrix.shape != (data.k, data.k):
        raise ConfigurationError(
            f"weight matrix shape {matrix.shape} does not match K={data.k}"
        )
    singles = individual_posteriors(data, priors)
    alphas = np.array([s.alpha for s in singles])
    betas = np.array([s.beta for s in singles])
    return [
        BetaShape(float(matrix[k] @ alphas), float(matrix[k] @ betas))
        for k in range(data.k)
    ]
