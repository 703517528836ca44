"""Core probability model: data types, parameters, and closed-form conditionals.

The generative model for SNP ``i`` with ``K`` latent clusters:

* cluster label ``xi_i ~ Categorical(pi_1, ..., pi_K)``,
* variant-specific causal effect ``beta_i | xi_i = k ~ N(mu_k, sigma2_k)``,
* true instrument-exposure effect ``theta_x_i ~ N(nu_x, lambda2_x)``,
* observed summary statistics
  ``theta_x_hat_i ~ N(theta_x_i, sigma_x_i**2)`` and
  ``theta_y_hat_i ~ N(beta_i * theta_x_i, sigma_y_i**2)``.

All density arithmetic is carried out in log space.  The operations in this
module are pure functions and broadcast over numpy arrays, so the same code
path serves both scalar (public API, unit-tested against hand arithmetic)
and batched (EM engine) callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Floor applied to every variance before it enters a denominator or log;
# EM can drive cluster variances toward degenerate solutions.
VARIANCE_FLOOR = 1e-12

LOG_2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    """Invalid model inputs (non-finite values, bad cluster index, ...)."""


def normal_logpdf(x, mean, var):
    """Log density of N(mean, var), broadcasting over array inputs."""
    var = np.maximum(var, VARIANCE_FLOOR)
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def logsumexp(a, axis=-1, keepdims=False):
    """Max-shifted log-sum-exp along ``axis``; minimal-pass implementation."""
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(a, axis=-1):
    """exp(a) normalized along ``axis``, computed with a max shift."""
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    out = np.exp(a - np.where(np.isfinite(amax), amax, 0.0))
    out /= np.sum(out, axis=axis, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class SnpRecord:
    """Observed summary associations for one genetic variant."""

    snp_id: str
    theta_x_hat: float
    sigma_x: float
    theta_y_hat: float
    sigma_y: float

    def __post_init__(self):
        vals = (self.theta_x_hat, self.sigma_x, self.theta_y_hat, self.sigma_y)
        if not all(math.isfinite(v) for v in vals):
            raise ModelError(f"non-finite summary statistic for SNP {self.snp_id!r}")
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ModelError(f"standard errors must be positive for SNP {self.snp_id!r}")


@dataclass
class SummaryDataset:
    """Ordered collection of SNP summary records.

    Column-major numpy views of the four numeric fields are materialized once
    at construction and shared by all downstream numerics.
    """

    records: list

    theta_x_hat: np.ndarray = field(init=False, repr=False)
    sigma_x: np.ndarray = field(init=False, repr=False)
    theta_y_hat: np.ndarray = field(init=False, repr=False)
    sigma_y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.records) < 1:
            raise ModelError("dataset must contain at least one SNP")
        ids = [r.snp_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ModelError(f"duplicate snp_id values: {dupes}")
        self.theta_x_hat = np.array([r.theta_x_hat for r in self.records])
        self.sigma_x = np.array([r.sigma_x for r in self.records])
        self.theta_y_hat = np.array([r.theta_y_hat for r in self.records])
        self.sigma_y = np.array([r.sigma_y for r in self.records])

    @property
    def p(self) -> int:
        return len(self.records)

    @property
    def snp_ids(self) -> list:
        return [r.snp_id for r in self.records]

    @classmethod
    def from_arrays(cls, snp_ids, theta_x_hat, sigma_x, theta_y_hat, sigma_y):
        records = [
            SnpRecord(str(i), float(tx), float(sx), float(ty), float(sy))
            for i, tx, sx, ty, sy in zip(
                snp_ids, theta_x_hat, sigma_x, theta_y_hat, sigma_y
            )
        ]
        return cls(records)

    def subset(self, index: int) -> "SummaryDataset":
        return SummaryDataset([self.records[index]])


@dataclass
class MixtureParams:
    """Full parameter vector: mixture over causal effects plus exposure prior.

    ``weights[k]``, ``means[k]``, ``variances[k]`` describe the K-component
    Gaussian mixture of variant-specific effects; ``exposure_mean`` and
    ``exposure_variance`` are the prior on true instrument-exposure effects.
    Cluster labels are canonical: means sorted ascending.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    exposure_mean: float
    exposure_variance: float

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        self.means = np.atleast_1d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_1d(np.asarray(self.variances, dtype=float))
        k = self.weights.size
        if k < 1 or self.means.size != k or self.variances.size != k:
            raise ModelError("weights, means, variances must share length K >= 1")
        if not (
            np.all(np.isfinite(self.weights))
            and np.all(np.isfinite(self.means))
            and np.all(np.isfinite(self.variances))
        ):
            raise ModelError("non-finite mixture parameters")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ModelError(f"weights must sum to 1, got {self.weights.sum()!r}")
        if np.any(self.weights <= 0) or np.any(self.weights > 1):
            raise ModelError("each weight must lie in (0, 1]")
        if np.any(self.variances <= 0):
            raise ModelError("cluster variances must be positive")
        if np.any(np.diff(self.means) < 0):
            raise ModelError("means must be sorted ascending (canonical labels)")
        if not math.isfinite(self.exposure_mean):
            raise ModelError("non-finite exposure mean")
        if not (math.isfinite(self.exposure_variance) and self.exposure_variance > 0):
            raise ModelError("exposure variance must be positive and finite")

    @property
    def k(self) -> int:
        return self.weights.size

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "exposure_mean": self.exposure_mean,
            "exposure_variance": self.exposure_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureParams":
        return cls(
            np.asarray(d["weights"], dtype=float),
            np.asarray(d["means"], dtype=float),
            np.asarray(d["variances"], dtype=float),
            float(d["exposure_mean"]),
            float(d["exposure_variance"]),
        )


def canonicalize(weights, means, variances, exposure_mean, exposure_variance):
    """Build MixtureParams with labels sorted by mean (ties: variance)."""
    order = np.lexsort((np.asarray(variances), np.asarray(means)))
    return MixtureParams(
        np.asarray(weights, dtype=float)[order],
        np.asarray(means, dtype=float)[order],
        np.asarray(variances, dtype=float)[order],
        float(exposure_mean),
        float(exposure_variance),
    )


@dataclass
class LatentState:
    """One realization of the latent variables for a single SNP.

    ``cluster`` is 1-based (1..K), matching the label convention of
    MixtureParams.
    """

    theta_x: float
    beta: float
    cluster: int

    def validate(self, k: int):
        if not 1 <= self.cluster <= k:
            raise ModelError(f"cluster index {self.cluster} outside 1..{k}")
        if not (math.isfinite(self.theta_x) and math.isfinite(self.beta)):
            raise ModelError("non-finite latent state")


@dataclass
class ClusterConditional:
    """Mixture representation of beta given (theta_x, theta_y_hat).

    ``tilde_log_weights`` are exact log unnormalized mixture weights;
    ``tilde_weights`` the same exponentiated after a max shift (positive,
    proportional to the true unnormalized weights, safe from underflow).
    """

    tilde_weights: np.ndarray
    tilde_means: np.ndarray
    tilde_variances: np.ndarray
    tilde_log_weights: np.ndarray

    def posterior_weights(self) -> np.ndarray:
        """Normalized mixture weights P(xi = k | theta_x, theta_y_hat)."""
        return self.tilde_weights / self.tilde_weights.sum()

    def mean(self) -> float:
        """Posterior mean of beta."""
        return float(np.dot(self.posterior_weights(), self.tilde_means))


@dataclass
class ProposalParams:
    """Normal posterior of theta_x given theta_x_hat only: N(m, v)."""

    m: float
    v: float


# ---------------------------------------------------------------------------
# Log-likelihood and closed-form conditionals
# ---------------------------------------------------------------------------


def complete_data_loglik(params: MixtureParams, data: SummaryDataset, latents) -> float:
    """Joint log density of observed data and latent variables.

    Sums, over SNPs, the five factors of the generative model: the two data
    terms (theta_x_hat and theta_y_hat given latents), the exposure prior,
    the cluster label mass, and the within-cluster effect density.  The data
    terms are constant in the parameters but are included so the value is a
    proper joint log density, directly comparable across models.
    """
    if len(latents) != data.p:
        raise ModelError(f"expected {data.p} latent states, got {len(latents)}")
    for lat in latents:
        lat.validate(params.k)
    theta_x = np.array([l.theta_x for l in latents])
    beta = np.array([l.beta for l in latents])
    cluster = np.array([l.cluster for l in latents]) - 1
    terms = (
        normal_logpdf(data.theta_x_hat, theta_x, data.sigma_x**2)
        + normal_logpdf(data.theta_y_hat, beta * theta_x, data.sigma_y**2)
        + normal_logpdf(theta_x, params.exposure_mean, params.exposure_variance)
        + np.log(params.weights[cluster])
        + normal_logpdf(beta, params.means[cluster], params.variances[cluster])
    )
    if not np.all(np.isfinite(terms)):
        raise ModelError("non-finite contribution to complete-data log-likelihood")
    return float(terms.sum())


def log_mixture_density(beta, params: MixtureParams):
    """Per-component log pi_k + log N(beta; mu_k, sigma2_k); K on last axis."""
    beta = np.asarray(beta, dtype=float)[..., np.newaxis]
    return np.log(params.weights) + normal_logpdf(beta, params.means, params.variances)


def cluster_responsibilities(beta, params: MixtureParams):
    """P(xi = k | beta, params) for each k; computed in log space.

    Broadcasts over ``beta``: scalar input yields a length-K vector, an
    array of shape S yields shape S + (K,).  Rows sum to 1.
    """
    return softmax(log_mixture_density(beta, params), axis=-1)


def _outcome_component_logpdf(theta_x, theta_y_hat, sigma_y, params: MixtureParams):
    """log pi_k + log N(theta_y_hat; theta_x mu_k, theta_x^2 sigma2_k + sigma_y^2).

    The building block shared by the beta conditional's mixture weights and
    the importance weights: its exp, summed over k, is the marginal density
    of theta_y_hat given theta_x.
    """
    theta_x = np.asarray(theta_x, dtype=float)[..., np.newaxis]
    theta_y_hat = np.asarray(theta_y_hat, dtype=float)[..., np.newaxis]
    sigma_y = np.asarray(sigma_y, dtype=float)[..., np.newaxis]
    marg_var = theta_x**2 * params.variances + sigma_y**2
    return np.log(params.weights) + normal_logpdf(
        theta_y_hat, theta_x * params.means, marg_var
    )


def beta_conditional_arrays(theta_x, theta_y_hat, sigma_y, params: MixtureParams):
    """Vectorized (log weight, mean, variance) arrays of the beta conditional.

    Shapes broadcast from the inputs with a trailing K axis.  The weights are
    the exact log unnormalized posterior component probabilities
    P(xi = k | theta_x, theta_y_hat, params), i.e. log pi_k plus the log
    marginal density of theta_y_hat under component k.
    """
    theta_x_b = np.asarray(theta_x, dtype=float)[..., np.newaxis]
    theta_y_b = np.asarray(theta_y_hat, dtype=float)[..., np.newaxis]
    sigma_y_b = np.asarray(sigma_y, dtype=float)[..., np.newaxis]
    log_w = _outcome_component_logpdf(theta_x, theta_y_hat, sigma_y, params)
    prec = 1.0 / params.variances + theta_x_b**2 / sigma_y_b**2
    tilde_var = 1.0 / prec
    tilde_mean = tilde_var * (
        theta_y_b * theta_x_b / sigma_y_b**2 + params.means / params.variances
    )
    return log_w, tilde_mean, tilde_var


def beta_conditional(
    theta_x: float, theta_y_hat: float, sigma_y: float, params: MixtureParams
) -> ClusterConditional:
    """Closed-form conditional of beta given theta_x and theta_y_hat.

    Returns a K-component normal mixture with precision-weighted component
    means/variances.  Normalizing the returned weights yields
    P(beta | theta_x, theta_y_hat, params).
    """
    if sigma_y <= 0:
        raise ModelError("sigma_y must be positive")
    log_w, mean, var = beta_conditional_arrays(theta_x, theta_y_hat, sigma_y, params)
    w = np.exp(log_w - log_w.max())
    return ClusterConditional(w, mean, var, log_w)


def proposal_params(
    theta_x_hat, sigma_x, params: MixtureParams
) -> ProposalParams | tuple:
    """Posterior of theta_x given theta_x_hat alone (the IS proposal).

    Precision-weighted combination of the observation and the exposure
    prior.  Array inputs return (m, v) arrays instead of a ProposalParams.
    """
    theta_x_hat = np.asarray(theta_x_hat, dtype=float)
    sigma_x = np.asarray(sigma_x, dtype=float)
    if np.any(sigma_x <= 0):
        raise ModelError("sigma_x must be positive")
    v = 1.0 / (1.0 / sigma_x**2 + 1.0 / params.exposure_variance)
    m = v * (
        theta_x_hat / sigma_x**2 + params.exposure_mean / params.exposure_variance
    )
    if theta_x_hat.ndim == 0:
        return ProposalParams(float(m), float(v))
    return m, v


def log_marginal_outcome(theta_x, theta_y_hat, sigma_y, params: MixtureParams):
    """log P(theta_y_hat | theta_x, params), beta and xi integrated out.

    Equals log sum_k pi_k N(theta_y_hat; theta_x mu_k, theta_x^2 sigma2_k +
    sigma_y^2), evaluated with log-sum-exp.  This is also the log
    unnormalized importance weight of the proposal draw ``theta_x``; its exp
    is bounded by (2 pi sigma_y^2)**-0.5.
    """
    if np.any(np.asarray(sigma_y) <= 0):
        raise ModelError("sigma_y must be positive")
    out = logsumexp(
        _outcome_component_logpdf(theta_x, theta_y_hat, sigma_y, params), axis=-1
    )
    if np.ndim(theta_x) == 0 and np.ndim(theta_y_hat) == 0:
        return float(out)
    return out
