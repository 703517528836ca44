"""Wald-ratio mixture baseline: exact EM on per-SNP ratio estimates.

Models the ratio theta_y_hat/theta_x_hat of each SNP as drawn from one of K
normal clusters with cluster-specific mean and the SNP's own (fixed)
delta-method variance; optionally adds a null cluster pinned at mean zero.
Because the per-SNP variances are fixed, the EM is exact: responsibilities
are closed form and the mean updates are precision-weighted averages.

Used for the weak-instrument comparison: ratio estimates of near-null
instruments blow up, so BIC-selected ratio mixtures tend to add spurious
clusters that the errors-in-variables model does not need.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .model import SummaryDataset, normal_logpdf

logger = logging.getLogger(__name__)

RATIO_FLOOR = 1e-12


class BaselineError(ValueError):
    pass


@dataclass
class RatioData:
    """Per-SNP Wald ratios and first-order delta-method standard errors."""

    snp_ids: list
    ratio: np.ndarray
    ratio_se: np.ndarray
    n_excluded: int = 0

    @classmethod
    def from_dataset(cls, data: SummaryDataset) -> "RatioData":
        keep = np.abs(data.theta_x_hat) > RATIO_FLOOR
        n_excluded = int((~keep).sum())
        if n_excluded:
            logger.warning(
                "ratio baseline: excluding %d SNP(s) with |theta_x_hat| <= %g",
                n_excluded,
                RATIO_FLOOR,
            )
        if not np.any(keep):
            raise BaselineError("no SNPs with nonzero exposure association")
        ids = [r.snp_id for r, k in zip(data.records, keep) if k]
        ratio = data.theta_y_hat[keep] / data.theta_x_hat[keep]
        se = data.sigma_y[keep] / np.abs(data.theta_x_hat[keep])
        return cls(ids, ratio, se, n_excluded)


@dataclass
class RatioMixtureFit:
    """EM solution for the ratio mixture."""

    means: np.ndarray
    weights: np.ndarray
    k: int
    include_null: bool
    loglik: float
    bic: float
    n_iterations: int
    converged: bool
    loglik_trace: list = field(default_factory=list)
    responsibilities: np.ndarray | None = None


def _ratio_em(
    ratio: np.ndarray,
    var: np.ndarray,
    means0: np.ndarray,
    fixed_mask: np.ndarray,
    max_iters: int,
    tol: float,
):
    n = ratio.size
    n_comp = means0.size
    means = means0.copy()
    weights = np.full(n_comp, 1.0 / n_comp)
    trace = []
    prev_ll = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        log_comp = np.log(weights) + normal_logpdf(
            ratio[:, None], means, var[:, None]
        )
        log_norm = logsumexp(log_comp, axis=1)
        ll = float(log_norm.sum())
        trace.append(ll)
        resp = np.exp(log_comp - log_norm[:, None])

        mass = resp.sum(axis=0)
        weights = np.maximum(mass, 1e-12) / n
        weights = weights / weights.sum()
        prec = resp / var[:, None]
        denom = prec.sum(axis=0)
        new_means = np.where(
            denom > 0, (prec * ratio[:, None]).sum(axis=0) / np.maximum(denom, 1e-300),
            means,
        )
        means = np.where(fixed_mask, means, new_means)

        if abs(ll - prev_ll) < tol * (1.0 + abs(ll)):
            converged = True
            break
        prev_ll = ll
    log_comp = np.log(weights) + normal_logpdf(ratio[:, None], means, var[:, None])
    log_norm = logsumexp(log_comp, axis=1)
    resp = np.exp(log_comp - log_norm[:, None])
    return means, weights, float(log_norm.sum()), resp, trace, converged, it


def fit_ratio_mixture(
    data: SummaryDataset,
    k: int,
    include_null: bool = False,
    max_iters: int = 500,
    tol: float = 1e-10,
) -> RatioMixtureFit:
    """Exact EM fit of a K-cluster ratio mixture (+ optional null cluster).

    Substantive cluster means initialize at evenly spaced quantiles of the
    ratios; the null cluster mean stays pinned at zero.  Standard BIC with
    d = (#free weights) + (#free means) selects among fits.
    """
    if k < 1:
        raise BaselineError("k must be at least 1")
    rd = RatioData.from_dataset(data)
    n = rd.ratio.size
    var = rd.ratio_se**2

    qs = (np.arange(k) + 0.5) / k
    means0 = np.quantile(rd.ratio, qs)
    fixed = np.zeros(k + int(include_null), dtype=bool)
    if include_null:
        means0 = np.concatenate([[0.0], means0])
        fixed[0] = True

    means, weights, ll, resp, trace, converged, iters = _ratio_em(
        rd.ratio, var, means0, fixed, max_iters, tol
    )

    # Canonical order: null cluster (if any) first, substantive means ascending.
    if include_null:
        order = np.concatenate([[0], 1 + np.argsort(means[1:])])
    else:
        order = np.argsort(means)
    means, weights = means[order], weights[order]
    resp = resp[:, order]

    n_free = (means.size - 1) + k  # weights on the simplex + free means
    bic = -2.0 * ll + n_free * math.log(n)
    return RatioMixtureFit(
        means=means,
        weights=weights,
        k=k,
        include_null=include_null,
        loglik=ll,
        bic=bic,
        n_iterations=iters,
        converged=converged,
        loglik_trace=trace,
        responsibilities=resp,
    )


def select_ratio_k(
    data: SummaryDataset, k_candidates=range(1, 8), include_null: bool = False
) -> tuple[int, dict]:
    """BIC-selected number of substantive ratio clusters."""
    fits = {k: fit_ratio_mixture(data, k, include_null) for k in k_candidates}
    best = min(fits, key=lambda k: (fits[k].bic, k))
    return best, fits
