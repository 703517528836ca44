"""Ascent-based Monte-Carlo EM engine.

Each iteration draws importance samples of the latent variables (E-step),
maximizes the importance-sampling estimate of the Q-function in closed form
(M-step), and then runs a one-sided test of whether the Q-function actually
increased.  Iterations that fail the test are redone with a geometrically
larger Monte-Carlo sample size; the algorithm stops when the upper
confidence bound on the Q-increase falls below a threshold.

Importance sampling scheme per SNP i, draw j:

* ``theta_x^j`` from the proposal N(m_i, v_i) (posterior given theta_x_hat
  alone),
* ``beta^j`` from the closed-form normal-mixture conditional given
  ``theta_x^j`` and theta_y_hat,
* ``xi^j`` from the cluster responsibilities at ``beta^j``,
* unnormalized log weight = log marginal density of theta_y_hat given
  ``theta_x^j`` (bounded above by (2 pi sigma_y^2)**-0.5).

Q-function estimates marginalize the cluster label analytically using the
responsibilities retained from the E-step (Rao-Blackwellization): this has
the same expectation as plugging in the sampled labels, strictly lower
Monte-Carlo variance, and makes the closed-form M-step the exact maximizer
of the estimated objective.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import rng as rngmod
from ._utils import parallel_map
from .model import (
    LOG_2PI,
    VARIANCE_FLOOR,
    MixtureParams,
    SummaryDataset,
    beta_conditional_arrays,
    canonicalize,
    cluster_responsibilities,
    logsumexp,
    normal_logpdf,
    proposal_params,
)

logger = logging.getLogger(__name__)

# Responsibility mass below which a cluster is treated as collapsed and its
# parameters carried over from the previous iteration.
COLLAPSE_MASS = 1e-8


class NonConvergenceError(RuntimeError):
    """Raised when no MC-EM chain reaches the stopping criterion."""


@dataclass
class McemConfig:
    """Tuning knobs for the ascent-based MC-EM run.

    ``epsilon`` is the absolute stopping threshold on the Q-increase; when
    None it defaults to ``5e-5 * p`` (scales with the number of SNPs; small
    enough that the slow phase of EM label migration, where per-iteration
    Q-gains transiently dip to ~1e-4 * p, is not mistaken for convergence).
    ``legacy_mt_scaling`` switches the ascent/stopping rules from the
    asymptotically consistent eta/sqrt(m) form to the literal eta/m form.
    """

    m0: int = 500
    growth: float = 1.5
    alpha: float = 0.10
    gamma: float = 0.05
    epsilon: float | None = None
    max_iters: int = 200
    max_mc_size: int = 2**20
    n_restarts: int = 10
    seed: int = 0
    fix_exposure_prior: bool = False
    legacy_mt_scaling: bool = False
    ess_warn_threshold: float = 50.0
    # Restart 0 starts from evenly spaced ratio quantiles (guaranteed to
    # straddle well-separated clusters); disable for pure random restarts.
    anchor_restart: bool = True

    def __post_init__(self):
        if not 0 < self.alpha < 1 or not 0 < self.gamma < 1:
            raise ValueError("alpha and gamma must lie in (0, 1)")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.growth <= 1:
            raise ValueError("growth must exceed 1")
        if self.m0 < 100:
            raise ValueError("m0 must be at least 100")
        if self.max_iters < 1 or self.max_mc_size < self.m0 or self.n_restarts < 1:
            raise ValueError("invalid iteration/sample-size limits")

    def epsilon_for(self, p: int) -> float:
        return self.epsilon if self.epsilon is not None else 5e-5 * p


@dataclass
class ImportanceSample:
    """Importance samples of the latent variables for every SNP.

    Arrays have shape (p, m); ``responsibilities`` has shape (p, m, K) and
    holds P(xi = k | beta^j) under the sampling parameters.  ``cluster`` is
    1-based.  Per SNP, ``norm_weights`` sums to 1.
    """

    params: MixtureParams
    theta_x: np.ndarray
    beta: np.ndarray
    cluster: np.ndarray
    log_weights: np.ndarray
    norm_weights: np.ndarray
    responsibilities: np.ndarray
    ess: np.ndarray
    m: int
    diagnostics: list = field(default_factory=list)

    _data_part: np.ndarray | None = field(default=None, repr=False)

    def data_loglik_part(self, data: SummaryDataset) -> np.ndarray:
        """Per-draw data terms of the complete-data log-likelihood (cached)."""
        if self._data_part is None:
            sx2 = (data.sigma_x**2)[:, None]
            sy2 = (data.sigma_y**2)[:, None]
            self._data_part = normal_logpdf(
                data.theta_x_hat[:, None], self.theta_x, sx2
            ) + normal_logpdf(
                data.theta_y_hat[:, None], self.beta * self.theta_x, sy2
            )
        return self._data_part


@dataclass
class IterationRecord:
    """One accepted (or final, stopping) MC-EM iteration."""

    iteration: int
    params: MixtureParams
    q_tilde: float
    delta_q: float
    eta_hat: float
    m: int
    n_rejected_attempts: int
    accepted: bool


@dataclass
class FitResult:
    """Outcome of an MC-EM fit: MLE, trace, and bookkeeping.

    Standard errors / confidence intervals are attached afterwards by the
    inference module; the modified BIC by the model-selection module.
    """

    params: MixtureParams
    q_tilde_final: float
    k: int
    p: int
    m_final: int
    converged: bool
    trace: list
    best_restart: int
    n_restarts: int
    seed: int
    epsilon: float
    diagnostics: list = field(default_factory=list)
    cis: object | None = None
    bic: float | None = None

    @property
    def n_iterations(self) -> int:
        return len(self.trace)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _sample_categorical(prob: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw along the last axis; prob rows must sum to 1."""
    cum = np.cumsum(prob, axis=-1)
    idx = (u[..., None] > cum).sum(axis=-1)
    return np.minimum(idx, prob.shape[-1] - 1)


def _e_step_impl(
    data: SummaryDataset,
    params: MixtureParams,
    m: int,
    streams: rngmod.SnpStreams,
    substream: int,
    ess_warn_threshold: float = 50.0,
) -> ImportanceSample:
    p = data.p
    z_theta = np.empty((p, m))
    u_comp = np.empty((p, m))
    z_beta = np.empty((p, m))
    u_xi = np.empty((p, m))
    for i in range(p):
        g = streams.generator(i, substream)
        z_theta[i] = g.standard_normal(m)
        u_comp[i] = g.random(m)
        z_beta[i] = g.standard_normal(m)
        u_xi[i] = g.random(m)

    prop_m, prop_v = proposal_params(data.theta_x_hat, data.sigma_x, params)
    theta_x = prop_m[:, None] + np.sqrt(prop_v)[:, None] * z_theta

    log_tilde, tilde_mean, tilde_var = beta_conditional_arrays(
        theta_x, data.theta_y_hat[:, None], data.sigma_y[:, None], params
    )
    # Unnormalized log importance weight = log-sum-exp over components.
    log_w = logsumexp(log_tilde, axis=-1)
    comp_prob = np.exp(log_tilde - log_w[..., None])
    comp = _sample_categorical(comp_prob, u_comp)

    mu_c = np.take_along_axis(tilde_mean, comp[..., None], axis=-1)[..., 0]
    var_c = np.take_along_axis(tilde_var, comp[..., None], axis=-1)[..., 0]
    beta = mu_c + np.sqrt(var_c) * z_beta

    resp = cluster_responsibilities(beta, params)
    cluster = _sample_categorical(resp, u_xi).astype(np.int16) + 1

    norm_w = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))
    ess = 1.0 / np.sum(norm_w**2, axis=1)

    diagnostics = []
    low = np.flatnonzero(ess < ess_warn_threshold)
    for i in low:
        diagnostics.append(
            f"low effective sample size for SNP {data.records[i].snp_id}: "
            f"{ess[i]:.1f} of {m} draws"
        )
    if low.size:
        logger.warning(
            "E-step: %d of %d SNPs below ESS threshold %.0f (min %.1f)",
            low.size,
            p,
            ess_warn_threshold,
            ess.min(),
        )

    return ImportanceSample(
        params=params,
        theta_x=theta_x,
        beta=beta,
        cluster=cluster,
        log_weights=log_w,
        norm_weights=norm_w,
        responsibilities=resp,
        ess=ess,
        m=m,
        diagnostics=diagnostics,
    )


def e_step(
    data: SummaryDataset,
    params: MixtureParams,
    m: int,
    seed: int,
    purpose: str = "estep",
    context: tuple = (),
    substream: int = 0,
    ess_warn_threshold: float = 50.0,
) -> ImportanceSample:
    """Draw ``m`` importance samples per SNP at ``params``.

    Per-SNP streams are keyed by ``(seed, purpose, *context, snp_id)`` and
    positioned at ``substream``, so draws are independent of SNP order and
    of any parallel scheduling, and repeated calls with a fresh substream
    yield fresh draws.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    streams = rngmod.SnpStreams(seed, purpose, data.snp_ids, *context)
    return _e_step_impl(data, params, m, streams, substream, ess_warn_threshold)


# ---------------------------------------------------------------------------
# Q-function estimate and M-step
# ---------------------------------------------------------------------------


def _component_terms(params: MixtureParams, beta: np.ndarray) -> np.ndarray:
    """log pi_k + log N(beta; mu_k, sigma2_k) per draw/component, (p, m, K)."""
    const = np.log(params.weights) - 0.5 * (LOG_2PI + np.log(params.variances))
    inv2var = 0.5 / params.variances
    return const - (beta[..., None] - params.means) ** 2 * inv2var


def _param_loglik_part(
    params: MixtureParams,
    theta_x: np.ndarray,
    beta: np.ndarray,
    resp: np.ndarray,
) -> np.ndarray:
    """Parameter-dependent complete-data log-likelihood terms, per draw.

    The cluster label is marginalized with the sampling-time
    responsibilities ``resp``; shape (p, m).  Components pair with the
    responsibility columns by position.
    """
    prior = normal_logpdf(theta_x, params.exposure_mean, params.exposure_variance)
    comp = _component_terms(params, beta)
    return prior + np.einsum("pmk,pmk->pm", resp, comp)


# Label pairing beyond this K is left as identity (search cost is K!).
_MAX_PAIRING_K = 5


def _best_paired_part(
    params: MixtureParams, sample: ImportanceSample
) -> np.ndarray:
    """Parameter part of the Q terms with components matched to the
    sampling labels by the Q-maximizing relabeling.

    The M-step maximizer pairs naturally with the sample's responsibility
    columns, but canonical label sorting can permute the components of the
    returned params; evaluating the sorted params against the stored
    responsibilities positionally would then understate Q and could turn an
    ascent step into an apparent decrease.  Searching the K! relabelings
    for the maximum recovers the coherent pairing exactly.
    """
    prior = normal_logpdf(
        sample.theta_x, params.exposure_mean, params.exposure_variance
    )
    comp = _component_terms(params, sample.beta)
    k = params.k
    if k == 1 or k > _MAX_PAIRING_K:
        return prior + np.einsum("pmk,pmk->pm", sample.responsibilities, comp)
    best_part = None
    best_total = -np.inf
    for perm in itertools.permutations(range(k)):
        part = np.einsum(
            "pmk,pmk->pm", sample.responsibilities, comp[..., list(perm)]
        )
        total = float(np.einsum("pm,pm->", sample.norm_weights, part))
        if total > best_total:
            best_total = total
            best_part = part
    return prior + best_part


def q_estimate(
    sample: ImportanceSample, params_eval: MixtureParams, data: SummaryDataset
) -> float:
    """Importance-sampling estimate of the Q-function at ``params_eval``.

    Weighted sum, over SNPs and draws, of the complete-data log-likelihood
    terms (all five factors, data terms included).
    """
    terms = sample.data_loglik_part(data) + _param_loglik_part(
        params_eval, sample.theta_x, sample.beta, sample.responsibilities
    )
    return float(np.einsum("pm,pm->", sample.norm_weights, terms))


def m_step(
    sample: ImportanceSample,
    data: SummaryDataset,
    fix_exposure_prior: bool = False,
    diagnostics: list | None = None,
) -> MixtureParams:
    """Closed-form maximizer of the estimated Q-function.

    Weighted-moment updates with Rao-Blackwellized responsibilities in place
    of the sampled labels.  Clusters whose total responsibility mass falls
    below COLLAPSE_MASS keep their previous parameters.  Output labels are
    sorted by mean (ties by variance).
    """
    w = sample.norm_weights
    resp = sample.responsibilities
    prev = sample.params
    p = data.p

    mass = np.einsum("pm,pmk->k", w, resp)
    collapsed = mass < COLLAPSE_MASS
    if np.any(collapsed):
        msg = f"collapsed cluster(s) {np.flatnonzero(collapsed) + 1} held at previous values"
        logger.warning("M-step: %s", msg)
        if diagnostics is not None:
            diagnostics.append(msg)

    safe_mass = np.where(collapsed, 1.0, mass)
    wbeta = np.einsum("pm,pmk,pm->k", w, resp, sample.beta)
    means = wbeta / safe_mass
    dev2 = (sample.beta[..., None] - means) ** 2
    variances = np.einsum("pm,pmk,pmk->k", w, resp, dev2) / safe_mass

    means = np.where(collapsed, prev.means, means)
    variances = np.where(collapsed, prev.variances, np.maximum(variances, VARIANCE_FLOOR))
    weights = np.where(collapsed, prev.weights, mass / p)
    weights = weights / weights.sum()

    if fix_exposure_prior:
        nu, lam2 = prev.exposure_mean, prev.exposure_variance
    else:
        nu = float(np.einsum("pm,pm->", w, sample.theta_x)) / p
        lam2 = float(np.einsum("pm,pm->", w, (sample.theta_x - nu) ** 2)) / p
        lam2 = max(lam2, VARIANCE_FLOOR)

    return canonicalize(weights, means, variances, nu, lam2)


# ---------------------------------------------------------------------------
# Ascent test and stopping rule
# ---------------------------------------------------------------------------


def _delta_eta_from_parts(
    sample: ImportanceSample, part_new: np.ndarray, part_old: np.ndarray
) -> tuple[float, float]:
    lam = part_new - part_old
    w = sample.norm_weights
    dq_i = np.einsum("pm,pm->p", w, lam)
    eta_sq = sample.m * float(
        np.einsum("pm,pm->", w**2, (lam - dq_i[:, None]) ** 2)
    )
    return float(dq_i.sum()), math.sqrt(max(eta_sq, 0.0))


def delta_q_stats(
    sample: ImportanceSample,
    params_new: MixtureParams,
    params_old: MixtureParams,
) -> tuple[float, float]:
    """Estimated Q-increase and its asymptotic scale parameter eta.

    Per draw, Lambda = l(params_new) - l(params_old); the data terms cancel
    exactly and are skipped.  ``params_new`` is label-matched to the
    sampling labels (see _best_paired_part); ``params_old`` pairs by
    position, since it is the distribution the sample was drawn from.
    eta_hat**2 is the importance-sampling variance estimate, computed in
    the algebraically expanded (centered) form

        eta^2 = m * sum_i sum_j wbar_ij^2 (Lambda_ij - dq_i)^2,

    which equals the ratio-form expression wherever the latter is defined
    and stays finite when a per-SNP weighted Lambda-sum is zero.
    """
    part_new = _best_paired_part(params_new, sample)
    part_old = _param_loglik_part(
        params_old, sample.theta_x, sample.beta, sample.responsibilities
    )
    return _delta_eta_from_parts(sample, part_new, part_old)


def _test_scale(eta_hat: float, m: int, legacy: bool) -> float:
    return eta_hat / m if legacy else eta_hat / math.sqrt(m)


def delta_q_test(
    sample: ImportanceSample,
    params_new: MixtureParams,
    params_old: MixtureParams,
    data: SummaryDataset,
    alpha: float,
    legacy_mt_scaling: bool = False,
) -> tuple[float, float, bool]:
    """One-sided test that the Q-function increased at this iteration.

    Returns (delta_q, eta_hat, accepted) with
    accepted = delta_q - z_alpha * eta_hat / sqrt(m) > 0.
    """
    delta_q, eta_hat = delta_q_stats(sample, params_new, params_old)
    z = norm.isf(alpha)
    accepted = delta_q - z * _test_scale(eta_hat, sample.m, legacy_mt_scaling) > 0
    return delta_q, eta_hat, bool(accepted)


def check_convergence(
    delta_q: float,
    eta_hat: float,
    m: int,
    gamma: float,
    epsilon: float,
    legacy_mt_scaling: bool = False,
) -> bool:
    """Stopping rule: upper confidence bound on the Q-increase below epsilon."""
    if m < 1:
        raise ValueError("m must be at least 1")
    z = float(norm.isf(gamma))
    return bool(delta_q + z * _test_scale(eta_hat, m, legacy_mt_scaling) < epsilon)


# ---------------------------------------------------------------------------
# Initialization and the fit driver
# ---------------------------------------------------------------------------


def init_params(
    data: SummaryDataset,
    k: int,
    rng: np.random.Generator,
    evenly_spaced: bool = False,
) -> MixtureParams:
    """Restart initialization from per-SNP association ratios.

    Cluster means start at K quantiles of theta_y_hat/theta_x_hat over
    strong instruments (|theta_x_hat|/sigma_x > 2) -- random quantiles, or
    evenly spaced ones for the anchor restart -- cluster variances at
    (IQR/K)^2, weights uniform, and the exposure prior at the sample
    moments of theta_x_hat.
    """
    strong = np.abs(data.theta_x_hat) / data.sigma_x > 2
    if not np.any(strong):
        strong = np.abs(data.theta_x_hat) > 1e-12
    if np.any(strong):
        ratios = data.theta_y_hat[strong] / data.theta_x_hat[strong]
    else:
        ratios = np.zeros(1)

    qs = (np.arange(k) + 0.5) / k if evenly_spaced else rng.random(k)
    means = np.sort(np.quantile(ratios, qs))
    if k > 1 and np.any(np.diff(means) == 0):
        scale = max(float(np.ptp(ratios)), 1e-6)
        means = np.sort(means + 1e-6 * scale * np.arange(k))

    iqr = float(np.subtract(*np.percentile(ratios, [75, 25])))
    var = max((iqr / k) ** 2, 1e-6)
    nu = float(data.theta_x_hat.mean())
    lam2 = max(float(data.theta_x_hat.var()), 1e-8)
    return canonicalize(np.full(k, 1.0 / k), means, np.full(k, var), nu, lam2)


@dataclass
class _ChainResult:
    params: MixtureParams
    q_tilde_final: float
    m_final: int
    converged: bool
    trace: list
    diagnostics: list


def _run_chain(
    data: SummaryDataset, k: int, config: McemConfig, restart: int
) -> _ChainResult:
    epsilon = config.epsilon_for(data.p)
    init_rng = rngmod.generator(config.seed, "init", k, restart)
    params = init_params(
        data, k, init_rng, evenly_spaced=restart == 0 and config.anchor_restart
    )
    streams = rngmod.SnpStreams(config.seed, "estep", data.snp_ids, k, restart)

    trace: list = []
    diagnostics: list = []
    m_t = config.m0
    substream = 0
    converged = False
    capped = False
    n_rejected = 0

    for t in range(1, config.max_iters + 1):
        while True:
            substream += 1
            sample = _e_step_impl(
                data, params, m_t, streams, substream, config.ess_warn_threshold
            )
            params_new = m_step(
                sample,
                data,
                fix_exposure_prior=config.fix_exposure_prior,
                diagnostics=diagnostics,
            )
            part_old = _param_loglik_part(
                params, sample.theta_x, sample.beta, sample.responsibilities
            )
            part_new = _best_paired_part(params_new, sample)
            delta_q, eta_hat = _delta_eta_from_parts(sample, part_new, part_old)
            z_a = float(norm.isf(config.alpha))
            accepted = bool(
                delta_q - z_a * _test_scale(eta_hat, m_t, config.legacy_mt_scaling) > 0
            )
            stop = check_convergence(
                delta_q,
                eta_hat,
                m_t,
                config.gamma,
                epsilon,
                config.legacy_mt_scaling,
            )
            if accepted or stop:
                # On a failed ascent test that nevertheless satisfies the
                # stopping rule, terminate without accepting the update.
                final_params = params_new if accepted else params
                final_part = part_new if accepted else part_old
                q_tilde = float(
                    np.einsum(
                        "pm,pm->",
                        sample.norm_weights,
                        sample.data_loglik_part(data) + final_part,
                    )
                )
                trace.append(
                    IterationRecord(
                        iteration=t,
                        params=final_params,
                        q_tilde=q_tilde,
                        delta_q=delta_q,
                        eta_hat=eta_hat,
                        m=m_t,
                        n_rejected_attempts=n_rejected,
                        accepted=accepted,
                    )
                )
                params = final_params
                n_rejected = 0
                converged = stop
                break
            if m_t >= config.max_mc_size:
                diagnostics.append(
                    f"restart {restart}: Monte-Carlo sample cap {config.max_mc_size} "
                    f"reached at iteration {t} without acceptance"
                )
                capped = True
                break
            n_rejected += 1
            m_t = min(math.ceil(config.growth * m_t), config.max_mc_size)
        if converged or capped:
            break

    substream += 1
    final_sample = _e_step_impl(
        data, params, m_t, streams, substream, config.ess_warn_threshold
    )
    q_final = q_estimate(final_sample, params, data)
    return _ChainResult(params, q_final, m_t, converged, trace, diagnostics)


def _run_chain_star(args) -> _ChainResult:
    return _run_chain(*args)


def fit(data: SummaryDataset, k: int, config: McemConfig | None = None) -> FitResult:
    """Maximum-likelihood fit via ascent-based MC-EM with random restarts.

    Runs ``config.n_restarts`` independent chains from ratio-quantile
    initializations and returns the one with the highest final Q-function
    estimate at its own optimum.  Fully deterministic given ``config.seed``;
    results do not depend on worker count.
    """
    if config is None:
        config = McemConfig()
    if k < 1:
        raise ValueError("k must be at least 1")
    chains = parallel_map(
        _run_chain_star,
        [(data, k, config, r) for r in range(config.n_restarts)],
    )
    best = int(np.argmax([c.q_tilde_final for c in chains]))
    chosen = chains[best]
    if not any(c.converged for c in chains):
        logger.warning("no MC-EM chain converged; returning best non-converged chain")
    diagnostics = list(chosen.diagnostics)
    if not chosen.converged:
        diagnostics.append("selected chain did not meet the stopping criterion")
    return FitResult(
        params=chosen.params,
        q_tilde_final=chosen.q_tilde_final,
        k=k,
        p=data.p,
        m_final=chosen.m_final,
        converged=chosen.converged,
        trace=chosen.trace,
        best_restart=best,
        n_restarts=config.n_restarts,
        seed=config.seed,
        epsilon=config.epsilon_for(data.p),
        diagnostics=diagnostics,
    )
