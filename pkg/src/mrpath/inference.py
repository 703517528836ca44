"""Approximate confidence intervals via the Louis observed-information identity.

The observed information of the incomplete-data likelihood is assembled from
conditional expectations of the complete-data score and Hessian, each
approximated by importance sampling at the MLE:

    I = E[-d2l] - E[dl dl^T] + E[dl] E[dl]^T.

Differentiation is carried out in an unconstrained parameterization
(multinomial-logit weights with the last cluster as reference, log
variances), which keeps Wald intervals inside the parameter space.  For K
clusters the free dimension is d = 3K + 1:

    [a_1 .. a_{K-1}, mu_1 .. mu_K, log sigma2_1 .. log sigma2_K,
     nu_x, log lambda2_x].

Across-SNP independence turns E[dl dl^T] into per-SNP second moments plus a
cross-SNP term over pairs; the latter is computed with the outer-product
identity sum_{i!=n} g_i g_n^T = (sum_i g_i)(sum_i g_i)^T - sum_i g_i g_i^T,
so assembly is O(p d^2), not O(p^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .mcem import FitResult, ImportanceSample, e_step
from .model import LatentState, MixtureParams, SnpRecord, SummaryDataset

_SNP_BLOCK = 64  # SNP rows per gradient block; bounds peak memory at m*d*block


class InferenceError(RuntimeError):
    """Information matrix unusable (not positive definite / singular)."""


# ---------------------------------------------------------------------------
# Unconstrained parameterization
# ---------------------------------------------------------------------------


def param_dimension(k: int) -> int:
    return 3 * k + 1


def param_names(k: int) -> list:
    names = [f"logit_w_{j + 1}" for j in range(k - 1)]
    names += [f"mu_{j + 1}" for j in range(k)]
    names += [f"log_sigma2_{j + 1}" for j in range(k)]
    names += ["nu_x", "log_lambda2_x"]
    return names


def pack_params(params: MixtureParams) -> np.ndarray:
    """Map MixtureParams to the unconstrained coordinate vector."""
    k = params.k
    vec = np.empty(param_dimension(k))
    if k > 1:
        vec[: k - 1] = np.log(params.weights[:-1] / params.weights[-1])
    vec[k - 1 : 2 * k - 1] = params.means
    vec[2 * k - 1 : 3 * k - 1] = np.log(params.variances)
    vec[3 * k - 1] = params.exposure_mean
    vec[3 * k] = math.log(params.exposure_variance)
    return vec


def unpack_params(vec: np.ndarray, k: int) -> MixtureParams:
    """Inverse of pack_params; cluster labels keep their positions."""
    vec = np.asarray(vec, dtype=float)
    if vec.size != param_dimension(k):
        raise ValueError(f"expected {param_dimension(k)} coordinates for K={k}")
    if k > 1:
        a = np.append(vec[: k - 1], 0.0)
        weights = np.exp(a - a.max())
        weights = weights / weights.sum()
    else:
        weights = np.ones(1)
    return MixtureParams(
        weights,
        vec[k - 1 : 2 * k - 1].copy(),
        np.exp(vec[2 * k - 1 : 3 * k - 1]),
        float(vec[3 * k - 1]),
        math.exp(float(vec[3 * k])),
    )


# ---------------------------------------------------------------------------
# Analytic score and Hessian of the complete-data log-likelihood
# ---------------------------------------------------------------------------


def _score_block(
    params: MixtureParams,
    theta_x: np.ndarray,
    beta: np.ndarray,
    onehot: np.ndarray,
) -> np.ndarray:
    """Per-draw score vectors; inputs (..., ) arrays, output (..., d)."""
    k = params.k
    d = param_dimension(k)
    out = np.empty(theta_x.shape + (d,))
    dev = beta[..., None] - params.means
    std = dev**2 / params.variances
    if k > 1:
        out[..., : k - 1] = onehot[..., : k - 1] - params.weights[: k - 1]
    out[..., k - 1 : 2 * k - 1] = onehot * dev / params.variances
    out[..., 2 * k - 1 : 3 * k - 1] = onehot * (std - 1.0) / 2.0
    rx = theta_x - params.exposure_mean
    out[..., 3 * k - 1] = rx / params.exposure_variance
    out[..., 3 * k] = (rx**2 / params.exposure_variance - 1.0) / 2.0
    return out


def _hessian_single(
    params: MixtureParams, theta_x: float, beta: float, onehot: np.ndarray
) -> np.ndarray:
    """Hessian for one draw.  Linear in the same statistics as the moments
    used by the blocked estimator below."""
    k = params.k
    d = param_dimension(k)
    h = np.zeros((d, d))
    if k > 1:
        pi = params.weights[: k - 1]
        h[: k - 1, : k - 1] = -(np.diag(pi) - np.outer(pi, pi))
    dev = beta - params.means
    for j in range(k):
        mu_i = k - 1 + j
        v_i = 2 * k - 1 + j
        h[mu_i, mu_i] = -onehot[j] / params.variances[j]
        h[mu_i, v_i] = h[v_i, mu_i] = -onehot[j] * dev[j] / params.variances[j]
        h[v_i, v_i] = -onehot[j] * dev[j] ** 2 / (2 * params.variances[j])
    rx = theta_x - params.exposure_mean
    nu_i, u_i = 3 * k - 1, 3 * k
    h[nu_i, nu_i] = -1.0 / params.exposure_variance
    h[nu_i, u_i] = h[u_i, nu_i] = -rx / params.exposure_variance
    h[u_i, u_i] = -(rx**2) / (2 * params.exposure_variance)
    return h


def score_and_hessian(
    params: MixtureParams, latent: LatentState, record: SnpRecord
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic first and second derivatives of one SNP's complete-data
    log-likelihood term with respect to the unconstrained coordinates.

    The data factors do not involve the parameters, so ``record`` does not
    enter the derivatives; it is part of the signature because the
    log-likelihood term it differentiates is per-record.
    """
    latent.validate(params.k)
    onehot = np.zeros(params.k)
    onehot[latent.cluster - 1] = 1.0
    g = _score_block(
        params, np.asarray(latent.theta_x), np.asarray(latent.beta), onehot
    )
    h = _hessian_single(params, latent.theta_x, latent.beta, onehot)
    return g, h


def _expected_hessian(
    params: MixtureParams, moments: dict
) -> np.ndarray:
    """Assemble E[H_i] from per-SNP weighted moments (H is linear in them)."""
    k = params.k
    d = param_dimension(k)
    h = np.zeros((d, d))
    if k > 1:
        pi = params.weights[: k - 1]
        h[: k - 1, : k - 1] = -(np.diag(pi) - np.outer(pi, pi))
    for j in range(k):
        mu_i = k - 1 + j
        v_i = 2 * k - 1 + j
        h[mu_i, mu_i] = -moments["z"][j] / params.variances[j]
        h[mu_i, v_i] = h[v_i, mu_i] = -moments["zdev"][j] / params.variances[j]
        h[v_i, v_i] = -moments["zdev2"][j] / (2 * params.variances[j])
    nu_i, u_i = 3 * k - 1, 3 * k
    h[nu_i, nu_i] = -1.0 / params.exposure_variance
    h[nu_i, u_i] = h[u_i, nu_i] = -moments["rx"] / params.exposure_variance
    h[u_i, u_i] = -moments["rx2"] / (2 * params.exposure_variance)
    return h


# ---------------------------------------------------------------------------
# Observed information
# ---------------------------------------------------------------------------


@dataclass
class InformationMatrix:
    """Observed information in the unconstrained coordinates."""

    matrix: np.ndarray
    k: int
    positive_definite: bool
    min_eigenvalue: float

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]


def per_snp_score_stats(
    params: MixtureParams, data: SummaryDataset, sample: ImportanceSample
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-SNP expected score g_i, score second moment S_i, and expected
    Hessian H_i under the importance sample; shapes (p,d), (p,d,d), (p,d,d)."""
    p = data.p
    k = params.k
    d = param_dimension(k)
    w = sample.norm_weights
    onehot = np.eye(k)[sample.cluster.astype(int) - 1]

    g = np.empty((p, d))
    s = np.empty((p, d, d))
    h = np.empty((p, d, d))
    dev = sample.beta[..., None] - params.means
    rx = sample.theta_x - params.exposure_mean
    for lo in range(0, p, _SNP_BLOCK):
        hi = min(lo + _SNP_BLOCK, p)
        blk = slice(lo, hi)
        grads = _score_block(params, sample.theta_x[blk], sample.beta[blk], onehot[blk])
        g[blk] = np.einsum("bm,bmd->bd", w[blk], grads)
        s[blk] = np.einsum("bm,bmd,bme->bde", w[blk], grads, grads)
        for i in range(lo, hi):
            moments = {
                "z": np.einsum("m,mk->k", w[i], onehot[i]),
                "zdev": np.einsum("m,mk,mk->k", w[i], onehot[i], dev[i]),
                "zdev2": np.einsum("m,mk,mk->k", w[i], onehot[i], dev[i] ** 2),
                "rx": float(w[i] @ rx[i]),
                "rx2": float(w[i] @ rx[i] ** 2),
            }
            h[i] = _expected_hessian(params, moments)
    return g, s, h


def observed_information(
    params_hat: MixtureParams, data: SummaryDataset, sample: ImportanceSample
) -> InformationMatrix:
    """Louis observed information at ``params_hat`` from importance samples.

    ``sample`` should be drawn at ``params_hat`` with a generous Monte-Carlo
    size (the wald_intervals driver uses 10x the final EM sample size).  A
    non-positive-definite result is reported as such, never regularized.
    """
    g, s, h = per_snp_score_stats(params_hat, data, sample)
    sum_h = h.sum(axis=0)
    sum_s = s.sum(axis=0)
    g_tot = g.sum(axis=0)
    sum_gg = np.einsum("pd,pe->de", g, g)
    cross = np.outer(g_tot, g_tot) - sum_gg
    e_score_outer = sum_s + cross
    info = -sum_h - e_score_outer + np.outer(g_tot, g_tot)
    info = 0.5 * (info + info.T)  # exact symmetry against einsum path noise
    eigvals = np.linalg.eigvalsh(info)
    return InformationMatrix(
        matrix=info,
        k=params_hat.k,
        positive_definite=bool(eigvals[0] > 0),
        min_eigenvalue=float(eigvals[0]),
    )


# ---------------------------------------------------------------------------
# Confidence intervals
# ---------------------------------------------------------------------------


@dataclass
class ParamCi:
    name: str
    estimate: float
    se: float
    lower: float
    upper: float
    note: str = ""


@dataclass
class CiResult:
    """Wald intervals mapped back to the natural parameter scales.

    Variances are treated on the log scale and back-transformed; mixture
    weights use the delta method from the logit coordinates.
    """

    level: float
    entries: list

    def by_name(self) -> dict:
        return {e.name: e for e in self.entries}


def _weight_jacobian(weights: np.ndarray) -> np.ndarray:
    """d pi_k / d a_j for the logit coordinates, shape (K, K-1)."""
    k = weights.size
    jac = np.empty((k, k - 1))
    for kk in range(k):
        for j in range(k - 1):
            jac[kk, j] = weights[kk] * ((1.0 if kk == j else 0.0) - weights[j])
    return jac


def confidence_intervals(
    info: InformationMatrix, params_hat: MixtureParams, level: float = 0.95
) -> CiResult:
    """Wald confidence intervals from the inverse observed information."""
    if not info.positive_definite:
        names = param_names(info.k)
        eigvals, eigvecs = np.linalg.eigh(info.matrix)
        direction = names[int(np.argmax(np.abs(eigvecs[:, 0])))]
        raise InferenceError(
            f"information matrix not positive definite "
            f"(min eigenvalue {info.min_eigenvalue:.3e} along {direction})"
        )
    cov = np.linalg.inv(info.matrix)
    se_u = np.sqrt(np.diag(cov))
    z = norm.ppf((1 + level) / 2)
    k = params_hat.k
    entries = []

    if k > 1:
        cov_a = cov[: k - 1, : k - 1]
        jac = _weight_jacobian(params_hat.weights)
        for kk in range(k):
            se = math.sqrt(float(jac[kk] @ cov_a @ jac[kk]))
            est = float(params_hat.weights[kk])
            entries.append(
                ParamCi(
                    f"pi_{kk + 1}", est, se, est - z * se, est + z * se,
                    "delta method from logit coordinates",
                )
            )
    for kk in range(k):
        est = float(params_hat.means[kk])
        se = float(se_u[k - 1 + kk])
        entries.append(ParamCi(f"mu_{kk + 1}", est, se, est - z * se, est + z * se))
    for kk in range(k):
        est = float(params_hat.variances[kk])
        se_log = float(se_u[2 * k - 1 + kk])
        entries.append(
            ParamCi(
                f"sigma2_{kk + 1}", est, est * se_log,
                est * math.exp(-z * se_log), est * math.exp(z * se_log),
                "log-scale Wald, back-transformed",
            )
        )
    est = float(params_hat.exposure_mean)
    se = float(se_u[3 * k - 1])
    entries.append(ParamCi("nu_x", est, se, est - z * se, est + z * se))
    est = float(params_hat.exposure_variance)
    se_log = float(se_u[3 * k])
    entries.append(
        ParamCi(
            "lambda2_x", est, est * se_log,
            est * math.exp(-z * se_log), est * math.exp(z * se_log),
            "log-scale Wald, back-transformed",
        )
    )
    return CiResult(level=level, entries=entries)


def wald_intervals(
    fit: FitResult,
    data: SummaryDataset,
    level: float = 0.95,
    m_multiplier: int = 10,
) -> tuple[InformationMatrix, CiResult]:
    """Draw a large importance sample at the MLE, invert the Louis
    information, and attach the interval table to ``fit``."""
    m = max(fit.m_final * m_multiplier, fit.m_final)
    sample = e_step(
        data, fit.params, m, fit.seed, purpose="louis", context=(fit.k,)
    )
    info = observed_information(fit.params, data, sample)
    cis = confidence_intervals(info, fit.params, level)
    fit.cis = cis
    return info, cis
