"""Synthetic summary-data generators with retained ground truth.

The default generator mirrors GWAS-scale summary data: measurement-error
variances drawn from an inverse gamma with shape 9 and scale 0.0002 (mean
2.5e-5), instrument-strength prior variance chosen so sqrt(p) * lambda_x is
constant across dataset sizes, and variant effects from the latent mixture.

Variants:

* ``theta_x_mixture`` replaces the normal instrument-strength prior with a
  two-component mixture (the weak-instrument scenario: a large fraction of
  near-null instruments).
* ``point_mass_betas`` pins each beta exactly at its cluster mean.
* ``pleiotropy`` adds direct effects alpha_i to the outcome channel with
  scale tau0 = (2/p) * sum(sigma_y): normal, scaled Laplace, or normal with
  a 10% contaminated subset shifted to mean 5*tau0.

Generation is keyed per SNP index, so a dataset is bit-reproducible from
its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .model import LatentState, MixtureParams, SummaryDataset

PLEIOTROPY_MODES = ("none", "normal", "laplace", "idiosyncratic")


@dataclass
class ThetaXMixture:
    """Two-or-more component normal mixture for the true exposure effects."""

    weights: tuple
    means: tuple
    dispersions: tuple

    def variances(self, scale_convention: str) -> np.ndarray:
        disp = np.asarray(self.dispersions, dtype=float)
        return disp**2 if scale_convention == "sd" else disp


@dataclass
class SimConfig:
    """Settings for one synthetic dataset."""

    p: int
    params_true: MixtureParams
    meas_shape: float = 9.0
    meas_scale: float = 0.0002
    pleiotropy: str = "none"
    theta_x_mixture: ThetaXMixture | None = None
    point_mass_betas: bool = False
    scale_convention: str = "variance"
    seed: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be at least 1")
        if self.meas_shape <= 2:
            raise ValueError("measurement-error shape must exceed 2")
        if self.pleiotropy not in PLEIOTROPY_MODES:
            raise ValueError(f"unknown pleiotropy mode {self.pleiotropy!r}")
        if self.scale_convention not in ("variance", "sd"):
            raise ValueError("scale_convention must be 'variance' or 'sd'")


@dataclass
class SimOutput:
    """Dataset plus the latent truth that generated it."""

    dataset: SummaryDataset
    truth: list
    alphas: np.ndarray
    params_true: MixtureParams
    tau0: float = 0.0


def _snp_ids(p: int) -> list:
    width = max(4, len(str(p)))
    return [f"snp_{i + 1:0{width}d}" for i in range(p)]


def simulate_dataset(config: SimConfig) -> SimOutput:
    """Generate one dataset; see module docstring for the generative model."""
    p = config.p
    params = config.params_true
    k = params.k
    cum_w = np.cumsum(params.weights)

    if config.theta_x_mixture is not None:
        tx_w = np.asarray(config.theta_x_mixture.weights, dtype=float)
        tx_cum = np.cumsum(tx_w / tx_w.sum())
        tx_means = np.asarray(config.theta_x_mixture.means, dtype=float)
        tx_vars = config.theta_x_mixture.variances(config.scale_convention)

    sigma_x2 = np.empty(p)
    sigma_y2 = np.empty(p)
    xi = np.empty(p, dtype=int)
    beta = np.empty(p)
    theta_x = np.empty(p)
    z_xhat = np.empty(p)
    z_yhat = np.empty(p)

    for i in range(p):
        g = rngmod.generator(config.seed, "sim", i)
        sigma_x2[i] = config.meas_scale / g.standard_gamma(config.meas_shape)
        sigma_y2[i] = config.meas_scale / g.standard_gamma(config.meas_shape)
        xi[i] = min(int((g.random() > cum_w).sum()), k - 1)
        if config.point_mass_betas:
            beta[i] = params.means[xi[i]]
        else:
            beta[i] = params.means[xi[i]] + math.sqrt(
                params.variances[xi[i]]
            ) * g.standard_normal()
        if config.theta_x_mixture is None:
            theta_x[i] = params.exposure_mean + math.sqrt(
                params.exposure_variance
            ) * g.standard_normal()
        else:
            c = min(int((g.random() > tx_cum).sum()), tx_cum.size - 1)
            theta_x[i] = tx_means[c] + math.sqrt(tx_vars[c]) * g.standard_normal()
        z_xhat[i] = g.standard_normal()
        z_yhat[i] = g.standard_normal()

    sigma_x = np.sqrt(sigma_x2)
    sigma_y = np.sqrt(sigma_y2)
    tau0 = 2.0 / p * float(sigma_y.sum())

    alphas = np.zeros(p)
    if config.pleiotropy != "none":
        for i in range(p):
            g = rngmod.generator(config.seed, "sim", i, substream=1)
            if config.pleiotropy == "laplace":
                alphas[i] = tau0 * g.laplace(0.0, 1.0)
            else:
                alphas[i] = tau0 * g.standard_normal()
        if config.pleiotropy == "idiosyncratic":
            pick_rng = rngmod.generator(config.seed, "sim-idio")
            n_shift = int(round(0.1 * p))
            shifted = pick_rng.choice(p, size=n_shift, replace=False)
            alphas[shifted] += 5.0 * tau0

    theta_x_hat = theta_x + sigma_x * z_xhat
    theta_y_hat = alphas + beta * theta_x + sigma_y * z_yhat

    dataset = SummaryDataset.from_arrays(
        _snp_ids(p), theta_x_hat, sigma_x, theta_y_hat, sigma_y
    )
    truth = [
        LatentState(float(theta_x[i]), float(beta[i]), int(xi[i]) + 1)
        for i in range(p)
    ]
    return SimOutput(dataset, truth, alphas, params, tau0)


# ---------------------------------------------------------------------------
# Named presets for the desk-scale experiments
# ---------------------------------------------------------------------------


def _mixture(weights, means, sds, p, sqrtp_lambda=10.0) -> MixtureParams:
    # lambda_x = sqrtp_lambda / sqrt(p): constant instrument-strength norm.
    return MixtureParams(
        np.asarray(weights, dtype=float),
        np.asarray(means, dtype=float),
        np.asarray(sds, dtype=float) ** 2,
        0.0,
        sqrtp_lambda**2 / p,
    )


def preset_config(name: str, p: int | None = None, seed: int = 0, **kwargs) -> SimConfig:
    """Build a SimConfig for one of the named experiment presets."""
    if name == "sim1-k1":
        p = p or 500
        return SimConfig(p, _mixture([1.0], [0.3], [0.1], p), seed=seed)
    if name == "sim1-k2":
        p = p or 500
        return SimConfig(p, _mixture([0.5, 0.5], [-0.5, 0.5], [0.1, 0.1], p), seed=seed)
    if name == "sim1-k3":
        p = p or 500
        return SimConfig(
            p,
            _mixture([0.3, 0.4, 0.3], [-0.5, 0.0, 0.5], [0.1, 0.1, 0.1], p),
            seed=seed,
        )
    if name == "sim2":
        p = p or 250
        k_true = int(kwargs.get("k_true", 2))
        sqrtp_lambda = float(kwargs.get("sqrtp_lambda", 5.0))
        sigma1 = float(kwargs.get("sigma1", 0.1))
        if k_true == 1:
            mix = _mixture([1.0], [0.5], [sigma1], p, sqrtp_lambda)
        elif k_true == 2:
            mix = _mixture([0.5, 0.5], [-0.5, 0.5], [0.1, 0.1], p, sqrtp_lambda)
        elif k_true == 3:
            mix = _mixture(
                [1 / 3, 1 / 3, 1 / 3], [-0.5, 0.0, 0.5], [0.05, 0.05, 0.05],
                p, sqrtp_lambda,
            )
        else:
            raise ValueError("sim2 supports k_true in {1, 2, 3}")
        return SimConfig(p, mix, seed=seed)
    if name == "appendix-d":
        p = p or 100
        mix = _mixture([0.6, 0.4], [-0.5, 0.5], [0.1, 0.1], p)
        return SimConfig(
            p,
            mix,
            theta_x_mixture=ThetaXMixture((0.7, 0.3), (0.0, 0.0), (0.1, 1e-6)),
            seed=seed,
        )
    if name.startswith("appendix-e-"):
        mode = name.removeprefix("appendix-e-")
        p = p or 100
        mix = MixtureParams(
            np.array([0.5, 0.5]), np.array([-0.5, 0.5]),
            np.array([1e-12, 1e-12]), 0.0, 100.0 / p,
        )
        return SimConfig(
            p, mix, pleiotropy=mode, point_mass_betas=True, seed=seed
        )
    if name in ("appendix-g-low", "appendix-g-high"):
        p = p or 100
        sd = 0.1 if name.endswith("low") else 0.3
        sqrtp_lambda = float(kwargs.get("sqrtp_lambda", 10.0))
        mix = _mixture([0.5, 0.5], [-0.5, 0.5], [sd, sd], p, sqrtp_lambda)
        return SimConfig(p, mix, seed=seed)
    raise ValueError(f"unknown preset {name!r}")


PRESET_NAMES = (
    "sim1-k1", "sim1-k2", "sim1-k3", "sim2", "appendix-d",
    "appendix-e-normal", "appendix-e-laplace", "appendix-e-idiosyncratic",
    "appendix-g-low", "appendix-g-high",
)
