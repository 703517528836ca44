"""MR-Path: latent mixture modeling of heterogeneous causal effects in
summary-data Mendelian randomization.

Library surface:

* :mod:`mrpath.model` -- the probability model and closed-form conditionals
* :mod:`mrpath.mcem` -- ascent-based Monte-Carlo EM fitting
* :mod:`mrpath.inference` -- observed-information standard errors and CIs
* :mod:`mrpath.posterior` -- per-variant posterior summaries via SIR
* :mod:`mrpath.model_select` -- modified BIC and selection of K
* :mod:`mrpath.simulate` -- synthetic-data generators with retained truth
* :mod:`mrpath.baseline` -- Wald-ratio mixture comparison baseline
* :mod:`mrpath.dataio` / :mod:`mrpath.plotting` / :mod:`mrpath.cli` -- I/O
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    ClusterConditional,
    LatentState,
    MixtureParams,
    ModelError,
    ProposalParams,
    SnpRecord,
    SummaryDataset,
    beta_conditional,
    cluster_responsibilities,
    complete_data_loglik,
    log_marginal_outcome,
    proposal_params,
)
from .mcem import (  # noqa: F401
    FitResult,
    ImportanceSample,
    McemConfig,
    NonConvergenceError,
    check_convergence,
    delta_q_test,
    e_step,
    fit,
    m_step,
    q_estimate,
)
from .inference import (  # noqa: F401
    CiResult,
    InformationMatrix,
    confidence_intervals,
    observed_information,
    score_and_hessian,
    wald_intervals,
)
from .posterior import PosteriorSummary, sir_resample, summarize_posteriors  # noqa: F401
from .model_select import SelectionResult, modified_bic, select_k  # noqa: F401
from .simulate import SimConfig, SimOutput, simulate_dataset, preset_config  # noqa: F401
from .baseline import RatioData, fit_ratio_mixture, select_ratio_k  # noqa: F401
