"""Model selection over the number of clusters with a modified BIC.

The marginal likelihood in the standard BIC is intractable here; it is
replaced by the importance-sampling estimate of the Q-function at the final
EM iterate, giving

    BIC(K) = -2 * Q_tilde(phi_hat, phi_hat) + (3K + 2p) * log(p),

where 3K + 2p counts the mixture parameters and the latent effects.  The
Q-estimate includes the data-term constants of the complete-data
log-likelihood; they are K-independent, so the argmin is unaffected, but the
absolute values then follow the joint-density convention.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from ._utils import parallel_map
from .mcem import FitResult, McemConfig, NonConvergenceError, fit
from .model import SummaryDataset

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATES = (1, 2, 3)


@dataclass
class SelectionResult:
    """Fits and BIC values per candidate K, plus the selected K."""

    candidates: list
    fits: dict
    bics: dict
    chosen_k: int
    failed: list = field(default_factory=list)
    tie_break: str = ""

    @property
    def best_fit(self) -> FitResult:
        return self.fits[self.chosen_k]


def modified_bic(q_tilde_final: float, k: int, p: int) -> float:
    """-2 * Q_tilde + (3K + 2p) * log(p)."""
    if p < 1 or k < 1:
        raise ValueError("p and K must be at least 1")
    return -2.0 * q_tilde_final + (3 * k + 2 * p) * math.log(p)


def _fit_candidate(args) -> FitResult:
    data, k, config = args
    return fit(data, k, config)


def select_k(
    data: SummaryDataset,
    k_candidates=DEFAULT_CANDIDATES,
    config: McemConfig | None = None,
) -> SelectionResult:
    """Fit each candidate K independently and pick the lowest modified BIC.

    Every candidate runs the full restart protocol.  Candidates whose fits
    do not converge are excluded from the argmin and recorded; if none
    converge a NonConvergenceError is raised.  Ties go to the smaller K.
    """
    candidates = sorted(set(int(k) for k in k_candidates))
    if not candidates:
        raise ValueError("candidate set must be nonempty")
    if config is None:
        config = McemConfig()

    results = parallel_map(
        _fit_candidate, [(data, k, config) for k in candidates]
    )
    fits = dict(zip(candidates, results))
    bics = {
        k: modified_bic(r.q_tilde_final, k, data.p) for k, r in fits.items()
    }
    for k, r in fits.items():
        r.bic = bics[k]

    failed = [k for k, r in fits.items() if not r.converged]
    eligible = [k for k in candidates if k not in failed]
    if not eligible:
        raise NonConvergenceError(
            f"no candidate K in {candidates} reached the stopping criterion"
        )
    if failed:
        logger.warning("select_k: non-converged candidates excluded: %s", failed)

    best = min(eligible, key=lambda k: (bics[k], k))
    ties = [k for k in eligible if bics[k] == bics[best] and k != best]
    tie_break = f"tie with K={ties} broken toward smaller K" if ties else ""
    return SelectionResult(
        candidates=candidates,
        fits=fits,
        bics=bics,
        chosen_k=best,
        failed=failed,
        tie_break=tie_break,
    )
