"""MSM coefficient estimators for the treatment-effect model: TMLE with a
weighted-logistic targeting step, the closed-form A-IPTW, and the
un-targeted plug-in comparator, all sharing one influence-function kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import logit

from .data_model import AdjustmentSet, AvailabilityMatrix, ModifierDesign, PooledDataset
from .glm import fit_logistic_with_fallback, fit_ols, predict
from .nuisance import EstimationError, NuisanceFits


@dataclass
class MsmEstimate:
    """Estimated effect-model coefficients with per-record influence values.

    ``beta`` is on the original outcome scale (= beta_scaled * (hi - lo) of
    the bounded transform), and ``eif`` rows are rescaled the same way so
    sandwich variances of ``beta`` can be computed from them directly.
    ``diagnostics['eif_residual']`` is the sup-norm of the mean estimating
    function on the bounded scale (solved to ~0 by TMLE and A-IPTW).
    """

    beta: np.ndarray
    beta_scaled: np.ndarray
    method: str
    eif: np.ndarray
    m_matrix: np.ndarray
    design_columns: tuple[str, ...]
    qstar1: np.ndarray | None
    qstar0: np.ndarray | None
    diagnostics: dict


def eif_values(y_scaled, a, v, qbar1, qbar0, g_treat, g_untreat, beta):
    """Influence values of the coefficient estimating equation.

    Per record, D = [(1{A=1}/g_treat - 1{A=0}/g_untreat) (y - qbar_A)
    + qbar1 - qbar0 - v' beta] v, normalized by M = mean(v v'); rows of the
    returned matrix are M^{-1} D. Raises on singular M (degenerate modifier
    design) rather than pseudo-inverting.
    """
    y_scaled = np.asarray(y_scaled, dtype=float)
    a = np.asarray(a, dtype=float)
    v = np.asarray(v, dtype=float)
    n = y_scaled.shape[0]
    for name, arr in (("a", a), ("qbar1", qbar1), ("qbar0", qbar0),
                      ("g_treat", g_treat), ("g_untreat", g_untreat)):
        if np.shape(arr) != (n,):
            raise ValueError(f"{name} has shape {np.shape(arr)}, expected ({n},)")
    if v.shape[0] != n:
        raise ValueError(f"design has {v.shape[0]} rows, expected {n}")

    qbar_a = np.where(a == 1.0, qbar1, qbar0)
    core = (a / g_treat - (1.0 - a) / g_untreat) * (y_scaled - qbar_a)
    core = core + qbar1 - qbar0 - v @ np.asarray(beta, dtype=float)
    d = core[:, None] * v

    m = v.T @ v / n
    try:
        cho = scipy.linalg.cho_factor(m)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(
            "normalizing matrix M is singular: degenerate modifier design"
        ) from exc
    m_inv = scipy.linalg.cho_solve(cho, np.eye(m.shape[0]))
    eif = d @ m_inv  # M is symmetric, so this is (M^{-1} D')'
    return eif, m


def _ipw_weights(a, nf: NuisanceFits):
    return a / nf.g_treat + (1.0 - a) / nf.g_untreat


def _finalize(method, a, v, design, nf, beta_scaled, qstar1, qstar0, extra=None):
    lo, hi = nf.y_bounds
    width = hi - lo
    q1 = qstar1 if qstar1 is not None else nf.qbar1
    q0 = qstar0 if qstar0 is not None else nf.qbar0
    eif, m = eif_values(nf.y_scaled, a, v, q1, q0, nf.g_treat, nf.g_untreat, beta_scaled)
    mean_d = m @ eif.mean(axis=0)
    w = _ipw_weights(a, nf)
    diagnostics = {
        "eif_residual": float(np.max(np.abs(mean_d))),
        "weight_max": float(np.max(w)),
        "weight_p99": float(np.percentile(w, 99)),
        "y_width": width,
    }
    if extra:
        diagnostics.update(extra)
    return MsmEstimate(
        beta=beta_scaled * width,
        beta_scaled=beta_scaled,
        method=method,
        eif=eif * width,
        m_matrix=m,
        design_columns=design.columns,
        qstar1=qstar1,
        qstar0=qstar0,
        diagnostics=diagnostics,
    )


def tmle(data: PooledDataset, adj: AdjustmentSet, design: ModifierDesign,
         nf: NuisanceFits, availability: AvailabilityMatrix | None = None) -> MsmEstimate:
    """Targeted estimate: per-arm weighted-logistic fluctuations with offset
    logit(qbar), weights 1{A=a}/g(a|X) and the modifier columns as covariates,
    then OLS of the updated arm difference on those columns.

    Solves the influence-function estimating equation at the updated fits.
    """
    v = design.matrix(data, availability=availability)
    a = data.treatment(adj.target)

    fluct = {}
    for arm, qbar, wts in ((1, nf.qbar1, a / nf.g_treat),
                           (0, nf.qbar0, (1.0 - a) / nf.g_untreat)):
        offs = logit(qbar)
        fit = fit_logistic_with_fallback(v, nf.y_scaled, weights=wts, offset=offs,
                                         design_columns=design.columns)
        if not fit.converged:
            raise EstimationError(f"fluctuation for arm {arm} failed: {fit.message}")
        fluct[arm] = (fit, predict(fit, v, offset=offs))

    qstar1 = fluct[1][1]
    qstar0 = fluct[0][1]
    ols = fit_ols(v, qstar1 - qstar0, design_columns=design.columns)
    extra = {
        "fluct1_penalty": fluct[1][0].penalty_used,
        "fluct0_penalty": fluct[0][0].penalty_used,
    }
    return _finalize("tmle", a, v, design, nf, ols.coefficients, qstar1, qstar0, extra)


def aiptw(data: PooledDataset, adj: AdjustmentSet, design: ModifierDesign,
          nf: NuisanceFits, availability: AvailabilityMatrix | None = None) -> MsmEstimate:
    """Augmented-IPW estimate: OLS of the doubly robust pseudo-outcome on the
    modifier columns, which solves the estimating equation at the initial
    nuisance fits because it is linear in the coefficients.
    """
    v = design.matrix(data, availability=availability)
    a = data.treatment(adj.target)
    qbar_a = np.where(a == 1.0, nf.qbar1, nf.qbar0)
    u = (a / nf.g_treat - (1.0 - a) / nf.g_untreat) * (nf.y_scaled - qbar_a)
    u = u + nf.qbar1 - nf.qbar0
    ols = fit_ols(v, u, design_columns=design.columns)
    return _finalize("aiptw", a, v, design, nf, ols.coefficients, None, None)


def plugin(data: PooledDataset, adj: AdjustmentSet, design: ModifierDesign,
           nf: NuisanceFits, availability: AvailabilityMatrix | None = None) -> MsmEstimate:
    """Un-targeted baseline: OLS of qbar1 - qbar0 on the modifier columns.

    Not doubly robust; included as the initial-substitution comparator.
    """
    v = design.matrix(data, availability=availability)
    a = data.treatment(adj.target)
    ols = fit_ols(v, nf.qbar1 - nf.qbar0, design_columns=design.columns)
    return _finalize("plugin", a, v, design, nf, ols.coefficients, None, None)
