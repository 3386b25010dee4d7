"""Outcome regressions and the two-component propensity score.

The outcome is fit on a bounded (0,1) scale so the targeting step can use
logit offsets; the propensity factors into a within-study treatment model
(g1, fit where the treatment is available) and a study-level availability
model (g2, one row per study), both truncated away from 0/1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import (
    AdjustmentSet,
    AvailabilityMatrix,
    PooledDataset,
    derive_availability,
    design_matrix,
)
from .glm import GlmFit, fit_logistic_with_fallback, predict

BOUND_MARGIN = 0.005


class EstimationError(RuntimeError):
    """A nuisance or targeting fit could not be completed."""


@dataclass
class NuisanceFits:
    """Fitted nuisance surfaces for one target treatment.

    All per-record vectors are aligned with the dataset rows; qbar/g values
    live on the bounded outcome scale. g1/g2 are truncated to
    [alpha, 1-alpha]; the raw (untruncated) predictions are kept for
    positivity diagnostics. g2_fit is None when availability was degenerate
    and the truncated empirical constant was used instead.
    """

    q1_fit: GlmFit
    q0_fit: GlmFit
    g1_fit: GlmFit
    g2_fit: GlmFit | None
    alpha: float
    qbar1: np.ndarray
    qbar0: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    g_treat: np.ndarray
    g_untreat: np.ndarray
    g1_raw: np.ndarray
    g2_raw: np.ndarray
    y_bounds: tuple[float, float]
    y_scaled: np.ndarray


def bound_outcome(y, margin: float = BOUND_MARGIN):
    """Map y onto (0,1) by its sample range, clipping into [margin, 1-margin].

    Only the boundary points move under the clip, so a difference d on the
    bounded scale corresponds to d * (hi - lo) on the original scale. The
    bounds are returned for that inversion.
    """
    y = np.asarray(y, dtype=float)
    lo, hi = float(np.min(y)), float(np.max(y))
    if hi == lo:
        raise ValueError("outcome is constant; the bounded transform is undefined")
    scaled = np.clip((y - lo) / (hi - lo), margin, 1.0 - margin)
    return scaled, (lo, hi)


def _spec_design(data: PooledDataset, adj: AdjustmentSet, spec,
                 availability: AvailabilityMatrix | None):
    """Intercept + named columns; spec None means intercept-only (null model)."""
    if spec is None:
        return np.ones((data.n_records, 1)), ("(intercept)",)
    unknown = [c for c in spec if c not in adj.columns]
    if unknown:
        raise EstimationError(
            f"model columns {unknown} are not in the adjustment set for {adj.target}"
        )
    x = design_matrix(data, spec, availability=availability, intercept=True)
    return x, ("(intercept)", *spec)


def fit_outcome(data: PooledDataset, adj: AdjustmentSet, y_scaled: np.ndarray,
                spec: Sequence[str] | None = None,
                availability: AvailabilityMatrix | None = None):
    """Fit the bounded outcome per arm and predict both arms for everyone.

    The treated model uses only records with the target treatment taken;
    the untreated model uses everyone else, including records without
    access to the treatment.
    """
    a = data.treatment(adj.target)
    treated = a == 1
    if not treated.any():
        raise EstimationError(f"no treated records for {adj.target}")
    if treated.all():
        raise EstimationError(f"no untreated records for {adj.target}")

    x, names = _spec_design(data, adj, spec, availability)
    fits = []
    for label, mask in (("treated", treated), ("untreated", ~treated)):
        fit = fit_logistic_with_fallback(x[mask], y_scaled[mask], design_columns=names)
        if not fit.converged:
            raise EstimationError(
                f"outcome model ({label} arm, {adj.target}) failed: {fit.message}"
            )
        fits.append(fit)
    q1_fit, q0_fit = fits
    qbar1 = predict(q1_fit, x)
    qbar0 = predict(q0_fit, x)
    return q1_fit, q0_fit, qbar1, qbar0


def fit_propensity(data: PooledDataset, adj: AdjustmentSet,
                   availability: AvailabilityMatrix,
                   g1_spec: Sequence[str] | None = None,
                   g2_spec: Sequence[str] | None = None,
                   alpha: float = 0.001):
    """Fit g1 = P(A=1 | D=1, X) and the study-level g2 = P(D=1 | S).

    g1 is trained on records with the treatment available but predicted for
    everyone (g_treat = g1 * g2 is needed for all records). Both components
    are truncated to [alpha, 1-alpha]. A degenerate availability response
    (all studies equal) skips the g2 fit and uses the truncated constant.
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError("truncation bound alpha must be in (0, 0.5)")
    d_rec = availability.per_record(data, adj.target)
    if not d_rec.any():
        raise EstimationError(f"no study has {adj.target} available")
    a = data.treatment(adj.target)

    x1, n1 = _spec_design(data, adj, g1_spec, availability)
    avail = d_rec == 1
    g1_fit = fit_logistic_with_fallback(x1[avail], a[avail], design_columns=n1)
    if not g1_fit.converged:
        raise EstimationError(f"treatment model for {adj.target} failed: {g1_fit.message}")
    g1_raw = predict(g1_fit, x1)
    g1 = np.clip(g1_raw, alpha, 1.0 - alpha)

    k = availability.treatment_names.index(adj.target)
    d_study = availability.d[:, k].astype(float)
    if g2_spec is not None:
        bad = [c for c in g2_spec if c not in data.schema.study_level]
        if bad:
            raise EstimationError(f"g2 columns {bad} are not study-level covariates")
    if np.ptp(d_study) == 0.0:
        # availability carries no signal; the adjustment is vacuous
        g2_fit = None
        g2_raw_study = np.full(data.n_studies, float(d_study[0]))
    else:
        first_rows = np.array([data.study_index[s][0] for s in data.study_order])
        if g2_spec is None:
            xs = np.ones((data.n_studies, 1))
            ns = ("(intercept)",)
        else:
            cols = [data.column(c)[first_rows] for c in g2_spec]
            xs = np.column_stack([np.ones(data.n_studies), *cols])
            ns = ("(intercept)", *g2_spec)
        g2_fit = fit_logistic_with_fallback(xs, d_study, design_columns=ns)
        if not g2_fit.converged:
            raise EstimationError(
                f"availability model for {adj.target} failed: {g2_fit.message}"
            )
        g2_raw_study = predict(g2_fit, xs)
    g2_study = np.clip(g2_raw_study, alpha, 1.0 - alpha)
    g2_raw = g2_raw_study[data.study_codes]
    g2 = g2_study[data.study_codes]

    g_treat = g1 * g2
    g_untreat = 1.0 - g_treat
    return g1_fit, g2_fit, g1, g2, g_treat, g_untreat, g1_raw, g2_raw


def fit_nuisances(data: PooledDataset, adj: AdjustmentSet,
                  q_spec: Sequence[str] | None = None,
                  g1_spec: Sequence[str] | None = None,
                  g2_spec: Sequence[str] | None = None,
                  alpha: float = 0.001,
                  margin: float = BOUND_MARGIN,
                  availability: AvailabilityMatrix | None = None) -> NuisanceFits:
    """Bound the outcome and fit all nuisance components for one treatment."""
    if availability is None:
        availability = derive_availability(data)
    y_scaled, bounds = bound_outcome(data.y(), margin=margin)
    q1_fit, q0_fit, qbar1, qbar0 = fit_outcome(
        data, adj, y_scaled, spec=q_spec, availability=availability
    )
    g1_fit, g2_fit, g1, g2, g_treat, g_untreat, g1_raw, g2_raw = fit_propensity(
        data, adj, availability, g1_spec=g1_spec, g2_spec=g2_spec, alpha=alpha
    )
    return NuisanceFits(
        q1_fit=q1_fit, q0_fit=q0_fit, g1_fit=g1_fit, g2_fit=g2_fit, alpha=alpha,
        qbar1=qbar1, qbar0=qbar0, g1=g1, g2=g2,
        g_treat=g_treat, g_untreat=g_untreat, g1_raw=g1_raw, g2_raw=g2_raw,
        y_bounds=bounds, y_scaled=y_scaled,
    )
