"""Influence-function variance estimation (i.i.d. and clustered by study),
Wald intervals, Benjamini-Hochberg adjustment and Rubin's-rules pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


@dataclass
class VarianceEstimate:
    cov: np.ndarray
    se: np.ndarray
    mode: str
    n: int
    n_clusters: int


@dataclass
class PooledEstimate:
    """Rubin's-rules combination over m imputed-dataset analyses."""

    beta_pooled: np.ndarray
    within_var: np.ndarray
    between_var: np.ndarray
    total_var: np.ndarray
    m: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.total_var)


def sandwich_iid(eif) -> VarianceEstimate:
    """cov = (1/n^2) sum_i eif_i eif_i', treating records as independent."""
    eif = np.atleast_2d(np.asarray(eif, dtype=float))
    n = eif.shape[0]
    if n < 2:
        raise ValueError("need at least 2 influence rows")
    cov = eif.T @ eif / float(n) ** 2
    return VarianceEstimate(cov=cov, se=np.sqrt(np.diag(cov)), mode="iid",
                            n=n, n_clusters=n)


def sandwich_clustered(eif, study_ids, small_sample: bool = False) -> VarianceEstimate:
    """Variance assuming independence between studies only.

    Computed as (1/n^2) sum_j (sum_{i in j} eif_i)(sum_{i in j} eif_i)',
    which expands to the within-study double sum of cross products plus the
    per-record outer products. ``small_sample`` applies an optional
    J/(J-1) factor (off by default).
    """
    eif = np.atleast_2d(np.asarray(eif, dtype=float))
    n = eif.shape[0]
    ids = np.asarray(study_ids)
    if ids.shape != (n,):
        raise ValueError(f"study ids have shape {ids.shape}, expected ({n},)")
    _, codes = np.unique(ids, return_inverse=True)
    n_clusters = int(codes.max()) + 1
    if n_clusters < 2:
        raise ValueError("need at least 2 studies for a clustered variance")
    sums = np.zeros((n_clusters, eif.shape[1]))
    np.add.at(sums, codes, eif)
    cov = sums.T @ sums / float(n) ** 2
    if small_sample:
        cov = cov * (n_clusters / (n_clusters - 1.0))
    return VarianceEstimate(cov=cov, se=np.sqrt(np.diag(cov)), mode="clustered",
                            n=n, n_clusters=n_clusters)


def wald_ci(beta, se, level: float = 0.95):
    """beta +/- z_{(1+level)/2} * se; returns (lower, upper) arrays."""
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must be in (0, 1)")
    beta = np.asarray(beta, dtype=float)
    se = np.asarray(se, dtype=float)
    z = norm.ppf(0.5 + level / 2.0)
    return beta - z * se, beta + z * se


def normal_pvalues(beta, se):
    """Two-sided p-values from z = beta/se; se = 0 gives p in {0, 1}."""
    beta = np.asarray(beta, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(beta) / np.where(se > 0, se, 1.0), np.inf)
    z = np.where((se == 0) & (beta == 0), 0.0, z)
    return 2.0 * norm.sf(z)


def bh_adjust(pvalues, q: float):
    """Benjamini-Hochberg step-up rule at FDR level q.

    Returns (reject flags, threshold): the largest order statistic p_(i)
    with p_(i) <= i*q/m, and flags for every p at or below it. The
    threshold is 0.0 when nothing is rejected.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0, 1)")
    p = np.asarray(pvalues, dtype=float)
    m = p.shape[0]
    if m == 0:
        return np.zeros(0, dtype=bool), 0.0
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    order = np.sort(p)
    crit = (np.arange(1, m + 1) * q) / m
    passing = np.flatnonzero(order <= crit)
    if passing.size == 0:
        return np.zeros(m, dtype=bool), 0.0
    threshold = float(order[passing[-1]])
    return p <= threshold, threshold


def rubin_combine(estimates, variances) -> PooledEstimate:
    """Pool per-imputation estimates and their variances by Rubin's rules.

    total = within + (1 + 1/m) * between, with between = 0 for m = 1.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    var = np.atleast_2d(np.asarray(variances, dtype=float))
    if est.shape != var.shape:
        raise ValueError(f"estimates {est.shape} and variances {var.shape} differ in shape")
    m = est.shape[0]
    if m < 1:
        raise ValueError("need at least one imputation")
    pooled = est.mean(axis=0)
    within = var.mean(axis=0)
    between = est.var(axis=0, ddof=1) if m > 1 else np.zeros_like(pooled)
    total = within + (1.0 + 1.0 / m) * between
    return PooledEstimate(beta_pooled=pooled, within_var=within,
                          between_var=between, total_var=total, m=m)
