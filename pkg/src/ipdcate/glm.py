"""Weighted GLM fitting used by every nuisance and targeting step.

Two links only: logistic regression via iteratively reweighted least
squares (IRLS) with observation weights, offsets, fractional responses
and an optional ridge penalty; and ordinary / weighted least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit

MAX_ITER = 100
DEVIANCE_RTOL = 1e-10
SCORE_TOL = 1e-8
RIDGE_LADDER = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)

# fitted probabilities this close to 0/1 on a positively weighted row mean
# the unpenalized optimum ran away (separation); penalized optima are
# well-defined and exempt
_PROB_EPS = 1e-6


class RankDeficientError(ValueError):
    """Design matrix is rank deficient; ``columns`` names the dependent columns."""

    def __init__(self, columns):
        self.columns = tuple(columns)
        super().__init__(
            "rank-deficient design; dependent columns: " + ", ".join(map(str, self.columns))
        )


@dataclass
class GlmFit:
    """A fitted identity- or logit-link model.

    ``penalty_used`` is None for an unpenalized fit and the ridge lambda
    otherwise. If ``converged`` is True the (penalized) score sup-norm at
    ``coefficients`` is at most ``SCORE_TOL``.
    """

    coefficients: np.ndarray
    link: str
    converged: bool
    iterations: int
    penalty_used: float | None
    design_columns: tuple[str, ...]
    message: str = ""


def _as_matrix(X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"design matrix must be 2-d, got shape {X.shape}")
    return X


def _column_names(X, design_columns):
    if design_columns is None:
        return tuple(f"x{i}" for i in range(X.shape[1]))
    names = tuple(design_columns)
    if len(names) != X.shape[1]:
        raise ValueError(f"{len(names)} column names for {X.shape[1]} columns")
    return names


def _check_rows(X, y, weights, offset):
    n = X.shape[0]
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise ValueError(f"response has shape {y.shape}, expected ({n},)")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ValueError(f"weights have shape {w.shape}, expected ({n},)")
        if np.any(w < 0):
            raise ValueError("negative observation weights")
        if not np.any(w > 0):
            raise ValueError("all observation weights are zero")
    if offset is None:
        o = np.zeros(n)
    else:
        o = np.asarray(offset, dtype=float)
        if o.shape != (n,):
            raise ValueError(f"offset has shape {o.shape}, expected ({n},)")
    return y, w, o


def _quasi_deviance(y, mu, w):
    # saturated-model quasi-binomial deviance; valid for fractional y
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(y > 0, y * np.log(y / mu), 0.0)
        t0 = np.where(y < 1, (1.0 - y) * np.log((1.0 - y) / (1.0 - mu)), 0.0)
    return 2.0 * float(np.sum(w * (t1 + t0)))


def fit_logistic(X, y, weights=None, offset=None, penalty=None, design_columns=None,
                 max_iter=MAX_ITER):
    """Maximize the weighted Bernoulli quasi-likelihood with optional offset/ridge.

    Responses may be fractional in [0, 1]. Non-convergence (e.g. separation
    without a penalty) is reported through ``converged=False`` and a
    diagnostic message; the caller decides on a fallback.
    """
    X = _as_matrix(X)
    names = _column_names(X, design_columns)
    y, w, o = _check_rows(X, y, weights, offset)
    if np.any((y < 0) | (y > 1)):
        raise ValueError("logistic responses must lie in [0, 1]")
    lam = 0.0 if penalty is None else float(penalty)
    if lam < 0:
        raise ValueError("ridge penalty must be nonnegative")

    n, p = X.shape
    beta = np.zeros(p)
    eta = X @ beta + o
    mu = expit(eta)
    dev = _quasi_deviance(y, mu, w) + lam * float(beta @ beta)

    # the score criterion is per record (mean score), so it is invariant to
    # the sample size and matches the estimating-equation bounds downstream
    def _score_norm(b, m):
        score = X.T @ (w * (y - m)) - lam * b
        return float(np.max(np.abs(score))) / n

    converged = False
    message = ""
    it = 0
    hit_tol = False  # once the tolerance is met, one extra Newton step drives
    # the score to ~machine precision (quadratic convergence) and exposes
    # runaway separated fits to the saturation check below
    for it in range(1, max_iter + 1):
        score = X.T @ (w * (y - mu)) - lam * beta
        if np.max(np.abs(score)) / n <= SCORE_TOL:
            converged = True
            if hit_tol:
                it -= 1
                break
            hit_tol = True
        wk = w * mu * (1.0 - mu)
        hess = X.T @ (X * wk[:, None])
        if lam > 0:
            hess = hess + lam * np.eye(p)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            if not converged:
                message = "singular IRLS system (separation or collinear design)"
            break
        if not np.all(np.isfinite(step)):
            if not converged:
                message = "non-finite IRLS step"
            break

        # step halving keeps the penalized deviance non-increasing
        new_dev = np.inf
        for _ in range(30):
            cand = beta + step
            eta_c = X @ cand + o
            mu_c = expit(eta_c)
            new_dev = _quasi_deviance(y, mu_c, w) + lam * float(cand @ cand)
            if np.isfinite(new_dev) and new_dev <= dev + 1e-12:
                break
            step = step / 2.0
        else:
            if not converged:
                message = "step halving failed to reduce the deviance"
            break

        moved = float(np.max(np.abs(cand - beta)))
        beta, eta, mu = cand, eta_c, mu_c
        rel = abs(dev - new_dev) / (0.1 + abs(new_dev))
        dev = new_dev
        if converged and _score_norm(beta, mu) <= SCORE_TOL:
            break
        # a flat deviance with an unmet score tolerance means either one more
        # quadratic-convergence step is coming (keep going) or the optimum ran
        # away (separation; max_iter will flag it) -- unless nothing moves
        if rel < DEVIANCE_RTOL and moved <= 1e-13 * (1.0 + float(np.max(np.abs(beta)))):
            converged = _score_norm(beta, mu) <= SCORE_TOL
            if not converged:
                message = "IRLS stalled with the score above tolerance"
            break
    else:
        if not converged:
            message = f"IRLS did not converge in {max_iter} iterations"

    if lam == 0.0 and converged and np.any((w > 0) & ((mu < _PROB_EPS) | (mu > 1.0 - _PROB_EPS))):
        converged = False
        message = "fitted probabilities numerically 0 or 1 (separation)"

    return GlmFit(
        coefficients=beta,
        link="logit",
        converged=bool(converged),
        iterations=it,
        penalty_used=None if lam == 0.0 else lam,
        design_columns=names,
        message=message,
    )


def fit_logistic_with_fallback(X, y, weights=None, offset=None, design_columns=None,
                               ladder=RIDGE_LADDER):
    """fit_logistic, escalating through a ridge ladder when unpenalized IRLS fails.

    The smallest lambda achieving convergence wins and is recorded in
    ``penalty_used``. Returns the last (non-converged) attempt if the whole
    ladder fails.
    """
    fit = fit_logistic(X, y, weights=weights, offset=offset, design_columns=design_columns)
    if fit.converged:
        return fit
    for lam in ladder:
        fit = fit_logistic(X, y, weights=weights, offset=offset, penalty=lam,
                           design_columns=design_columns)
        if fit.converged:
            return fit
    return fit


def _dependent_columns(Xw, names):
    # pivoted QR names the columns that a full-rank subset cannot span
    r_mat, piv = scipy.linalg.qr(Xw, mode="r", pivoting=True)
    diag = np.abs(np.diag(r_mat))
    tol = diag[0] * max(Xw.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    return [names[j] for j in piv[rank:]]


def fit_ols(X, y, weights=None, design_columns=None):
    """Solve the (weighted) least-squares normal equations.

    Raises RankDeficientError naming the dependent columns when the
    weighted design is not full column rank.
    """
    X = _as_matrix(X)
    names = _column_names(X, design_columns)
    y, w, _ = _check_rows(X, y, weights, None)
    if X.shape[1] == 0:
        raise ValueError("design matrix has no columns")

    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    yw = y * sw

    gram = Xw.T @ Xw
    try:
        cho = scipy.linalg.cho_factor(gram)
        ldiag = np.abs(np.diag(cho[0]))
        if (ldiag.min() / ldiag.max()) ** 2 <= max(Xw.shape) * np.finfo(float).eps:
            raise np.linalg.LinAlgError("ill conditioned")
        beta = scipy.linalg.cho_solve(cho, Xw.T @ yw)
    except np.linalg.LinAlgError:
        dep = _dependent_columns(Xw, names)
        if dep:
            raise RankDeficientError(dep) from None
        beta, *_ = np.linalg.lstsq(Xw, yw, rcond=None)

    return GlmFit(
        coefficients=beta,
        link="identity",
        converged=True,
        iterations=1,
        penalty_used=None,
        design_columns=names,
    )


def predict(fit: GlmFit, X, offset=None):
    """Linear predictor for identity link; expit of it, strictly inside (0,1), for logit."""
    X = _as_matrix(X)
    if X.shape[1] != fit.coefficients.shape[0]:
        raise ValueError(
            f"design has {X.shape[1]} columns, fit expects {fit.coefficients.shape[0]}"
        )
    eta = X @ fit.coefficients
    if offset is not None:
        o = np.asarray(offset, dtype=float)
        if o.shape != (X.shape[0],):
            raise ValueError(f"offset has shape {o.shape}, expected ({X.shape[0]},)")
        eta = eta + o
    if fit.link == "identity":
        return eta
    return np.clip(expit(eta), 1e-12, 1.0 - 1e-12)


def logistic_score(fit: GlmFit, X, y, weights=None, offset=None):
    """Score vector of the (penalized) quasi-likelihood at the fitted coefficients."""
    X = _as_matrix(X)
    y, w, o = _check_rows(X, y, weights, offset)
    mu = expit(X @ fit.coefficients + o)
    score = X.T @ (w * (y - mu))
    if fit.penalty_used is not None:
        score = score - fit.penalty_used * fit.coefficients
    return score
