import numpy as np
import pytest
from scipy.special import expit, logit

from ipdcate.glm import (
    RankDeficientError,
    fit_logistic,
    fit_logistic_with_fallback,
    fit_ols,
    logistic_score,
    predict,
)

RNG = np.random.default_rng(61_403)


def test_intercept_only_mean_half():
    y = np.array([0.0, 1.0, 0.0, 1.0])
    fit = fit_logistic(np.ones((4, 1)), y)
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-10)


def test_intercept_only_matches_logit_of_mean():
    y = np.array([0.2, 0.4, 0.9, 0.7])  # fractional responses allowed
    fit = fit_logistic(np.ones((4, 1)), y)
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(logit(y.mean()), abs=1e-6)


def test_separation_flagged_and_ridge_recovers():
    x = np.column_stack([np.ones(4), [-2.0, -1.0, 1.0, 2.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    bare = fit_logistic(x, y)
    assert not bare.converged
    assert bare.message

    ridge = fit_logistic(x, y, penalty=1e-4)
    assert ridge.converged
    assert np.all(np.isfinite(ridge.coefficients))
    assert ridge.penalty_used == 1e-4

    auto = fit_logistic_with_fallback(x, y)
    assert auto.converged
    assert auto.penalty_used in (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


@pytest.mark.parametrize("seed", [7, 8])
def test_mle_consistency_large_sample(seed):
    # oracle: consistency of the MLE, checked by regenerating with a second seed
    rng = np.random.default_rng(seed)
    n = 100_000
    x = rng.standard_normal(n)
    p = expit(-0.5 + 1.0 * x)
    y = (rng.uniform(size=n) < p).astype(float)
    fit = fit_logistic(np.column_stack([np.ones(n), x]), y)
    assert fit.converged
    assert fit.coefficients == pytest.approx([-0.5, 1.0], abs=0.05)


def test_weights_and_offset_score_equations():
    rng = np.random.default_rng(3)
    n = 500
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    offset = rng.standard_normal(n) * 0.3
    w = rng.uniform(0.5, 2.0, size=n)
    y = (rng.uniform(size=n) < expit(x @ [0.2, -0.7] + offset)).astype(float)
    fit = fit_logistic(x, y, weights=w, offset=offset)
    assert fit.converged
    score = logistic_score(fit, x, y, weights=w, offset=offset)
    assert np.max(np.abs(score)) / n <= 1e-8


def test_weight_scale_invariance():
    rng = np.random.default_rng(4)
    n = 300
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = (rng.uniform(size=n) < expit(x @ [0.1, 0.6])).astype(float)
    f1 = fit_logistic(x, y)
    f2 = fit_logistic(x, y, weights=np.full(n, 7.5))
    assert np.allclose(f1.coefficients, f2.coefficients, atol=1e-10)


def test_ridge_path_approaches_unpenalized():
    rng = np.random.default_rng(5)
    n = 400
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = (rng.uniform(size=n) < expit(x @ [0.3, -0.4])).astype(float)
    free = fit_logistic(x, y).coefficients
    dist = [
        np.linalg.norm(fit_logistic(x, y, penalty=lam).coefficients - free)
        for lam in (1e-2, 1e-4, 1e-6)
    ]
    assert dist[0] > dist[1] > dist[2]
    assert dist[2] < 1e-5


def test_logistic_errors():
    x = np.ones((4, 1))
    with pytest.raises(ValueError, match="lie in"):
        fit_logistic(x, np.array([0.0, 1.0, 2.0, 0.5]))
    with pytest.raises(ValueError, match="shape"):
        fit_logistic(x, np.array([0.0, 1.0]))
    with pytest.raises(ValueError, match="zero"):
        fit_logistic(x, np.array([0.0, 1.0, 0.0, 1.0]), weights=np.zeros(4))
    with pytest.raises(ValueError, match="negative"):
        fit_logistic(x, np.array([0.0, 1.0, 0.0, 1.0]), weights=np.array([1, 1, 1, -1.0]))


def test_ols_exact_linear():
    rng = np.random.default_rng(6)
    x = np.column_stack([np.ones(50), rng.standard_normal((50, 2))])
    beta = np.array([1.0, -2.0, 0.5])
    fit = fit_ols(x, x @ beta)
    assert fit.coefficients == pytest.approx(beta, abs=1e-12)


def test_ols_duplicated_column_named():
    rng = np.random.default_rng(7)
    z = rng.standard_normal(30)
    x = np.column_stack([np.ones(30), z, z])
    with pytest.raises(RankDeficientError) as err:
        fit_ols(x, rng.standard_normal(30), design_columns=("const", "z", "z_dup"))
    assert set(err.value.columns) & {"z", "z_dup"}


def test_ols_matches_normal_equations_oracle():
    rng = np.random.default_rng(8)
    n, p = 200, 4
    x = rng.standard_normal((n, p))
    y = rng.standard_normal(n)
    w = rng.uniform(0.2, 3.0, size=n)
    # independent dense solve of the weighted normal equations
    xtwx = np.zeros((p, p))
    xtwy = np.zeros(p)
    for i in range(n):
        xtwx += w[i] * np.outer(x[i], x[i])
        xtwy += w[i] * x[i] * y[i]
    oracle = np.linalg.solve(xtwx, xtwy)
    fit = fit_ols(x, y, weights=w)
    assert np.max(np.abs(fit.coefficients - oracle)) <= 1e-10 * max(1.0, np.max(np.abs(oracle)))


def test_ols_residual_orthogonality():
    rng = np.random.default_rng(9)
    x = np.column_stack([np.ones(150), rng.standard_normal((150, 3))])
    y = rng.standard_normal(150)
    fit = fit_ols(x, y)
    resid = y - x @ fit.coefficients
    rel = np.max(np.abs(x.T @ resid)) / max(1.0, np.max(np.abs(x.T @ y)))
    assert rel <= 1e-10


def test_predict_trivial_cases():
    fit = fit_logistic(np.ones((4, 1)), np.array([0.0, 1.0, 1.0, 0.0]))
    x = np.ones((3, 1))
    zero = fit_logistic(np.ones((2, 1)), np.array([0.5, 0.5]))
    assert predict(zero, x) == pytest.approx([0.5, 0.5, 0.5])

    ident = fit_ols(np.ones((3, 1)), np.zeros(3))
    o = np.array([1.5, -2.0, 0.0])
    assert predict(ident, x, offset=o) == pytest.approx(o)
    with pytest.raises(ValueError, match="columns"):
        predict(fit, np.ones((3, 2)))


def test_predict_roundtrip_reproduces_fitted_values():
    rng = np.random.default_rng(10)
    x = np.column_stack([np.ones(80), rng.standard_normal((80, 2))])
    y = rng.standard_normal(80)
    fit = fit_ols(x, y)
    assert predict(fit, x) == pytest.approx(x @ fit.coefficients)


def test_logistic_predictions_strictly_inside_unit_interval():
    rng = np.random.default_rng(11)
    x = np.column_stack([np.ones(100), rng.standard_normal(100) * 50])
    y = (x[:, 1] > 0).astype(float)
    fit = fit_logistic_with_fallback(x, y)
    pred = predict(fit, x)
    assert np.all(pred > 0.0)
    assert np.all(pred < 1.0)
