import dataclasses

import numpy as np
import pandas as pd
import pytest

from ipdcate.data_model import (
    build_adjustment_set,
    build_modifier_design,
    from_frame,
)
from ipdcate.estimators import aiptw, eif_values, plugin, tmle
from ipdcate.nuisance import EstimationError, NuisanceFits, fit_nuisances
from ipdcate.simulation import G1_CORRECT, G2_CORRECT, MODIFIERS, Q_CORRECT


def _fitted(small_data):
    adj = build_adjustment_set(small_data, "t1")
    nf = fit_nuisances(small_data, adj, q_spec=Q_CORRECT, g1_spec=G1_CORRECT,
                       g2_spec=G2_CORRECT, alpha=0.001)
    design = build_modifier_design(small_data, MODIFIERS, standardize=False)
    return adj, nf, design


@pytest.fixture(scope="module")
def fitted(small_data):
    return _fitted(small_data)


def _manual_nuisances(data, qbar1, qbar0, g_treat):
    """Handcrafted NuisanceFits on an already-(0,1) outcome."""
    y = data.y()
    n = data.n_records
    return NuisanceFits(
        q1_fit=None, q0_fit=None, g1_fit=None, g2_fit=None, alpha=0.001,
        qbar1=np.asarray(qbar1, dtype=float), qbar0=np.asarray(qbar0, dtype=float),
        g1=np.asarray(g_treat, dtype=float), g2=np.ones(n),
        g_treat=np.asarray(g_treat, dtype=float),
        g_untreat=1.0 - np.asarray(g_treat, dtype=float),
        g1_raw=np.asarray(g_treat, dtype=float), g2_raw=np.ones(n),
        y_bounds=(0.0, 1.0), y_scaled=y,
    )


# ------------------------------------------------------------------ eif

def test_eif_zero_at_perfect_nuisances_and_truth():
    rng = np.random.default_rng(12)
    n = 40
    y = rng.uniform(0.1, 0.9, size=n)
    a = (rng.uniform(size=n) < 0.5).astype(float)
    ate = 0.2
    qbar1 = np.where(a == 1, y, y + ate)
    qbar0 = np.where(a == 1, y - ate, y)
    v = np.ones((n, 1))
    eif, m = eif_values(y, a, v, qbar1, qbar0, np.full(n, 0.5), np.full(n, 0.5),
                        np.array([ate]))
    assert m[0, 0] == pytest.approx(1.0)
    assert np.max(np.abs(eif)) < 1e-14


def test_eif_three_record_hand_computation():
    # spreadsheet-style evaluation with explicit numbers
    y = np.array([0.6, 0.2, 0.9])
    a = np.array([1.0, 0.0, 1.0])
    v = np.array([[1.0, 2.0], [1.0, -1.0], [1.0, 0.5]])
    q1 = np.array([0.5, 0.4, 0.7])
    q0 = np.array([0.3, 0.25, 0.5])
    gt = np.array([0.4, 0.5, 0.8])
    gu = 1.0 - gt
    beta = np.array([0.1, 0.05])

    rows = []
    for i in range(3):
        if a[i] == 1.0:
            resid = (y[i] - q1[i]) / gt[i]
        else:
            resid = -(y[i] - q0[i]) / gu[i]
        core = resid + q1[i] - q0[i] - (v[i, 0] * beta[0] + v[i, 1] * beta[1])
        rows.append([core * v[i, 0], core * v[i, 1]])
    d_manual = np.array(rows)
    m_manual = sum(np.outer(v[i], v[i]) for i in range(3)) / 3.0
    eif_manual = np.linalg.solve(m_manual, d_manual.T).T

    eif, m = eif_values(y, a, v, q1, q0, gt, gu, beta)
    assert m == pytest.approx(m_manual, abs=1e-14)
    assert eif == pytest.approx(eif_manual, abs=1e-12)


def test_eif_singular_m_fails_loudly():
    n = 10
    v = np.column_stack([np.ones(n), np.ones(n)])
    y = np.linspace(0.1, 0.9, n)
    a = np.tile([0.0, 1.0], 5)
    with pytest.raises(EstimationError, match="singular"):
        eif_values(y, a, v, y, y, np.full(n, 0.5), np.full(n, 0.5), np.zeros(2))


# ------------------------------------------------------------------ tmle

def test_tmle_solves_estimating_equation(small_data, fitted):
    adj, nf, design = fitted
    est = tmle(small_data, adj, design, nf)
    assert est.diagnostics["eif_residual"] <= 1e-6
    # eif rows are rescaled with beta, so their mean solves the equation too
    assert np.max(np.abs(est.eif.mean(axis=0))) <= 1e-6
    assert est.method == "tmle"
    assert est.qstar1 is not None and np.all((est.qstar1 > 0) & (est.qstar1 < 1))
    lo, hi = nf.y_bounds
    assert est.beta == pytest.approx(est.beta_scaled * (hi - lo))


def test_tmle_shift_invariance(small_data, fitted):
    adj, nf, design = fitted
    base = tmle(small_data, adj, design, nf)
    shifted = from_frame(small_data.frame.assign(y=small_data.frame["y"] + 11.5))
    adj2 = build_adjustment_set(shifted, "t1")
    nf2 = fit_nuisances(shifted, adj2, q_spec=Q_CORRECT, g1_spec=G1_CORRECT,
                        g2_spec=G2_CORRECT, alpha=0.001)
    design2 = build_modifier_design(shifted, MODIFIERS, standardize=False)
    est2 = tmle(shifted, adj2, design2, nf2)
    assert est2.beta == pytest.approx(base.beta, abs=1e-8)


def test_tmle_scale_equivariance(small_data, fitted):
    adj, nf, design = fitted
    base = tmle(small_data, adj, design, nf)
    c = 3.7
    scaled = from_frame(small_data.frame.assign(y=small_data.frame["y"] * c))
    adj2 = build_adjustment_set(scaled, "t1")
    nf2 = fit_nuisances(scaled, adj2, q_spec=Q_CORRECT, g1_spec=G1_CORRECT,
                        g2_spec=G2_CORRECT, alpha=0.001)
    design2 = build_modifier_design(scaled, MODIFIERS, standardize=False)
    est2 = tmle(scaled, adj2, design2, nf2)
    assert est2.beta == pytest.approx(c * base.beta, abs=1e-8 * max(1.0, c * np.abs(base.beta).max()))


def test_tmle_reports_weight_summaries(small_data, fitted):
    adj, nf, design = fitted
    est = tmle(small_data, adj, design, nf)
    assert est.diagnostics["weight_max"] >= est.diagnostics["weight_p99"] > 0


# ------------------------------------------------------------------ aiptw

def test_aiptw_hand_computed_pseudo_outcomes():
    # qbar == 0 and g == 0.5 everywhere with binary y gives u = +-2y
    frame = pd.DataFrame({
        "study_id": [1, 1, 1, 2, 2, 2],
        "y": [1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        "a_t1": [1, 0, 1, 0, 0, 1],
        "w_x": [0.5, -1.0, 1.5, 0.0, 2.0, -0.5],
    })
    data = from_frame(frame)
    adj = build_adjustment_set(data, "t1")
    nf = _manual_nuisances(data, qbar1=np.zeros(6), qbar0=np.zeros(6),
                           g_treat=np.full(6, 0.5))
    design = build_modifier_design(data, ["w_x"], standardize=False)
    est = aiptw(data, adj, design, nf)

    y = data.y()
    a = data.treatment("t1")
    u = np.where(a == 1, 2.0 * y, -2.0 * y)
    v = design.matrix(data)
    oracle = np.linalg.solve(v.T @ v, v.T @ u)
    assert est.beta_scaled == pytest.approx(oracle, abs=1e-12)
    assert est.beta == pytest.approx(oracle, abs=1e-12)  # unit bounds


def test_aiptw_linear_solve_identity(small_data, fitted):
    adj, nf, design = fitted
    est = aiptw(small_data, adj, design, nf)
    v = design.matrix(small_data)
    a = small_data.treatment("t1")
    qbar_a = np.where(a == 1, nf.qbar1, nf.qbar0)
    u = (a / nf.g_treat - (1 - a) / nf.g_untreat) * (nf.y_scaled - qbar_a)
    u = u + nf.qbar1 - nf.qbar0
    m = v.T @ v / len(u)
    direct = np.linalg.solve(m, (v * u[:, None]).mean(axis=0))
    assert est.beta_scaled == pytest.approx(direct, abs=1e-12)
    assert est.diagnostics["eif_residual"] <= 1e-10


def test_aiptw_horvitz_thompson_six_records():
    frame = pd.DataFrame({
        "study_id": [1, 1, 1, 2, 2, 2],
        "y": [0.9, 0.1, 0.6, 0.4, 0.8, 0.2],
        "a_t1": [1, 0, 1, 0, 1, 0],
    })
    data = from_frame(frame)
    adj = build_adjustment_set(data, "t1")
    q1 = np.array([0.7, 0.6, 0.5, 0.4, 0.6, 0.3])
    q0 = np.array([0.2, 0.3, 0.1, 0.2, 0.4, 0.1])
    nf = _manual_nuisances(data, q1, q0, np.full(6, 0.5))
    design = build_modifier_design(data, [], standardize=False)  # intercept only
    est = aiptw(data, adj, design, nf)

    # Horvitz-Thompson style difference plus augmentation, written out by hand
    y, a = data.y(), data.treatment("t1")
    u_hand = []
    for i in range(6):
        ipw = (a[i] / 0.5 - (1 - a[i]) / 0.5)
        qa = q1[i] if a[i] == 1 else q0[i]
        u_hand.append(ipw * (y[i] - qa) + q1[i] - q0[i])
    assert est.beta_scaled[0] == pytest.approx(np.mean(u_hand), abs=1e-12)


# ------------------------------------------------------------------ plugin

def test_plugin_zero_when_arms_agree(small_data, fitted):
    adj, nf, design = fitted
    nf_equal = dataclasses.replace(nf, qbar1=nf.qbar0.copy())
    est = plugin(small_data, adj, design, nf_equal)
    assert est.beta == pytest.approx(np.zeros(design.p + 1), abs=1e-12)


def test_plugin_is_ols_of_qbar_difference(small_data, fitted):
    adj, nf, design = fitted
    est = plugin(small_data, adj, design, nf)
    v = design.matrix(small_data)
    oracle = np.linalg.lstsq(v, nf.qbar1 - nf.qbar0, rcond=None)[0]
    lo, hi = nf.y_bounds
    assert est.beta_scaled == pytest.approx(oracle, abs=1e-10)
    assert est.beta == pytest.approx(oracle * (hi - lo), abs=1e-9)
    assert est.qstar1 is None


def test_methods_share_eif_shape(small_data, fitted):
    adj, nf, design = fitted
    for fn in (tmle, aiptw, plugin):
        est = fn(small_data, adj, design, nf)
        assert est.eif.shape == (small_data.n_records, design.p + 1)
        assert est.m_matrix.shape == (design.p + 1, design.p + 1)
        assert np.allclose(est.m_matrix, est.m_matrix.T)
