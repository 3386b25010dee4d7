"""Multi-study data generation with differential treatment availability,
scenario-crossed Monte Carlo runs, and counterfactual-forcing truth.

The generating mechanism: two study-level normals S1 (observed) and S2
(unobserved, correlated with the study-level mean of W1), three treatments
whose per-study availability depends on S1, treatment uptake depending on
(S1, W1, W2, W3) gated by availability, and a continuous outcome with
effect modification of the first treatment by W1 and W3. Random effects by
study enter as an S2 x A1 interaction. All constants live in DgpConstants
so alternates can be explored.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm

from .data_model import (
    DegenerateDesignError,
    build_adjustment_set,
    build_modifier_design,
    derive_availability,
    from_frame,
)
from .estimators import aiptw, plugin, tmle
from .glm import RankDeficientError
from .inference import sandwich_clustered, sandwich_iid
from .nuisance import EstimationError, fit_nuisances

TREATMENTS = ("t1", "t2", "t3")
Q_CORRECT = ("s_s1", "w_w1", "w_w2", "w_w3", "a_t2", "a_t3")
G1_CORRECT = ("s_s1", "w_w1", "w_w2", "w_w3")
G2_CORRECT = ("s_s1",)
MODIFIERS = ("w_w1", "w_w2", "w_w3", "a_t2", "a_t3")
COEF_NAMES = ("(intercept)", "w_w1", "w_w2", "w_w3", "a_t2", "a_t3")

ORACLE_SAMPLES = 1_000_000
_TRUTH_STREAM = 173_650_413  # keeps truth draws disjoint from replication seeds

_ESTIMATORS = {"tmle": tmle, "aiptw": aiptw, "plugin": plugin}

_FAILURE_CAP = 0.02


@dataclass(frozen=True)
class DgpConstants:
    """One block of generating-mechanism constants."""

    s2_corr: float = 0.5            # Corr(S2, study-level mean of W1)
    w1_between_sd: float = 0.5      # sd of the study-level W1 mean
    w2_prob: float = 0.5
    w3_prob: float = 0.4
    # P(D_k = 1 | S1) = expit(a0_k + a1_k S1); marginals ~ (0.9, 0.7, 0.6)
    avail_intercepts: tuple = (2.55, 0.99, 0.47)
    avail_slopes: tuple = (1.0, 1.0, 1.0)
    # P(A_k = 1 | D_k = 1, ...) = expit(t0 + t_s1 S1 + t_w1 W1 + t_w2 W2 + t_w3 W3)
    treat_coefs: tuple = (
        (0.1, 0.4, 0.8, -0.4, 0.25),
        (-0.2, 0.3, -0.3, 0.3, 0.2),
        (0.2, -0.3, 0.2, 0.3, -0.3),
    )
    y_intercept: float = 0.5
    y_s1: float = 0.4
    y_w: tuple = (0.5, 0.4, -0.15)
    y_a: tuple = (1.0, 0.4, -0.3)
    effect_w1: float = 0.65         # A1 x W1 interaction
    effect_w3: float = 0.35         # A1 x W3 interaction
    re_coef: float = 0.3            # S2 x A1 interaction when random effects are on
    # noise is deliberately generous: it widens the bounded-outcome range so
    # the logit-link outcome model stays near-exact for the linear truth
    noise_sd: float = 2.0


@dataclass(frozen=True)
class ScenarioConfig:
    """One Monte Carlo cell: study count, misspecification pattern, seeds."""

    j_studies: int
    study_size: int = 300
    random_effects: bool = False
    q_spec: str = "correct"
    g_spec: str = "correct"
    replications: int = 1000
    seed: int = 0
    alpha: float = 0.001
    dgp: DgpConstants = field(default_factory=DgpConstants)

    def __post_init__(self):
        if self.j_studies < 2:
            raise ValueError("need at least 2 studies")
        if self.study_size < 1:
            raise ValueError("study_size must be positive")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        for name in ("q_spec", "g_spec"):
            if getattr(self, name) not in ("correct", "null"):
                raise ValueError(f"{name} must be 'correct' or 'null'")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError("alpha must be in (0, 0.5)")

    @property
    def scenario(self) -> int:
        return {("correct", "correct"): 1, ("correct", "null"): 2,
                ("null", "correct"): 3, ("null", "null"): 4}[(self.q_spec, self.g_spec)]


@dataclass(frozen=True)
class TruthSpec:
    beta: np.ndarray
    provenance: str


@dataclass
class McReport:
    """Per-coefficient Monte Carlo summary for one cell and method."""

    j_studies: int
    study_size: int
    scenario: int
    random_effects: bool
    method: str
    replications: int
    failures: int
    coefficient: str
    true_value: float
    mean_error: float
    mc_se: float
    mean_se_iid: float
    mean_se_clustered: float
    coverage: float
    max_eif_residual: float
    mean_availability: float


@dataclass
class CellResult:
    """Raw per-replication outputs of one cell (all methods)."""

    config: ScenarioConfig
    cell_index: int
    truth: TruthSpec
    coef_names: tuple
    estimates: dict
    se_iid: dict
    se_clustered: dict
    eif_residuals: dict
    failures: int
    failure_messages: list
    availability_rate: np.ndarray


def _study_draws(rng, n_studies: int, c: DgpConstants):
    u = rng.standard_normal(n_studies)
    z = rng.standard_normal(n_studies)
    s1 = rng.standard_normal(n_studies)
    s2 = c.s2_corr * u + np.sqrt(1.0 - c.s2_corr**2) * z
    b = c.w1_between_sd * u
    return s1, s2, b


def _treatment_eta(c: DgpConstants, k: int, s1, w1, w2, w3):
    t0, ts, tw1, tw2, tw3 = c.treat_coefs[k]
    return t0 + ts * s1 + tw1 * w1 + tw2 * w2 + tw3 * w3


def _outcome_mean(c: DgpConstants, s1, w1, w2, w3, a1, a2, a3):
    y = c.y_intercept + c.y_s1 * s1
    y = y + c.y_w[0] * w1 + c.y_w[1] * w2 + c.y_w[2] * w3
    y = y + c.y_a[0] * a1 + c.y_a[1] * a2 + c.y_a[2] * a3
    y = y + a1 * (c.effect_w1 * w1 + c.effect_w3 * w3)
    return y


def generate_dataset(cfg: ScenarioConfig, replicate_seed):
    """Draw one pooled multi-study dataset; fully determined by the seed."""
    rng = np.random.default_rng(replicate_seed)
    c = cfg.dgp
    n_studies, size = cfg.j_studies, cfg.study_size
    n = n_studies * size

    s1_j, s2_j, b_j = _study_draws(rng, n_studies, c)
    d_j = np.empty((n_studies, len(TREATMENTS)), dtype=np.int8)
    for k in range(len(TREATMENTS)):
        pr = expit(c.avail_intercepts[k] + c.avail_slopes[k] * s1_j)
        d_j[:, k] = rng.uniform(size=n_studies) < pr

    codes = np.repeat(np.arange(n_studies), size)
    s1 = s1_j[codes]
    w1 = b_j[codes] + rng.standard_normal(n)
    w2 = (rng.uniform(size=n) < c.w2_prob).astype(float)
    w3 = (rng.uniform(size=n) < c.w3_prob).astype(float)

    a = np.empty((n, len(TREATMENTS)))
    for k in range(len(TREATMENTS)):
        pr = expit(_treatment_eta(c, k, s1, w1, w2, w3))
        a[:, k] = (rng.uniform(size=n) < pr) * d_j[codes, k]

    y = _outcome_mean(c, s1, w1, w2, w3, a[:, 0], a[:, 1], a[:, 2])
    if cfg.random_effects:
        y = y + c.re_coef * s2_j[codes] * a[:, 0]
    y = y + c.noise_sd * rng.standard_normal(n)

    frame = pd.DataFrame({
        "study_id": codes,
        "y": y,
        "a_t1": a[:, 0],
        "a_t2": a[:, 1],
        "a_t3": a[:, 2],
        "s_s1": s1,
        "w_w1": w1,
        "w_w2": w2,
        "w_w3": w3,
    })
    return from_frame(frame)


def oracle_truth(cfg: ScenarioConfig, n_samples: int = ORACLE_SAMPLES, seed=None):
    """Counterfactual-forcing truth: draw subjects ignoring availability,
    force the first treatment on and off with shared noise, and regress the
    outcome difference on the modifier columns.

    Study-level variables are drawn independently per subject (equivalently,
    size-1 studies); the projection depends only on the single-subject joint
    distribution, so the estimand is unchanged while the Monte Carlo error
    shrinks.
    """
    if seed is None:
        seed = np.random.SeedSequence((cfg.seed, _TRUTH_STREAM))
    rng = np.random.default_rng(seed)
    c = cfg.dgp

    s1, s2, b = _study_draws(rng, n_samples, c)
    w1 = b + rng.standard_normal(n_samples)
    w2 = (rng.uniform(size=n_samples) < c.w2_prob).astype(float)
    w3 = (rng.uniform(size=n_samples) < c.w3_prob).astype(float)
    a2 = (rng.uniform(size=n_samples) < expit(_treatment_eta(c, 1, s1, w1, w2, w3))).astype(float)
    a3 = (rng.uniform(size=n_samples) < expit(_treatment_eta(c, 2, s1, w1, w2, w3))).astype(float)

    noise = c.noise_sd * rng.standard_normal(n_samples)
    re_term = c.re_coef * s2 if cfg.random_effects else 0.0
    y1 = _outcome_mean(c, s1, w1, w2, w3, 1.0, a2, a3) + re_term + noise
    y0 = _outcome_mean(c, s1, w1, w2, w3, 0.0, a2, a3) + noise
    delta = y1 - y0

    v = np.column_stack([np.ones(n_samples), w1, w2, w3, a2, a3])
    beta, *_ = np.linalg.lstsq(v, delta, rcond=None)
    return TruthSpec(beta=beta, provenance=f"oracle({n_samples})")


def true_parameters(cfg: ScenarioConfig) -> TruthSpec:
    """Analytic truth without random effects; counterfactual-forcing oracle
    with them (S2 correlates with W1, so the projection shifts)."""
    c = cfg.dgp
    if not cfg.random_effects:
        beta = np.array([c.y_a[0], c.effect_w1, 0.0, c.effect_w3, 0.0, 0.0])
        return TruthSpec(beta=beta, provenance="analytic")
    return oracle_truth(cfg)


def scenario_specs(cfg: ScenarioConfig):
    q = Q_CORRECT if cfg.q_spec == "correct" else None
    g1 = G1_CORRECT if cfg.g_spec == "correct" else None
    g2 = G2_CORRECT if cfg.g_spec == "correct" else None
    return q, g1, g2


def _replicate(args):
    cfg, cell_index, rep, methods = args
    seed = np.random.SeedSequence((cfg.seed, cell_index, rep))
    try:
        data = generate_dataset(cfg, seed)
        availability = derive_availability(data)
        adj = build_adjustment_set(data, TREATMENTS[0])
        q_spec, g1_spec, g2_spec = scenario_specs(cfg)
        nf = fit_nuisances(data, adj, q_spec=q_spec, g1_spec=g1_spec, g2_spec=g2_spec,
                           alpha=cfg.alpha, availability=availability)
        design = build_modifier_design(data, MODIFIERS, standardize=False,
                                       availability=availability)
        out = {}
        for method in methods:
            est = _ESTIMATORS[method](data, adj, design, nf, availability=availability)
            se_i = sandwich_iid(est.eif).se
            se_c = sandwich_clustered(est.eif, data.study_codes).se
            out[method] = (est.beta, se_i, se_c, est.diagnostics["eif_residual"])
        return "ok", out, availability.d.mean(axis=0)
    except (EstimationError, RankDeficientError, DegenerateDesignError) as exc:
        return "fail", f"rep {rep}: {type(exc).__name__}: {exc}", None


def run_cell(cfg: ScenarioConfig, methods: Sequence[str] = ("tmle", "aiptw"),
             truth: TruthSpec | None = None, threads: int = 1,
             cell_index: int = 0) -> CellResult:
    """Run all replications of one cell; failures above 2% fail the run."""
    for m in methods:
        if m not in _ESTIMATORS:
            raise ValueError(f"unknown method {m!r}")
    if truth is None:
        truth = true_parameters(cfg)

    args = [(cfg, cell_index, rep, tuple(methods)) for rep in range(cfg.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(_replicate, args, chunksize=max(1, cfg.replications // (4 * threads))))
    else:
        raw = [_replicate(a) for a in args]

    betas = {m: [] for m in methods}
    se_i = {m: [] for m in methods}
    se_c = {m: [] for m in methods}
    resid = {m: [] for m in methods}
    avail = []
    failures = []
    for status, payload, av in raw:
        if status == "fail":
            failures.append(payload)
            continue
        avail.append(av)
        for m in methods:
            b, si, sc, r = payload[m]
            betas[m].append(b)
            se_i[m].append(si)
            se_c[m].append(sc)
            resid[m].append(r)

    if len(failures) > _FAILURE_CAP * cfg.replications:
        raise RuntimeError(
            f"{len(failures)} of {cfg.replications} replications failed "
            f"(cap {_FAILURE_CAP:.0%}); first: {failures[0]}"
        )
    return CellResult(
        config=cfg,
        cell_index=cell_index,
        truth=truth,
        coef_names=COEF_NAMES,
        estimates={m: np.array(betas[m]) for m in methods},
        se_iid={m: np.array(se_i[m]) for m in methods},
        se_clustered={m: np.array(se_c[m]) for m in methods},
        eif_residuals={m: np.array(resid[m]) for m in methods},
        failures=len(failures),
        failure_messages=failures,
        availability_rate=np.mean(avail, axis=0) if avail else np.full(len(TREATMENTS), np.nan),
    )


def summarize_cell(cell: CellResult, level: float = 0.95) -> list[McReport]:
    """One McReport row per (method, coefficient)."""
    cfg = cell.config
    z = norm.ppf(0.5 + level / 2.0)
    rows = []
    for method, b in cell.estimates.items():
        n_ok = b.shape[0]
        err = b - cell.truth.beta
        mc_se = err.std(axis=0, ddof=1) if n_ok > 1 else np.full(b.shape[1], np.nan)
        sc = cell.se_clustered[method]
        si = cell.se_iid[method]
        covered = (np.abs(err) <= z * sc).mean(axis=0)
        max_resid = float(np.max(cell.eif_residuals[method])) if n_ok else np.nan
        for idx, name in enumerate(cell.coef_names):
            rows.append(McReport(
                j_studies=cfg.j_studies,
                study_size=cfg.study_size,
                scenario=cfg.scenario,
                random_effects=cfg.random_effects,
                method=method,
                replications=n_ok,
                failures=cell.failures,
                coefficient=name,
                true_value=float(cell.truth.beta[idx]),
                mean_error=float(err[:, idx].mean()),
                mc_se=float(mc_se[idx]),
                mean_se_iid=float(si[:, idx].mean()),
                mean_se_clustered=float(sc[:, idx].mean()),
                coverage=float(covered[idx]),
                max_eif_residual=max_resid,
                mean_availability=float(cell.availability_rate[0]),
            ))
    return rows


def build_grid(j_values: Sequence[int], scenarios: Sequence[int],
               re_flags: Sequence[bool], replications: int, seed: int,
               study_size: int = 300, alpha: float = 0.001,
               dgp: DgpConstants | None = None) -> list[ScenarioConfig]:
    """Deterministic cell ordering: random effects, then scenario, then J."""
    spec_of = {1: ("correct", "correct"), 2: ("correct", "null"),
               3: ("null", "correct"), 4: ("null", "null")}
    dgp = dgp or DgpConstants()
    grid = []
    for re_flag in re_flags:
        for sc in scenarios:
            q, g = spec_of[int(sc)]
            for j in j_values:
                grid.append(ScenarioConfig(
                    j_studies=int(j), study_size=study_size, random_effects=bool(re_flag),
                    q_spec=q, g_spec=g, replications=replications, seed=seed,
                    alpha=alpha, dgp=dgp,
                ))
    return grid


def run_scenarios(grid: Sequence[ScenarioConfig],
                  methods: Sequence[str] = ("tmle", "aiptw"),
                  threads: int = 1, level: float = 0.95):
    """Run every cell of the grid; truth is computed once per (RE flag, DGP)."""
    truths = {}
    reports: list[McReport] = []
    cells: list[CellResult] = []
    for cell_index, cfg in enumerate(grid):
        key = (cfg.random_effects, cfg.dgp, cfg.seed)
        if key not in truths:
            truths[key] = true_parameters(cfg)
        cell = run_cell(cfg, methods=methods, truth=truths[key], threads=threads,
                        cell_index=cell_index)
        cells.append(cell)
        reports.extend(summarize_cell(cell, level=level))
    return reports, cells


def reports_to_frame(reports: Sequence[McReport]) -> pd.DataFrame:
    cols = ["j_studies", "study_size", "scenario", "random_effects", "method",
            "replications", "failures", "coefficient", "true_value", "mean_error",
            "mc_se", "mean_se_iid", "mean_se_clustered", "coverage",
            "max_eif_residual", "mean_availability"]
    return pd.DataFrame([{c: getattr(r, c) for c in cols} for r in reports], columns=cols)
