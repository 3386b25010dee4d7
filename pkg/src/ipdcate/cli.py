"""Batch front-end: ``simulate`` runs Monte Carlo scenario grids,
``estimate`` fits per-treatment effect models on pooled IPD (optionally
across pre-imputed datasets with Rubin pooling and BH adjustment), and
``report`` renders stored result tables.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3
acceptance-threshold failure.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .data_model import (
    DataValidationError,
    DegenerateDesignError,
    build_adjustment_set,
    build_modifier_design,
    coprescription_table,
    derive_availability,
    positivity_report,
    read_dataset,
)
from .estimators import tmle
from .glm import RankDeficientError
from .inference import (
    bh_adjust,
    normal_pvalues,
    rubin_combine,
    sandwich_clustered,
    wald_ci,
)
from .nuisance import EstimationError, fit_nuisances
from .simulation import build_grid, reports_to_frame, run_scenarios

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_THRESHOLD = 3

OTHER_TREATMENTS = "@other_treatments"

_G_PERCENTILES = (1, 5, 25, 50, 75, 95, 99)


class ConfigError(ValueError):
    """The run configuration is malformed."""


def _load_config(path, section):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict) or section not in raw:
        raise ConfigError(f"config {path} must contain a top-level '{section}' section")
    cfg = raw[section]
    if not isinstance(cfg, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    return cfg


def _config_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _provenance_lines(kind, config_path, seed):
    return [
        f"# ipdcate-results: {kind}",
        f"# version: {__version__}",
        f"# numpy: {np.__version__}",
        f"# config-sha256: {_config_digest(config_path)}",
        f"# seed: {seed}",
    ]


def _write_table(path, frame: pd.DataFrame, header_lines):
    buf = io.StringIO()
    for line in header_lines:
        buf.write(line + "\n")
    frame.to_csv(buf, sep="\t", index=False)
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_results(path) -> pd.DataFrame:
    """Read a results table written by simulate/estimate ('#' lines skipped)."""
    return pd.read_csv(path, sep="\t", comment="#")


# ---------------------------------------------------------------- simulate

def _check_thresholds(reports_frame: pd.DataFrame, thresholds) -> list[str]:
    violations = []
    mult = thresholds.get("bias_se_multiple")
    if mult is not None:
        sub = reports_frame[reports_frame["scenario"].isin((1, 2, 3))]
        ok = sub["replications"] > 1
        bound = mult * sub["mc_se"] / np.sqrt(sub["replications"].clip(lower=1))
        bad = sub[ok & (sub["mean_error"].abs() > bound)]
        for _, row in bad.iterrows():
            violations.append(
                f"bias: scenario {row.scenario} J={row.j_studies} {row.method} "
                f"{row.coefficient}: |{row.mean_error:.4f}| > {mult} MC SE"
            )
    min_cov = thresholds.get("min_coverage")
    if min_cov is not None:
        min_j = thresholds.get("coverage_min_j", 0)
        sub = reports_frame[
            (reports_frame["j_studies"] >= min_j) & reports_frame["scenario"].isin((1, 2, 3))
        ]
        bad = sub[sub["coverage"] < min_cov]
        for _, row in bad.iterrows():
            violations.append(
                f"coverage: scenario {row.scenario} J={row.j_studies} {row.method} "
                f"{row.coefficient}: {row.coverage:.3f} < {min_cov}"
            )
    return violations


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config, "simulate")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = args.out or cfg.get("out")
    if out is None:
        raise ConfigError("no output path: pass --out or set simulate.out")
    threads = args.threads if args.threads is not None else int(cfg.get("threads", 1))

    grid = build_grid(
        j_values=cfg.get("j_studies", [10, 30, 50]),
        scenarios=cfg.get("scenarios", [1, 2, 3, 4]),
        re_flags=cfg.get("random_effects", [False, True]),
        replications=int(cfg.get("replications", 1000)),
        seed=seed,
        study_size=int(cfg.get("study_size", 300)),
        alpha=float(cfg.get("alpha", 0.001)),
    )
    methods = tuple(cfg.get("methods", ["tmle", "aiptw"]))
    level = float(cfg.get("ci_level", 0.95))

    reports, _ = run_scenarios(grid, methods=methods, threads=threads, level=level)
    frame = reports_to_frame(reports)
    _write_table(out, frame, _provenance_lines("simulate", args.config, seed))
    print(f"wrote {len(frame)} rows to {out}", file=sys.stderr)

    thresholds = cfg.get("thresholds") or {}
    violations = _check_thresholds(frame, thresholds)
    for v in violations:
        print(f"threshold violation: {v}", file=sys.stderr)
    return EXIT_THRESHOLD if violations else EXIT_OK


# ---------------------------------------------------------------- estimate

def _resolve_exclusions(cfg, treatment):
    exc = cfg.get("exclusions") or {}
    entry = exc.get(treatment) or {}
    if not isinstance(entry, dict):
        raise ConfigError(f"exclusions for {treatment} must map roles to column lists")
    confounders = list(entry.get("confounders") or [])
    modifiers = list(entry.get("modifiers") or [])
    return confounders, modifiers


def _resolve_modifiers(cfg, data, treatment, excluded_modifiers):
    requested = cfg.get("modifiers")
    if requested is None:
        requested = list(data.schema.individual) + [OTHER_TREATMENTS]
    out = []
    for item in requested:
        if item == OTHER_TREATMENTS:
            for t in data.treatment_names:
                if t != treatment and t not in excluded_modifiers:
                    out.append(f"a_{t}")
        else:
            name = item
            if name in data.treatment_names:
                name = f"a_{name}"
            bare = name[2:] if name.startswith("a_") else None
            if bare == treatment or (bare is not None and bare in excluded_modifiers):
                continue
            if name in excluded_modifiers:
                continue
            out.append(name)
    return out


def _resolve_model_spec(value, adj, data, default):
    if value is None:
        value = default
    if value == "adjustment":
        return list(adj.columns)
    if value == "study":
        return list(data.schema.study_level)
    if value == "null":
        return None
    if isinstance(value, (list, tuple)):
        return list(value)
    raise ConfigError(f"bad model spec {value!r}")


def _g_summary_row(treatment, imputation, nf):
    g_raw = nf.g1_raw * nf.g2_raw
    row = {
        "treatment": treatment,
        "imputation": imputation,
        "g_min": float(np.min(g_raw)),
        "g_max": float(np.max(g_raw)),
    }
    for p in _G_PERCENTILES:
        row[f"g_p{p:02d}"] = float(np.percentile(g_raw, p))
    row["weight_max"] = float(np.max(1.0 / np.minimum(nf.g_treat, nf.g_untreat)))
    return row


def _estimate_one(data_list, treatment, cfg):
    confounder_exc, modifier_exc = _resolve_exclusions(cfg, treatment)
    alpha = float(cfg.get("alpha", 0.001))
    level = float(cfg.get("ci_level", 0.95))
    standardize = bool(cfg.get("standardize", True))
    small_sample = bool(cfg.get("cluster_df_correction", False))

    betas, variances, g_rows = [], [], []
    design0 = None
    for m, data in enumerate(data_list):
        availability = derive_availability(data)
        adj = build_adjustment_set(data, treatment, exclusions=confounder_exc)
        modifiers = _resolve_modifiers(cfg, data, treatment, modifier_exc)
        if design0 is None:
            # one standardization, from the first imputation, so pooled
            # coefficients share a scale
            design0 = build_modifier_design(data, modifiers, standardize=standardize,
                                            availability=availability)
        q_spec = _resolve_model_spec(cfg.get("q_model"), adj, data, "adjustment")
        g1_spec = _resolve_model_spec(cfg.get("g1_model"), adj, data, "adjustment")
        g2_spec = _resolve_model_spec(cfg.get("g2_model"), adj, data, "study")
        nf = fit_nuisances(data, adj, q_spec=q_spec, g1_spec=g1_spec, g2_spec=g2_spec,
                           alpha=alpha, availability=availability)
        est = tmle(data, adj, design0, nf, availability=availability)
        var = sandwich_clustered(est.eif, data.study_codes, small_sample=small_sample)
        betas.append(est.beta)
        variances.append(np.diag(var.cov))
        g_rows.append(_g_summary_row(treatment, m, nf))

    pooled = rubin_combine(np.array(betas), np.array(variances))
    lower, upper = wald_ci(pooled.beta_pooled, pooled.se, level)
    pvals = normal_pvalues(pooled.beta_pooled, pooled.se)
    rows = []
    for idx, coef in enumerate(design0.columns):
        center = design0.center[idx - 1] if idx > 0 else 0.0
        scale = design0.scale[idx - 1] if idx > 0 else 1.0
        rows.append({
            "treatment": treatment,
            "coefficient": coef,
            "estimate": pooled.beta_pooled[idx],
            "se": pooled.se[idx],
            "ci_lower": lower[idx],
            "ci_upper": upper[idx],
            "p_value": pvals[idx],
            "within_var": pooled.within_var[idx],
            "between_var": pooled.between_var[idx],
            "total_var": pooled.total_var[idx],
            "m_imputations": pooled.m,
            "center": center,
            "scale": scale,
        })
    return rows, g_rows


def _estimate_one_safe(data_list, treatment, cfg):
    try:
        return _estimate_one(data_list, treatment, cfg)
    except (EstimationError, RankDeficientError, DegenerateDesignError) as exc:
        return f"{type(exc).__name__}: {exc}"


def cmd_estimate(args) -> int:
    cfg = _load_config(args.config, "estimate")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = args.out or cfg.get("out")
    if out is None:
        raise ConfigError("no output path: pass --out or set estimate.out")
    inputs = cfg.get("inputs")
    if not inputs:
        raise ConfigError("estimate.inputs must list at least one dataset")

    schema_path = cfg.get("schema")
    data_list = [read_dataset(p, schema_path=schema_path) for p in inputs]
    first = data_list[0]
    for p, d in zip(inputs[1:], data_list[1:]):
        if d.treatment_names != first.treatment_names or d.schema != first.schema:
            raise DataValidationError(f"imputed dataset {p} does not match the first dataset's schema")
        if d.n_records != first.n_records:
            raise DataValidationError(f"imputed dataset {p} has a different record count")

    # positivity diagnostics guide exclusions; they do not change them
    table = coprescription_table(first)
    threshold = int(cfg.get("positivity_threshold", 0))
    for flag in positivity_report(table, threshold, first.treatment_names):
        print(
            f"positivity: {flag.treatment_a}/{flag.treatment_b} "
            f"count={flag.count} ({flag.reason})",
            file=sys.stderr,
        )

    treatments = cfg.get("treatments") or list(first.treatment_names)
    for treatment in treatments:
        if treatment not in first.treatment_names:
            raise ConfigError(f"unknown treatment {treatment!r} in config")

    threads = args.threads if args.threads is not None else int(cfg.get("threads", 1))
    outcomes = []
    if threads > 1 and len(treatments) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_estimate_one_safe, data_list, t, cfg) for t in treatments]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_estimate_one_safe(data_list, t, cfg) for t in treatments]

    coef_rows, g_rows, failed = [], [], []
    for treatment, result in zip(treatments, outcomes):
        if isinstance(result, str):
            failed.append((treatment, result))
            print(f"estimation failed for {treatment}: {result}", file=sys.stderr)
            continue
        rows, g = result
        coef_rows.extend(rows)
        g_rows.extend(g)

    frame = pd.DataFrame(coef_rows, columns=[
        "treatment", "coefficient", "estimate", "se", "ci_lower", "ci_upper",
        "p_value", "within_var", "between_var", "total_var", "m_imputations",
        "center", "scale",
    ])
    if len(frame):
        scope = cfg.get("bh_scope", "all")
        q = float(cfg.get("fdr_q", 0.05))
        flags = np.zeros(len(frame), dtype=bool)
        if scope == "all":
            flags, _ = bh_adjust(frame["p_value"].to_numpy(), q)
        elif scope == "per_treatment":
            for t in frame["treatment"].unique():
                mask = (frame["treatment"] == t).to_numpy()
                flags[mask], _ = bh_adjust(frame.loc[mask, "p_value"].to_numpy(), q)
        else:
            raise ConfigError("bh_scope must be 'all' or 'per_treatment'")
        frame["bh_significant"] = flags
    else:
        frame["bh_significant"] = pd.Series(dtype=bool)

    header = _provenance_lines("estimate", args.config, seed)
    _write_table(out, frame, header)
    _write_table(f"{out}.propensity.tsv", pd.DataFrame(g_rows), header)
    print(f"wrote {len(frame)} coefficient rows to {out}", file=sys.stderr)
    if failed and not coef_rows:
        raise EstimationError(f"all treatments failed; first: {failed[0][1]}")
    return EXIT_OK


# ---------------------------------------------------------------- report

def _render_table(frame: pd.DataFrame) -> str:
    if "bh_significant" in frame.columns:
        frame = frame.copy()
        frame["sig"] = np.where(frame["bh_significant"].fillna(False), "*", "")
        frame = frame.drop(columns=["bh_significant"])
    if len(frame) == 0:
        return "\t".join(frame.columns) + "\n"
    fmt = frame.copy()
    for c in fmt.columns:
        if pd.api.types.is_float_dtype(fmt[c]):
            fmt[c] = fmt[c].map(lambda x: f"{x:.4g}")
    widths = {c: max(len(str(c)), fmt[c].astype(str).str.len().max()) for c in fmt.columns}
    lines = ["  ".join(str(c).rjust(widths[c]) for c in fmt.columns)]
    for _, row in fmt.iterrows():
        lines.append("  ".join(str(row[c]).rjust(widths[c]) for c in fmt.columns))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    try:
        frame = read_results(args.results)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        print(f"unreadable results file: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.format == "rows":
        frame.to_csv(sys.stdout, sep="\t", index=False)
    else:
        sys.stdout.write(_render_table(frame))
    return EXIT_OK


# ---------------------------------------------------------------- entry

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="ipdcate", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario grid")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--threads", type=int)
    sim.add_argument("--out")
    sim.set_defaults(func=cmd_simulate)

    est = sub.add_parser("estimate", help="fit per-treatment effect models on pooled IPD")
    est.add_argument("--config", required=True)
    est.add_argument("--seed", type=int)
    est.add_argument("--threads", type=int)
    est.add_argument("--out")
    est.set_defaults(func=cmd_estimate)

    rep = sub.add_parser("report", help="render a stored results table")
    rep.add_argument("results")
    rep.add_argument("--format", choices=("table", "rows"), default="table")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
