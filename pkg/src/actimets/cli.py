"""Command line pipeline driver.

Each subcommand reads one JSON config, checks that its predecessor's
artifacts exist and carry the same config hash, runs its stage, and writes
stamped outputs plus a run manifest.  Progress goes to standard error as
JSON lines; exit codes are 0 (success), 2 (config), 3 (data), and 4
(convergence gate).
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ActimetsError, ConfigError, DataError, DiagnosticError
from .ingest import (
    LOG_SCALE_INDICES,
    RISK_FACTORS,
    build_cohorts,
    default_covariates,
    read_demographics_csv,
    read_minute_csv,
    read_risk_panel_csv,
    derive_day_activities,
)
from .mem import MemSettings, build_mem_data, sample_mem
from .predict import Thresholds, prob_R_or_more, prob_high, standardized_residuals
from .preprocess import (
    adjust_survey_weights,
    adjust_weekend_all,
    fit_preliminary_ar1,
    fit_variance_function,
    fit_weekend_model,
)
from .rfm import RfmSettings, compute_dic, run_two_stage
from .simgen import SimConfig, simulate_cohort
from .statskernel import make_rng

# Paper-scale run shapes are the defaults; configs override them for
# anything that has to finish quickly.
DEFAULTS = {
    "seed": 0,
    "paths": {
        "output_dir": "actimets_out",
        "minutes": None,
        "demographics": None,
        "panels": None,
    },
    "simulate": {"n": 400},
    "mem": {"chains": 8, "iterations": 2000, "burn_in": 1000, "enforce_rhat": True},
    "rfm": {
        "h": 5,
        "chains": 3,
        "iterations": 1_000_000,
        "burn_in": 10_000,
        "thin": 5,
        "enforce_rhat": True,
    },
    "select_h": {"values": [1, 2, 3, 4, 5, 6]},
    "predict": {
        "grid_max": 60.0,
        "grid_step": 1.0,
        "sex": "mixed",
        "female_fraction": 0.5,
        "n_sim": 200,
    },
    "thresholds": {
        "waist_male": 102.0,
        "waist_female": 88.0,
        "glucose": 110.0,
        "triglycerides": 150.0,
        "sbp": 130.0,
        "dbp": 85.0,
        "hdl_male": 40.0,
        "hdl_female": 50.0,
        "ldl": 160.0,
    },
}


def _merge(defaults, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    out = {}
    for key, default in defaults.items():
        dotted = f"{path}.{key}" if path else key
        if key not in override:
            out[key] = default
            continue
        value = override[key]
        if isinstance(default, dict):
            out[key] = _merge(default, value, dotted)
        elif default is None or value is None:
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{dotted}: expected a string path")
            out[key] = value
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{dotted}: expected true or false")
            out[key] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{dotted}: expected an integer")
            out[key] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{dotted}: expected a number")
            out[key] = float(value)
        elif isinstance(default, list):
            if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value
            ):
                raise ConfigError(f"{dotted}: expected a list of integers")
            out[key] = list(value)
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{dotted}: expected a string")
            out[key] = value
    for key in override:
        if key not in defaults:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"{dotted}: unknown config key")
    return out


def _validate(cfg):
    for block in ("mem", "rfm"):
        if cfg[block]["burn_in"] >= cfg[block]["iterations"]:
            raise ConfigError(f"{block}.burn_in: must be smaller than {block}.iterations")
        if cfg[block]["chains"] < 1:
            raise ConfigError(f"{block}.chains: must be at least 1")
    if cfg["rfm"]["thin"] < 1:
        raise ConfigError("rfm.thin: must be at least 1")
    if cfg["rfm"]["h"] < 1:
        raise ConfigError("rfm.h: must be at least 1")
    if cfg["simulate"]["n"] < 1:
        raise ConfigError("simulate.n: must be at least 1")
    if not cfg["select_h"]["values"] or min(cfg["select_h"]["values"]) < 1:
        raise ConfigError("select_h.values: need component counts of at least 1")
    if cfg["predict"]["grid_step"] <= 0 or cfg["predict"]["grid_max"] < 0:
        raise ConfigError("predict.grid_step: must be positive over a nonnegative range")
    if cfg["predict"]["sex"] not in ("male", "female", "mixed"):
        raise ConfigError("predict.sex: must be male, female, or mixed")
    if not 0 <= cfg["predict"]["female_fraction"] <= 1:
        raise ConfigError("predict.female_fraction: must lie in [0, 1]")
    if cfg["predict"]["n_sim"] < 1:
        raise ConfigError("predict.n_sim: must be at least 1")


def load_config(path):
    """Parse and validate a run config; returns (config, config_hash)."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from None
    cfg = _merge(DEFAULTS, raw)
    _validate(cfg)
    # Paths stay out of the hash: rerunning the same statistical config in a
    # different directory must yield byte-identical stamped artifacts.
    hashed = {key: value for key, value in cfg.items() if key != "paths"}
    return cfg, fileio.config_hash(hashed)


def _log(stage, event, **details):
    record = {"stage": stage, "event": event}
    record.update(details)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _out_dir(cfg):
    out = Path(cfg["paths"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_input(cfg, key, stage):
    path = cfg["paths"][key]
    if path is None:
        raise ConfigError(f"paths.{key}: required by the {stage} stage")
    if not Path(path).exists():
        raise DataError(f"missing input file {path}")
    return path


def _finish(out, stage, cfg_hash, seed, inputs, outputs, started):
    wall = time.perf_counter() - started
    fileio.write_manifest(
        out / f"manifest_{stage.replace('-', '_')}.json",
        stage,
        cfg_hash,
        seed,
        inputs,
        outputs,
        wall,
    )
    _log(stage, "done", wall_time_s=round(wall, 3), outputs=[p.name for p in outputs])


def cmd_simulate(cfg, cfg_hash):
    stage = "simulate"
    started = time.perf_counter()
    out = _out_dir(cfg)
    _log(stage, "start", n=cfg["simulate"]["n"], seed=cfg["seed"])
    cohort = simulate_cohort(SimConfig(n=cfg["simulate"]["n"], seed=cfg["seed"]))
    days_path = out / "days.csv"
    demo_path = out / "demographics.csv"
    panels_path = out / "panels.csv"
    truth_path = out / "truth.json"
    fileio.write_days_csv(days_path, cohort.days, cfg_hash)
    fileio.write_demographics_csv(demo_path, cohort.participants, cfg_hash)
    fileio.write_panels_csv(panels_path, cohort.panels, cfg_hash)
    truth = cohort.truth
    fileio.write_json(
        truth_path,
        {
            "config_hash": cfg_hash,
            "n": cfg["simulate"]["n"],
            "seed": cfg["seed"],
            "participant_ids": list(truth.participant_ids),
            "b1": truth.b1.tolist(),
            "b2": truth.b2.tolist(),
            "pi": truth.pi.tolist(),
            "mu": truth.mu.tolist(),
            "xi_sq": truth.xi_sq.tolist(),
            "t": truth.t.tolist(),
            "labels": truth.labels.tolist(),
        },
    )
    _finish(out, stage, cfg_hash, cfg["seed"], [], [days_path, demo_path, panels_path, truth_path], started)


def cmd_ingest(cfg, cfg_hash):
    stage = "ingest"
    started = time.perf_counter()
    out = _out_dir(cfg)
    minutes_path = _require_input(cfg, "minutes", stage)
    demo_in = _require_input(cfg, "demographics", stage)
    panels_in = _require_input(cfg, "panels", stage)
    _log(stage, "start", minutes=str(minutes_path))
    records = read_minute_csv(minutes_path)
    days = derive_day_activities(records)
    participants = read_demographics_csv(demo_in)
    panels = read_risk_panel_csv(panels_in)
    days_path = out / "days.csv"
    demo_path = out / "demographics.csv"
    panels_path = out / "panels.csv"
    fileio.write_days_csv(days_path, days, cfg_hash)
    fileio.write_demographics_csv(demo_path, participants, cfg_hash)
    fileio.write_panels_csv(panels_path, panels, cfg_hash)
    _finish(
        out,
        stage,
        cfg_hash,
        cfg["seed"],
        [Path(minutes_path), Path(demo_in), Path(panels_in)],
        [days_path, demo_path, panels_path],
        started,
    )


def _load_base_tables(out, cfg_hash):
    for name in ("days.csv", "demographics.csv", "panels.csv"):
        fileio.check_artifact(out / name, cfg_hash, "ingest or simulate")
    days = fileio.read_days_csv(out / "days.csv")
    participants = read_demographics_csv(out / "demographics.csv")
    panels = read_risk_panel_csv(out / "panels.csv")
    return days, participants, panels


def cmd_preprocess(cfg, cfg_hash):
    stage = "preprocess"
    started = time.perf_counter()
    out = _out_dir(cfg)
    days, participants, panels = _load_base_tables(out, cfg_hash)
    _log(stage, "start", days=len(days))
    cohorts = build_cohorts(days, panels)
    mem_ids = set(cohorts.mem_ids)
    mem_days = [d for d in days if d.participant_id in mem_ids]
    model = fit_weekend_model(mem_days)
    adjusted = adjust_weekend_all(mem_days, model)
    by_pid = {p.participant_id: p for p in participants}
    missing = sorted(mem_ids - set(by_pid))
    if missing:
        raise DataError(f"missing demographics for participants: {missing[:5]}")
    covariates = {pid: default_covariates(by_pid[pid]) for pid in cohorts.mem_ids}
    fit = fit_preliminary_ar1(adjusted, covariates)
    residuals = np.array([r.residual for r in fit.residuals])
    ages = np.array([by_pid[r.participant_id].age for r in fit.residuals])
    vf = fit_variance_function(residuals, ages)
    adjusted_path = out / "adjusted_activity.csv"
    vf_path = out / "variance_function.json"
    fileio.write_adjusted_csv(adjusted_path, adjusted, cfg_hash)
    fileio.save_variance_function(vf_path, vf, cfg_hash)
    _log(stage, "variance_function", delta=[float(d) for d in vf.delta])
    inputs = [out / "days.csv", out / "demographics.csv", out / "panels.csv"]
    _finish(out, stage, cfg_hash, cfg["seed"], inputs, [adjusted_path, vf_path], started)


def cmd_fit_mem(cfg, cfg_hash):
    stage = "fit-mem"
    started = time.perf_counter()
    out = _out_dir(cfg)
    fileio.check_artifact(out / "adjusted_activity.csv", cfg_hash, "preprocess")
    days, participants, panels = _load_base_tables(out, cfg_hash)
    adjusted = fileio.read_adjusted_csv(out / "adjusted_activity.csv")
    vf = fileio.load_variance_function(out / "variance_function.json")
    cohorts = build_cohorts(days, panels)
    data = build_mem_data(adjusted, participants, vf, cohorts.mem_ids)
    settings = MemSettings(
        chains=cfg["mem"]["chains"],
        iterations=cfg["mem"]["iterations"],
        burn_in=cfg["mem"]["burn_in"],
        seed=cfg["seed"],
        enforce_rhat=cfg["mem"]["enforce_rhat"],
        keep_effects=False,
    )
    _log(stage, "start", participants=len(cohorts.mem_ids), chains=settings.chains,
         iterations=settings.iterations)
    posterior = sample_mem(data, settings)
    _log(stage, "sampled", max_rhat=float(np.nanmax(posterior.rhat)))
    bin_path = out / "mem_posterior.bin"
    fileio.save_mem_posterior(bin_path, posterior, cfg_hash)
    inputs = [out / "adjusted_activity.csv", out / "variance_function.json"]
    _finish(out, stage, cfg_hash, cfg["seed"], inputs,
            [bin_path, bin_path.with_suffix(".json")], started)


def cmd_estimate_usual(cfg, cfg_hash):
    stage = "estimate-usual"
    started = time.perf_counter()
    out = _out_dir(cfg)
    bin_path = out / "mem_posterior.bin"
    if not bin_path.exists():
        raise DataError("missing mem_posterior.bin: run the fit-mem stage first")
    posterior = fileio.load_mem_posterior(bin_path)
    pool = posterior.pooled("t")
    _log(stage, "start", draws=pool.shape[0], participants=pool.shape[1])
    t_path = out / "t_draws.csv"
    fileio.write_t_draws_csv(t_path, posterior.participant_ids, pool, cfg_hash)
    _finish(out, stage, cfg_hash, cfg["seed"], [bin_path], [t_path], started)


def _load_rfm_inputs(cfg, cfg_hash, out):
    fileio.check_artifact(out / "t_draws.csv", cfg_hash, "estimate-usual")
    fileio.check_artifact(out / "panels.csv", cfg_hash, "ingest or simulate")
    mem_ids, pool = fileio.read_t_draws_csv(out / "t_draws.csv")
    panels = read_risk_panel_csv(out / "panels.csv")
    by_pid = {p.participant_id: p for p in panels}
    rfm_ids = tuple(sorted(set(mem_ids) & set(by_pid)))
    if not rfm_ids:
        raise DataError("no participants hold both activity draws and a risk panel")
    index = {pid: k for k, pid in enumerate(mem_ids)}
    t_pool = pool[:, [index[pid] for pid in rfm_ids]]
    raw = np.stack([by_pid[pid].raw_values() for pid in rfm_ids])
    weights = np.array([by_pid[pid].survey_weight for pid in rfm_ids])
    weights = weights / weights.sum()
    y = np.empty_like(raw)
    for j in range(raw.shape[1]):
        column = adjust_survey_weights(raw[:, j], weights)
        y[:, j] = np.log(column) if j in LOG_SCALE_INDICES else column
    return rfm_ids, t_pool, y


def _rfm_settings(cfg, h=None):
    return RfmSettings(
        h=cfg["rfm"]["h"] if h is None else h,
        chains=cfg["rfm"]["chains"],
        iterations=cfg["rfm"]["iterations"],
        burn_in=cfg["rfm"]["burn_in"],
        thin=cfg["rfm"]["thin"],
        seed=cfg["seed"],
        enforce_rhat=cfg["rfm"]["enforce_rhat"],
    )


def cmd_fit_rfm(cfg, cfg_hash):
    stage = "fit-rfm"
    started = time.perf_counter()
    out = _out_dir(cfg)
    rfm_ids, t_pool, y = _load_rfm_inputs(cfg, cfg_hash, out)
    settings = _rfm_settings(cfg)
    _log(stage, "start", participants=len(rfm_ids), h=settings.h,
         chains=settings.chains, iterations=settings.iterations)
    posterior = run_two_stage(t_pool, y, settings)
    compute_dic(posterior, y, t_pool**0.25)
    _log(stage, "sampled", max_rhat=float(np.nanmax(posterior.rhat)), dic=posterior.dic)
    csv_path = out / "rfm_posterior.csv"
    fileio.save_rfm_posterior(csv_path, posterior, cfg_hash)
    inputs = [out / "t_draws.csv", out / "panels.csv"]
    outputs = [csv_path, csv_path.with_suffix(".bin"), csv_path.with_suffix(".json")]
    _finish(out, stage, cfg_hash, cfg["seed"], inputs, outputs, started)


def cmd_select_h(cfg, cfg_hash):
    stage = "select-h"
    started = time.perf_counter()
    out = _out_dir(cfg)
    rfm_ids, t_pool, y = _load_rfm_inputs(cfg, cfg_hash, out)
    h_values = sorted(set(cfg["select_h"]["values"]))
    dics = []
    for h in h_values:
        settings = _rfm_settings(cfg, h=h)
        _log(stage, "fit", h=h)
        posterior = run_two_stage(t_pool, y, settings)
        dics.append(compute_dic(posterior, y, t_pool**0.25))
        _log(stage, "dic", h=h, dic=dics[-1])
    dic_path = out / "dic_by_H.csv"
    fileio.write_dic_csv(dic_path, h_values, dics, cfg_hash)
    inputs = [out / "t_draws.csv", out / "panels.csv"]
    _finish(out, stage, cfg_hash, cfg["seed"], inputs, [dic_path], started)


def _thresholds(cfg):
    return Thresholds(**cfg["thresholds"])


def _grid(cfg):
    step = cfg["predict"]["grid_step"]
    return np.arange(0.0, cfg["predict"]["grid_max"] + step / 2, step)


def _write_figure_data(cfg, cfg_hash, out, posterior):
    grid = _grid(cfg)
    thresholds = _thresholds(cfg)
    sex = cfg["predict"]["sex"]
    fraction = cfg["predict"]["female_fraction"]
    high = [
        prob_high(rf, grid, posterior, sex=sex, female_fraction=fraction, thresholds=thresholds)
        for rf in RISK_FACTORS
    ]
    counts = prob_R_or_more(
        grid,
        posterior,
        sex=sex,
        female_fraction=fraction,
        thresholds=thresholds,
        n_sim=cfg["predict"]["n_sim"],
        rng=make_rng(cfg["seed"] + 211),
    )
    high_path = out / "prob_high.csv"
    counts_path = out / "prob_R.csv"
    fileio.write_curves_csv(high_path, high, "prob_high", cfg_hash)
    fileio.write_curves_csv(counts_path, counts, "prob_R", cfg_hash)
    return [high_path, counts_path]


def _load_rfm_posterior(out, cfg_hash):
    fileio.check_artifact(out / "rfm_posterior.csv", cfg_hash, "fit-rfm")
    return fileio.load_rfm_posterior(out / "rfm_posterior.csv")


def cmd_predict(cfg, cfg_hash):
    stage = "predict"
    started = time.perf_counter()
    out = _out_dir(cfg)
    posterior = _load_rfm_posterior(out, cfg_hash)
    _log(stage, "start", draws=posterior.n_draws)
    outputs = _write_figure_data(cfg, cfg_hash, out, posterior)
    _finish(out, stage, cfg_hash, cfg["seed"], [out / "rfm_posterior.csv"], outputs, started)


def cmd_residuals(cfg, cfg_hash):
    stage = "residuals"
    started = time.perf_counter()
    out = _out_dir(cfg)
    posterior = _load_rfm_posterior(out, cfg_hash)
    rfm_ids, t_pool, y = _load_rfm_inputs(cfg, cfg_hash, out)
    _log(stage, "start", participants=len(rfm_ids))
    residuals = standardized_residuals(y, t_pool, posterior)
    t_hat = t_pool.mean(axis=0)
    res_path = out / "residuals.csv"
    fileio.write_residuals_csv(res_path, rfm_ids, t_hat, residuals, cfg_hash)
    inputs = [out / "rfm_posterior.csv", out / "t_draws.csv", out / "panels.csv"]
    _finish(out, stage, cfg_hash, cfg["seed"], inputs, [res_path], started)


def _summary_rows(posterior):
    def rows_for(name, draws, factors):
        out = []
        for k, rf in enumerate(factors):
            lower, upper = np.quantile(draws[:, k], [0.025, 0.975])
            out.append((name, rf, float(draws[:, k].mean()), float(lower), float(upper)))
        return out

    rows = []
    rows += rows_for("overall_intercept", posterior.gamma0, RISK_FACTORS)
    rows += rows_for("curve_drop", posterior.drop, RISK_FACTORS[:4])
    rows += rows_for("curve_rate", posterior.rate, RISK_FACTORS[:4])
    rows += rows_for("curve_inflection", posterior.inflection, RISK_FACTORS[:4])
    rows += rows_for("slope", posterior.slope, RISK_FACTORS[4:])
    return rows


def cmd_report(cfg, cfg_hash):
    stage = "report"
    started = time.perf_counter()
    out = _out_dir(cfg)
    posterior = _load_rfm_posterior(out, cfg_hash)
    _log(stage, "start", draws=posterior.n_draws)
    summary_path = out / "summary_tables.csv"
    fileio.write_summary_csv(summary_path, _summary_rows(posterior), cfg_hash)
    outputs = [summary_path] + _write_figure_data(cfg, cfg_hash, out, posterior)
    _finish(out, stage, cfg_hash, cfg["seed"], [out / "rfm_posterior.csv"], outputs, started)


STAGES = {
    "simulate": (cmd_simulate, "Generate a synthetic cohort with known truth"),
    "ingest": (cmd_ingest, "Derive daily activity from minute-level counts"),
    "preprocess": (cmd_preprocess, "Weekend adjustment and variance plug-in fit"),
    "fit-mem": (cmd_fit_mem, "Fit the activity measurement model"),
    "estimate-usual": (cmd_estimate_usual, "Pool usual-activity draws into a CSV"),
    "fit-rfm": (cmd_fit_rfm, "Fit the risk factor mixture regression"),
    "select-h": (cmd_select_h, "Scan mixture sizes and tabulate DIC"),
    "predict": (cmd_predict, "Exceedance and elevated-count probability curves"),
    "residuals": (cmd_residuals, "Standardized residual diagnostics"),
    "report": (cmd_report, "Summary tables plus all figure data"),
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="actimets",
        description="Two-stage accelerometry and metabolic risk pipeline.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in STAGES.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, help="JSON run configuration")
    args = parser.parse_args(argv)
    try:
        cfg, cfg_hash = load_config(args.config)
        STAGES[args.command][0](cfg, cfg_hash)
    except ActimetsError as err:
        _log(args.command, "error", error=type(err).__name__, message=str(err))
        print(f"error: {err}", file=sys.stderr)
        return getattr(err, "exit_code", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
