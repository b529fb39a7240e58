"""Command-line front end wiring the pipeline.

Subcommands: simulate, fit, impute, evaluate, replicate.  All read one
configuration file (see config module for the schema); --seed, --out,
--scenario and --threads override it.  Every run writes a
``manifest.json`` capturing the resolved configuration and package
version, so outputs are reproducible byte for byte from the manifest.
Errors print one machine-parsable line ``<code>: <message>`` to stderr
and exit nonzero (2 for usage/config/data errors, 3 for a fit that ended
unconverged).  Set UNDERDX_LOG=debug|info|warning for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import RunConfig, load_config
from .counterfactual import impute_counterfactual_outcomes
from .data import read_cohort, write_cohort, write_truth
from .errors import ConfigError, UnderdxError
from .inference import FitOptions, default_init, fit_mle, load_fit, save_fit
from .model import GROUP_RATES, LOGISTIC_SHARED, PIECEWISE, WEIBULL
from .prediction import bootstrap_optimism
from .replication import (
    HmmImputePipeline,
    ScenarioStudySettings,
    attribute_strata,
    evaluate_models,
    fit_with_restarts,
    run_scenario_study,
    train_models,
)
from .simulation import ScenarioConfig, generate_scenario_cohort

log = logging.getLogger("underdx")


def _setup_logging():
    level = os.environ.get("UNDERDX_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _write_manifest(out: Path, command: str, cfg: RunConfig) -> None:
    payload = {"command": command, "version": __version__, "config": cfg.resolved()}
    with open(out / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2)


def _fit_options(cfg: RunConfig) -> FitOptions:
    f = cfg.fit
    return FitOptions(
        tol_g=float(f["tol_g"]),
        max_iter=int(f["max_iter"]),
        memory=int(f["memory"]),
        free_baseline_late=bool(f["free_baseline_late"]),
        n_starts=int(f["n_starts"]),
        jitter=float(f["jitter"]),
        keep_trace=bool(f["keep_trace"]),
        seed=cfg.seed,
        emission_floor=float(f["emission_floor"]),
    )


def _restart_grid(cfg: RunConfig):
    return tuple((float(late), float(prog)) for late, prog in cfg.fit["restart_grid"])


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    sc = cfg.scenario
    base = ScenarioConfig(scenario=int(sc["id"]), n=int(sc["n"]),
                          counterfactual_world=bool(sc["counterfactual_world"]))
    sim = generate_scenario_cohort(base, cfg.seed)
    prefix = "counterfactual" if base.counterfactual_world else "factual"
    write_cohort(sim.cohort, out / f"{prefix}_baseline.csv", out / f"{prefix}_panel.csv")
    write_truth(sim.cohort.ids, sim.stages, out / f"{prefix}_truth.csv")
    log.info("wrote %s cohort of %d individuals", prefix, sim.cohort.n)
    if sc["write_counterfactual"] and not base.counterfactual_world:
        cf = generate_scenario_cohort(replace(base, counterfactual_world=True), cfg.seed)
        write_cohort(cf.cohort, out / "counterfactual_baseline.csv",
                     out / "counterfactual_panel.csv")
        write_truth(cf.cohort.ids, cf.stages, out / "counterfactual_truth.csv")
    return 0


def _load_data_cohort(cfg: RunConfig):
    d = cfg.data
    if not d["baseline"] or not d["panel"]:
        raise ConfigError("data.baseline and data.panel are required for this command")
    horizon = d["horizon"]
    return read_cohort(d["baseline"], d["panel"], horizon=None if horizon is None else int(horizon))


def cmd_fit(cfg: RunConfig, out: Path) -> int:
    cohort = _load_data_cohort(cfg)
    if cfg.fit["init_artifact"]:
        init = load_fit(cfg.fit["init_artifact"]).theta_hat
        grid = ()  # warm start: no restarts
    else:
        form = GROUP_RATES if cfg.fit["emission_form"] == "group_rates" else LOGISTIC_SHARED
        family = WEIBULL if cfg.fit["hazard_family"] == "weibull" else PIECEWISE
        init = default_init(
            cohort, emission_form=form, hazard_family=family,
            constraint_late_ge_early=bool(cfg.fit["constrain_late_rate"]),
            baseline_late_fraction=0.1 if cfg.fit["free_baseline_late"] else 0.0,
        )
        grid = _restart_grid(cfg)
    fit = fit_with_restarts(cohort, init, _fit_options(cfg), grid)
    save_fit(fit, out / "fit.json")
    if fit.trace is not None:
        pd.DataFrame(fit.trace, columns=["iteration", "log_likelihood", "gradient_norm"]).to_csv(
            out / "fit_trace.csv", index=False
        )
    print(f"log_likelihood={fit.log_likelihood:.6f} iterations={fit.iterations} "
          f"gradient_norm={fit.gradient_norm:.3e} converged={fit.converged}")
    return 0 if fit.converged else 3


def cmd_impute(cfg: RunConfig, out: Path) -> int:
    cohort = _load_data_cohort(cfg)
    artifact = Path(cfg.impute["fit_artifact"])
    fit = load_fit(artifact)
    expected = cohort.x.shape[1] + cohort.a.shape[1]
    if fit.theta_hat.hazard.n_coef != expected:
        raise ConfigError(
            f"fit artifact expects {fit.theta_hat.hazard.n_coef} hazard coefficients, "
            f"cohort provides {expected} covariate/attribute columns"
        )
    reference = {str(k): float(v) for k, v in cfg.impute["reference"].items()}
    imputation = impute_counterfactual_outcomes(
        fit.theta_hat, cohort, reference, seed=cfg.seed,
        per_stratum=bool(cfg.impute["per_stratum"]),
        emission_floor=float(cfg.fit["emission_floor"]),
    )
    pd.DataFrame({
        "id": cohort.ids,
        "p_cf": imputation.p_cf,
        "factor_applied": imputation.factor_applied,
        "d_observed": cohort.diagnosed.astype(int),
        "d_cf": imputation.d_cf,
    }).to_csv(out / "imputed.csv", index=False)
    for key, factor in imputation.factors.items():
        print(f"recalibration_factor[{key}]={factor:.6f}")
    print(f"n_clamped={imputation.n_clamped}")
    return 0


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    ev = cfg.evaluate
    for key in ("training_baseline", "training_panel", "validation_baseline", "validation_panel"):
        if not ev[key]:
            raise ConfigError(f"evaluate.{key} is required")
    train = read_cohort(ev["training_baseline"], ev["training_panel"])
    validation = read_cohort(ev["validation_baseline"], ev["validation_panel"],
                             horizon=train.horizon)
    models = tuple(ev["models"])

    d_cf = None
    if "imputed" in models:
        if not ev["imputed"]:
            raise ConfigError("evaluate.imputed (imputed-cohort CSV) is required")
        imputed = pd.read_csv(ev["imputed"]).sort_values("id")
        if not np.array_equal(imputed["id"].to_numpy(), train.ids):
            raise ConfigError("imputed file ids do not match the training cohort")
        d_cf = imputed["d_cf"].to_numpy()
    ideal = None
    if "ideal" in models:
        if not ev["ideal_baseline"] or not ev["ideal_panel"]:
            raise ConfigError("evaluate.ideal_baseline and ideal_panel are required")
        ideal = read_cohort(ev["ideal_baseline"], ev["ideal_panel"], horizon=train.horizon)

    thr = ev["thresholds"]
    thresholds = np.round(np.arange(thr["start"], thr["stop"] + 1e-9, thr["step"]), 6)
    fitted = train_models(train, d_cf, ideal, models)
    strata = attribute_strata(validation, ev["stratify_by"])
    reports = evaluate_models(fitted, validation, strata=strata, thresholds=thresholds)

    metric_rows, decile_rows, nb_rows = [], [], []
    for r in reports:
        for metric, value in r.scalars().items():
            metric_rows.append({"model": r.model, "stratum": r.stratum,
                                "metric": metric, "value": value})
        for b in range(r.deciles.mean_pred.shape[0]):
            decile_rows.append({"model": r.model, "stratum": r.stratum, "bin": b + 1,
                                "mean_pred": r.deciles.mean_pred[b],
                                "observed": r.deciles.observed[b],
                                "count": int(r.deciles.count[b])})
        for k, t in enumerate(r.net_benefit.thresholds):
            nb_rows.append({"model": r.model, "stratum": r.stratum, "threshold": t,
                            "net_benefit": r.net_benefit.model[k],
                            "treat_all": r.net_benefit.treat_all[k],
                            "treat_none": 0.0})
    pd.DataFrame(metric_rows).to_csv(out / "metrics.csv", index=False)
    pd.DataFrame(decile_rows).to_csv(out / "deciles.csv", index=False)
    pd.DataFrame(nb_rows).to_csv(out / "net_benefit.csv", index=False)

    b = int(ev["bootstrap"])
    if b > 0:
        reference = {str(k): float(v) for k, v in cfg.impute["reference"].items()}
        pipeline = HmmImputePipeline(
            reference=reference,
            models=tuple(m for m in models if m != "ideal"),
            fit_options=_fit_options(cfg),
            impute_seed=cfg.seed,
            start_grid=_restart_grid(cfg),
        )
        report = bootstrap_optimism(train, pipeline, b, seed=cfg.seed)
        rows = []
        for key in sorted(report.apparent):
            model, stratum, metric = key.split("/")
            rows.append({"model": model, "stratum": stratum, "metric": metric,
                         "apparent": report.apparent[key], "optimism": report.optimism[key],
                         "corrected": report.corrected[key]})
        pd.DataFrame(rows).to_csv(out / "metrics_optimism_corrected.csv", index=False)
        print(f"bootstrap_effective_b={report.effective_b} failures={report.n_failures}")
    return 0


def cmd_replicate(cfg: RunConfig, out: Path) -> int:
    sc = cfg.scenario
    rep = cfg.replicate
    settings = ScenarioStudySettings(
        scenario=int(sc["id"]),
        n=int(sc["n"]),
        n_validation=int(sc["n_validation"]),
        replications=int(rep["replications"]),
        master_seed=cfg.seed,
        models=tuple(rep["models"]),
        fit=_fit_options(cfg),
        start_grid=_restart_grid(cfg),
    )
    result = run_scenario_study(settings, n_jobs=cfg.threads,
                                progress=lambda r: log.info("replication %d done", r))
    result.fits.to_csv(out / "fits.csv", index=False)
    result.params.to_csv(out / "params.csv", index=False)
    result.metrics.to_csv(out / "metrics.csv", index=False)
    result.params_summary().to_csv(out / "params_summary.csv", index=False)
    result.metrics_summary().to_csv(out / "metrics_summary.csv", index=False)
    deciles = result.deciles.groupby(["model", "stratum", "bin"], sort=False).agg(
        mean_pred=("mean_pred", "mean"), observed=("observed", "mean"), count=("count", "mean")
    ).reset_index()
    deciles.to_csv(out / "deciles_summary.csv", index=False)
    nb = result.net_benefit.groupby(["model", "stratum", "threshold"], sort=False).agg(
        net_benefit=("net_benefit", "mean"), treat_all=("treat_all", "mean")
    ).reset_index()
    nb.to_csv(out / "net_benefit_summary.csv", index=False)
    n_failed = int((~result.fits["converged"]).sum())
    print(f"replications={len(result.fits)} unconverged_fits={n_failed}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="underdx",
        description="Correct heterogeneous underdiagnosis bias in prediction models",
    )
    parser.add_argument("--version", action="version", version=f"underdx {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "generate scenario cohort CSVs"),
        ("fit", "fit the progression model to cohort CSVs"),
        ("impute", "compute counterfactual probabilities and re-impute outcomes"),
        ("evaluate", "train prediction models and write metric CSVs"),
        ("replicate", "run a full replication study"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the YAML configuration")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--threads", type=int, default=None, help="process fan-out")
        p.add_argument("--scenario", type=int, choices=(1, 2, 3, 4), default=None,
                       help="override the scenario id")
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "impute": cmd_impute,
    "evaluate": cmd_evaluate,
    "replicate": cmd_replicate,
}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, output=args.out)
        if args.threads is not None:
            cfg = replace(cfg, threads=args.threads)
        if args.scenario is not None:
            cfg = replace(cfg, scenario=dict(cfg.scenario, id=args.scenario))
        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, args.command, cfg)
        return _COMMANDS[args.command](cfg, out)
    except UnderdxError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io-error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
