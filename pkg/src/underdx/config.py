"""Run configuration: a validated key-value file shared by all CLI commands.

The file is YAML (JSON works too); every section and key is checked
against the schema below and unknown keys are rejected.  Command-line
flags (--seed, --out, --scenario, --threads) override the corresponding
fields.

Schema (defaults in parentheses):

seed: int (0)                 master seed
output: str ("out")           output directory
threads: int (1)              process fan-out for replications
scenario:                     generator settings (simulate / replicate)
  id: 1..4 (1), n (20000), n_validation (50000),
  counterfactual_world (false), write_counterfactual (false)
data:                         existing cohort files (fit / impute)
  baseline, panel, horizon (null: infer from panel)
fit:
  emission_form: group_rates | logistic (group_rates)
  hazard_family: weibull | piecewise (weibull)
  init_artifact (null: documented default initialization)
  constrain_late_rate (false), free_baseline_late (false),
  tol_g (1e-6), max_iter (10000), memory (10),
  n_starts (1), jitter (0.5), keep_trace (false), emission_floor (0.0),
  restart_grid ([[0.05,0.05],[0.05,0.3],[0.4,0.05],[0.4,0.3],[0.7,0.05],[0.7,0.3]])
impute:
  fit_artifact ("fit.json"), reference ({a_1: 0}), per_stratum (false),
  horizon (null: cohort horizon)
evaluate:
  models ([naive, blind, imputed, ideal]),
  training_baseline, training_panel, imputed,
  ideal_baseline (null), ideal_panel (null),
  validation_baseline, validation_panel,
  stratify_by (null: single attribute if there is one),
  thresholds: {start: 0.05, stop: 0.30, step: 0.01},
  bootstrap (0)
replicate:
  replications (50), models ([naive, blind, imputed, ideal])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .errors import ConfigError

_DEFAULT_GRID = ((0.05, 0.05), (0.05, 0.3), (0.4, 0.05), (0.4, 0.3), (0.7, 0.05), (0.7, 0.3))


def _section(raw, allowed: dict, name: str) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    out = dict(allowed)
    out.update(raw)
    return out


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output: str = "out"
    threads: int = 1
    scenario: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    impute: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    replicate: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration root must be a mapping")
        known = {"seed", "output", "threads", "scenario", "data", "fit",
                 "impute", "evaluate", "replicate"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

        scenario = _section(raw.get("scenario"), {
            "id": 1, "n": 20_000, "n_validation": 50_000,
            "counterfactual_world": False, "write_counterfactual": False,
        }, "scenario")
        if scenario["id"] not in (1, 2, 3, 4):
            raise ConfigError(f"scenario.id must be 1..4, got {scenario['id']}")

        data = _section(raw.get("data"), {"baseline": None, "panel": None, "horizon": None},
                        "data")

        fit = _section(raw.get("fit"), {
            "init_artifact": None,
            "emission_form": "group_rates", "hazard_family": "weibull",
            "constrain_late_rate": False, "free_baseline_late": False,
            "tol_g": 1e-6, "max_iter": 10_000, "memory": 10,
            "n_starts": 1, "jitter": 0.5, "keep_trace": False,
            "emission_floor": 0.0,
            "restart_grid": [list(p) for p in _DEFAULT_GRID],
        }, "fit")
        if fit["emission_form"] not in ("group_rates", "logistic"):
            raise ConfigError(f"fit.emission_form must be group_rates or logistic")
        if fit["hazard_family"] not in ("weibull", "piecewise"):
            raise ConfigError(f"fit.hazard_family must be weibull or piecewise")

        impute = _section(raw.get("impute"), {
            "fit_artifact": "fit.json", "reference": {"a_1": 0.0},
            "per_stratum": False, "horizon": None,
        }, "impute")
        if not isinstance(impute["reference"], dict):
            raise ConfigError("impute.reference must be a mapping of attribute name to value")

        evaluate = _section(raw.get("evaluate"), {
            "models": ["naive", "blind", "imputed", "ideal"],
            "training_baseline": None, "training_panel": None, "imputed": None,
            "ideal_baseline": None, "ideal_panel": None,
            "validation_baseline": None, "validation_panel": None,
            "stratify_by": None,
            "thresholds": {"start": 0.05, "stop": 0.30, "step": 0.01},
            "bootstrap": 0,
        }, "evaluate")
        models = evaluate["models"]
        if len(set(models)) != len(models):
            raise ConfigError(f"duplicate model names in evaluate.models: {models}")
        bad = set(models) - {"naive", "blind", "imputed", "ideal"}
        if bad:
            raise ConfigError(f"unknown model names: {sorted(bad)}")
        thr = _section(evaluate["thresholds"], {"start": 0.05, "stop": 0.30, "step": 0.01},
                       "evaluate.thresholds")
        evaluate["thresholds"] = thr

        replicate = _section(raw.get("replicate"), {
            "replications": 50, "models": ["naive", "blind", "imputed", "ideal"],
        }, "replicate")
        rep_models = replicate["models"]
        if len(set(rep_models)) != len(rep_models):
            raise ConfigError(f"duplicate model names in replicate.models: {rep_models}")

        return cls(
            seed=int(raw.get("seed", 0)),
            output=str(raw.get("output", "out")),
            threads=int(raw.get("threads", 1)),
            scenario=scenario,
            data=data,
            fit=fit,
            impute=impute,
            evaluate=evaluate,
            replicate=replicate,
        )

    def resolved(self) -> dict:
        return {
            "seed": self.seed, "output": self.output, "threads": self.threads,
            "scenario": self.scenario, "data": self.data, "fit": self.fit,
            "impute": self.impute, "evaluate": self.evaluate, "replicate": self.replicate,
        }


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"configuration file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"configuration file {path} is not valid YAML: {exc}") from exc
    return RunConfig.from_dict(raw or {})
