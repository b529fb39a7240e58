import json

import numpy as np
import pandas as pd
import pytest
import yaml

from underdx.cli import main
from underdx.config import RunConfig, load_config
from underdx.errors import ConfigError


def write_config(path, **sections):
    with open(path, "w") as fh:
        yaml.safe_dump(sections, fh)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def sim_dir(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml",
                       seed=7,
                       output=str(tmp_path / "sim"),
                       scenario={"id": 1, "n": 400, "write_counterfactual": True})
    assert run("simulate", "--config", cfg) == 0
    return tmp_path


class TestConfig:
    def test_unknown_keys_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", scenario={"id": 1}, extra={"x": 1})
        assert run("simulate", "--config", cfg) == 2
        with pytest.raises(ConfigError, match="unknown top-level"):
            load_config(cfg)

    def test_unknown_section_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown keys in section 'fit'"):
            RunConfig.from_dict({"fit": {"learning_rate": 0.1}})

    def test_duplicate_models_rejected(self):
        with pytest.raises(ConfigError, match="duplicate model names"):
            RunConfig.from_dict({"evaluate": {"models": ["naive", "naive"]}})

    def test_bad_scenario_id_rejected(self):
        with pytest.raises(ConfigError, match="scenario.id"):
            RunConfig.from_dict({"scenario": {"id": 7}})

    def test_missing_file_is_single_line_error(self, tmp_path, capsys):
        assert run("fit", "--config", tmp_path / "nope.yaml") == 2
        err = capsys.readouterr().err
        assert err.startswith("config-invalid:")
        assert len(err.strip().splitlines()) == 1


class TestSimulate:
    def test_deterministic_outputs(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", seed=9, output=str(tmp_path / "o1"),
                           scenario={"id": 1, "n": 200})
        assert run("simulate", "--config", cfg) == 0
        cfg2 = write_config(tmp_path / "c2.yaml", seed=9, output=str(tmp_path / "o2"),
                            scenario={"id": 1, "n": 200})
        assert run("simulate", "--config", cfg2) == 0
        for name in ("factual_baseline.csv", "factual_panel.csv", "factual_truth.csv"):
            a = (tmp_path / "o1" / name).read_bytes()
            b = (tmp_path / "o2" / name).read_bytes()
            assert a == b

    def test_attribute_prevalence_and_manifest(self, tmp_path):
        out = tmp_path / "o"
        cfg = write_config(tmp_path / "c.yaml", seed=3, output=str(out),
                           scenario={"id": 1, "n": 20_000})
        assert run("simulate", "--config", cfg) == 0
        base = pd.read_csv(out / "factual_baseline.csv")
        assert base["a_a_1" if "a_a_1" in base else "a_1"].mean() == pytest.approx(0.2, abs=0.02)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["config"]["seed"] == 3

    def test_scenario_four_panel_spans_ten_timepoints(self, tmp_path):
        out = tmp_path / "o"
        cfg = write_config(tmp_path / "c.yaml", seed=3, output=str(out),
                           scenario={"id": 4, "n": 3000})
        assert run("simulate", "--config", cfg) == 0
        panel = pd.read_csv(out / "factual_panel.csv")
        assert panel["t"].max() == 10
        assert panel["t"].min() == 1
        # undiagnosed individuals carry a row for every timepoint
        counts = panel.groupby("id")["t"].max()
        base = pd.read_csv(out / "factual_baseline.csv")
        assert counts.max() == 10
        assert set(panel["id"]).issubset(set(base["id"]))

    def test_seed_flag_overrides(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", seed=1, output=str(tmp_path / "a"),
                           scenario={"id": 1, "n": 100})
        assert run("simulate", "--config", cfg, "--seed", 2, "--out", tmp_path / "b") == 0
        manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 2


class TestFitImputeEvaluate:
    def fit_config(self, tmp_path, **fit_overrides):
        fit = {"free_baseline_late": False, "tol_g": 1e-4, "max_iter": 300,
               "restart_grid": [[0.4, 0.1]]}
        fit.update(fit_overrides)
        return write_config(
            tmp_path / "fit.yaml",
            seed=7,
            output=str(tmp_path / "fit_out"),
            data={"baseline": str(tmp_path / "sim" / "factual_baseline.csv"),
                  "panel": str(tmp_path / "sim" / "factual_panel.csv"),
                  "horizon": 10},
            fit=fit,
            impute={"fit_artifact": str(tmp_path / "fit_out" / "fit.json"),
                    "reference": {"a_1": 0.0}},
        )

    def test_fit_impute_round_trip(self, sim_dir, capsys):
        cfg = self.fit_config(sim_dir)
        code = run("fit", "--config", cfg)
        assert code in (0, 3)
        fit_json = json.loads((sim_dir / "fit_out" / "fit.json").read_text())
        assert {"params", "log_likelihood", "converged"} <= set(fit_json)

        # warm start from the artifact converges immediately
        warm = write_config(
            sim_dir / "warm.yaml",
            seed=7,
            output=str(sim_dir / "warm_out"),
            data={"baseline": str(sim_dir / "sim" / "factual_baseline.csv"),
                  "panel": str(sim_dir / "sim" / "factual_panel.csv"),
                  "horizon": 10},
            fit={"free_baseline_late": False, "tol_g": 1e-4,
                 "init_artifact": str(sim_dir / "fit_out" / "fit.json")},
        )
        assert run("fit", "--config", warm) == 0
        warm_json = json.loads((sim_dir / "warm_out" / "fit.json").read_text())
        assert warm_json["iterations"] <= 2

        assert run("impute", "--config", cfg) == 0
        printed = capsys.readouterr().out
        assert "recalibration_factor" in printed and "n_clamped" in printed
        imputed = pd.read_csv(sim_dir / "fit_out" / "imputed.csv")
        assert list(imputed.columns) == ["id", "p_cf", "factor_applied", "d_observed", "d_cf"]
        base = pd.read_csv(sim_dir / "sim" / "factual_baseline.csv")
        ref = base["a_1"] == 0.0
        merged = imputed.merge(base[["id", "a_1"]], on="id")
        ref_rows = merged[merged["a_1"] == 0.0]
        assert (ref_rows["d_cf"] == ref_rows["d_observed"]).all()
        diagnosed = merged[merged["d_observed"] == 1]
        assert (diagnosed["d_cf"] == 1).all()

    def test_impossible_observation_reported(self, tmp_path, capsys):
        (tmp_path / "b.csv").write_text("id,x_1,x_2,a_1\n1,0.0,0.0,0\n2,0.1,0.2,1\n")
        (tmp_path / "p.csv").write_text("id,t,r\n1,1,2\n")
        cfg = write_config(tmp_path / "c.yaml",
                           output=str(tmp_path / "o"),
                           data={"baseline": str(tmp_path / "b.csv"),
                                 "panel": str(tmp_path / "p.csv"), "horizon": 3},
                           fit={"free_baseline_late": False, "restart_grid": []})
        assert run("fit", "--config", cfg) == 2
        err = capsys.readouterr().err
        assert err.startswith("impossible-observation:")
        assert "t=1" in err and "individual 1" in err

    def test_evaluate_writes_metric_tables(self, sim_dir):
        cfg = self.fit_config(sim_dir)
        run("fit", "--config", cfg)
        run("impute", "--config", cfg)
        ev = write_config(
            sim_dir / "ev.yaml",
            seed=7,
            output=str(sim_dir / "ev_out"),
            evaluate={
                "models": ["naive", "blind", "imputed", "ideal"],
                "training_baseline": str(sim_dir / "sim" / "factual_baseline.csv"),
                "training_panel": str(sim_dir / "sim" / "factual_panel.csv"),
                "imputed": str(sim_dir / "fit_out" / "imputed.csv"),
                "ideal_baseline": str(sim_dir / "sim" / "counterfactual_baseline.csv"),
                "ideal_panel": str(sim_dir / "sim" / "counterfactual_panel.csv"),
                "validation_baseline": str(sim_dir / "sim" / "counterfactual_baseline.csv"),
                "validation_panel": str(sim_dir / "sim" / "counterfactual_panel.csv"),
            },
        )
        assert run("evaluate", "--config", ev) == 0
        metrics = pd.read_csv(sim_dir / "ev_out" / "metrics.csv")
        assert set(metrics["model"]) == {"naive", "blind", "imputed", "ideal"}
        assert set(metrics["stratum"]) == {"overall", "a_1=0", "a_1=1"}
        assert (sim_dir / "ev_out" / "deciles.csv").exists()
        nb = pd.read_csv(sim_dir / "ev_out" / "net_benefit.csv")
        assert (nb["treat_none"] == 0.0).all()

    def test_evaluate_requires_inputs(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", output=str(tmp_path / "o"),
                           evaluate={"models": ["naive"]})
        assert run("evaluate", "--config", cfg) == 2


class TestReplicate:
    def test_single_replication_summary(self, tmp_path):
        out = tmp_path / "rep"
        cfg = write_config(
            tmp_path / "c.yaml",
            seed=5,
            output=str(out),
            scenario={"id": 1, "n": 1000, "n_validation": 1200},
            fit={"free_baseline_late": False, "tol_g": 1e-4, "max_iter": 300,
                 "restart_grid": [[0.4, 0.1]]},
            replicate={"replications": 1},
        )
        assert run("replicate", "--config", cfg) == 0
        summary = pd.read_csv(out / "params_summary.csv")
        per_rep = pd.read_csv(out / "params.csv")
        assert summary["empirical_se"].isna().all()
        merged = summary.merge(per_rep, on="parameter")
        np.testing.assert_allclose(merged["average_estimate"], merged["estimate"])
        metrics = pd.read_csv(out / "metrics_summary.csv")
        assert {"model", "stratum", "metric", "mean", "sd"} <= set(metrics.columns)
        assert (out / "deciles_summary.csv").exists()
        assert (out / "net_benefit_summary.csv").exists()
