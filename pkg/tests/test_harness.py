import json

import pytest
import yaml
from click.testing import CliRunner

from stepnm import harness, models
from stepnm.autoswitch import SwitchCriterion
from stepnm.cli import main as cli_main
from stepnm.errors import ConfigError

BASE_CONFIG = {
    "model": {"kind": "mlp_classifier", "layer_sizes": [2, 16, 2], "activation": "relu"},
    "data": {
        "kind": "blobs", "n_samples": 256, "n_features": 2, "n_classes": 2,
        "noise_std": 0.6, "seed": 0, "batch_size": 32,
    },
    "optimizer": {"lr": 0.005, "beta2": 0.999},
    "sparsity": {"fc2.weight": {"n": 1, "m": 4}},
    "recipe": {"kind": "step"},
    "switch": {"kind": "autoswitch", "clip": {"t_min_ratio": 0.1, "t_max_ratio": 0.5}},
    "total_steps": 120,
    "seeds": [1, 2],
    "output_dir": "runs",
}


def make_config(tmp_path, **overrides):
    doc = json.loads(json.dumps(BASE_CONFIG))  # deep copy
    for key, value in overrides.items():
        if value is None:
            doc.pop(key, None)
        else:
            doc[key] = value
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path, doc


class TestConfigParsing:
    def test_load_round_trip(self, tmp_path):
        path, _ = make_config(tmp_path)
        config = harness.load_config(path)
        assert config.total_steps == 120
        assert config.seeds == (1, 2)
        assert config.plan.get("fc2.weight").m == 4
        assert config.switch.clip_ratios == (0.1, 0.5)

    def test_unknown_top_level_key(self, tmp_path):
        path, _ = make_config(tmp_path, optimiser={"lr": 0.1})
        with pytest.raises(ConfigError, match="optimiser"):
            harness.load_config(path)

    def test_unknown_nested_key(self, tmp_path):
        path, _ = make_config(tmp_path, recipe={"kind": "step", "lambda_": 0.1})
        with pytest.raises(ConfigError, match="lambda_"):
            harness.load_config(path)

    def test_unknown_recipe_name(self, tmp_path):
        path, _ = make_config(tmp_path, recipe={"kind": "sgd"})
        with pytest.raises(ConfigError, match="sgd"):
            harness.load_config(path)

    def test_unknown_plan_layer_fails_before_compute(self, tmp_path):
        path, _ = make_config(tmp_path, sparsity={"fc9.weight": {"n": 1, "m": 4}})
        with pytest.raises(ConfigError, match="fc9.weight"):
            harness.load_config(path)

    def test_bad_divisibility_fails_before_compute(self, tmp_path):
        path, _ = make_config(tmp_path, sparsity={"fc1.weight": {"n": 1, "m": 4}})
        # fc1.weight is (16, 2): innermost extent 2 is not divisible by 4
        with pytest.raises(ConfigError, match="fc1.weight"):
            harness.load_config(path)

    def test_empty_seeds(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[])
        with pytest.raises(ConfigError, match="seeds"):
            harness.load_config(path)

    def test_csv_data_needs_path(self, tmp_path):
        path, _ = make_config(tmp_path, data={"kind": "csv"})
        with pytest.raises(ConfigError, match="path"):
            harness.load_config(path)

    def test_switch_step_ratio(self, tmp_path):
        path, _ = make_config(tmp_path, switch={"kind": "fixed", "step_ratio": 0.25})
        config = harness.load_config(path)
        assert config.criterion().step == 30


class TestRun:
    def test_byte_identical_reruns(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1])
        config = harness.load_config(path)
        harness.run(config, output_dir=tmp_path / "a")
        harness.run(config, output_dir=tmp_path / "b")
        a = (tmp_path / "a" / "trajectory_seed1.jsonl").read_bytes()
        b = (tmp_path / "b" / "trajectory_seed1.jsonl").read_bytes()
        assert a == b

    def test_trajectory_lines_self_describing(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1])
        config = harness.load_config(path)
        harness.run(config, output_dir=tmp_path / "out")
        lines = (tmp_path / "out" / "trajectory_seed1.jsonl").read_text().strip().split("\n")
        step_keys = {"kind", "step", "phase", "loss", "v_l1", "v_l2", "z", "z_geom",
                     "z_bar", "switched_at"}
        records = [json.loads(line) for line in lines]
        assert len(records) == config.total_steps + 1
        for rec in records[:-1]:
            assert set(rec) == step_keys
            assert rec["kind"] == "step"
        final = records[-1]
        assert final["kind"] == "final"
        assert set(final) == {"kind", "sparse_eval_loss", "dense_eval_loss",
                              "mask_sparsity", "switched_at"}
        steps = [r["step"] for r in records[:-1]]
        assert steps == sorted(steps)
        switches = [r["switched_at"] for r in records[:-1] if r["switched_at"] is not None]
        assert len(switches) <= 1

    def test_clipped_switch_lands_in_budget_window(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1, 2])
        config = harness.load_config(path)
        summary = harness.run(config, output_dir=tmp_path / "out")
        t = config.total_steps
        for t0 in summary.switched_at:
            assert t0 is not None
            assert 0.1 * t < t0 <= 0.5 * t

    def test_dense_recipe_records(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[3], recipe={"kind": "dense"}, switch=None)
        config = harness.load_config(path)
        harness.run(config, output_dir=tmp_path / "out")
        lines = (tmp_path / "out" / "trajectory_seed3.jsonl").read_text().strip().split("\n")
        records = [json.loads(line) for line in lines][:-1]
        assert all(r["phase"] == "precondition" for r in records)
        assert all(r["switched_at"] is None for r in records)

    def test_parallel_jobs_match_serial(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1, 2])
        config = harness.load_config(path)
        harness.run(config, output_dir=tmp_path / "serial", jobs=1)
        harness.run(config, output_dir=tmp_path / "parallel", jobs=2)
        for seed in (1, 2):
            a = (tmp_path / "serial" / f"trajectory_seed{seed}.jsonl").read_bytes()
            b = (tmp_path / "parallel" / f"trajectory_seed{seed}.jsonl").read_bytes()
            assert a == b

    def test_summary_written(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1])
        config = harness.load_config(path)
        harness.run(config, output_dir=tmp_path / "out")
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["n_seeds"] == 1
        assert "sparse_eval_loss_mean" in summary


class TestCompareSwitch:
    def test_rows_shape_and_no_switch(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1], recipe={"kind": "dense"}, switch=None,
                              total_steps=40)
        config = harness.load_config(path)
        # an autoswitch window of 1000 can never fill in 40 steps: no-switch row
        rows = harness.compare_switch(
            config, [SwitchCriterion(kind="autoswitch")], output_dir=tmp_path / "cmp"
        )
        assert len(rows) == 1
        assert rows[0]["t0"] is None
        assert rows[0]["note"] == "no-switch"
        assert (tmp_path / "cmp" / "compare_switch.csv").exists()

    def test_metric_window_must_fit(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1], recipe={"kind": "dense"}, switch=None,
                              total_steps=60)
        config = harness.load_config(path)
        from stepnm.errors import RangeError

        with pytest.raises(RangeError, match="profile too short"):
            harness.compare_switch(config, [SwitchCriterion(kind="relative")])

    def test_criteria_list_length_matches_rows(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1], recipe={"kind": "dense"}, switch=None,
                              total_steps=1200, optimizer={"lr": 0.005, "beta2": 0.99})
        config = harness.load_config(path)
        criteria = [SwitchCriterion(kind="relative"), SwitchCriterion(kind="staleness")]
        rows = harness.compare_switch(config, criteria)
        assert len(rows) == 2
        assert {r["criterion"] for r in rows} == {c.label() for c in criteria}
        for row in rows:
            assert row["t0"] is not None
            assert row["avg_change_metric"] >= 0.0


class TestAblation:
    def test_precondition_length_cells(self, tmp_path):
        config = harness.config_from_dict({**json.loads(json.dumps(BASE_CONFIG)),
                                           "seeds": [1],
                                           "ablation": {"precondition_ratios": [0.25, 1.0]}})
        rows = harness.ablation("precondition_length", config, output_dir=tmp_path / "abl")
        assert [r["cell"] for r in rows] == ["ratio=0.25", "ratio=1.0"]
        assert (tmp_path / "abl" / "ablation_precondition_length.csv").exists()

    def test_ratio_one_equals_dense_plus_final_mask(self, tmp_path):
        doc = json.loads(json.dumps(BASE_CONFIG))
        doc.update(seeds=[5], ablation={"precondition_ratios": [1.0]})
        config = harness.config_from_dict(doc)
        rows = harness.ablation("precondition_length", config)
        dense_doc = json.loads(json.dumps(BASE_CONFIG))
        dense_doc.update(seeds=[5], recipe={"kind": "dense"})
        dense_doc.pop("switch")
        dense_config = harness.config_from_dict(dense_doc)
        dense = harness._train_for_config(dense_config, 5)
        assert rows[0]["sparse_eval_loss"] == dense.sparse_eval_loss
        assert rows[0]["dense_eval_loss"] == dense.dense_eval_loss

    def test_fixed_vs_updated_cells(self):
        doc = json.loads(json.dumps(BASE_CONFIG))
        doc.update(seeds=[1], switch={"kind": "fixed", "step": 40})
        config = harness.config_from_dict(doc)
        rows = harness.ablation("fixed_vs_updated_variance", config)
        assert [r["cell"] for r in rows] == ["fixed_variance", "updated_variance"]
        assert all(r["switched_at"] == 40 for r in rows)

    def test_decaying_mask_cells(self):
        doc = json.loads(json.dumps(BASE_CONFIG))
        doc.update(seeds=[1], switch={"kind": "fixed", "step": 30},
                   ablation={"decay": {"m": 4, "stage_boundaries": [60]}})
        config = harness.config_from_dict(doc)
        rows = harness.ablation("decaying_mask", config)
        cells = {r["cell"]: r for r in rows}
        assert set(cells) == {"with_dense_phase", "without_dense_phase"}
        assert cells["with_dense_phase"]["switched_at"] == 30
        assert cells["without_dense_phase"]["switched_at"] is None

    def test_unknown_kind(self):
        config = harness.config_from_dict(json.loads(json.dumps(BASE_CONFIG)))
        with pytest.raises(ConfigError):
            harness.ablation("weight_decay", config)

    def test_missing_ratios(self):
        config = harness.config_from_dict(json.loads(json.dumps(BASE_CONFIG)))
        with pytest.raises(ConfigError, match="precondition_ratios"):
            harness.ablation("precondition_length", config)


class TestCLI:
    def test_run_command(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1], total_steps=60)
        runner = CliRunner()
        result = runner.invoke(cli_main, ["run", "--config", str(path),
                                          "--out", str(tmp_path / "out")])
        assert result.exit_code == 0, result.output
        assert "sparse eval loss" in result.output
        assert (tmp_path / "out" / "summary.json").exists()

    def test_run_seed_override(self, tmp_path):
        path, _ = make_config(tmp_path, seeds=[1, 2], total_steps=60)
        runner = CliRunner()
        result = runner.invoke(cli_main, ["run", "--config", str(path), "--seed", "7",
                                          "--out", str(tmp_path / "out")])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "out" / "trajectory_seed7.jsonl").exists()
        assert not (tmp_path / "out" / "trajectory_seed1.jsonl").exists()

    def test_validate_theorem_command(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(cli_main, [
            "validate-theorem", "--stream", "bernoulli", "--g", "1.0",
            "--beta2", "0.99", "--t0", "200", "--t", "800", "--delta", "0.05",
            "--trials", "50", "--seed", "3", "--out", str(tmp_path / "rep"),
        ])
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "rep" / "bound_report.json").read_text())
        assert report["per_step_bound_ok"] is True
        assert report["trials"] == 50

    def test_fd_check_command(self):
        runner = CliRunner()
        result = runner.invoke(cli_main, [
            "fd-check", "--kind", "mlp_classifier", "--layer-sizes", "3,4,2",
            "--activation", "tanh", "--instances", "2", "--batch", "4",
        ])
        assert result.exit_code == 0, result.output
        assert "worst max_rel_error" in result.output

    def test_ablate_command(self, tmp_path):
        doc = json.loads(json.dumps(BASE_CONFIG))
        doc.update(seeds=[1], total_steps=60, switch={"kind": "fixed", "step": 20})
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(doc))
        runner = CliRunner()
        result = runner.invoke(cli_main, ["ablate", "--config", str(path),
                                          "--kind", "fixed_vs_updated_variance",
                                          "--out", str(tmp_path / "abl")])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "abl" / "ablation_fixed_vs_updated_variance.csv").exists()

    def test_compare_switch_command(self, tmp_path):
        doc = json.loads(json.dumps(BASE_CONFIG))
        doc.update(seeds=[1], total_steps=1200, recipe={"kind": "dense"},
                   optimizer={"lr": 0.005, "beta2": 0.99})
        doc.pop("switch")
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(doc))
        runner = CliRunner()
        result = runner.invoke(cli_main, ["compare-switch", "--config", str(path),
                                          "--criteria", "relative,staleness",
                                          "--out", str(tmp_path / "cmp")])
        assert result.exit_code == 0, result.output
        assert "relative" in result.output


class TestCSVDataConfig:
    def test_run_from_csv(self, tmp_path):
        ds = models.gen_synthetic("blobs", 64, 2, n_classes=2, noise_std=0.4, seed=1, batch_size=16)
        csv_path = tmp_path / "data.csv"
        models.save_csv(ds, csv_path)
        doc = json.loads(json.dumps(BASE_CONFIG))
        doc.update(
            seeds=[1], total_steps=40,
            data={"kind": "csv", "path": str(csv_path), "batch_size": 16},
            switch={"kind": "fixed", "step": 20},
        )
        config = harness.config_from_dict(doc)
        summary = harness.run(config, output_dir=tmp_path / "out")
        assert summary.switched_at == (20,)
