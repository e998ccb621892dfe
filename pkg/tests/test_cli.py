"""Command-line flows: synth -> train -> evaluate -> export, and exit codes."""

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from deconfrec.cli import main

SMALL_SETS = [
    "--set", "embed_dim=16",
    "--set", "latent_dim=8",
    "--set", "num_strata=4",
    "--set", "knn_k=5",
    "--set", "diffusion_steps=4",
    "--set", "epochs=2",
    "--set", "warm_epochs=1",
    "--set", "batch_size=512",
    "--set", "eval_ks=[5, 10]",
]


def run_cli(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "dataset"
    result = run_cli(
        "synth", "--out-dir", str(out), "--users", "80", "--items", "50",
        "--confounders", "4", "--visual-dim", "16", "--textual-dim", "12",
        "--seed", "3",
    )
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("cli") / "run"
    result = run_cli(
        "train", "--dataset-dir", str(dataset_dir), "--output-dir", str(out),
        "--seed", "3", *SMALL_SETS,
    )
    assert result.exit_code == 0, result.output
    return out


class TestSynth:
    def test_reports_files_and_counts(self, dataset_dir):
        names = {p.name for p in dataset_dir.iterdir()}
        assert "interactions.csv" in names or any("interactions" in n for n in names)
        result = run_cli(
            "synth", "--out-dir", str(dataset_dir), "--users", "80", "--items", "50",
            "--confounders", "4", "--visual-dim", "16", "--textual-dim", "12",
            "--seed", "3",
        )
        assert result.exit_code == 0
        assert "users: 80  items: 50" in result.output

    def test_degenerate_spec_exits_1(self, tmp_path):
        result = CliRunner().invoke(main, ["synth", "--out-dir", str(tmp_path / "x"),
                                           "--users", "0"])
        assert result.exit_code == 1
        assert "error" in result.stderr.lower()


class TestTrain:
    def test_artifacts_and_stdout(self, trained_dir):
        names = {p.name for p in trained_dir.iterdir()}
        assert {"checkpoint.pt", "manifest.json", "epochs.csv", "report.json",
                "report.csv", "config.json"} <= names
        config = json.loads((trained_dir / "config.json").read_text())
        assert config["embed_dim"] == 16 and config["seed"] == 3

    def test_stdout_summary_lines(self, dataset_dir, tmp_path):
        result = run_cli(
            "train", "--dataset-dir", str(dataset_dir), "--output-dir",
            str(tmp_path / "run"), "--seed", "3", *SMALL_SETS,
        )
        assert result.exit_code == 0
        assert "output_dir:" in result.output
        assert "best_epoch:" in result.output
        assert "test@5: recall=" in result.output
        assert "deconfounded@10: recall=" in result.output

    def test_rerun_writes_identical_report(self, dataset_dir, trained_dir, tmp_path):
        result = run_cli(
            "train", "--dataset-dir", str(dataset_dir), "--output-dir",
            str(tmp_path / "again"), "--seed", "3", *SMALL_SETS,
        )
        assert result.exit_code == 0
        first = (trained_dir / "report.json").read_bytes()
        second = (tmp_path / "again" / "report.json").read_bytes()
        assert first == second

    def test_ablation_flags_reach_config(self, dataset_dir, tmp_path):
        result = run_cli(
            "train", "--dataset-dir", str(dataset_dir), "--output-dir",
            str(tmp_path / "ablated"), "--seed", "3", "--disable-backdoor",
            "--disable-frontdoor", "--disable-dcd", *SMALL_SETS,
        )
        assert result.exit_code == 0
        config = json.loads((tmp_path / "ablated" / "config.json").read_text())
        assert config["disable_backdoor"] and config["disable_frontdoor"]
        assert config["disable_dcd"]

    def test_unknown_set_key_exits_1_listing_valid(self):
        result = CliRunner().invoke(
            main, ["train", "--synthetic", "--set", "embeddim=4"]
        )
        assert result.exit_code == 1
        assert "unknown config keys" in result.stderr
        assert "embed_dim" in result.stderr

    def test_malformed_set_pair_exits_1(self):
        result = CliRunner().invoke(main, ["train", "--synthetic", "--set", "epochs"])
        assert result.exit_code == 1
        assert "KEY=VALUE" in result.stderr

    def test_conflicting_sources_exit_1(self, dataset_dir):
        result = CliRunner().invoke(
            main, ["train", "--synthetic", "--dataset-dir", str(dataset_dir)]
        )
        assert result.exit_code == 1
        assert "pick one source" in result.stderr


class TestEvaluate:
    def test_matches_train_report(self, trained_dir, tmp_path):
        out = tmp_path / "eval.json"
        result = run_cli(
            "evaluate", str(trained_dir / "checkpoint.pt"),
            "-k", "5", "-k", "10", "--output", str(out),
        )
        assert result.exit_code == 0, result.output
        printed = json.loads(result.stdout)
        assert f"written: {out}" in result.stderr
        train_report = json.loads((trained_dir / "report.json").read_text())
        assert printed["metrics"] == train_report["metrics"]
        assert json.loads(out.read_text()) == printed

    def test_missing_checkpoint_exits_1(self):
        result = CliRunner().invoke(main, ["evaluate", "/no/such/checkpoint.pt"])
        assert result.exit_code == 1
        assert "checkpoint not found" in result.stderr


class TestExport:
    def test_environments_json(self, trained_dir, tmp_path):
        out = tmp_path / "envs.json"
        result = run_cli(
            "export", str(trained_dir / "checkpoint.pt"), "environments",
            "--output", str(out),
        )
        assert result.exit_code == 0, result.output
        records = json.loads(out.read_text())
        assert len(records) == 50
        assert all(0 <= r["stratum"] < 4 for r in records)

    def test_pruned_graph_tsv_and_reexport_identical(self, trained_dir, tmp_path):
        out = tmp_path / "pruned.tsv"
        result = run_cli(
            "export", str(trained_dir / "checkpoint.pt"), "pruned_graph",
            "--output", str(out),
        )
        assert result.exit_code == 0, result.output
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "user_id\titem_id\trho"
        first_bytes = out.read_bytes()
        run_cli("export", str(trained_dir / "checkpoint.pt"), "pruned_graph",
                "--output", str(out))
        assert out.read_bytes() == first_bytes

    def test_unknown_kind_rejected_by_choice(self, trained_dir):
        result = CliRunner().invoke(
            main, ["export", str(trained_dir / "checkpoint.pt"), "weights"]
        )
        assert result.exit_code == 2
        assert "Invalid value" in result.stderr


class TestTransport:
    def test_unreachable_server_exits_2(self):
        result = CliRunner().invoke(
            main, ["--server", "http://127.0.0.1:1", "synth", "--users", "5",
                   "--items", "4"],
        )
        assert result.exit_code == 2
        assert "transport error" in result.stderr
