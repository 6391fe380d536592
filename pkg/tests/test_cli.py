"""End-to-end command line workflow on a tiny configuration."""

import json
import os

import pytest

from cmntm.cascade import CascadeConfig
from cmntm.cli import main
from cmntm.config import TrainConfig, config_json
from cmntm.synthdata import TaskConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file, generated data, and one trained checkpoint per model kind."""
    root = tmp_path_factory.mktemp("cli")
    task = TaskConfig(feature_dim=8, blocks=4, max_turns=2, db_size=16, seed=0)
    cascade = CascadeConfig(num_stages=2, mem_locations=4, mem_width=4,
                            hidden_size=8, feature_dim=8)
    cfg = TrainConfig(model="cmntm", cascade=cascade, task=task, epochs=1,
                      batch_size=4, eval_batch_size=8, train_count=8, val_count=6)
    cfg_path = root / "cfg.json"
    cfg_path.write_text(config_json(cfg))
    lstm_path = root / "lstm.json"
    raw = json.loads(config_json(cfg))
    raw["model"] = "lstm"
    lstm_path.write_text(json.dumps(raw))

    data_dir = str(root / "data")
    assert main(["gen-data", "--config", str(cfg_path), "--out", data_dir]) == 0

    run_dir = str(root / "run")
    assert main(["train", "--config", str(cfg_path), "--data", data_dir,
                 "--out", run_dir]) == 0
    lstm_dir = str(root / "lstm_run")
    assert main(["train", "--config", str(lstm_path), "--data", data_dir,
                 "--out", lstm_dir]) == 0
    return {"root": root, "cfg": str(cfg_path), "data": data_dir,
            "ckpt": f"{run_dir}/checkpoint.bin",
            "baseline_ckpt": f"{lstm_dir}/checkpoint.bin"}


class TestCli:
    def test_gen_data_wrote_both_splits(self, workspace):
        assert os.path.exists(f"{workspace['data']}/train.jsonl")
        assert os.path.exists(f"{workspace['data']}/val.jsonl")

    def test_train_wrote_artifacts(self, workspace):
        assert os.path.exists(workspace["ckpt"])
        assert os.path.exists(os.path.join(os.path.dirname(workspace["ckpt"]), "metrics.csv"))

    def test_eval_prints_recall_report(self, workspace, capsys):
        rc = main(["eval", "--checkpoint", workspace["ckpt"],
                   "--data", f"{workspace['data']}/val.jsonl"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report) >= {"r1", "r5", "r8", "r10", "mean_r5_r8"}

    def test_gradcheck_passes_on_small_model(self, capsys):
        rc = main(["gradcheck", "--stages", "1", "--locations", "3", "--width", "3",
                   "--feature-dim", "4", "--hidden", "4", "--turns", "2", "--batch", "2"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "PASS" in out

    def test_gradcheck_fails_on_impossible_tolerance(self, capsys):
        rc = main(["gradcheck", "--stages", "1", "--locations", "3", "--width", "3",
                   "--feature-dim", "4", "--hidden", "4", "--turns", "2", "--batch", "2",
                   "--tol", "1e-15"])
        assert rc == 1
        assert "FAIL" in capsys.readouterr().out

    def test_turn_importance_command(self, workspace, capsys):
        out_dir = str(workspace["root"] / "ti")
        rc = main(["turn-importance", "--checkpoint", workspace["ckpt"],
                   "--baseline-checkpoint", workspace["baseline_ckpt"],
                   "--data", f"{workspace['data']}/val.jsonl", "--out", out_dir])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out)
        assert "spread" in summary and set(summary["spread"]) == {"memory", "memoryless"}
        assert os.path.exists(f"{out_dir}/turn_importance.json")

    def test_turn_order_command(self, workspace, capsys):
        rc = main(["turn-order", "--checkpoint", workspace["ckpt"],
                   "--data", f"{workspace['data']}/val.jsonl", "--count", "4"])
        assert rc == 0
        assert "mean_top5_overlap" in json.loads(capsys.readouterr().out)

    def test_memory_retention_command(self, workspace, capsys):
        rc = main(["memory-retention", "--checkpoint", workspace["ckpt"],
                   "--data", f"{workspace['data']}/val.jsonl"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert len(report["stateful"]) == 2

    def test_time_command(self, workspace, capsys):
        out_dir = str(workspace["root"] / "timing")
        rc = main(["time", "--config", workspace["cfg"], "--stages", "1",
                   "--sizes", "4x4", "--txns", "2", "--warmup", "1",
                   "--out", out_dir, "--no-check"])
        assert rc == 0
        assert "ms/txn" in capsys.readouterr().out
        assert os.path.exists(f"{out_dir}/timing.csv")

    def test_unknown_split_is_a_clean_error(self, workspace, tmp_path, capsys):
        rc = main(["gen-data", "--config", workspace["cfg"],
                   "--out", str(tmp_path), "--splits", "dev"])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_seed_flag_changes_initialization(self, workspace, tmp_path):
        d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["train", "--config", workspace["cfg"], "--data", workspace["data"],
                     "--out", d1, "--seed", "5"]) == 0
        assert main(["train", "--config", workspace["cfg"], "--data", workspace["data"],
                     "--out", d2, "--seed", "6"]) == 0
        assert (open(f"{d1}/checkpoint.bin", "rb").read()
                != open(f"{d2}/checkpoint.bin", "rb").read())
