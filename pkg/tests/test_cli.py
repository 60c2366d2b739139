import json
import os

import numpy as np
import pytest

from ladmim import checkpoint as ckpt
from ladmim import cli
from ladmim.config import ConfigError, RunConfig

TINY = {
    "hvq_epochs": 2,
    "lavit_epochs": 2,
    "n_masks": 2,
    "counts": {"train_normal": 14, "test_normal": 4,
               "test_logical": 4, "test_structural": 4},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny end-to-end run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TINY))
    data = str(root / "data")
    hvq = str(root / "hvq.ckpt")
    lavit = str(root / "lavit.ckpt")
    out = str(root / "out")
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", data]) == 0
    assert cli.main(["train-hvq", "--config", str(cfg_path),
                     "--data", data, "--out", hvq]) == 0
    assert cli.main(["train-lavit", "--config", str(cfg_path),
                     "--data", data, "--hvq", hvq, "--out", lavit]) == 0
    assert cli.main(["eval", "--config", str(cfg_path), "--data", data,
                     "--hvq", hvq, "--lavit", lavit, "--out", out]) == 0
    return {"root": root, "cfg": str(cfg_path), "data": data,
            "hvq": hvq, "lavit": lavit, "out": out}


class TestPipeline:
    def test_dataset_on_disk(self, workspace):
        manifest = json.loads(
            (workspace["root"] / "data" / "manifest.json").read_text())
        assert len(manifest["images"]) == sum(TINY["counts"].values())

    def test_checkpoints_load(self, workspace):
        meta, arrays = ckpt.load_checkpoint(workspace["hvq"])
        assert meta["stage"] == "hvq"
        assert any(k.startswith("backbone.") for k in arrays)
        meta, _ = ckpt.load_checkpoint(workspace["lavit"])
        assert meta["stage"] == "lavit"
        assert meta["hvq_checkpoint_hash"] == ckpt.payload_hash(workspace["hvq"])

    def test_eval_outputs(self, workspace):
        report = json.loads((workspace["root"] / "out" / "report.json").read_text())
        assert set(report["auroc"]) == {"hvq_only", "lavit_only", "fused"}
        csv_lines = (workspace["root"] / "out" / "scores.csv").read_text().splitlines()
        assert csv_lines[0] == "id,label,kind,s_hvq,s_lavit,s_fused"

    def test_eval_rerun_byte_identical(self, workspace):
        first = (workspace["root"] / "out" / "scores.csv").read_bytes()
        assert cli.main(["eval", "--config", workspace["cfg"],
                         "--data", workspace["data"], "--hvq", workspace["hvq"],
                         "--lavit", workspace["lavit"],
                         "--out", str(workspace["root"] / "out2")]) == 0
        second = (workspace["root"] / "out2" / "scores.csv").read_bytes()
        assert first == second

    def test_diagnose(self, workspace):
        out = str(workspace["root"] / "diag.json")
        assert cli.main(["diagnose", "--config", workspace["cfg"],
                         "--data", workspace["data"], "--hvq", workspace["hvq"],
                         "--out", out]) == 0
        report = json.loads(open(out).read())
        assert set(report["layers"]) == {"1", "2", "3", "4"}

    def test_ablate_restricted_modes(self, workspace):
        out = str(workspace["root"] / "ablate")
        assert cli.main(["ablate", "--config", workspace["cfg"],
                         "--data", workspace["data"], "--hvq", workspace["hvq"],
                         "--target", "histogram", "--out", out]) == 0
        summary = json.loads(open(os.path.join(out, "ablation.json")).read())
        assert list(summary["grid"]) == ["histogram"]


class TestExitCodes:
    def test_invalid_config_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"mask_ratio": 2.0}')
        code = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert code == 1

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert code == 1

    def test_unknown_config_key(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"learning_rate_typo": 1}')
        code = cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert code == 1

    def test_missing_dataset(self, tmp_path):
        code = cli.main(["train-hvq", "--data", str(tmp_path / "nowhere"),
                         "--out", str(tmp_path / "x.ckpt")])
        assert code == 2

    def test_missing_hvq_checkpoint(self, workspace, tmp_path):
        code = cli.main(["train-lavit", "--config", workspace["cfg"],
                         "--data", workspace["data"],
                         "--hvq", str(tmp_path / "nowhere.ckpt"),
                         "--out", str(tmp_path / "x.ckpt")])
        assert code == 2

    def test_wrong_stage_checkpoint(self, workspace, tmp_path):
        # a lavit checkpoint is not a valid tokenizer source
        code = cli.main(["eval", "--config", workspace["cfg"],
                         "--data", workspace["data"],
                         "--hvq", workspace["lavit"], "--lavit", workspace["lavit"],
                         "--out", str(tmp_path / "out")])
        assert code == 2

    def test_divergence_exit_code(self, workspace, tmp_path):
        cfg = dict(TINY)
        cfg["hvq_lr"] = 1e4
        cfg["hvq_epochs"] = 40
        cfg_path = tmp_path / "diverge.json"
        cfg_path.write_text(json.dumps(cfg))
        code = cli.main(["train-hvq", "--config", str(cfg_path),
                         "--data", workspace["data"],
                         "--out", str(tmp_path / "x.ckpt")])
        assert code == 3


class TestSeedFlag:
    def test_seed_overrides_all_streams(self, workspace, tmp_path):
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        for out in (out_a, out_b):
            assert cli.main(["gen-data", "--config", workspace["cfg"],
                             "--seed", "777", "--out", out]) == 0
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert a == b
        base = (workspace["root"] / "data" / "manifest.json").read_bytes()
        assert a != base
