"""CLI contracts: pipeline composition, manifests, error JSON, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from pairdis.artifacts import load_manifest
from pairdis.cli import main
from pairdis.schemas import ConfigValidationError, validate_config

MODEL = {"image_hw": 14, "kernel": 3, "conv_channels": [6, 12, 24],
         "latent_common": 5, "latent_specific": 3}


def _run(base: Path, command: str, cfg: dict, out_name: str, *extra) -> int:
    cfg_path = base / f"{out_name}.config.json"
    cfg_path.write_text(json.dumps(cfg))
    return main([command, "--config", str(cfg_path),
                 "--out", str(base / out_name), *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One shared tiny pipeline: data, pretrain, finetune."""
    base = tmp_path_factory.mktemp("cli")
    rc = _run(base, "gen-data", {
        "hw": 14, "n_images": 250, "variant": "R", "seed": 5,
        "train": {"n_neg": 120, "n_pos": 12},
        "test": {"n_neg": 30, "n_pos": 30}}, "labeled")
    assert rc == 0
    rc = _run(base, "gen-data", {
        "hw": 14, "n_images": 250, "variant": "R", "seed": 5,
        "train": {"n_neg": 120, "n_pos": 0},
        "test": {"n_neg": 10, "n_pos": 10}}, "negatives")
    assert rc == 0
    rc = _run(base, "pretrain", {
        "data": str(base / "negatives/data/train"), "model": MODEL,
        "train": {"epochs": 2, "batch_size": 40, "seed": 9}}, "pre")
    assert rc == 0
    rc = _run(base, "finetune", {
        "data": str(base / "labeled/data/train"),
        "checkpoint": str(base / "pre/checkpoint.bin"), "model": MODEL,
        "train": {"epochs": 2, "batch_size": 10, "seed": 9}}, "fine")
    assert rc == 0
    return base


class TestGenData:
    def test_artifacts_and_counts(self, pipeline):
        result = json.loads((pipeline / "labeled/result.json").read_text())
        assert result["train"]["n_pos"] == 12 and result["train"]["n_neg"] == 120
        assert (pipeline / "labeled/data/train.f32").exists()
        assert (pipeline / "labeled/data/train.meta.i32").exists()
        assert (pipeline / "labeled/data/test.json").exists()

    def test_manifest_lists_real_artifacts(self, pipeline):
        manifest = load_manifest(pipeline / "labeled/manifest.json")
        assert manifest.command == "gen-data"
        assert manifest.dataset_hash
        manifest.verify()  # every artifact exists and hashes match

    def test_same_seed_same_hash(self, pipeline, tmp_path):
        rc = _run(tmp_path, "gen-data", {
            "hw": 14, "n_images": 250, "variant": "R", "seed": 5,
            "train": {"n_neg": 120, "n_pos": 12},
            "test": {"n_neg": 30, "n_pos": 30}}, "again")
        assert rc == 0
        a = json.loads((pipeline / "labeled/result.json").read_text())
        b = json.loads((tmp_path / "again/result.json").read_text())
        assert a["train"]["hash"] == b["train"]["hash"]
        assert a["test"]["hash"] == b["test"]["hash"]


class TestTraining:
    def test_pretrain_artifacts(self, pipeline):
        assert (pipeline / "pre/checkpoint.bin").exists()
        assert (pipeline / "pre/checkpoint.bin.json").exists()
        assert (pipeline / "pre/curve.png").read_bytes()[:4] == b"\x89PNG"
        report = json.loads((pipeline / "pre/report.json").read_text())
        assert report["phase"] == "pretrain" and len(report["epochs"]) == 2
        lines = (pipeline / "pre/steps.jsonl").read_text().strip().splitlines()
        assert len(lines) == report["final_metrics"]["steps"]

    def test_finetune_checkpoint_has_classifier(self, pipeline):
        meta = json.loads((pipeline / "fine/checkpoint.bin.json").read_text())
        names = [t["name"] for t in meta["tensors"]]
        assert any(n.startswith("cls.") for n in names)
        assert any(n.startswith("enc.") for n in names)
        assert any(n.startswith("dec.") for n in names)

    def test_pretrain_determinism_across_runs(self, pipeline, tmp_path):
        rc = _run(tmp_path, "pretrain", {
            "data": str(pipeline / "negatives/data/train"), "model": MODEL,
            "train": {"epochs": 2, "batch_size": 40, "seed": 9}}, "pre2")
        assert rc == 0
        meta_a = json.loads((pipeline / "pre/checkpoint.bin.json").read_text())
        meta_b = json.loads((tmp_path / "pre2/checkpoint.bin.json").read_text())
        assert meta_a["sha256"] == meta_b["sha256"]


class TestEval:
    def test_result_fields(self, pipeline):
        rc = _run(pipeline, "eval", {
            "data": str(pipeline / "labeled/data/test"),
            "checkpoint": str(pipeline / "fine/checkpoint.bin"),
            "model": MODEL}, "ev")
        assert rc == 0
        result = json.loads((pipeline / "ev/result.json").read_text())
        assert {"accuracy", "tp", "tn", "fp", "fn"} <= set(result)
        assert result["tp"] + result["tn"] + result["fp"] + result["fn"] == 60

    def test_bitwise_reproducible(self, pipeline, tmp_path):
        cfg = {"data": str(pipeline / "labeled/data/test"),
               "checkpoint": str(pipeline / "fine/checkpoint.bin"),
               "model": MODEL}
        assert _run(tmp_path, "eval", cfg, "e1") == 0
        assert _run(tmp_path, "eval", cfg, "e2") == 0
        assert ((tmp_path / "e1/result.json").read_bytes()
                == (tmp_path / "e2/result.json").read_bytes())

    def test_rerun_from_manifest(self, pipeline, tmp_path):
        cfg = {"data": str(pipeline / "labeled/data/test"),
               "checkpoint": str(pipeline / "fine/checkpoint.bin"),
               "model": MODEL}
        assert _run(tmp_path, "eval", cfg, "m1") == 0
        rc = main(["eval", "--from-manifest", str(tmp_path / "m1/manifest.json"),
                   "--out", str(tmp_path / "m2")])
        assert rc == 0
        assert ((tmp_path / "m1/result.json").read_bytes()
                == (tmp_path / "m2/result.json").read_bytes())

    def test_pretrain_checkpoint_rejected(self, pipeline, tmp_path, capsys):
        cfg = {"data": str(pipeline / "labeled/data/test"),
               "checkpoint": str(pipeline / "pre/checkpoint.bin"),
               "model": MODEL}
        rc = _run(tmp_path, "eval", cfg, "bad")
        assert rc == 1
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"]["type"] == "CheckpointError"
        assert "classifier" in err["error"]["message"]


class TestUnsupervised:
    def test_kmeans_detect(self, pipeline):
        rc = _run(pipeline, "detect-unsup", {
            "data": str(pipeline / "labeled/data/test"),
            "checkpoint": str(pipeline / "pre/checkpoint.bin"),
            "model": MODEL, "method": "kmeans"}, "unsup")
        assert rc == 0
        result = json.loads((pipeline / "unsup/result.json").read_text())
        assert result["method"] == "kmeans" and 0 <= result["accuracy"] <= 1
        lines = (pipeline / "unsup/scores.csv").read_text().strip().splitlines()
        assert lines[0] == "pair,score,label" and len(lines) == 61


class TestVisualizationCommands:
    def test_interpolate(self, pipeline):
        rc = _run(pipeline, "interpolate", {
            "data": str(pipeline / "labeled/data/test"),
            "checkpoint": str(pipeline / "pre/checkpoint.bin"),
            "model": MODEL, "which": "common", "steps": 5, "pair_index": 3},
            "interp")
        assert rc == 0
        result = json.loads((pipeline / "interp/result.json").read_text())
        assert result["grid_shape"] == [14, 70]
        assert (pipeline / "interp" / result["image"]).exists()

    def test_interpolate_bad_index(self, pipeline, tmp_path, capsys):
        rc = _run(tmp_path, "interpolate", {
            "data": str(pipeline / "labeled/data/test"),
            "checkpoint": str(pipeline / "pre/checkpoint.bin"),
            "model": MODEL, "pair_index": 10_000}, "interp_bad")
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"]["type"] == "bad-argument"

    def test_project(self, pipeline):
        rc = _run(pipeline, "project", {
            "data": str(pipeline / "labeled/data/test"),
            "checkpoint": str(pipeline / "pre/checkpoint.bin"),
            "model": MODEL, "max_images": 60}, "proj")
        assert rc == 0
        for name in ("features.csv", "pca_common.csv", "pca_specific.csv",
                     "scatter_common.png", "scatter_specific.png"):
            assert (pipeline / "proj" / name).exists(), name
        result = json.loads((pipeline / "proj/result.json").read_text())
        assert result["n_images"] == 60


class TestAblateAndReport:
    def test_ablate(self, pipeline):
        rc = _run(pipeline, "ablate", {
            "axis": "invmax_on", "grid": [True, False],
            "data": {"negatives": str(pipeline / "negatives/data/train"),
                     "labeled": str(pipeline / "labeled/data/train"),
                     "test": str(pipeline / "labeled/data/test")},
            "model": MODEL,
            "pretrain": {"epochs": 1, "batch_size": 40, "seed": 3},
            "finetune": {"epochs": 1, "batch_size": 10, "seed": 3},
            "repeats": 1}, "ab")
        assert rc == 0
        rows = (pipeline / "ab/ablation.csv").read_text().strip().splitlines()
        assert rows[0] == "setting,repeat,accuracy" and len(rows) == 3
        assert (pipeline / "ab/ablation.png").exists()

    def test_report_aggregates(self, pipeline):
        rc = main(["report", str(pipeline), "--out", str(pipeline / "rep")])
        assert rc == 0
        summary = json.loads((pipeline / "rep/summary.json").read_text())
        commands = {r["command"] for r in summary["runs"]}
        assert {"gen-data", "pretrain", "finetune"} <= commands
        assert (pipeline / "rep/summary.csv").exists()

    def test_report_missing_dir(self, tmp_path, capsys):
        rc = main(["report", str(tmp_path / "nope"), "--out", str(tmp_path)])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"]["type"] == "bad-argument"


class TestErrorEnvelope:
    def test_missing_config_names_file(self, tmp_path, capsys):
        rc = main(["eval", "--config", str(tmp_path / "missing.json"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"]["type"] == "config-not-found"
        assert "missing.json" in err["error"]["message"]

    def test_unparseable_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        rc = main(["eval", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"]["type"] == "config-parse-error"

    def test_schema_violation_names_path(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"data": "x", "checkpoint": "y",
                                   "model": {"kernel": 0}}))
        rc = main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"]["type"] == "config-invalid"
        assert err["error"]["path"] == "$.model.kernel"

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"data": "x", "checkpoint": "y", "thresold": 0.5}))
        rc = main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit):
            main(["frobnicate"])


class TestSchemaUnit:
    def test_valid_config_passes(self):
        validate_config({"data": "a", "checkpoint": "b", "threshold": 0.3}, "eval")

    def test_nested_path_precision(self):
        with pytest.raises(ConfigValidationError) as exc:
            validate_config({"data": "a", "model": {"conv_channels": [1, 2]}},
                            "pretrain")
        assert exc.value.path == "$.model.conv_channels"

    def test_enum_path(self):
        with pytest.raises(ConfigValidationError) as exc:
            validate_config(
                {"data": "a", "train": {"loss": {"distance_kind": "euclid"}}},
                "pretrain")
        assert exc.value.path == "$.train.loss.distance_kind"