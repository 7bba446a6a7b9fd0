"""End-to-end pipeline through the CLI: tiny but complete."""
import json
from pathlib import Path

import numpy as np
import pytest

from flowcast import data
from flowcast.cli import main

TINY_CONFIG = {
    "seed": 7,
    "data": {"h": 32, "w": 32, "n_train": 3, "n_val": 1, "n_test": 2,
             "max_speed": 0.7, "noise": 0.15},
    "backbone": {"hid_s": 4, "hid_t": 16, "n_t": 2, "steps": 6, "batch": 2},
    "rectifier": {"base": 8, "mults": [1, 2], "side_scales": [1], "steps": 4, "batch": 2},
    "generator": {"base": 8, "mults": [1, 2], "side_scales": [1], "steps": 4, "batch": 2},
    "optimizer": {"lr_max": 1e-3},
    "sampler": {"steps_rectifier": 2, "steps_generator": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny pipeline run shared by the read-only assertions below."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg = dict(TINY_CONFIG, out=str(root / "run"))
    cfg_path.write_text(json.dumps(cfg))
    assert main(["synth", "--config", str(cfg_path)]) == 0
    for stage in ("backbone", "rectifier", "generator"):
        assert main(["train", "--stage", stage, "--config", str(cfg_path)]) == 0
    assert main(["forecast", "--mode", "full", "--config", str(cfg_path)]) == 0
    assert main(["forecast", "--mode", "backbone_only", "--config", str(cfg_path)]) == 0
    assert main(["evaluate", "--config", str(cfg_path)]) == 0
    ltcsv = root / "run" / "reports" / "full" / "leadtime.csv"
    assert main(["plot", str(ltcsv), "--out", str(root / "run" / "plots")]) == 0
    return root, cfg_path, cfg


class TestPipelineArtifacts:
    def test_dataset_manifests(self, workspace):
        root, _, cfg = workspace
        manifest = json.loads((Path(cfg["out"]) / "dataset" / "manifest.json").read_text())
        assert set(manifest["splits"]) == {"train", "val", "test"}
        assert len(manifest["splits"]["train"]) == 3

    def test_manifest_written_per_command(self, workspace):
        root, _, cfg = workspace
        mdir = Path(cfg["out"]) / "manifests"
        names = {p.name for p in mdir.glob("*.json")}
        assert {"synth.json", "train_backbone.json", "train_rectifier.json",
                "train_generator.json", "forecast_full.json"} <= names
        synth = json.loads((mdir / "synth.json").read_text())
        assert "config_sha256" in synth and "config" in synth

    def test_loss_trace_rows_match_steps(self, workspace):
        root, _, cfg = workspace
        trace = (Path(cfg["out"]) / "checkpoints" / "backbone" / "loss_trace.csv").read_text()
        rows = trace.strip().splitlines()
        assert rows[0] == "step,loss"
        assert len(rows) - 1 == cfg["backbone"]["steps"]

    def test_forecast_outputs_and_nfe(self, workspace):
        root, _, cfg = workspace
        fc_dir = Path(cfg["out"]) / "forecasts" / "full"
        manifest = json.loads((fc_dir / "run_manifest.json").read_text())
        assert len(manifest["files"]) == 2  # test split size
        arr = data.load_tensor(fc_dir / manifest["files"][0])
        assert arr.shape == (20, 1, 32, 32)
        # documented convention: n=4 segments, first rect segment billed
        steps = cfg["sampler"]["steps_rectifier"]
        assert manifest["nfe"] == steps * 4 + steps * 4
        assert manifest["nfe_sampled"] == steps * 4 + steps * 3
        assert "checkpoints" in manifest and "backbone" in manifest["checkpoints"]

    def test_backbone_only_equals_backbone_forward(self, workspace):
        root, _, cfg = workspace
        from flowcast.backbone import backbone_forward
        from flowcast.checkpoint import load_checkpoint
        from flowcast.backbone import Backbone, BackboneConfig

        payload = load_checkpoint(Path(cfg["out"]) / "checkpoints" / "backbone", "backbone")
        model = Backbone(BackboneConfig.from_dict(payload["manifest"]["config"]),
                         np.random.default_rng(0))
        model.param_store().load_state(payload["state"])
        splits, _ = data.load_dataset(Path(cfg["out"]) / "dataset")
        fc_dir = Path(cfg["out"]) / "forecasts" / "backbone_only"
        manifest = json.loads((fc_dir / "run_manifest.json").read_text())
        got = data.load_tensor(fc_dir / manifest["files"][0])
        np.testing.assert_array_equal(got, backbone_forward(model, splits["test"][0].input))

    def test_report_fields(self, workspace):
        root, _, cfg = workspace
        report = json.loads((Path(cfg["out"]) / "reports" / "full" / "report.json").read_text())
        for key in ("csi", "csi4", "csi16", "hss", "ssim"):
            assert key in report

    def test_plot_has_20_point_polyline(self, workspace):
        root, _, cfg = workspace
        svg = (Path(cfg["out"]) / "plots" / "csi.svg").read_text()
        assert svg.count("<polyline") == 1
        points = svg.split('points="')[1].split('"')[0].split()
        assert len(points) == 20

    def test_plot_deterministic_bytes(self, workspace):
        root, _, cfg = workspace
        ltcsv = Path(cfg["out"]) / "reports" / "full" / "leadtime.csv"
        out_a = Path(cfg["out"]) / "plots_a"
        out_b = Path(cfg["out"]) / "plots_b"
        assert main(["plot", str(ltcsv), "--out", str(out_a)]) == 0
        assert main(["plot", str(ltcsv), "--out", str(out_b)]) == 0
        assert (out_a / "csi.svg").read_bytes() == (out_b / "csi.svg").read_bytes()

    def test_two_reports_two_polylines(self, workspace, tmp_path):
        root, _, cfg = workspace
        full_csv = Path(cfg["out"]) / "reports" / "full" / "leadtime.csv"
        assert main(["evaluate", "--config", str(workspace[1]),
                     "--forecasts", str(Path(cfg["out"]) / "forecasts" / "backbone_only")]) == 0
        bb_csv = Path(cfg["out"]) / "reports" / "backbone_only" / "leadtime.csv"
        assert main(["plot", str(full_csv), str(bb_csv), "--out", str(tmp_path)]) == 0
        svg = (tmp_path / "csi.svg").read_text()
        assert svg.count("<polyline") == 2


class TestFailureModes:
    def test_rectifier_without_backbone_exits_3(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(dict(TINY_CONFIG, out=str(tmp_path / "run"))))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        assert main(["train", "--stage", "rectifier", "--config", str(cfg_path)]) == 3

    def test_synth_existing_dir_needs_force(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(dict(TINY_CONFIG, out=str(tmp_path / "run"))))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        assert main(["synth", "--config", str(cfg_path)]) == 2
        assert main(["synth", "--config", str(cfg_path), "--force"]) == 0

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"seed": 1, "bogus_key": True}))
        assert main(["synth", "--config", str(cfg_path)]) == 2

    def test_invalid_grid_exits_2(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"data": {"h": 48}, "out": str(tmp_path / "run")}))
        assert main(["synth", "--config", str(cfg_path)]) == 2

    def test_forecast_without_dataset_exits_3(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(dict(TINY_CONFIG, out=str(tmp_path / "run"))))
        assert main(["forecast", "--config", str(cfg_path)]) == 3

    def test_malformed_csv_exits_2(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("lead,threshold,metric,value\n1,2,csi,notanumber\n")
        assert main(["plot", str(bad), "--out", str(tmp_path / "p")]) == 2

    def test_mode_checkpoint_mismatch_exits_2(self, workspace):
        root, cfg_path, cfg = workspace
        # the stored generator was trained as "standard"; residual mode must refuse it
        assert main(["forecast", "--mode", "no_rectifier_residual", "--config", str(cfg_path)]) == 2


class TestAblationVariants:
    def test_residual_variant_end_to_end(self, tmp_path):
        cfg = dict(TINY_CONFIG, out=str(tmp_path / "run"))
        cfg["generator"] = dict(cfg["generator"], variant="no_rectifier_residual")
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        assert main(["train", "--stage", "backbone", "--config", str(cfg_path)]) == 0
        assert main(["train", "--stage", "generator", "--config", str(cfg_path)]) == 0
        assert main(["forecast", "--mode", "no_rectifier_residual", "--config", str(cfg_path)]) == 0
        fc_dir = Path(cfg["out"]) / "forecasts" / "no_rectifier_residual"
        manifest = json.loads((fc_dir / "run_manifest.json").read_text())
        arr = data.load_tensor(fc_dir / manifest["files"][0])
        assert arr.shape == (20, 1, 32, 32)
        assert arr.min() >= 0.0 and arr.max() <= 1.0
        # full mode lacks its rectifier prerequisite here
        assert main(["forecast", "--mode", "full", "--config", str(cfg_path)]) == 3

    def test_no_generator_mode_end_to_end(self, workspace):
        root, cfg_path, cfg = workspace
        assert main(["forecast", "--mode", "no_generator", "--config", str(cfg_path)]) == 0
        fc_dir = Path(cfg["out"]) / "forecasts" / "no_generator"
        manifest = json.loads((fc_dir / "run_manifest.json").read_text())
        assert len(manifest["files"]) == 2


class TestEvaluateAlignment:
    def test_gt_vs_itself_scores_one(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        out = tmp_path / "run"
        cfg_path.write_text(json.dumps(dict(TINY_CONFIG, out=str(out))))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        splits, _ = data.load_dataset(out / "dataset")
        fc_dir = out / "forecasts" / "full"
        fc_dir.mkdir(parents=True)
        files = []
        for i, s in enumerate(splits["test"]):
            rel = f"forecast_{i:04d}.rten"
            data.save_tensor(fc_dir / rel, s.target)
            files.append(rel)
        (fc_dir / "run_manifest.json").write_text(json.dumps(
            {"mode": "full", "files": files, "nfe": 0}))
        assert main(["evaluate", "--config", str(cfg_path)]) == 0
        report = json.loads((out / "reports" / "full" / "report.json").read_text())
        assert report["csi"] == 1.0 and report["hss"] == 1.0
        assert report["ssim"] == pytest.approx(1.0)

    def test_misaligned_counts_exit_2(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        out = tmp_path / "run"
        cfg_path.write_text(json.dumps(dict(TINY_CONFIG, out=str(out))))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        fc_dir = out / "forecasts" / "full"
        fc_dir.mkdir(parents=True)
        (fc_dir / "run_manifest.json").write_text(json.dumps(
            {"mode": "full", "files": ["only_one.rten"], "nfe": 0}))
        assert main(["evaluate", "--config", str(cfg_path)]) == 2


class TestReproducibility:
    def test_synth_rerun_byte_identical(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        out = tmp_path / "run"
        cfg_path.write_text(json.dumps(dict(TINY_CONFIG, out=str(out))))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        first = {p.name: p.read_bytes() for p in (out / "dataset" / "samples").iterdir()}
        manifest_a = (out / "dataset" / "manifest.json").read_bytes()
        assert main(["synth", "--config", str(cfg_path), "--force"]) == 0
        second = {p.name: p.read_bytes() for p in (out / "dataset" / "samples").iterdir()}
        assert first == second
        assert manifest_a == (out / "dataset" / "manifest.json").read_bytes()

    def test_resume_continues_step_counter(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        out = tmp_path / "run"
        cfg_path.write_text(json.dumps(dict(TINY_CONFIG, out=str(out))))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        assert main(["train", "--stage", "backbone", "--config", str(cfg_path), "--steps", "4"]) == 0
        ck = json.loads((out / "checkpoints" / "backbone" / "checkpoint.json").read_text())
        assert ck["step"] == 4
        assert main(["train", "--stage", "backbone", "--config", str(cfg_path),
                     "--steps", "3", "--resume"]) == 0
        ck = json.loads((out / "checkpoints" / "backbone" / "checkpoint.json").read_text())
        assert ck["step"] == 7
        trace = (out / "checkpoints" / "backbone" / "loss_trace.csv").read_text().strip().splitlines()
        assert len(trace) - 1 == 7
        assert trace[1].startswith("0,") and trace[-1].startswith("6,")
