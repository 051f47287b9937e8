"""Command-line interface: outputs, exit codes, and byte-level determinism."""

import csv
import json
import logging
import shutil
import subprocess
import sys

import click
import pytest
from click.testing import CliRunner

from uncfuse.cli import main, parse_fusion_mode
from uncfuse.detector import FusionModel, ProposalModel
from uncfuse.synthworld import read_dataset

# bind the root logging handler to the real stderr before any CliRunner
# invocation captures sys.stderr; basicConfig inside the CLI then no-ops
logging.basicConfig(level=logging.WARNING)

TINY_CFG = """\
seed: 0
n_train: 3
n_test: 2
train_lidar:
  steps: 12
train_fusion:
  steps: 6
robustness:
  sigmas: [0.0, 0.2]
"""


def run_cli(args, **kwargs):
    result = CliRunner().invoke(main, args, catch_exceptions=False, **kwargs)
    return result


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: tiny config, generated data, trained checkpoints."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.yaml"
    cfg.write_text(TINY_CFG)
    data = root / "data"
    r = run_cli(["gen", "--config", str(cfg), "--out", str(data)])
    assert r.exit_code == 0, r.output
    lidar = root / "lidar"
    r = run_cli(["train-lidar", "--config", str(cfg), "--out", str(lidar),
                 "--data", str(data / "train.jsonl")])
    assert r.exit_code == 0, r.output
    fusion = root / "fusion"
    r = run_cli(["train-fusion", "--config", str(cfg), "--out", str(fusion),
                 "--data", str(data / "train.jsonl"),
                 "--proposal", str(lidar / "proposal.json")])
    assert r.exit_code == 0, r.output
    return {"root": root, "cfg": cfg, "data": data, "lidar": lidar,
            "fusion": fusion}


def test_gen_outputs_and_manifest(ws):
    data = ws["data"]
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "gen"
    assert manifest["n_train"] == 3 and manifest["n_test"] == 2
    assert manifest["seed"] == 0 and manifest["paper_mode"] is False
    assert manifest["format"] == "jsonl-v1"
    assert len(manifest["config_hash"]) == 64
    train = read_dataset(data / "train.jsonl")
    test = read_dataset(data / "test.jsonl")
    assert [f.frame_id for f in train] == [f"train-{i:06d}" for i in range(3)]
    assert [f.frame_id for f in test] == [f"test-{i:06d}" for i in range(2)]


def test_gen_repeat_is_byte_identical(ws, tmp_path):
    r = run_cli(["gen", "--config", str(ws["cfg"]), "--out", str(tmp_path)])
    assert r.exit_code == 0
    for name in ("train.jsonl", "test.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes() == \
            (ws["data"] / name).read_bytes(), name


def test_gen_workers_match_serial(ws, tmp_path):
    r = run_cli(["gen", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--workers", "2"])
    assert r.exit_code == 0
    assert (tmp_path / "train.jsonl").read_bytes() == \
        (ws["data"] / "train.jsonl").read_bytes()


def test_gen_zero_and_negative_counts(ws, tmp_path):
    r = run_cli(["gen", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--n-train", "0", "--n-test", "1"])
    assert r.exit_code == 0
    assert (tmp_path / "train.jsonl").exists()
    assert read_dataset(tmp_path / "train.jsonl") == []
    assert json.loads((tmp_path / "manifest.json").read_text())["n_train"] == 0
    r = run_cli(["gen", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--n-train", "-1"])
    assert r.exit_code == 2


def test_bad_config_paths(tmp_path):
    r = run_cli(["gen", "--config", str(tmp_path / "missing.yaml"),
                 "--out", str(tmp_path)])
    assert r.exit_code == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("no_such_key: 1\n")
    r = run_cli(["gen", "--config", str(bad), "--out", str(tmp_path)])
    assert r.exit_code == 2


def test_train_lidar_outputs(ws):
    ProposalModel.load(ws["lidar"] / "proposal.json")  # loadable
    blob = json.loads((ws["lidar"] / "proposal.json").read_text())
    assert blob["meta"]["probabilistic"] is True
    with open(ws["lidar"] / "loss_lidar.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    assert list(rows[0]) == ["step", "loss_cls", "loss_reg", "lr"]
    assert [int(r["step"]) for r in rows] == list(range(12))
    assert {float(r["lr"]) for r in rows} == {0.02}
    for r in rows:
        float(r["loss_cls"]), float(r["loss_reg"])


def test_train_lidar_repeat_is_byte_identical(ws, tmp_path):
    r = run_cli(["train-lidar", "--config", str(ws["cfg"]),
                 "--out", str(tmp_path),
                 "--data", str(ws["data"] / "train.jsonl")])
    assert r.exit_code == 0
    for name in ("proposal.json", "loss_lidar.csv"):
        assert (tmp_path / name).read_bytes() == \
            (ws["lidar"] / name).read_bytes(), name


def test_train_lidar_deterministic_flag(ws, tmp_path):
    r = run_cli(["train-lidar", "--config", str(ws["cfg"]),
                 "--out", str(tmp_path), "--deterministic",
                 "--data", str(ws["data"] / "train.jsonl")])
    assert r.exit_code == 0
    ProposalModel.load(tmp_path / "proposal.json")
    blob = json.loads((tmp_path / "proposal.json").read_text())
    assert blob["meta"]["probabilistic"] is False


def test_train_fusion_outputs(ws):
    fusion = FusionModel.load(ws["fusion"] / "fusion.json")
    assert fusion.mode == "learned_sampling"
    with open(ws["fusion"] / "loss_fusion.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6


def test_fusion_mode_parsing():
    assert parse_fusion_mode("learned") == ("learned_sampling", None)
    assert parse_fusion_mode("learned_sampling") == ("learned_sampling", None)
    assert parse_fusion_mode("baseline") == ("baseline", None)
    assert parse_fusion_mode("no_sampling") == ("no_sampling", None)
    assert parse_fusion_mode("fixed:0.25") == ("fixed_sigma", 0.25)
    assert parse_fusion_mode("fixed_sigma") == ("fixed_sigma", None)
    for bad in ("fixed:abc", "fixed:-1", "bogus"):
        with pytest.raises(click.UsageError):
            parse_fusion_mode(bad)


def test_eval_with_model(ws, tmp_path):
    r = run_cli(["eval", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--data", str(ws["data"] / "test.jsonl"),
                 "--proposal", str(ws["lidar"] / "proposal.json"),
                 "--fusion", str(ws["fusion"] / "fusion.json")])
    assert r.exit_code == 0, r.output
    with open(tmp_path / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["metric", "bin_lo", "bin_hi", "iou_thresh",
                             "ap", "tp", "fp", "fn", "n_gt"]
    assert len(rows) == 9  # 3 metrics x 3 distance bins
    blob = json.loads((tmp_path / "report.json").read_text())
    assert set(blob["macro_ap"]) == {"bev", "3d", "2d"}


def test_eval_perfect_detections_scores_one(ws, tmp_path):
    frames = read_dataset(ws["data"] / "test.jsonl")
    det_path = tmp_path / "dets.jsonl"
    with open(det_path, "w") as fh:
        for f in frames:
            for obj in f.objects:
                fh.write(json.dumps({"frame_id": f.frame_id,
                                     "box": obj.box.to_dict(),
                                     "score": 0.9}) + "\n")
    r = run_cli(["eval", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--data", str(ws["data"] / "test.jsonl"),
                 "--detections", str(det_path)])
    assert r.exit_code == 0, r.output
    with open(tmp_path / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    populated = [row for row in rows if int(row["n_gt"]) > 0]
    assert populated
    for row in populated:
        assert float(row["ap"]) == 1.0
        assert int(row["fp"]) == 0 and int(row["fn"]) == 0
    blob = json.loads((tmp_path / "report.json").read_text())
    assert all(v == 1.0 for v in blob["macro_ap"].values())


def test_eval_requires_model_or_detections(ws, tmp_path):
    r = run_cli(["eval", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--data", str(ws["data"] / "test.jsonl")])
    assert r.exit_code == 2
    r = run_cli(["eval", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--data", str(tmp_path / "nope.jsonl"),
                 "--detections", str(tmp_path / "nope2.jsonl")])
    assert r.exit_code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(ws, tmp_path):
    cfg = tmp_path / "hot.yaml"
    cfg.write_text(TINY_CFG.replace("train_lidar:\n  steps: 12",
                                    "train_lidar:\n  steps: 12\n  lr: 1.0e+18"))
    r = CliRunner().invoke(main, ["train-lidar", "--config", str(cfg),
                                  "--out", str(tmp_path),
                                  "--data", str(ws["data"] / "train.jsonl")])
    assert r.exit_code == 3
    assert (tmp_path / "loss_lidar.csv").exists()
    assert not (tmp_path / "proposal.json").exists()


def test_matrix_rows_and_summary(ws, tmp_path):
    args = ["matrix", "--config", str(ws["cfg"]), "--out", str(tmp_path),
            "--train-data", str(ws["data"] / "train.jsonl"),
            "--test-data", str(ws["data"] / "test.jsonl"), "--seeds", "0"]
    r = run_cli(args)
    assert r.exit_code == 0, r.output
    with open(tmp_path / "matrix.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 9  # 3 variants x (3 metrics x 3 bins)
    assert {row["variant"] for row in rows} == \
        {"baseline", "modelling_uncertainty", "ours"}
    assert all(row["status"] == "ok" for row in rows)
    blob = json.loads((tmp_path / "matrix.json").read_text())
    assert blob["seeds"] == [0] and blob["ablation"] is False
    assert any(k.startswith("ours/") for k in blob["mean_ap"])
    again = tmp_path / "again"
    r = run_cli(args[:4] + [str(again)] + args[5:])
    assert r.exit_code == 0
    assert (again / "matrix.csv").read_bytes() == \
        (tmp_path / "matrix.csv").read_bytes()


def test_matrix_ablation_variants(ws, tmp_path):
    r = run_cli(["matrix", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--train-data", str(ws["data"] / "train.jsonl"),
                 "--test-data", str(ws["data"] / "test.jsonl"),
                 "--seeds", "0", "--ablation"])
    assert r.exit_code == 0, r.output
    with open(tmp_path / "matrix.csv", newline="") as fh:
        variants = {row["variant"] for row in csv.DictReader(fh)}
    assert {"fixed_sigma_0.10", "fixed_sigma_0.15", "fixed_sigma_0.30",
            "ours_all_dims"} <= variants


def test_robust_outputs(ws, tmp_path):
    spec = f"ours={ws['lidar'] / 'proposal.json'}:{ws['fusion'] / 'fusion.json'}"
    r = run_cli(["robust", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--data", str(ws["data"] / "test.jsonl"), "--model", spec])
    assert r.exit_code == 0, r.output
    with open(tmp_path / "robust_curve.csv", newline="") as fh:
        curve = list(csv.DictReader(fh))
    assert list(curve[0]) == ["model", "sigma", "ap"]
    assert [(row["model"], float(row["sigma"])) for row in curve] == \
        [("ours", 0.0), ("ours", 0.2)]
    for row in curve:
        assert 0.0 <= float(row["ap"]) <= 1.0
    with open(tmp_path / "robust_detail.csv", newline="") as fh:
        detail = list(csv.DictReader(fh))
    assert len(detail) == 2 * 9
    r = run_cli(["robust", "--config", str(ws["cfg"]), "--out", str(tmp_path),
                 "--data", str(ws["data"] / "test.jsonl"),
                 "--model", "missing-colon"])
    assert r.exit_code == 2


@pytest.fixture(scope="module")
def analyze_ws(tmp_path_factory):
    """Longer proposal training so matched records exist for analyze."""
    root = tmp_path_factory.mktemp("cli_analyze")
    cfg = root / "cfg.yaml"
    cfg.write_text("seed: 5\nn_train: 8\nn_test: 0\ntrain_lidar:\n  steps: 200\n")
    r = run_cli(["gen", "--config", str(cfg), "--out", str(root / "data")])
    assert r.exit_code == 0
    r = run_cli(["train-lidar", "--config", str(cfg), "--seed", "0",
                 "--out", str(root / "lidar"),
                 "--data", str(root / "data" / "train.jsonl")])
    assert r.exit_code == 0
    return root


def test_analyze_outputs(analyze_ws, tmp_path):
    root = analyze_ws
    args = ["analyze", "--out", str(tmp_path),
            "--data", str(root / "data" / "train.jsonl"),
            "--proposal", str(root / "lidar" / "proposal.json")]
    r = run_cli(args)
    assert r.exit_code == 0, r.output
    for name in ("fit_u_reg.csv", "fit_u_cls.csv", "hist_u_reg.csv",
                 "hist_u_cls.csv", "hist_entropy.csv", "analysis.json"):
        assert (tmp_path / name).exists(), name
    with open(tmp_path / "fit_u_reg.csv", newline="") as fh:
        fit_rows = list(csv.DictReader(fh))
    assert list(fit_rows[0]) == ["term", "beta", "se", "t", "p"]
    assert fit_rows[0]["term"] == "intercept"
    blob = json.loads((tmp_path / "analysis.json").read_text())
    assert blob["n_records"] > 0
    again = tmp_path / "again"
    r = run_cli(args[:2] + [str(again)] + args[3:])
    assert r.exit_code == 0
    assert (again / "analysis.json").read_bytes() == \
        (tmp_path / "analysis.json").read_bytes()
    assert (again / "fit_u_reg.csv").read_bytes() == \
        (tmp_path / "fit_u_reg.csv").read_bytes()


def _cli_cmd():
    exe = shutil.which("uncfuse")
    if exe:
        return [exe]
    return [sys.executable, "-m", "uncfuse.cli"]


def test_log_env_controls_stderr(tmp_path):
    cmd = _cli_cmd() + ["gen", "--out", str(tmp_path / "a"),
                        "--n-train", "1", "--n-test", "0"]
    quiet = subprocess.run(cmd, capture_output=True, text=True,
                           env={"PATH": "/usr/bin:/bin:/usr/local/bin",
                                "UNCFUSE_LOG": "0"})
    assert quiet.returncode == 0, quiet.stderr
    assert "generating" not in quiet.stderr
    loud = subprocess.run(_cli_cmd() + ["gen", "--out", str(tmp_path / "b"),
                                        "--n-train", "1", "--n-test", "0"],
                          capture_output=True, text=True,
                          env={"PATH": "/usr/bin:/bin:/usr/local/bin",
                               "UNCFUSE_LOG": "1"})
    assert loud.returncode == 0, loud.stderr
    assert "generating 1 train / 0 test frames" in loud.stderr
