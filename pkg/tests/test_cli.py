import json
import subprocess
import sys

import pytest

from dmelab.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps({"image_size": 32, "seed": 3}))
    (root / "net.json").write_text(json.dumps({"input_size": 32, "blocks": [[4, 3, 1], [8, 3, 1]],
                                               "global_average_pool": False}))
    (root / "train.json").write_text(json.dumps({"learning_rate": 0.01, "ema_decay": 0.9, "total_steps": 5}))
    assert main(["generate", "--config", str(root / "synth.json"), "--patients", "16", "--out", str(root / "data")]) == 0
    assert main(["split", "--manifest", str(root / "data/manifest.csv"), "--fractions", "0.6,0,0.4",
                 "--out", str(root / "splits.csv")]) == 0
    opts = {"manifest": str(root / "data/manifest.csv"), "splits": str(root / "splits.csv"),
            "net": str(root / "net.json"), "train": str(root / "train.json")}
    (root / "opts.json").write_text(json.dumps(opts))
    assert main(["train", "--options", str(root / "opts.json"), "--out", str(root / "ckpt.json")]) == 0
    return root


def common(root):
    return ["--manifest", str(root / "data/manifest.csv"), "--splits", str(root / "splits.csv"),
            "--replicates", "20"]


def test_evaluate_and_verify(workspace):
    root = workspace
    out = root / "rep"
    assert main(["evaluate", "--ckpt", str(root / "ckpt.json"), *common(root), "--permutations", "20",
                 "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "report.json").read_text())
    assert set(doc["records"][0]["results"]["heads"]) == {"cidme", "srf", "irf"}
    assert main(["verify", "--report", str(out)]) == EXIT_OK
    hashes = json.loads((out / "hashes.json").read_text())
    hashes["roc.csv"] = "0" * 64
    (out / "hashes.json").write_text(json.dumps(hashes))
    assert main(["verify", "--report", str(out)]) == EXIT_RUNTIME


def test_sweeps(workspace):
    root = workspace
    assert main(["sweep-threshold", "--ckpt", str(root / "ckpt.json"), *common(root),
                 "--thresholds", "250,280,300,320", "--out", str(root / "thr")]) == EXIT_OK
    doc = json.loads((root / "thr" / "report.json").read_text())
    assert [p["threshold_um"] for p in doc["records"][0]["results"]["points"]] == [250, 280, 300, 320]
    assert main(["sweep-fraction", "--options", str(root / "opts.json"), "--fractions", "0.5,1.0",
                 "--replicates", "20", "--out", str(root / "frac")]) == EXIT_OK
    assert main(["sweep-crop", "--options", str(root / "opts.json"), "--centers", "fovea", "--radii", "1.0",
                 "--replicates", "20", "--out", str(root / "crop")]) == EXIT_OK
    assert main(["verify", "--report", str(root / "crop")]) == EXIT_OK


def test_secondary(workspace):
    root = workspace
    assert main(["generate", "--config", str(root / "synth.json"), "--secondary", "--patients", "10",
                 "--out", str(root / "sec")]) == 0
    assert main(["eval-secondary", "--ckpt", str(root / "ckpt.json"), "--manifest", str(root / "sec/manifest.csv"),
                 "--rule", "cst", "--cut", "300", "--replicates", "20", "--permutations", "20",
                 "--out", str(root / "secrep")]) == EXIT_OK
    # the primary manifest has no CST column
    assert main(["eval-secondary", "--ckpt", str(root / "ckpt.json"), "--manifest",
                 str(root / "data/manifest.csv"), "--out", str(root / "bad")]) == EXIT_VALIDATION


def test_flags_override_options(workspace, capsys):
    root = workspace
    (root / "split_opts.json").write_text(json.dumps({"manifest": str(root / "data/manifest.csv"),
                                                      "fractions": [0.5, 0.0, 0.5], "out": str(root / "s1.csv")}))
    assert main(["split", "--options", str(root / "split_opts.json")]) == 0
    assert "train=8" in capsys.readouterr().out
    assert main(["split", "--options", str(root / "split_opts.json"), "--fractions", "0.75,0,0.25"]) == 0
    assert "train=12" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["split", "--manifest", "does-not-exist.csv", "--out", "x.csv"],
    ["split", "--fractions", "a,b", "--manifest", "m.csv", "--out", "x.csv"],
    ["generate", "--patients", "0", "--out", "unused"],
    ["run", "--config", "missing.json", "--out", "unused"],
])
def test_validation_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_VALIDATION


def test_unknown_option_key(workspace, tmp_path):
    (tmp_path / "o.json").write_text(json.dumps({"frobnicate": 1}))
    assert main(["split", "--options", str(tmp_path / "o.json"), "--manifest", "m", "--out", "o"]) == EXIT_VALIDATION


def test_runtime_failure_exit_2(workspace, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    # output directory path runs through a regular file
    argv = ["evaluate", "--ckpt", str(workspace / "ckpt.json"), *common(workspace), "--permutations", "5",
            "--out", str(blocker / "sub")]
    assert main(argv) == EXIT_RUNTIME


def test_module_entry_point(workspace):
    proc = subprocess.run([sys.executable, "-m", "dmelab", "verify", "--report", str(workspace / "nope")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_VALIDATION
    assert "error" in proc.stderr
