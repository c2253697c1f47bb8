import json
import subprocess
import sys

import pytest

from se3nets.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--frames", "10", "--seed", "3", "--out", str(d / "data")]) == 0
    assert main(["train", "--data", str(d / "data"), "--epochs", "1", "--batch-size", "4",
                 "--out", str(d / "m.ckpt")]) == 0
    return d


def test_gen_variants(tmp_path):
    assert main(["gen", "--family", "arm", "--frames", "2", "--out", str(tmp_path / "arm")]) == 0
    assert main(["gen", "--frames", "2", "--depth-noise", "0.0075", "--depth-scaled", "--assoc-window", "9",
                 "--assoc-thresh", "0.1", "--out", str(tmp_path / "noisy")]) == 0
    manifest = json.loads((tmp_path / "noisy" / "manifest.json").read_text())
    assert manifest["noise"]["assoc_window"] == 9 and manifest["noise"]["depth_scaled"] is True


def test_eval_writes_report(workdir, capsys):
    report = workdir / "report.csv"
    assert main(["eval", "--ckpt", str(workdir / "m.ckpt"), "--data", str(workdir / "data"),
                 "--report", str(report)]) == 0
    row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert row["frames"] == 3 and row["flow_mse_cm"] >= 0
    lines = report.read_text().splitlines()
    assert lines[0].startswith("# flow_mse_cm") and lines[1].startswith("variant,")


def test_rollout_with_render(workdir, capsys):
    out = workdir / "roll"
    assert main(["rollout", "--ckpt", str(workdir / "m.ckpt"), "--data", str(workdir / "data"), "--steps", "3",
                 "--render", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.count("step ") >= 3 and "rigidity" in text
    assert len(list(out.glob("*.ppm"))) == 7


def test_gradcheck_module(capsys):
    assert main(["gradcheck", "--module", "se3"]) == 0
    assert "PASS se3." in capsys.readouterr().out


def test_experiment_command(workdir, capsys):
    assert main(["experiment", "--name", "depth_noise", "--data", str(workdir / "data"), "--epochs", "1",
                 "--out", str(workdir / "exp"), "--conditions", "clean", "--variants", "flow", "--no-render"]) == 0
    assert (workdir / "exp" / "depth_noise.csv").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--data", "/nonexistent", "--epochs", "1"],
    ["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent"],
    ["train", "--data", "/nonexistent", "--epochs", "0"],
])
def test_errors_exit_nonzero_with_diagnostic(argv, capsys):
    assert main(argv) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert err and "error" in err[-1]


def test_bad_frame_index_and_steps(workdir, capsys):
    base = ["rollout", "--ckpt", str(workdir / "m.ckpt"), "--data", str(workdir / "data")]
    assert main(base + ["--frame", "99"]) == 1
    assert main(base + ["--steps", "0"]) == 1
    assert "error" in capsys.readouterr().err


def test_corrupt_checkpoint(workdir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((workdir / "m.ckpt").read_bytes()[:-3])
    assert main(["eval", "--ckpt", str(bad), "--data", str(workdir / "data")]) == 1


def test_usage_errors_and_module_entry():
    assert main(["experiment", "--name", "nope", "--out", "/tmp/x"]) == 2
    assert main([]) == 2
    proc = subprocess.run([sys.executable, "-m", "se3nets", "gradcheck", "--module", "tensor"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "FAIL" not in proc.stdout
