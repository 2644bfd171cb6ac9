import subprocess
import sys
from pathlib import Path

import pytest

from lmoelab.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from lmoelab.scenegen import load_corpus

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = """cfg_version: 1
model: {h_routed: 8, h_shared: 16, ffn_hidden: 32}
train: {steps: 3, train_scenes: 8, eval_scenes: 8, batch_size: 2}
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def test_run_writes_reports(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(tiny_cfg), "--out", str(out), "--seed", "3"]) == EXIT_OK
    names = {p.name for p in out.iterdir()}
    assert {"metrics.json", "loss_trace.csv", "embeddings_final.csv", "routing_layer0.csv"} <= names
    assert "overall accuracy" in capsys.readouterr().out
    assert '"model": 3' in (out / "metrics.json").read_text()


def test_config_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("cfg_version: 1\nmodel: {experts: 3}\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "invalid config" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bad_toggle_exits_one(tiny_cfg, tmp_path):
    assert main(["ablate", "--config", str(tiny_cfg), "--toggles", "moe+turbo", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_unwritable_output_exits_two(tiny_cfg, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["run", "--config", str(tiny_cfg), "--out", str(blocker / "sub")]) == EXIT_RUNTIME


def test_ablate(tiny_cfg, tmp_path, capsys):
    assert main(["ablate", "--config", str(tiny_cfg), "--toggles", "moe", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("row,toggles,overall")


def test_gen_corpus(tiny_cfg, tmp_path):
    out = tmp_path / "c.scn"
    assert main(["gen-corpus", "--config", str(tiny_cfg), "--out", str(out), "--scenes", "5"]) == EXIT_OK
    assert len(load_corpus(out).scenes) == 5


def test_selftest_passes(capsys):
    assert main(["selftest"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 7


def test_check_grads_failure_exits_three(monkeypatch):
    import lmoelab.gradsuite as gs

    monkeypatch.setattr(gs.nk, "DIFFERENTIABLE_OPS", {**gs.nk.DIFFERENTIABLE_OPS, "mystery_op": None})
    assert main(["check-grads", "--seeds", "1"]) == EXIT_CHECK


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "lmoelab.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-corpus" in r.stdout
    r = subprocess.run([sys.executable, "-m", "lmoelab.cli", "frobnicate"], capture_output=True, text=True)
    assert r.returncode != 0
