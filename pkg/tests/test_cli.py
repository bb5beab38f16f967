import csv
import json

import numpy as np
import pytest

from lora2.adapter import FrozenLinear, init_adapter
from lora2.checkpoint import decode, save_checkpoint
from lora2.cli import main
from lora2.config import TrainConfig, dump

FAST = dict(steps=5, batch_size=4, n_train=16, learning_rate=1e-3, nu_learning_rate=5e-2)


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.cfg"
    dump(TrainConfig(**FAST), path)
    return path


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck", "--trials", "5"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out


def test_selftest_exits_zero(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_report_on_worked_example(tmp_path, capsys):
    layer = init_adapter(FrozenLinear(np.eye(8), "q", "self_attn_q"), 2, seed=0, r_max=8)
    save_checkpoint([layer], tmp_path / "q.alr2")
    assert main(["report", "--ckpt", str(tmp_path / "q.alr2")]) == 0
    out = capsys.readouterr().out
    assert "D=2" in out and "total 165 bytes" in out


def test_train_zero_steps_writes_header_only(tmp_path, capsys):
    cfg = tmp_path / "zero.cfg"
    dump(TrainConfig(**{**FAST, "steps": 0}), cfg)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert lines == ["step,total,mse,reg,entropy,weight,active_params,bytes"]


def test_train_writes_reports_and_figures(tmp_path, cfg_path, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"adapter.alr2", "metrics.csv", "ranks.csv", "summary.json", "loss.png",
            "ranks.png"} <= names
    with open(out / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 5
    with open(out / "ranks.csv") as f:
        ranks = list(csv.DictReader(f))
    stored = {r["name"]: r["d"] for r in decode((out / "adapter.alr2").read_bytes())}
    assert {r["layer_name"]: int(r["final_rank"]) for r in ranks} == stored
    assert list(ranks[0])[:4] == ["layer_name", "kind", "final_rank", "step_1"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["bytes"] == (out / "adapter.alr2").stat().st_size
    assert summary["steps_run"] == 5
    assert (out / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_train_seed_override_changes_run(tmp_path, cfg_path, capsys):
    main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "a"), "--no-figures"])
    main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "b"), "--no-figures",
          "--seed", "9"])
    assert not (tmp_path / "a" / "loss.png").exists()
    a = json.loads((tmp_path / "a" / "summary.json").read_text())
    b = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert a["config"]["seed"] == 0 and b["config"]["seed"] == 9


def test_sweep_writes_table_and_figure(tmp_path, cfg_path, capsys):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg_path), "--ranks", "1,2", "--out", str(out)]) == 0
    with open(out / "sweep.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["label"] for r in rows] == ["fixed_rank(1)", "fixed_rank(2)", "adaptive"]
    assert (out / "tradeoff.png").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--bogus"],
        ["frobnicate"],
        [],
        ["sweep", "--config", "x", "--out", "y", "--ranks", "a,b"],
    ],
)
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_validation_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense=1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", "o"]) == 1
    (tmp_path / "junk.alr2").write_bytes(b"nope")
    assert main(["report", "--ckpt", str(tmp_path / "junk.alr2")]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_runtime_abort_exits_two(tmp_path, capsys):
    cfg = tmp_path / "hot.cfg"
    dump(TrainConfig(**{**FAST, "learning_rate": 1e300, "nu_learning_rate": 1e300}), cfg)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "non-finite" in capsys.readouterr().err
