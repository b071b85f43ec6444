import csv
import subprocess
import sys

import numpy as np
import pytest

from rirkit import checkpoint as ck
from rirkit.cli import main
from rirkit.model import Model
from rirkit.optim import lr_at

SMALL = ["--arch", "desk-b1-l2-f4", "--dataset", "synthetic", "--synthetic-train", "200",
         "--synthetic-test", "100", "--batch-size", "50"]


def _train(out, *extra, epochs=2):
    return main(["train", *SMALL, "--epochs", str(epochs), "--out", str(out), *extra])


def _rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert _train(out, "--seed", "1") == 0
    return out


def test_train_outputs(run_dir):
    for name in ("metrics.csv", "timing.csv", "final.rir", "best.rir"):
        assert (run_dir / name).is_file()
    text = (run_dir / "metrics.csv").read_text().splitlines()
    assert text[0] == "# arch=desk-b1-l2-f4 kind=rir params=24978"
    assert text[1] == "epoch,step,lr,train_loss,train_acc,test_acc"
    rows = _rows(run_dir / "metrics.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert [int(r["step"]) for r in rows] == [0, 4, 8]
    timing = _rows(run_dir / "timing.csv")
    assert [int(r["epoch"]) for r in timing] == [1, 2] and all(int(r["wall_ms"]) >= 0 for r in timing)


def test_identical_runs_give_identical_bytes(run_dir, tmp_path):
    assert _train(tmp_path, "--seed", "1") == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
    assert (tmp_path / "final.rir").read_bytes() == (run_dir / "final.rir").read_bytes()


def test_different_seed_differs(run_dir, tmp_path):
    assert _train(tmp_path, "--seed", "2") == 0
    assert (tmp_path / "final.rir").read_bytes() != (run_dir / "final.rir").read_bytes()


def test_eval_matches_last_test_acc(run_dir, capsys):
    assert main(["eval", str(run_dir / "final.rir")]) == 0
    printed = capsys.readouterr().out.strip().splitlines()[-1]
    assert printed == f"test_acc={_rows(run_dir / 'metrics.csv')[-1]['test_acc']}"


def test_ablate_rows(run_dir, tmp_path):
    out = tmp_path / "abl.csv"
    assert main(["ablate", str(run_dir / "final.rir"), "--out", str(out)]) == 0
    rows = _rows(out)
    fused = len(ck.load(run_dir / "final.rir").masks) + 2  # two stride-2 layers carry no identity
    assert len(rows) == 2 * fused + 1 == 13
    assert rows[0]["stream"] == "none" and rows[0]["layer_index"] == "-1"
    assert rows[0]["test_acc"] == _rows(run_dir / "metrics.csv")[-1]["test_acc"]
    assert {r["stream"] for r in rows[1:]} == {"residual", "transient"}
    assert sorted({int(r["layer_index"]) for r in rows[1:]}) == list(range(fused))
    # ablation restores weights: running it twice gives the same file
    out2 = tmp_path / "abl2.csv"
    main(["ablate", str(run_dir / "final.rir"), "--out", str(out2)])
    assert out.read_bytes() == out2.read_bytes()


def test_ablate_cnn_is_unsupported(tmp_path, capsys):
    assert _train(tmp_path, "--kind", "cnn", epochs=1) == 0
    assert main(["ablate", str(tmp_path / "final.rir")]) == 2
    assert "resnet-init or rir" in capsys.readouterr().err


def test_cnn_and_rir_headers_match_counts_differ(run_dir, tmp_path):
    assert _train(tmp_path, "--kind", "cnn", "--seed", "1", epochs=1) == 0
    a = (run_dir / "metrics.csv").read_text().splitlines()
    b = (tmp_path / "metrics.csv").read_text().splitlines()
    assert a[1] == b[1]
    assert a[0] != b[0] and b[0].startswith("# arch=desk-b1-l2-f4 kind=cnn params=")


def test_lr_column_follows_schedule(tmp_path):
    assert main(["train", *SMALL, "--synthetic-train", "50", "--epochs", "5", "--lr", "0.05",
                 "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "metrics.csv")[1:]
    assert [float(r["lr"]) for r in rows] == [lr_at(e, 0.05, 5) for e in range(1, 6)]
    assert [r["lr"] for r in rows] == ["0.05", "0.05", "0.05", "0.005", "0.0005"]
    assert len({r["lr"] for r in rows}) == 3


def test_nan_exit_keeps_last_good(tmp_path, monkeypatch, capsys):
    real = Model.loss_and_grads
    calls = {"n": 0}

    def poisoned(self, *a, **kw):
        out = real(self, *a, **kw)
        calls["n"] += 1
        if calls["n"] == 3:
            out[1]["head.bias"][0] = np.nan
        return out

    monkeypatch.setattr(Model, "loss_and_grads", poisoned)
    assert _train(tmp_path) == 3
    assert "non-finite" in capsys.readouterr().err
    good = ck.load(tmp_path / "last_good.rir")
    assert good.header["meta"] == {"epoch": 1, "step": 2}
    assert all(np.all(np.isfinite(v)) for v in good.tensors.values())
    assert (tmp_path / "metrics.csv").is_file() and not (tmp_path / "final.rir").exists()


def test_missing_dataset_fails_cleanly(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("RIRKIT_DATA", raising=False)
    assert main(["train", "--dataset", "cifar10", "--out", str(tmp_path)]) == 1
    assert "RIRKIT_DATA" in capsys.readouterr().err
    assert main(["train", "--dataset", "cifar10", "--data-path", str(tmp_path), "--out", str(tmp_path)]) == 1
    assert main(["eval", str(tmp_path / "nope.rir")]) == 1
    assert main(["train", *SMALL, "--arch", "resnet1001", "--out", str(tmp_path)]) == 1


def test_sweep_records_every_cell(tmp_path):
    args = ["sweep", *SMALL, "--synthetic-train", "60", "--epochs", "1", "--filters", "4",
            "--kinds", "rir", "--out", str(tmp_path)]
    assert main([*args, "--grid", "3x2,3x4,4x2"]) == 0
    rows = _rows(tmp_path / "sweep.csv")
    assert [(r["blocks"], r["layers_per_block"], r["status"]) for r in rows] == [
        ("3", "2", "ok"), ("3", "4", "ok"), ("4", "2", "failed")]
    assert int(rows[1]["params"]) > int(rows[0]["params"])
    assert "3 stages" in rows[2]["message"]
    assert (tmp_path / "rir-desk-b1-l4-f4" / "metrics.csv").is_file()


def test_verify_exit_codes(capsys):
    assert main(["verify", "--configs", "20"]) == 0
    out = capsys.readouterr().out
    assert "all checks passed" in out and "FAIL " not in out
    assert main(["verify", "--configs", "20", "--inject-fault"]) == 1
    assert "FAILED" in capsys.readouterr().out


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "rirkit.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "eval", "ablate", "sweep", "verify"):
        assert cmd in res.stdout
