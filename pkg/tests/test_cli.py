import json
import subprocess
import sys
from pathlib import Path

import pytest

from estf_tad.cli import main
from estf_tad.numerics import load_checkpoint

GOLDEN = Path(__file__).parent / "fixtures" / "golden"
TINY_CONFIG = {
    "data": {
        "train": {
            "n_videos": 4, "frames": 8, "height": 4, "width": 4, "n_classes": 2,
            "actions_per_video": [1, 1], "duration_range": [2, 4], "min_gap": 1,
        },
        "val_videos": 2,
    },
    "backbone": {"depth": 1, "d_model": 6, "patch": [1, 2, 2], "input_shape": [8, 4, 4, 3]},
    "adapter": {"d_model": 6, "rank": 2, "pool_factor": [1, 1], "ssm": {"d_model": 2, "d_state": 2}},
    "detector": {"n_classes": 2, "n_levels": 2, "head_hidden": 4},
    "train": {"epochs": 2, "batch_size": 2, "lr": 0.01, "warmup_epochs": 1},
}


@pytest.fixture
def tiny_files(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(TINY_CONFIG["data"]["train"]))
    return cfg, spec


def test_no_arguments_usage_exit_1(capsys):
    assert main([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_flag_exit_1(capsys):
    assert main(["eval", "--nope"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_subcommand_exit_1():
    assert main(["frobnicate"]) == 1


def test_eval_golden_byte_for_byte(capsys):
    code = main(["eval", "--preds", str(GOLDEN / "predictions.json"), "--annos", str(GOLDEN / "annotations.json"),
                 "--thresholds", "0.3,0.4,0.5,0.6,0.7"])
    assert code == 0
    assert capsys.readouterr().out == (GOLDEN / "expected_table.txt").read_text()


def test_eval_missing_file_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["eval", "--preds", str(missing), "--annos", str(GOLDEN / "annotations.json")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_eval_bad_thresholds():
    assert main(["eval", "--preds", "a", "--annos", "b", "--thresholds", "0.5,x"]) == 1


def test_gradcheck_all(capsys):
    assert main(["gradcheck", "--module", "all"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in out] == ["ssm", "estf", "head"]
    assert all("max_rel_error" in line and line.endswith("ok") for line in out)


def test_gradcheck_unknown_module():
    assert main(["gradcheck", "--module", "loss"]) == 1


def test_invalid_config_reports_pointer(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"batch_size": "eight"}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "/train/batch_size" in err and str(bad) in err
    assert not (tmp_path / "o").exists()


def test_synth_train_eval_round_trip(tmp_path, tiny_files, capsys):
    cfg, spec = tiny_files
    data = tmp_path / "data"
    assert main(["synth", "--spec", str(spec), "--out", str(data), "--val-videos", "2", "--seed", "0"]) == 0
    assert (data / "train" / "annotations.json").exists() and (data / "val" / "annotations.json").exists()
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    for name in ("train_log.csv", "config.json", "metrics.json", "val_predictions.json", "checkpoint/manifest.json"):
        assert (out / name).exists(), name
    capsys.readouterr()
    assert main(["eval", "--preds", str(out / "val_predictions.json"), "--annos", str(data / "val" / "annotations.json")]) == 0
    table = capsys.readouterr().out
    metrics = json.loads((out / "metrics.json").read_text())
    assert f"{100 * metrics['average_map']:.2f}" in table.splitlines()[-1]


def test_train_is_pure_in_seed(tmp_path, tiny_files):
    cfg, _ = tiny_files
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "4"]) == 0
    a, b = load_checkpoint(tmp_path / "a" / "checkpoint"), load_checkpoint(tmp_path / "b" / "checkpoint")
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()


def test_train_divergence_exit_2(tmp_path, tiny_files, capsys):
    cfg, _ = tiny_files
    doc = json.loads(cfg.read_text())
    doc["train"].update(lr=1e308, grad_clip=None, warmup_epochs=0)
    cfg.write_text(json.dumps(doc))
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "last good" in capsys.readouterr().err
    assert (tmp_path / "o" / "last_good" / "manifest.json").exists()


def test_train_rejects_mismatched_data(tmp_path, tiny_files, capsys):
    cfg, _ = tiny_files
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--val-videos", "1", "--spec", str(_spec(tmp_path, n_videos=1))]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 1
    assert "/backbone/input_shape" in capsys.readouterr().err


def _spec(tmp_path, **kw):
    p = tmp_path / "default_spec.json"
    p.write_text(json.dumps(kw))
    return p


def test_bench_rows(tmp_path, capsys):
    out = tmp_path / "scaling.csv"
    assert main(["bench", "--lengths", "16,32", "--reps", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 2 * 2
    assert "log-log slope" in capsys.readouterr().out


def test_ablate_writes_tables(tmp_path, tiny_files, capsys):
    cfg, _ = tiny_files
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "abl"), "--epochs", "1", "--bootstrap", "5"]) == 0
    md = (tmp_path / "abl" / "ablation.md").read_text()
    assert md == capsys.readouterr().out
    assert (tmp_path / "abl" / "ablation.csv").exists() and (tmp_path / "abl" / "ablation.json").exists()


def test_thread_env_var(monkeypatch, capsys):
    monkeypatch.setenv("ESTF_NUM_THREADS", "1")
    assert main(["gradcheck", "--module", "ssm"]) == 0
    monkeypatch.setenv("ESTF_NUM_THREADS", "zero")
    assert main(["gradcheck", "--module", "ssm"]) == 1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "estf_tad.cli"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr
