import csv
import json

import numpy as np
import pytest

from drfuser.cli import build_parser, run
from drfuser.data import write_ppm
from drfuser.events import EventStream, read_events, write_events


def test_unknown_flag_is_usage_error(capsys):
    assert run(["eval", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_is_usage_error():
    assert run([]) == 1


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"simulate", "render", "sync", "generate", "train", "eval", "gradcheck", "plot"}
    for name, p in sub.items():
        assert run([name, "--help"]) == 0
        text = capsys.readouterr().out
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)


def test_train_help_has_stable_flags(capsys):
    assert run(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--dataset", "--variant"):
        assert flag in text
    for variant in ("drfuser", "none", "additive", "early", "late", "rgb", "event"):
        assert variant in text


def test_eval_perfect_predictions(tmp_path, capsys):
    path = tmp_path / "pred.csv"
    path.write_text("prediction,target\n0.1,0.1\n-0.2,-0.2\n0.0,0.0\n")
    assert run(["eval", "--predictions", str(path), "--out", str(tmp_path / "o")]) == 0
    assert "rmse 0.0 mae 0.0" in capsys.readouterr().out
    rows = list(csv.DictReader(open(tmp_path / "o" / "metrics.csv")))
    assert float(rows[0]["rmse"]) == 0.0 and float(rows[0]["mae"]) == 0.0
    assert (tmp_path / "o" / "eval_config.json").exists()


def test_eval_error_exit_codes(tmp_path):
    assert run(["eval", "--checkpoint", str(tmp_path / "none.bin"), "--dataset", str(tmp_path),
                "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "pred.csv"
    bad.write_text("a,b\n1,2\n")
    assert run(["eval", "--predictions", str(bad)]) == 2


def test_render_and_sync(tmp_path, capsys):
    stream = EventStream.from_events(4, 3, [(0, 0, 10, 1), (1, 1, 20, -1), (2, 2, 35, 1), (3, 0, 60, 1)])
    write_events(tmp_path / "ev.bin", stream)
    assert run(["render", "--events", str(tmp_path / "ev.bin"), "--events-per-frame", "2",
                "--out", str(tmp_path / "r")]) == 0
    frames = np.load(tmp_path / "r" / "frames.npy")
    assert frames.shape == (2, 2, 3, 4) and frames.sum() == 4
    assert json.loads((tmp_path / "r" / "config.json").read_text())["events_per_frame"] == 2
    (tmp_path / "base.csv").write_text("0\n100\n200\n")
    (tmp_path / "other.csv").write_text("t\n10\n90\n160\n260\n")
    assert run(["sync", "--base", str(tmp_path / "base.csv"), "--other", str(tmp_path / "other.csv"),
                "--out", str(tmp_path / "s")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "s" / "matches.csv")))
    assert [int(r["other0_us"]) for r in rows] == [10, 90, 160]


def test_render_rejects_both_modes(tmp_path):
    stream = EventStream.from_events(2, 2, [(0, 0, 1, 1)])
    write_events(tmp_path / "ev.bin", stream)
    assert run(["render", "--events", str(tmp_path / "ev.bin"), "--events-per-frame", "1",
                "--time-window-us", "5", "--out", str(tmp_path / "r")]) == 1


def test_simulate_ramp(tmp_path):
    video = tmp_path / "video"
    video.mkdir()
    (video / "timestamps.csv").write_text("0\n1000\n")
    write_ppm(video / "000000.ppm", np.full((3, 4, 3), 50, np.uint8))
    write_ppm(video / "000001.ppm", np.full((3, 4, 3), 150, np.uint8))
    assert run(["simulate", "--video", str(video), "--eta", "0.2", "--out", str(tmp_path / "o")]) == 0
    stream = read_events(tmp_path / "o" / "events.bin")
    k = int(np.floor(np.log(151 / 51) / 0.2 + 1e-9))
    assert len(stream) == 12 * k and np.all(stream.p == 1)


def test_generate_is_deterministic(tmp_path):
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps({"width": 16, "height": 16, "samples": 3, "event_rate_hz": 100.0}))
    for name in ("a", "b"):
        assert run(["generate", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    for rel in ("manifest.json", "events.bin", "control.csv", "frames/000000.ppm"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generate_bad_curvature_is_usage_error(tmp_path):
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps({"curvature_knots": [[0.0, 1.0]]}))
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1


def test_train_eval_plot_round_trip(tmp_path, capsys):
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps({"width": 64, "height": 64, "samples": 4, "event_rate_hz": 100.0}))
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    run_cfg = tmp_path / "run.json"
    run_cfg.write_text(json.dumps({"train": {"epochs": 1, "batch_size": 2, "learning_rate": 1e-3},
                                   "split": [0.5, 0.5]}))
    assert run(["train", "--dataset", str(tmp_path / "ds"), "--config", str(run_cfg), "--variant", "none",
                "--seed", "3", "--out", str(tmp_path / "run")]) == 0
    for name in ("checkpoint.bin", "history.csv", "run_manifest.json", "config.json"):
        assert (tmp_path / "run" / name).exists()
    resolved = json.loads((tmp_path / "run" / "config.json").read_text())
    assert resolved["model"]["fusion_variant"] == "no_attention" and resolved["train"]["seed"] == 3
    capsys.readouterr()
    assert run(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"),
                "--dataset", str(tmp_path / "ds"), "--subset", "test"]) == 0
    assert "rmse" in capsys.readouterr().out
    preds = list(csv.DictReader(open(tmp_path / "run" / "predictions.csv")))
    assert len(preds) == 2
    assert run(["plot", "--history", str(tmp_path / "run" / "history.csv"),
                "--predictions", str(tmp_path / "run" / "predictions.csv"), "--out", str(tmp_path / "p")]) == 0
    for name in ("loss.svg", "loss.csv", "steering.svg", "steering.csv"):
        assert (tmp_path / "p" / name).exists()
    assert (tmp_path / "p" / "steering.svg").read_text().startswith("<svg")


def test_train_unknown_config_key(tmp_path):
    run_cfg = tmp_path / "run.json"
    run_cfg.write_text(json.dumps({"optimizer": {}}))
    assert run(["train", "--dataset", str(tmp_path), "--config", str(run_cfg), "--out", str(tmp_path / "r")]) == 1


def test_gradcheck_primitives_only(capsys, tmp_path):
    assert run(["gradcheck", "--seeds", "1", "--skip-model", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out and "local_self_attention" in out


def test_numeric_abort_exit_code(tmp_path, monkeypatch):
    import drfuser.training
    from drfuser.errors import NumericHealthError

    def explode(*args, **kwargs):
        raise NumericHealthError("loss became nan at step 1")

    monkeypatch.setattr(drfuser.training, "train", explode)
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps({"width": 64, "height": 64, "samples": 5, "event_rate_hz": 100.0}))
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    assert run(["train", "--dataset", str(tmp_path / "ds"), "--out", str(tmp_path / "run")]) == 3
