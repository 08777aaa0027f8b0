"""``drfuser`` command line: simulate, render, sync, generate, train, eval, gradcheck, plot.

Exit codes: 0 success, 1 usage or configuration error, 2 data or
integrity error, 3 numeric-health abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from drfuser.errors import ConfigError, ContractError, DataError, DimensionError, NumericHealthError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers --------------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def _emit_config(resolved: dict, out: Optional[Path], name: str = "config.json") -> None:
    text = json.dumps(resolved, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


def _render_overrides(args, base: dict) -> dict:
    if args.events_per_frame is not None and args.time_window_us is not None:
        raise UsageError("--events-per-frame and --time-window-us are mutually exclusive")
    if args.events_per_frame is not None:
        base["events_per_frame"], base["time_window_us"] = args.events_per_frame, None
    if args.time_window_us is not None:
        base["events_per_frame"], base["time_window_us"] = None, args.time_window_us
    return base


def _read_timestamps(path) -> np.ndarray:
    """First column of a CSV or plain list; a non-numeric first row is a header."""
    values = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].startswith("#"):
                continue
            try:
                values.append(int(row[0]))
            except ValueError:
                if i == 0:
                    continue
                raise DataError(f"{path}: row {i + 1} has non-integer timestamp {row[0]!r}")
    return np.array(values, dtype=np.int64)


# --- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    from drfuser.data import read_ppm
    from drfuser.events import EventCameraModel, simulate_events, write_events

    cfg = {"eta": 0.2}
    if args.config:
        cfg.update(_read_json(args.config))
    if args.eta is not None:
        cfg["eta"] = args.eta
    video_dir = Path(args.video)
    times = _read_timestamps(video_dir / "timestamps.csv")
    frames = sorted(p for p in video_dir.iterdir() if p.suffix in (".pgm", ".ppm"))
    if len(frames) != len(times):
        raise DataError(f"{video_dir}: {len(frames)} frames but {len(times)} timestamps")
    out = Path(args.out)
    _emit_config({"command": "simulate", "video": str(video_dir), **cfg}, out)
    video = []
    for t, path in zip(times, frames):
        img = read_ppm(path).astype(np.float64)
        if img.ndim == 3:
            img = img @ np.array([0.299, 0.587, 0.114])
        video.append((int(t), (img + 1.0) / 256.0))
    stream = simulate_events(video, EventCameraModel(cfg["eta"]))
    write_events(out / "events.bin", stream)
    print(f"{len(stream)} events -> {out / 'events.bin'}")
    return EXIT_OK


def cmd_render(args) -> int:
    from drfuser.events import RenderConfig, read_events, render_frames

    stream = read_events(args.events)
    cfg = {"events_per_frame": 100000, "time_window_us": None, "start_us": None}
    if args.config:
        cfg.update(_read_json(args.config))
    cfg = _render_overrides(args, cfg)
    out = Path(args.out)
    _emit_config({"command": "render", "events": str(args.events), **cfg}, out)
    frames = render_frames(stream, RenderConfig(stream.width, stream.height, **cfg))
    counts = np.stack([f.counts for f in frames]) if frames else np.zeros((0, 2, stream.height, stream.width))
    np.save(out / "frames.npy", counts.astype(np.int32))
    with open(out / "frames.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "start_us", "end_us", "positive", "negative"])
        for i, f in enumerate(frames):
            writer.writerow([i, f.start_us, f.end_us, int(f.positive.sum()), int(f.negative.sum())])
    print(f"{len(frames)} frames -> {out / 'frames.npy'}")
    return EXIT_OK


def cmd_sync(args) -> int:
    from drfuser.events import synchronize

    base = _read_timestamps(args.base)
    others = [_read_timestamps(p) for p in args.other]
    out = Path(args.out)
    _emit_config({"command": "sync", "base": str(args.base), "other": [str(p) for p in args.other]}, out)
    matches = synchronize(base, others)
    with open(out / "matches.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["base_index", "base_us"] + [f"other{k}_index" for k in range(len(others))]
                        + [f"other{k}_us" for k in range(len(others))])
        for m in matches:
            writer.writerow([m[0], int(base[m[0]])] + list(m[1:])
                            + [int(o[i]) for o, i in zip(others, m[1:])])
    print(f"{len(matches)} matched tuples -> {out / 'matches.csv'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    from drfuser.data import ScenarioConfig, generate_synthetic_driving

    raw = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    raw = _render_overrides(args, {**ScenarioConfig().to_dict(), **raw})
    cfg = ScenarioConfig.from_dict(raw)
    out = Path(args.out)
    generate_synthetic_driving(cfg, out)
    # the resolved config goes to stdout only; the manifest already records it
    _emit_config({"command": "generate", "scenario": cfg.to_dict()}, None)
    print(f"dataset with {cfg.samples} samples -> {out}")
    return EXIT_OK


def _run_config(args) -> dict:
    from drfuser.model import ModelConfig, resolve_variant
    from drfuser.training import TrainConfig

    raw = _read_json(args.config) if args.config else {}
    unknown = set(raw) - {"model", "train", "split", "model_seed"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown run configuration key")
    model = dict(raw.get("model", {}))
    train = dict(raw.get("train", {}))
    if getattr(args, "variant", None):
        model["fusion_variant"] = resolve_variant(args.variant)
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    model_cfg = ModelConfig.from_dict(model)
    train_cfg = TrainConfig.from_dict(train)
    split = raw.get("split", [0.8, 0.2])
    return {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "split": split,
            "model_seed": raw.get("model_seed", train_cfg.seed)}


def _datasets(dataset_dir, split):
    from drfuser.data import load_dataset, split_dataset

    ds = load_dataset(dataset_dir)
    if split is None:
        return ds, None
    parts = split_dataset(ds, split)
    return parts[0], parts[1]


def cmd_train(args) -> int:
    from drfuser.model import ModelConfig, build_model
    from drfuser.training import TrainConfig, train

    resolved = _run_config(args)
    out = Path(args.out)
    resolved["dataset"] = str(args.dataset)
    _emit_config(resolved, out)
    model_cfg = ModelConfig.from_dict(resolved["model"])
    train_cfg = TrainConfig.from_dict(resolved["train"])
    train_set, val_set = _datasets(args.dataset, resolved["split"])
    model = build_model(model_cfg, resolved["model_seed"])
    _, history = train(model, train_set, val_set, train_cfg, out_dir=out, log=print)
    print(f"{len(history.losses)} steps, final loss {history.losses[-1]:.6g}, stopped by {history.stop_reason}")
    print(f"checkpoint -> {out / 'checkpoint.bin'}")
    return EXIT_OK


def _write_metrics(out: Path, m) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rmse", "mae", "k"])
        writer.writerow([repr(m.rmse), repr(m.mae), m.k])


def read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        pred = [float(r["prediction"]) for r in rows]
        true = [float(r["target"]) for r in rows]
        ts = [int(r["timestamp_us"]) if r.get("timestamp_us") not in (None, "") else i for i, r in enumerate(rows)]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: expected columns prediction,target[,timestamp_us]") from exc
    return np.array(ts), np.array(pred), np.array(true)


def cmd_eval(args) -> int:
    from drfuser.checkpoint import load_checkpoint
    from drfuser.model import ModelConfig, build_model
    from drfuser.training import metrics, predict

    if args.predictions:
        _, pred, true = read_predictions(args.predictions)
        out = Path(args.out) if args.out else None
        _emit_config({"command": "eval", "predictions": str(args.predictions)}, out, "eval_config.json")
        m = metrics(pred, true)
    else:
        if not (args.checkpoint and args.dataset):
            raise UsageError("eval needs --predictions, or both --checkpoint and --dataset")
        ckpt = Path(args.checkpoint)
        config_path = Path(args.config) if args.config else ckpt.parent / "config.json"
        raw = _read_json(config_path)
        model_cfg = ModelConfig.from_dict(raw.get("model", raw))
        out = Path(args.out) if args.out else ckpt.parent
        _emit_config({"command": "eval", "checkpoint": str(ckpt), "dataset": str(args.dataset),
                      "subset": args.subset, "model": model_cfg.to_dict()}, out, "eval_config.json")
        model = build_model(model_cfg, 0)
        model.load_state_dict(load_checkpoint(ckpt))
        ds = _select_subset(args.dataset, raw.get("split"), args.subset)
        pred = predict(model, ds)
        true = ds.targets()
        m = metrics(pred, true)
        with open(out / "predictions.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["timestamp_us", "prediction", "target"])
            for t, p, y in zip(ds.timestamps(), pred, true):
                writer.writerow([int(t), repr(float(p)), repr(float(y))])
    print(f"rmse {m.rmse} mae {m.mae} k {m.k}")
    if out is not None:
        _write_metrics(out, m)
    return EXIT_OK


def _select_subset(dataset_dir, split, subset: str):
    from drfuser.data import load_dataset

    if subset == "all" or split is None:
        return load_dataset(dataset_dir)
    train_set, val_set = _datasets(dataset_dir, split)
    return train_set if subset == "train" else val_set


def cmd_gradcheck(args) -> int:
    from drfuser.gradsuite import run_suite

    seed = args.seed if args.seed is not None else 0
    seeds = range(seed, seed + args.seeds)
    _emit_config({"command": "gradcheck", "seeds": list(seeds), "include_model": not args.skip_model,
                  "tolerance": GRADCHECK_TOLERANCE}, Path(args.out) if args.out else None)
    worst = run_suite(seeds, include_model=not args.skip_model)
    for name, err in worst.items():
        print(f"{name:28s} {err:.3e}")
    overall = max(worst.values())
    print(f"max relative error {overall:.3e}")
    if args.out:
        with open(Path(args.out) / "gradcheck.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["case", "max_relative_error"])
            for name, err in worst.items():
                writer.writerow([name, repr(err)])
    if overall >= GRADCHECK_TOLERANCE:
        print(f"gradient check failed: {overall:.3e} >= {GRADCHECK_TOLERANCE}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_plot(args) -> int:
    from drfuser.plot import plot_history, plot_predictions
    from drfuser.training import read_history_csv

    if not (args.history or args.predictions):
        raise UsageError("plot needs --history and/or --predictions")
    out = Path(args.out)
    _emit_config({"command": "plot", "history": args.history, "predictions": args.predictions,
                  "window": args.window}, out, "plot_config.json")
    if args.history:
        rows = read_history_csv(args.history)
        try:
            steps = [int(r["step"]) for r in rows]
            losses = [float(r["loss"]) for r in rows]
        except (KeyError, ValueError) as exc:
            raise DataError(f"{args.history}: not a training history CSV") from exc
        print(f"-> {plot_history(steps, losses, out, args.window)}")
    if args.predictions:
        ts, pred, true = read_predictions(args.predictions)
        print(f"-> {plot_predictions(ts, pred, true, out)}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from drfuser.model import VARIANT_ALIASES

    parser = _Parser(prog="drfuser", description="Event + RGB steering regression pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text, fn):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(fn=fn)
        return p

    p = add("simulate", "Convert a brightness video to an event stream.", cmd_simulate)
    p.add_argument("--video", required=True, help="directory of PGM/PPM frames plus timestamps.csv (us)")
    p.add_argument("--config", help="JSON file with the camera model (eta)")
    p.add_argument("--eta", type=float, help="contrast threshold override")
    p.add_argument("--out", required=True, help="output directory")

    p = add("render", "Accumulate an event stream into polarity-count frames.", cmd_render)
    p.add_argument("--events", required=True, help="binary event file")
    p.add_argument("--config", help="JSON render config")
    p.add_argument("--events-per-frame", type=int, help="count mode: events per frame")
    p.add_argument("--time-window-us", type=int, help="time mode: window length in microseconds")
    p.add_argument("--out", required=True, help="output directory")

    p = add("sync", "Match streams to the nearest base timestamp.", cmd_sync)
    p.add_argument("--base", required=True, help="timestamps of the base (lowest-rate) stream")
    p.add_argument("--other", required=True, nargs="+", help="timestamps of the streams to match")
    p.add_argument("--out", required=True, help="output directory")

    p = add("generate", "Write a synthetic lane-following dataset.", cmd_generate)
    p.add_argument("--config", help="JSON scenario config")
    p.add_argument("--seed", type=int, help="scenario seed")
    p.add_argument("--events-per-frame", type=int, help="count-mode event frames")
    p.add_argument("--time-window-us", type=int, help="time-window event frames")
    p.add_argument("--out", required=True, help="dataset directory")

    variants = sorted(VARIANT_ALIASES)
    p = add("train", "Train a model; writes checkpoint, history and run manifest.", cmd_train)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON run config with model, train and split sections")
    p.add_argument("--variant", choices=variants, help="fusion variant")
    p.add_argument("--seed", type=int, help="training and initialisation seed")
    p.add_argument("--out", required=True, help="run directory")

    p = add("eval", "Compute RMSE and MAE of a checkpoint or a predictions file.", cmd_eval)
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--config", help="run config (default: config.json beside the checkpoint)")
    p.add_argument("--predictions", help="CSV with prediction,target columns instead of a model")
    p.add_argument("--subset", choices=["all", "train", "test"], default="all", help="which split to score")
    p.add_argument("--out", help="output directory (default: beside the checkpoint)")

    p = add("gradcheck", "Run the finite-difference gradient suite.", cmd_gradcheck)
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--skip-model", action="store_true", help="skip the full-model spot checks")
    p.add_argument("--out", help="output directory for gradcheck.csv")

    p = add("plot", "Draw loss and steering charts as SVG plus CSV.", cmd_plot)
    p.add_argument("--history", help="history.csv from a training run")
    p.add_argument("--predictions", help="predictions.csv from eval")
    p.add_argument("--window", type=int, default=50, help="moving-average window for the loss chart")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"drfuser {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractError, DimensionError, OSError) as exc:
        print(f"drfuser {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericHealthError as exc:
        print(f"drfuser {args.command}: numeric health abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
