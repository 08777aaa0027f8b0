"""Dataset layout, loading, splitting and the synthetic driving generator.

A dataset directory holds::

    manifest.json     extents, render mode, per-sample index, splits
    frames/NNNNNN.ppm RGB frames (binary PPM, 8-bit)
    events.bin        the full event stream (see drfuser.events.write_events)
    control.csv       timestamp_us, steering_rad, speed, throttle, brake, torque
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from drfuser.errors import ConfigError, ContractError, DataError, IntegrityError
from drfuser.events import (
    EventCameraModel,
    EventFrame,
    EventStream,
    RenderConfig,
    _histogram,
    normalize_frame,
    read_events,
    render_frames,
    simulate_events,
    synchronize,
    write_events,
)
from drfuser.tensor import Tensor

FORMAT_VERSION = 1
WHEELBASE_M = 2.7
CONTROL_COLUMNS = ["timestamp_us", "steering_rad", "speed", "throttle", "brake", "torque"]


def steering_from_curvature(curvature):
    """Kinematic bicycle model: steering = arctan(wheelbase * curvature)."""
    return np.arctan(WHEELBASE_M * np.asarray(curvature, dtype=np.float64))


# --- portable image files -------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 image from ``uint8[H, W, 3]``."""
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes())


_PNM_HEADER = re.compile(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    """``uint8[H, W, 3]`` from P6, or ``uint8[H, W]`` from P5."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise IntegrityError(f"{path}: missing frame file") from exc
    header = _PNM_HEADER.match(buf)
    if header is None or int(header.group(4)) != 255:
        raise IntegrityError(f"{path}: not an 8-bit binary PPM/PGM file")
    w, h = int(header.group(2)), int(header.group(3))
    channels = 3 if header.group(1) == b"P6" else 1
    pixels = buf[header.end():]
    if len(pixels) != w * h * channels:
        raise IntegrityError(f"{path}: expected {w * h * channels} pixel bytes, found {len(pixels)}")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, channels)
    return img if channels == 3 else img[..., 0]


# --- samples and datasets ---------------------------------------------------------

@dataclass
class Sample:
    rgb: Tensor
    event: Tensor
    steering: float
    timestamp: int


class Dataset:
    """Read-only view of a dataset directory.

    Samples are produced lazily, in timestamp order, and validated on
    access. ``indices`` restricts the view to a contiguous segment.
    """

    def __init__(self, root, manifest: dict, indices: Optional[range] = None):
        self.root = Path(root)
        self.manifest = manifest
        self.indices = indices if indices is not None else range(len(manifest["samples"]))
        self._stream: Optional[EventStream] = None
        self._steering: Optional[np.ndarray] = None
        self._cache = {}

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def width(self) -> int:
        return self.manifest["width"]

    @property
    def height(self) -> int:
        return self.manifest["height"]

    def subset(self, indices: range) -> "Dataset":
        view = Dataset(self.root, self.manifest, indices)
        view._stream, view._steering, view._cache = self._stream, self._steering, self._cache
        return view

    def _events(self) -> EventStream:
        if self._stream is None:
            stream = read_events(self.root / "events.bin")
            if (stream.width, stream.height) != (self.width, self.height):
                raise IntegrityError(f"{self.root / 'events.bin'}: extents {stream.width}x{stream.height} "
                                     f"differ from manifest {self.width}x{self.height}")
            self._stream = stream
        return self._stream

    def _controls(self) -> np.ndarray:
        if self._steering is None:
            self._steering = read_control(self.root / "control.csv")[:, 1]
        return self._steering

    def __getitem__(self, i: int) -> Sample:
        k = self.indices[i]
        if k in self._cache:
            return self._cache[k]
        entry = self.manifest["samples"][k]
        stream = self._events()
        lo, hi = entry["event_range"]
        if not 0 <= lo <= hi <= len(stream):
            raise IntegrityError(f"{self.root / 'events.bin'}: sample {k} event range {lo}:{hi} "
                                 f"outside {len(stream)} events")
        counts = _histogram(stream, lo, hi)
        event = normalize_frame(EventFrame(counts, entry["timestamp_us"], entry["timestamp_us"]))
        frame_path = self.root / entry["frame"]
        img = read_ppm(frame_path)
        if img.shape != (self.height, self.width, 3):
            raise IntegrityError(f"{frame_path}: shape {img.shape} differs from manifest extents")
        rgb = Tensor(img.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))
        controls = self._controls()
        row = entry["control_row"]
        if not 0 <= row < len(controls):
            raise IntegrityError(f"{self.root / 'control.csv'}: sample {k} refers to missing row {row}")
        steering = float(controls[row])
        if not math.isfinite(steering) or abs(steering) > self.manifest["steering_bound"]:
            raise IntegrityError(f"{self.root / 'control.csv'}: steering {steering} at row {row} "
                                 f"violates bound {self.manifest['steering_bound']}")
        sample = Sample(rgb, event, steering, int(entry["timestamp_us"]))
        self._cache[k] = sample
        return sample

    def batch(self, positions: Sequence[int]) -> Tuple[Tensor, Tensor, Tensor]:
        samples = [self[i] for i in positions]
        rgb = Tensor(np.stack([s.rgb.data for s in samples]))
        evt = Tensor(np.stack([s.event.data for s in samples]))
        target = Tensor(np.array([[s.steering] for s in samples], dtype=np.float32))
        return rgb, evt, target

    def targets(self) -> np.ndarray:
        return np.array([self[i].steering for i in range(len(self))])

    def timestamps(self) -> np.ndarray:
        return np.array([self.manifest["samples"][k]["timestamp_us"] for k in self.indices])


def read_control(path) -> np.ndarray:
    """``[rows, 6]`` float array; blank optional columns become NaN."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CONTROL_COLUMNS:
                raise IntegrityError(f"{path}: unexpected header {header}")
            rows = [[float(v) if v != "" else math.nan for v in row] for row in reader]
    except FileNotFoundError as exc:
        raise IntegrityError(f"{path}: missing control file") from exc
    except (ValueError, StopIteration) as exc:
        raise IntegrityError(f"{path}: malformed control file") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, len(CONTROL_COLUMNS))


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise IntegrityError(f"{manifest_path}: missing manifest") from exc
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{manifest_path}: not valid JSON") from exc
    for key in ("width", "height", "sample_count", "steering_bound", "render", "samples"):
        if key not in manifest:
            raise IntegrityError(f"{manifest_path}: missing key {key!r}")
    if manifest["sample_count"] != len(manifest["samples"]):
        raise IntegrityError(f"{manifest_path}: sample_count {manifest['sample_count']} but "
                             f"{len(manifest['samples'])} sample entries")
    ts = [s["timestamp_us"] for s in manifest["samples"]]
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise IntegrityError(f"{manifest_path}: samples are not in timestamp order")
    for name in ("events.bin", "control.csv"):
        if not (root / name).exists():
            raise IntegrityError(f"{root / name}: missing")
    return Dataset(root, manifest)


def split_dataset(dataset: Dataset, fractions: Sequence[float], persist: bool = False) -> Tuple[Dataset, ...]:
    """Cut the time-ordered samples into consecutive, non-overlapping segments."""
    fractions = [float(f) for f in fractions]
    if len(fractions) < 2 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"fractions must be >= 2 non-negative values summing to 1, got {fractions}")
    n = len(dataset)
    bounds = [0] + [int(round(c * n)) for c in np.cumsum(fractions)[:-1]] + [n]
    if any(b <= a for a, b in zip(bounds, bounds[1:])):
        raise ContractError(f"{n} samples cannot be split into non-empty segments by {fractions}")
    start = dataset.indices.start
    parts = tuple(dataset.subset(range(start + a, start + b)) for a, b in zip(bounds, bounds[1:]))
    dataset.manifest["splits"] = [[start + a, start + b] for a, b in zip(bounds, bounds[1:])]
    if persist:
        (dataset.root / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2) + "\n")
    return parts


# --- synthetic scenario ---------------------------------------------------------------

@dataclass
class ScenarioConfig:
    """A car following a textured road at constant speed.

    ``curvature_knots`` lists (arc length m, curvature 1/m); curvature is
    blended between knots with a raised cosine, so it is smooth. When empty,
    knots are drawn from ``seed`` every ``knot_spacing_m``.
    """

    width: int = 64
    height: int = 64
    samples: int = 32
    frame_rate_hz: float = 10.0
    event_rate_hz: float = 500.0
    speed_mps: float = 10.0
    texture_contrast: float = 0.8
    stripe_period_m: float = 2.0
    curvature_knots: List[Tuple[float, float]] = field(default_factory=list)
    knot_spacing_m: float = 8.0
    steering_bound: float = 0.5
    eta: float = 0.2
    events_per_frame: Optional[int] = None
    time_window_us: Optional[int] = 50000
    seed: int = 7

    @property
    def duration_s(self) -> float:
        return self.samples / self.frame_rate_hz

    def max_curvature(self) -> float:
        return math.tan(self.steering_bound) / WHEELBASE_M

    def validate(self) -> None:
        if self.samples < 1:
            raise ConfigError("samples", "must be >= 1")
        if self.width < 8 or self.height < 8:
            raise ConfigError("width", "images must be at least 8x8")
        if self.frame_rate_hz <= 0 or self.event_rate_hz < self.frame_rate_hz:
            raise ConfigError("event_rate_hz", "must be positive and at least the frame rate")
        ratio = self.event_rate_hz / self.frame_rate_hz
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("event_rate_hz", "must be an integer multiple of frame_rate_hz")
        if self.speed_mps <= 0:
            raise ConfigError("speed_mps", "must be positive")
        if not 0 < self.steering_bound < math.pi / 2:
            raise ConfigError("steering_bound", "must be in (0, pi/2)")
        if self.events_per_frame is None and self.time_window_us is None:
            raise ConfigError("time_window_us", "set either time_window_us or events_per_frame")
        if self.knot_spacing_m <= 0:
            raise ConfigError("knot_spacing_m", "must be positive")
        limit = self.max_curvature()
        for s, c in self.curvature_knots:
            if abs(c) > limit:
                raise ConfigError("curvature_knots", f"curvature {c} at s={s} exceeds the steering bound "
                                                     f"({self.steering_bound} rad -> |curvature| <= {limit:.4f})")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown scenario key")
        raw = dict(raw)
        if "curvature_knots" in raw:
            raw["curvature_knots"] = [tuple(k) for k in raw["curvature_knots"]]
        cfg = cls(**raw)
        cfg.validate()
        return cfg


class Road:
    """Curvature as a smooth function of arc length."""

    def __init__(self, knots: Sequence[Tuple[float, float]]):
        knots = sorted(knots)
        self.s = np.array([k[0] for k in knots], dtype=np.float64)
        self.c = np.array([k[1] for k in knots], dtype=np.float64)

    def curvature(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if self.s.size == 0:
            return np.zeros_like(s)
        if self.s.size == 1:
            return np.full_like(s, self.c[0])
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, self.s.size - 2)
        t = np.clip((s - self.s[i]) / (self.s[i + 1] - self.s[i]), 0.0, 1.0)
        blend = 0.5 - 0.5 * np.cos(np.pi * t)
        return self.c[i] + (self.c[i + 1] - self.c[i]) * blend


def scenario_knots(cfg: ScenarioConfig) -> List[Tuple[float, float]]:
    if cfg.curvature_knots:
        return list(cfg.curvature_knots)
    rng = np.random.default_rng(cfg.seed)
    length = cfg.speed_mps * cfg.duration_s + 100.0
    n = int(length / cfg.knot_spacing_m) + 2
    limit = 0.9 * cfg.max_curvature()
    return [(i * cfg.knot_spacing_m, float(rng.uniform(-limit, limit))) for i in range(n)]


class SceneRenderer:
    """Pinhole camera 1.5 m above a flat road, looking along the lane."""

    CAMERA_HEIGHT_M = 1.5
    ROAD_HALF_WIDTH_M = 3.5
    LINE_WIDTH_M = 0.2
    SUPERSAMPLE = 2

    def __init__(self, cfg: ScenarioConfig, road: Road):
        self.cfg, self.road = cfg, road
        ss = self.SUPERSAMPLE
        h, w = cfg.height * ss, cfg.width * ss
        self.focal = 0.9 * w
        self.horizon = 0.3 * h
        rows = np.arange(h) + 0.5
        cols = np.arange(w) + 0.5
        below = rows > self.horizon + 1.0
        self.ground = below
        # sky rows get depth 0; they are painted over after texturing
        depth = np.where(below, self.CAMERA_HEIGHT_M * self.focal / np.maximum(rows - self.horizon, 1.0), 0.0)
        self.depth = depth
        self.lateral = (cols[None, :] - w / 2) * depth[:, None] / self.focal
        # integration grid for the road's lateral drift ahead of the car
        self.ahead = np.linspace(0.0, float(np.max(depth)), 400)

    def centerline(self, s0: float) -> np.ndarray:
        """Lateral offset of the lane centre at each image row's depth."""
        k = self.road.curvature(s0 + self.ahead)
        ds = np.diff(self.ahead)
        heading = np.concatenate([[0.0], np.cumsum(0.5 * (k[1:] + k[:-1]) * ds)])
        offset = np.concatenate([[0.0], np.cumsum(0.5 * (heading[1:] + heading[:-1]) * ds)])
        return np.interp(self.depth, self.ahead, offset)

    def render(self, s0: float) -> np.ndarray:
        """Linear RGB image ``float[H, W, 3]`` in (0, 1] for the car at arc length ``s0``."""
        cfg = self.cfg
        center = self.centerline(s0)[:, None]
        x = self.lateral - center
        dist = s0 + self.depth[:, None]
        stripes = np.sign(np.sin(2 * np.pi * dist / cfg.stripe_period_m))
        on_road = np.abs(x) < self.ROAD_HALF_WIDTH_M
        edge = on_road & (np.abs(x) > self.ROAD_HALF_WIDTH_M - self.LINE_WIDTH_M)
        dash = (np.abs(x) < self.LINE_WIDTH_M / 2) & (np.sin(2 * np.pi * dist / 6.0) > 0)
        c = cfg.texture_contrast
        asphalt = 0.35 + 0.12 * c * stripes
        grass_tex = 0.5 + 0.25 * c * np.sign(np.sin(2 * np.pi * (dist / (1.5 * cfg.stripe_period_m) + 0.3 * x)))
        img = np.empty(x.shape + (3,))
        img[..., 0] = np.where(on_road, asphalt, 0.25 * grass_tex)
        img[..., 1] = np.where(on_road, asphalt, 0.75 * grass_tex)
        img[..., 2] = np.where(on_road, asphalt, 0.2 * grass_tex)
        img[edge] = 0.95
        img[dash & on_road] = (0.95, 0.85, 0.2)
        sky = ~self.ground
        img[sky] = (0.55, 0.7, 0.95)
        ss = self.SUPERSAMPLE
        h, w = cfg.height, cfg.width
        return img.reshape(h, ss, w, ss, 3).mean(axis=(1, 3))


def luminance(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2] + 1e-3


def generate_synthetic_driving(cfg: ScenarioConfig, out_dir) -> Path:
    """Render the scenario, simulate its events and write a dataset directory.

    Every RGB frame is paired with the event window that ends at its
    timestamp and with the nearest control record; steering is
    ``arctan(wheelbase * curvature)`` at the car's position.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    road = Road(scenario_knots(cfg))
    renderer = SceneRenderer(cfg, road)

    frame_period_us = int(round(1e6 / cfg.frame_rate_hz))
    sub = int(round(cfg.event_rate_hz / cfg.frame_rate_hz))
    video_us = [round(i * frame_period_us / sub) for i in range(cfg.samples * sub + 1)]
    rgb_frames = {}
    video = []
    for i, t in enumerate(video_us):
        img = renderer.render(cfg.speed_mps * t * 1e-6)
        video.append((t, luminance(img)))
        if i % sub == 0 and i > 0:
            rgb_frames[t] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    stream = simulate_events(video, EventCameraModel(cfg.eta))

    rgb_times = np.array(sorted(rgb_frames), dtype=np.int64)
    if cfg.events_per_frame is None:
        render = RenderConfig(cfg.width, cfg.height, time_window_us=cfg.time_window_us, start_us=0)
        render_info = {"mode": "time_window", "time_window_us": cfg.time_window_us}
    else:
        render = RenderConfig(cfg.width, cfg.height, events_per_frame=cfg.events_per_frame)
        render_info = {"mode": "count", "events_per_frame": cfg.events_per_frame}
    frames = render_frames(stream, render)
    if not frames:
        raise DataError("scenario produced no complete event frames; lower events_per_frame or eta")
    frame_ends = np.array([_frame_end(f, render) for f in frames], dtype=np.int64)

    control_period_us = 10000
    control_t = np.arange(0, video_us[-1] + 1, control_period_us, dtype=np.int64)
    steering = steering_from_curvature(road.curvature(cfg.speed_mps * control_t * 1e-6))
    matches = synchronize(rgb_times, [frame_ends, control_t])

    samples = []
    for base, f_idx, c_idx in matches:
        t = int(rgb_times[base])
        frame = frames[f_idx]
        lo, hi = _event_range(stream, frame, render)
        name = f"frames/{base:06d}.ppm"
        write_ppm(out / name, rgb_frames[t])
        samples.append({"timestamp_us": t, "frame": name, "event_range": [lo, hi], "control_row": int(c_idx)})

    write_events(out / "events.bin", stream)
    with open(out / "control.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CONTROL_COLUMNS)
        for t, s in zip(control_t, steering):
            writer.writerow([int(t), repr(float(s)), repr(float(cfg.speed_mps)), "", "", ""])
    manifest = {
        "format_version": FORMAT_VERSION,
        "width": cfg.width,
        "height": cfg.height,
        "sample_count": len(samples),
        "steering_bound": cfg.steering_bound,
        "wheelbase_m": WHEELBASE_M,
        "render": render_info,
        "source": {"synthetic": cfg.to_dict()},
        "splits": [[0, len(samples)]],
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def _frame_end(frame: EventFrame, render: RenderConfig) -> int:
    # time windows are half-open, so the window [t - dt, t) ends at t
    return frame.end_us if render.time_window_us is not None else frame.end_us + 1


def _event_range(stream: EventStream, frame: EventFrame, render: RenderConfig) -> Tuple[int, int]:
    if render.time_window_us is not None:
        lo = int(np.searchsorted(stream.t, frame.start_us, side="left"))
        hi = int(np.searchsorted(stream.t, frame.end_us, side="left"))
        return lo, hi
    lo = int(np.searchsorted(stream.t, frame.start_us, side="left"))
    # count-mode frames are whole groups of events_per_frame
    lo -= lo % render.events_per_frame
    return lo, lo + render.events_per_frame
