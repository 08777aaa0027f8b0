"""Event-camera simulation, frame rendering and stream synchronization."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from drfuser.errors import ContractError, DataError, DomainError, IntegrityError
from drfuser.tensor import Tensor

# Threshold crossings are counted with this relative slack so that a log
# step of exactly eta (which rounds to 0.9999999...*eta) still fires.
_CROSSING_SLACK = 1e-9


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Time-ordered events from a ``width`` x ``height`` sensor.

    Stored column-wise; ``t`` is in integer microseconds and ``p`` in
    {-1, +1}.
    """

    width: int
    height: int
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)
        if not (len(self.x) == len(self.y) == len(self.t) == len(self.p)):
            raise DataError("event columns have different lengths")

    @classmethod
    def from_events(cls, width: int, height: int, events: Sequence[Event]) -> "EventStream":
        if not events:
            return cls(width, height)
        x, y, t, p = zip(*events)
        return cls(width, height, np.array(x), np.array(y), np.array(t), np.array(p))

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x, self.y, self.t, self.p):
            yield Event(int(x), int(y), int(t), int(p))

    def validate(self) -> None:
        """Raise :class:`DataError` on the first out-of-range or unordered event."""
        bad = np.flatnonzero((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height))
        if bad.size:
            i = int(bad[0])
            raise DataError(f"event {i} at ({self.x[i]}, {self.y[i]}) outside {self.width}x{self.height} sensor")
        bad = np.flatnonzero((self.p != 1) & (self.p != -1))
        if bad.size:
            raise DataError(f"event {int(bad[0])} has polarity {self.p[bad[0]]}, expected -1 or +1")
        bad = np.flatnonzero(np.diff(self.t) < 0)
        if bad.size:
            raise DataError(f"event {int(bad[0]) + 1} timestamp goes backwards")


@dataclass
class EventCameraModel:
    """Contrast threshold ``eta`` in log-brightness units."""

    eta: float = 0.2

    def __post_init__(self):
        if not self.eta > 0:
            raise DomainError(f"contrast threshold eta must be > 0, got {self.eta}")


@dataclass
class RenderConfig:
    """How to slice a stream into frames.

    With ``time_window_us`` unset, every ``events_per_frame`` consecutive
    events form one frame. With it set, frames cover consecutive windows of
    that many microseconds starting at ``start_us`` (default: first event).
    """

    width: int
    height: int
    events_per_frame: int = 100000
    time_window_us: Optional[int] = None
    start_us: Optional[int] = None

    def __post_init__(self):
        if self.events_per_frame < 1:
            raise ContractError(f"events_per_frame must be >= 1, got {self.events_per_frame}")
        if self.time_window_us is not None and self.time_window_us < 1:
            raise ContractError(f"time_window_us must be >= 1, got {self.time_window_us}")


@dataclass
class EventFrame:
    """Per-pixel polarity counts; ``counts[0]`` positive, ``counts[1]`` negative."""

    counts: np.ndarray
    start_us: int
    end_us: int

    @property
    def positive(self) -> np.ndarray:
        return self.counts[0]

    @property
    def negative(self) -> np.ndarray:
        return self.counts[1]

    @property
    def n_events(self) -> int:
        return int(self.counts.sum())


# --- simulation -----------------------------------------------------------------

def simulate_events(video: Sequence[Tuple[int, np.ndarray]], model: EventCameraModel) -> EventStream:
    """Emit events wherever log brightness moves a full threshold from its reference.

    The per-pixel reference starts at the first frame. Between consecutive
    frames a pixel whose log brightness moved by ``d`` from its reference
    fires ``floor(|d| / eta)`` events of polarity ``sign(d)``; each crossing
    is timestamped by linear interpolation of log brightness inside the
    frame interval, and the reference advances by one ``eta`` per event.
    """
    if not video:
        raise ContractError("video has no frames")
    first = np.asarray(video[0][1], dtype=np.float64)
    if first.ndim != 2:
        raise ContractError(f"frames must be 2-D brightness images, got shape {first.shape}")
    height, width = first.shape
    eta = float(model.eta)
    prev_t = int(video[0][0])
    prev_log = _log_brightness(first, 0)
    ref = prev_log.copy()
    cols = {k: [] for k in "xytp"}
    for idx, (t, img) in enumerate(video[1:], start=1):
        t = int(t)
        img = np.asarray(img, dtype=np.float64)
        if img.shape != first.shape:
            raise ContractError(f"frame {idx} has shape {img.shape}, expected {first.shape}")
        if t < prev_t:
            raise ContractError(f"frame {idx} timestamp {t} precedes {prev_t}")
        cur_log = _log_brightness(img, idx)
        delta = cur_log - ref
        k = np.floor(np.abs(delta) / eta + _CROSSING_SLACK).astype(np.int64)
        hit = np.flatnonzero(k > 0)
        if hit.size:
            counts = k.reshape(-1)[hit]
            pix = np.repeat(hit, counts)
            # crossing number m = 1..k within each pixel
            m = np.arange(pix.size) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            pol = np.sign(delta.reshape(-1)[pix])
            level = ref.reshape(-1)[pix] + m * pol * eta
            lo = prev_log.reshape(-1)[pix]
            span = cur_log.reshape(-1)[pix] - lo
            safe = np.where(span == 0, 1.0, span)
            frac = np.where(span == 0, 1.0, np.clip((level - lo) / safe, 0.0, 1.0))
            ts = prev_t + np.floor(frac * (t - prev_t)).astype(np.int64)
            cols["x"].append(pix % width)
            cols["y"].append(pix // width)
            cols["t"].append(ts)
            cols["p"].append(pol.astype(np.int8))
            ref.reshape(-1)[hit] += counts * np.sign(delta.reshape(-1)[hit]) * eta
        prev_t, prev_log = t, cur_log
    if not cols["t"]:
        return EventStream(width, height)
    x, y, ts, p = (np.concatenate(cols[k]) for k in "xytp")
    # stable sort keeps pixel order, then crossing order, among equal timestamps
    order = np.argsort(ts, kind="stable")
    return EventStream(width, height, x[order], y[order], ts[order], p[order])


def _log_brightness(img: np.ndarray, idx: int) -> np.ndarray:
    if not np.all(img > 0):
        raise DomainError(f"frame {idx} has non-positive brightness; log is undefined")
    return np.log(img)


# --- rendering ------------------------------------------------------------------

def _histogram(stream: EventStream, lo: int, hi: int) -> np.ndarray:
    counts = np.zeros((2, stream.height, stream.width), dtype=np.int64)
    channel = (stream.p[lo:hi] < 0).astype(np.int64)
    np.add.at(counts, (channel, stream.y[lo:hi], stream.x[lo:hi]), 1)
    return counts


def render_window(stream: EventStream, start_us: int, end_us: int) -> EventFrame:
    """Accumulate the events with ``start_us <= t < end_us``."""
    lo = int(np.searchsorted(stream.t, start_us, side="left"))
    hi = int(np.searchsorted(stream.t, end_us, side="left"))
    return EventFrame(_histogram(stream, lo, hi), int(start_us), int(end_us))


def render_frames(stream: EventStream, config: RenderConfig) -> List[EventFrame]:
    """Turn a stream into polarity-count frames.

    Count mode drops a trailing group shorter than ``events_per_frame``.
    Time mode emits only windows whose end does not pass the last event.
    """
    if (config.width, config.height) != (stream.width, stream.height):
        raise ContractError(f"render extents {config.width}x{config.height} differ from stream "
                            f"{stream.width}x{stream.height}")
    stream.validate()
    frames = []
    if config.time_window_us is None:
        n = config.events_per_frame
        for g in range(len(stream) // n):
            lo, hi = g * n, (g + 1) * n
            frames.append(EventFrame(_histogram(stream, lo, hi), int(stream.t[lo]), int(stream.t[hi - 1])))
        return frames
    if not len(stream):
        return frames
    dt = config.time_window_us
    start = int(stream.t[0]) if config.start_us is None else int(config.start_us)
    last = int(stream.t[-1])
    while start + dt <= last + 1:
        frames.append(render_window(stream, start, start + dt))
        start += dt
    return frames


def normalize_frame(frame: EventFrame, dtype=None) -> Tensor:
    """Scale counts into [0, 1] by the frame's largest per-pixel count."""
    peak = frame.counts.max() if frame.counts.size else 0
    data = frame.counts.astype(np.float64)
    if peak > 0:
        data = data / peak
    return Tensor(data, dtype=dtype or np.float32)


# --- synchronization ------------------------------------------------------------

def nearest_indices(base: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Index into sorted ``other`` nearest to each ``base`` timestamp.

    Ties go to the earlier timestamp, and among equal timestamps to the
    first occurrence.
    """
    base = np.asarray(base, dtype=np.int64)
    other = np.asarray(other, dtype=np.int64)
    if other.size == 0:
        raise ContractError("cannot synchronize against an empty sequence")
    right = np.clip(np.searchsorted(other, base, side="left"), 0, other.size - 1)
    left = np.clip(right - 1, 0, other.size - 1)
    pick = np.where(np.abs(base - other[left]) <= np.abs(other[right] - base), left, right)
    return np.searchsorted(other, other[pick], side="left")


def synchronize(base: Sequence[int], others: Sequence[Sequence[int]]) -> List[Tuple[int, ...]]:
    """Match every ``base`` sample to its nearest neighbour in each other stream.

    ``base`` should be the lowest-rate stream; one tuple
    ``(base_index, other_0_index, ...)`` is returned per base element.
    """
    base = np.asarray(base, dtype=np.int64)
    if np.any(np.diff(base) < 0):
        raise ContractError("base timestamps are not sorted")
    columns = [np.arange(base.size)]
    for k, other in enumerate(others):
        other = np.asarray(other, dtype=np.int64)
        if other.size == 0:
            raise ContractError(f"other stream {k} is empty")
        if np.any(np.diff(other) < 0):
            raise ContractError(f"other stream {k} timestamps are not sorted")
        columns.append(nearest_indices(base, other))
    return [tuple(int(c[i]) for c in columns) for i in range(base.size)]


# --- file formats ---------------------------------------------------------------

EVENT_MAGIC = b"DRFE"
EVENT_VERSION = 1
_HEADER = struct.Struct("<4sHHHI")
_RECORD = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


def write_events(path, stream: EventStream) -> None:
    """Binary event file.

    Header: 4-byte magic ``DRFE``, u16 version, u16 width, u16 height,
    u32 event count. Then 9 bytes per event: u32 t (microseconds),
    u16 x, u16 y, u8 polarity (0 for -1, 1 for +1). Little-endian.
    """
    stream.validate()
    if len(stream) and (stream.t[0] < 0 or stream.t[-1] > 0xFFFFFFFF):
        raise DataError("event timestamps do not fit the 32-bit microsecond field")
    rec = np.empty(len(stream), dtype=_RECORD)
    rec["t"], rec["x"], rec["y"] = stream.t, stream.x, stream.y
    rec["p"] = (stream.p > 0).astype(np.uint8)
    header = _HEADER.pack(EVENT_MAGIC, EVENT_VERSION, stream.width, stream.height, len(stream))
    Path(path).write_bytes(header + rec.tobytes())


def read_events(path) -> EventStream:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise IntegrityError(f"{path}: shorter than the event-file header")
    magic, version, width, height, count = _HEADER.unpack_from(buf)
    if magic != EVENT_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != EVENT_VERSION:
        raise IntegrityError(f"{path}: unsupported event-file version {version}")
    expected = _HEADER.size + count * _RECORD.itemsize
    if len(buf) != expected:
        raise IntegrityError(f"{path}: header declares {count} events ({expected} bytes) "
                             f"but file has {len(buf)} bytes")
    rec = np.frombuffer(buf, dtype=_RECORD, count=count, offset=_HEADER.size)
    p = np.where(rec["p"] == 1, 1, -1).astype(np.int8)
    if np.any(rec["p"] > 1):
        raise IntegrityError(f"{path}: polarity byte other than 0x00/0x01")
    stream = EventStream(width, height, rec["x"], rec["y"], rec["t"], p)
    try:
        stream.validate()
    except DataError as exc:
        raise IntegrityError(f"{path}: {exc}") from exc
    return stream


def write_events_csv(path, stream: EventStream) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# width={stream.width} height={stream.height}\n")
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "p"])
        for e in stream:
            w.writerow([e.t, e.x, e.y, e.p])


def read_events_csv(path, width: Optional[int] = None, height: Optional[int] = None) -> EventStream:
    rows = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            meta = dict(kv.split("=") for kv in first[1:].split())
            width = width or int(meta["width"])
            height = height or int(meta["height"])
        else:
            fh.seek(0)
        for row in csv.DictReader(fh):
            rows.append(Event(int(row["x"]), int(row["y"]), int(row["t"]), int(row["p"])))
    if width is None or height is None:
        raise DataError(f"{path}: sensor extents missing (no '# width= height=' line)")
    stream = EventStream.from_events(width, height, rows)
    stream.validate()
    return stream

