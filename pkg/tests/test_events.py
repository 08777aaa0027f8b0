import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drfuser.errors import ContractError, DataError, DomainError, IntegrityError
from drfuser.events import (
    Event,
    EventCameraModel,
    EventFrame,
    EventStream,
    RenderConfig,
    normalize_frame,
    read_events,
    read_events_csv,
    render_frames,
    simulate_events,
    synchronize,
    write_events,
    write_events_csv,
)


def scalar_pixel_simulator(times, log_values, eta):
    """One pixel, plain Python: the reference for simulate_events."""
    out = []
    ref = log_values[0]
    for (t0, l0), (t1, l1) in zip(zip(times, log_values), zip(times[1:], log_values[1:])):
        d = l1 - ref
        k = math.floor(abs(d) / eta + 1e-9)
        p = 1 if d > 0 else -1
        for m in range(1, k + 1):
            level = ref + m * p * eta
            frac = 1.0 if l1 == l0 else min(max((level - l0) / (l1 - l0), 0.0), 1.0)
            out.append((t0 + math.floor(frac * (t1 - t0)), p))
        ref += k * p * eta
    return out


def random_stream(rng, n, width=8, height=6):
    t = np.sort(rng.integers(0, 10**6, n))
    return EventStream(width, height, rng.integers(0, width, n), rng.integers(0, height, n), t,
                       rng.choice([-1, 1], n))


# --- simulate_events ------------------------------------------------------------

def test_constant_video_gives_no_events():
    img = np.full((4, 5), 0.7)
    stream = simulate_events([(0, img), (1000, img), (2000, img)], EventCameraModel(eta=0.1))
    assert len(stream) == 0 and (stream.width, stream.height) == (5, 4)


def test_single_threshold_step_fires_once():
    eta = 0.25
    before = np.full((3, 3), 0.5)
    after = before.copy()
    after[1, 2] = 0.5 * math.exp(eta)
    stream = simulate_events([(0, before), (500, after)], EventCameraModel(eta=eta))
    assert list(stream) == [Event(x=2, y=1, t=500, p=1)]


def test_matches_per_pixel_scalar_simulator():
    rng = np.random.default_rng(0)
    eta = 0.15
    times = [int(t) for t in np.cumsum(rng.integers(500, 2000, 10))]
    frames = rng.uniform(0.05, 1.0, (10, 8, 8))
    stream = simulate_events(list(zip(times, frames)), EventCameraModel(eta=eta))
    assert np.all(np.diff(stream.t) >= 0)
    expected = []
    for y in range(8):
        for x in range(8):
            for t, p in scalar_pixel_simulator(times, [math.log(f[y, x]) for f in frames], eta):
                expected.append((t, y, x, p))
    got = sorted((e.t, e.y, e.x, e.p) for e in stream)
    assert got == sorted(expected)


def test_polarity_follows_brightness_delta():
    rng = np.random.default_rng(1)
    direction = rng.choice([-1.0, 1.0], (5, 5))
    steps = rng.uniform(0.0, 0.4, (6, 5, 5)).cumsum(axis=0)
    frames = np.exp(direction * steps)
    stream = simulate_events(list(zip(range(0, 6000, 1000), frames)), EventCameraModel(eta=0.2))
    assert len(stream) > 0
    for e in stream:
        assert e.p == direction[e.y, e.x]


def test_simulate_rejects_bad_input():
    with pytest.raises(DomainError):
        simulate_events([(0, np.ones((2, 2))), (1, np.zeros((2, 2)))], EventCameraModel())
    with pytest.raises(ContractError):
        simulate_events([(10, np.ones((2, 2))), (5, np.ones((2, 2)))], EventCameraModel())
    with pytest.raises(DomainError):
        EventCameraModel(eta=0.0)


def test_linear_ramp_event_count():
    eta, h, w = 0.1, 6, 7
    times = list(range(0, 21000, 1000))
    total = 1.37
    frames = [np.full((h, w), math.exp(total * i / 20)) for i in range(21)]
    stream = simulate_events(list(zip(times, frames)), EventCameraModel(eta=eta))
    frame = render_frames(stream, RenderConfig(w, h, events_per_frame=len(stream)))[0]
    target = h * w * total / eta
    assert abs(frame.positive.sum() - target) <= h * w
    assert frame.negative.sum() == 0


# --- render_frames ------------------------------------------------------------------

def test_render_three_events_one_pixel():
    stream = EventStream.from_events(4, 3, [Event(1, 2, t, 1) for t in (0, 5, 9)])
    (frame,) = render_frames(stream, RenderConfig(4, 3, events_per_frame=3))
    assert frame.positive[2, 1] == 3 and frame.positive.sum() == 3
    assert frame.negative.sum() == 0
    assert (frame.start_us, frame.end_us) == (0, 9)


def test_trailing_partial_group_dropped():
    stream = EventStream.from_events(2, 2, [Event(0, 0, t, 1) for t in range(5)])
    frames = render_frames(stream, RenderConfig(2, 2, events_per_frame=3))
    assert len(frames) == 1 and frames[0].n_events == 3


def test_render_matches_histogram_oracle():
    rng = np.random.default_rng(2)
    stream = random_stream(rng, 10_000)
    frames = render_frames(stream, RenderConfig(8, 6, events_per_frame=1000))
    assert len(frames) == 10
    events = list(stream)
    for g, frame in enumerate(frames):
        oracle = np.zeros((2, 6, 8), dtype=np.int64)
        for e in events[g * 1000:(g + 1) * 1000]:
            oracle[0 if e.p > 0 else 1, e.y, e.x] += 1
        assert np.array_equal(frame.counts, oracle)
    assert sum(f.n_events for f in frames) == 10 * 1000


def test_time_window_mode():
    stream = EventStream.from_events(2, 1, [Event(0, 0, t, 1 if t % 2 else -1) for t in range(0, 100, 7)])
    frames = render_frames(stream, RenderConfig(2, 1, time_window_us=25, start_us=0))
    assert [(f.start_us, f.end_us) for f in frames] == [(0, 25), (25, 50), (50, 75)]
    assert [f.n_events for f in frames] == [4, 4, 3]


def test_render_out_of_range_event_names_index():
    stream = EventStream(3, 3, [0, 5], [0, 0], [1, 2], [1, 1])
    with pytest.raises(DataError, match="event 1"):
        render_frames(stream, RenderConfig(3, 3, events_per_frame=1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.integers(1, 50), st.integers(0, 2**31))
def test_render_conserves_events(n, per_frame, seed):
    stream = random_stream(np.random.default_rng(seed), n)
    frames = render_frames(stream, RenderConfig(8, 6, events_per_frame=per_frame))
    assert len(frames) == n // per_frame
    assert sum(f.n_events for f in frames) == per_frame * len(frames)


# --- normalize_frame -----------------------------------------------------------------

def test_normalize_empty_and_single():
    empty = EventFrame(np.zeros((2, 3, 3), dtype=np.int64), 0, 1)
    assert not normalize_frame(empty).data.any()
    one = np.zeros((2, 3, 3), dtype=np.int64)
    one[1, 2, 0] = 1
    data = normalize_frame(EventFrame(one, 0, 1)).data
    assert data.shape == (2, 3, 3) and (data == 1.0).sum() == 1 and data.sum() == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_normalized_peak_is_one(seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 5, (2, 4, 4))
    data = normalize_frame(EventFrame(counts, 0, 1)).data
    assert data.min() >= 0 and data.max() <= 1
    if counts.any():
        assert data.max() == 1.0


# --- synchronize ---------------------------------------------------------------------

def test_synchronize_nearest_neighbour():
    assert synchronize([0, 100, 200], [[10, 90, 205]]) == [(0, 0), (1, 1), (2, 2)]
    ts = [3, 8, 20, 21]
    assert synchronize(ts, [ts]) == [(i, i) for i in range(4)]


def test_synchronize_ties_go_earlier():
    assert synchronize([50], [[40, 60]]) == [(0, 0)]
    assert synchronize([50], [[40, 40, 60]]) == [(0, 0)]


def test_synchronize_matches_exhaustive_search():
    rng = np.random.default_rng(3)
    for _ in range(100):
        base = np.sort(rng.integers(0, 1000, rng.integers(1, 20)))
        others = [np.sort(rng.integers(0, 1000, rng.integers(1, 40))) for _ in range(2)]
        got = synchronize(base, others)
        for i, t in enumerate(base):
            expect = tuple(int(np.argmin(np.abs(o - t))) for o in others)
            assert got[i] == (i,) + expect


def test_synchronize_monotone():
    rng = np.random.default_rng(4)
    base = np.sort(rng.integers(0, 10**5, 50))
    other = np.sort(rng.integers(0, 10**5, 300))
    matched = [other[j] for _, j in synchronize(base, [other])]
    assert np.all(np.diff(matched) >= 0)


def test_synchronize_empty_other():
    with pytest.raises(ContractError):
        synchronize([1, 2], [[]])


# --- file formats --------------------------------------------------------------------

def test_event_file_round_trip_and_layout(tmp_path):
    stream = EventStream.from_events(346, 260, [Event(3, 4, 10, 1), Event(345, 259, 11, -1)])
    path = tmp_path / "events.bin"
    write_events(path, stream)
    raw = path.read_bytes()
    assert raw[:4] == b"DRFE"
    assert len(raw) == 14 + 2 * 9
    assert raw[14:23] == (10).to_bytes(4, "little") + (3).to_bytes(2, "little") + (4).to_bytes(2, "little") + b"\x01"
    assert raw[-1:] == b"\x00"
    back = read_events(path)
    assert list(back) == list(stream) and (back.width, back.height) == (346, 260)


def test_event_file_truncated(tmp_path):
    rng = np.random.default_rng(5)
    path = tmp_path / "events.bin"
    write_events(path, random_stream(rng, 20))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(IntegrityError):
        read_events(path)


def test_event_csv_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    stream = random_stream(rng, 30)
    path = tmp_path / "events.csv"
    write_events_csv(path, stream)
    back = read_events_csv(path)
    assert list(back) == list(stream)
