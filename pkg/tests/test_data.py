from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mealsense.data import (
    GLASSES_ROWS,
    WATCH_ROWS,
    Device,
    LabelInterval,
    SensorStream,
    Session,
    State,
    Utensil,
    WindowPair,
    group_by,
    load_windows,
    parse_session,
    read_labels,
    read_stream,
    resample,
    segment,
    split_by_subject,
    split_subject_independent,
    window_count,
    write_session,
)
from mealsense.errors import (
    InvalidSession,
    MalformedRow,
    NonMonotonicTime,
    OutOfRange,
    OverlappingLabels,
    SessionTooShort,
)
from mealsense.workflow import make_split

HEADER = "t,ax,ay,az,gx,gy,gz\n"


def stream(device: Device, duration: float, fn=None) -> SensorStream:
    rate = device.nominal_rate
    t = np.arange(int(round(duration * rate)) + 1) / rate
    values = np.zeros((len(t), 6)) if fn is None else fn(t)
    return SensorStream(device, t, values)


def session(duration: float, labels=(), fn=None, subject="s00") -> Session:
    return Session(subject, Utensil.SPOON, stream(Device.WATCH, duration, fn), stream(Device.GLASSES, duration, fn), labels)


def fake_window(start: float, subject: str = "s00", eating: bool = True, session_name: str = "a") -> WindowPair:
    return WindowPair(
        start, np.zeros((WATCH_ROWS, 6)), np.zeros((GLASSES_ROWS, 6)),
        State.EATING if eating else State.NON_EATING, 0 if eating else None, subject, session_name,
    )


# --- parsing -----------------------------------------------------------------------------


def test_parse_three_row_watch(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text(HEADER + "0.00,1,2,3,4,5,6\n0.02,1,2,3,4,5,6\n0.04,1,2,3,4,5,6\n")
    s = read_stream(p, Device.WATCH)
    assert len(s) == 3 and s.nominal_rate == 50
    first = next(iter(s.samples))
    assert first.accel == (1.0, 2.0, 3.0) and first.gyro == (4.0, 5.0, 6.0)


def test_repeated_timestamp_rejected_with_line(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text(HEADER + "0.00,0,0,0,0,0,0\n0.02,0,0,0,0,0,0\n0.02,0,0,0,0,0,0\n")
    with pytest.raises(NonMonotonicTime) as e:
        read_stream(p, Device.WATCH)
    assert e.value.line == 4


@pytest.mark.parametrize("row", ["0.0,1,2,3,4,5\n", "0.0,1,2,x,4,5,6\n", "0.0,1,2,3,4,5,nan\n"])
def test_malformed_row(tmp_path, row):
    p = tmp_path / "w.csv"
    p.write_text(HEADER + row)
    with pytest.raises(MalformedRow) as e:
        read_stream(p, Device.WATCH)
    assert e.value.line == 2


def test_overlapping_labels(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("start,end,state,food\n0,5,eating,3\n4,8,noneating,\n")
    with pytest.raises(OverlappingLabels) as e:
        read_labels(p)
    assert (e.value.i, e.value.j) == (0, 1)


def test_label_invariants():
    with pytest.raises(InvalidSession):
        LabelInterval(1.0, 1.0, State.NON_EATING)
    with pytest.raises(InvalidSession):
        LabelInterval(0.0, 1.0, State.EATING)
    with pytest.raises(InvalidSession):
        LabelInterval(0.0, 1.0, State.NON_EATING, 2)
    with pytest.raises(InvalidSession):
        LabelInterval(0.0, 1.0, State.EATING, 11)


def test_session_must_cover_labels():
    with pytest.raises(InvalidSession):
        session(3.0, [LabelInterval(0.0, 4.0, State.NON_EATING)])


def test_session_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = session(
        6.0,
        [LabelInterval(0.0, 2.5, State.EATING, 4), LabelInterval(2.5, 6.0, State.NON_EATING)],
        fn=lambda t: rng.normal(size=(len(t), 6)),
    )
    entry = write_session(s, tmp_path, "x")
    back = parse_session(
        tmp_path / entry["watch_csv"], tmp_path / entry["glasses_csv"], tmp_path / entry["labels_csv"],
        s.subject_id, entry["utensil"],
    )
    assert back == s


# --- resampling ------------------------------------------------------------------------------


def test_resample_constant():
    s = stream(Device.GLASSES, 5.0, lambda t: np.ones((len(t), 6)))
    np.testing.assert_array_equal(resample(s, 0.3, 9.765625, 25), np.ones((25, 6)))


def test_resample_linear_midpoints():
    s = stream(Device.WATCH, 2.0, lambda t: np.repeat(t[:, None], 6, axis=1))
    q = resample(s, 0.01, 50.0, 50)
    np.testing.assert_allclose(q[:, 0], 0.01 + np.arange(50) / 50, atol=1e-12)


def test_resample_sine_within_interpolation_bound():
    s = stream(Device.GLASSES, 4.0, lambda t: np.repeat(np.sin(2 * np.pi * t)[:, None], 6, axis=1))
    q = resample(s, 0.0, 50.0, 151)
    exact = np.sin(2 * np.pi * np.arange(151) / 50)
    # linear interpolation error <= h^2/8 * max|f''| with h = 1/10 s, f'' <= (2 pi)^2
    bound = (1 / 10) ** 2 / 8 * (2 * np.pi) ** 2
    err = np.abs(q[:, 0] - exact).max()
    assert err <= bound
    assert err > bound / 2  # queries land near midpoints, so the bound is nearly tight


def test_resample_own_grid_is_bit_exact():
    rng = np.random.default_rng(1)
    s = stream(Device.WATCH, 3.0, lambda t: rng.normal(size=(len(t), 6)))
    assert resample(s, 0.0, 50.0, len(s)).tobytes() == s.values.tobytes()


def test_resample_out_of_range():
    s = stream(Device.WATCH, 1.0)
    with pytest.raises(OutOfRange):
        resample(s, 0.5, 50.0, 50)


# --- segmentation ------------------------------------------------------------------------------


def test_window_count_examples():
    assert window_count(12.8) == 9
    assert window_count(2.56) == 1
    assert len(segment(session(12.8))) == 9
    assert len(segment(session(2.56))) == 1


@settings(max_examples=100, deadline=None)
@given(st.floats(2.56, 60.0), st.sampled_from([(2.56, 1.28), (2.0, 0.5), (1.0, 1.0), (3.0, 0.7)]))
def test_window_count_matches_enumeration(duration, spec):
    window, hop = spec
    brute = 0
    while brute * hop + window <= duration + 1e-9:
        brute += 1
    assert window_count(duration, window, hop) == brute == math.floor((duration - window) / hop + 1e-7) + 1


def test_session_too_short():
    with pytest.raises(SessionTooShort):
        segment(session(2.0))


def test_window_shapes_and_starts():
    ws = segment(session(12.8))
    assert [round(w.start_t, 9) for w in ws] == [round(1.28 * k, 9) for k in range(9)]
    assert all(w.watch_mat.shape == (128, 6) and w.glasses_mat.shape == (25, 6) for w in ws)


def test_majority_label_78_percent():
    s = session(2.56, [LabelInterval(0.0, 2.0, State.EATING, 6), LabelInterval(2.0, 2.56, State.NON_EATING)])
    (w,) = segment(s)
    assert w.state_label is State.EATING and w.food_label == 6


def test_exact_half_goes_to_non_eating():
    s = session(2.56, [LabelInterval(0.0, 1.28, State.EATING, 1), LabelInterval(1.28, 2.56, State.NON_EATING)])
    (w,) = segment(s)
    assert w.state_label is State.NON_EATING and w.food_label is None


def test_food_from_largest_overlap():
    s = session(2.56, [LabelInterval(0.0, 0.9, State.EATING, 1), LabelInterval(0.9, 2.56, State.EATING, 2)])
    assert segment(s)[0].food_label == 2


def test_segmentation_deterministic():
    rng = np.random.default_rng(3)
    s = session(8.0, fn=lambda t: rng.normal(size=(len(t), 6)))
    a, b = segment(s), segment(s)
    assert all(x.watch_mat.tobytes() == y.watch_mat.tobytes() and x.glasses_mat.tobytes() == y.glasses_mat.tobytes()
               for x, y in zip(a, b))


def test_window_pair_invariants():
    with pytest.raises(InvalidSession):
        WindowPair(0.0, np.zeros((127, 6)), np.zeros((25, 6)), State.NON_EATING)
    with pytest.raises(InvalidSession):
        WindowPair(0.0, np.zeros((128, 6)), np.zeros((25, 6)), State.EATING)


# --- splits ----------------------------------------------------------------------------------------


def test_split_2700_by_ninth():
    ws = [fake_window(1.28 * i) for i in range(2700)]
    train, test = split_subject_independent({"s": ws}, 1 / 9)
    assert len(test) == 300 and len(train) == 2400
    assert [w.start_t for w in test] == [w.start_t for w in ws[1200:1500]]


def test_split_ten_by_fifth():
    ws = [fake_window(float(i)) for i in range(10)]
    _, test = split_subject_independent({"s": ws}, 0.2)
    assert [w.start_t for w in test] == [4.0, 5.0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(3, 60), min_size=1, max_size=4), st.floats(0.05, 0.95))
def test_split_partitions_each_subject(sizes, fraction):
    groups = {f"s{i}": [fake_window(float(k), f"s{i}") for k in range(n)] for i, n in enumerate(sizes)}
    train, test = split_subject_independent(groups, fraction)
    for sid, ws in groups.items():
        tr = {w.key() for w in train if w.subject_id == sid}
        te = {w.key() for w in test if w.subject_id == sid}
        assert not tr & te and len(tr) + len(te) == len(ws)
        starts = sorted(w.start_t for w in test if w.subject_id == sid)
        assert starts == [float(k) for k in range(int(starts[0]), int(starts[0]) + len(starts))]


def test_split_by_subject_and_workflow():
    ws = [fake_window(float(k), f"s{i:02d}", eating=k % 2 == 0) for i in range(4) for k in range(6)]
    train, test = split_by_subject(ws, ["s03"])
    assert {w.subject_id for w in test} == {"s03"} and len(train) == 18
    sp = make_split(ws)
    assert {w.subject_id for w in sp.test} == {"s03"}
    assert {w.subject_id for w in sp.val} == {"s02"}
    assert {w.subject_id for w in sp.train} == {"s00", "s01"}
    mid = make_split(ws, "middle", test_fraction=1 / 3)
    assert len(mid.train) + len(mid.val) + len(mid.test) == len(ws)
    assert set(group_by(ws, "session")) == {f"s{i:02d}/a" for i in range(4)}


def test_manifest_loading(tmp_path):
    s = session(6.0, [LabelInterval(0.0, 6.0, State.EATING, 0)])
    entry = write_session(s, tmp_path / "sessions", "s00_c00")
    for key in ("watch_csv", "glasses_csv", "labels_csv"):
        entry[key] = f"sessions/{entry[key]}"
    (tmp_path / "manifest.json").write_text(json.dumps([entry]))
    ws = load_windows(tmp_path / "manifest.json")
    assert len(ws) == window_count(6.0) and all(w.session == "s00_c00" for w in ws)
