"""IMU recordings: domain types, CSV ingestion, resampling, windowing, splits.

Streams are stored as column arrays (``t`` plus an ``n x 6`` value matrix with
columns ax, ay, az, gx, gy, gz) rather than lists of sample objects; the
:class:`ImuSample` view is available for callers that want per-sample access.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    InvalidSession,
    MalformedRow,
    NonMonotonicTime,
    OutOfRange,
    OverlappingLabels,
    SessionTooShort,
)

NUM_FOODS = 11
FOOD_NAMES = (
    "Mixed Noodles", "Dumplings", "Noodle Soup", "Stir-fry", "Baozi", "Pancake",
    "Milk Tea", "Congee", "Fried Rice", "Soup", "Wontons",
)
CHANNELS = ("ax", "ay", "az", "gx", "gy", "gz")
STREAM_HEADER = ("t",) + CHANNELS
LABEL_HEADER = ("start", "end", "state", "food")

WINDOW_LEN = 2.56
HOP = 1.28
WATCH_ROWS = 128
GLASSES_ROWS = 25

# Slack for comparing timestamps parsed from decimal text.
TIME_EPS = 1e-9


class Device(str, enum.Enum):
    WATCH = "watch"
    GLASSES = "glasses"

    @property
    def nominal_rate(self) -> float:
        return 50.0 if self is Device.WATCH else 10.0


class State(str, enum.Enum):
    EATING = "eating"
    NON_EATING = "noneating"


class Utensil(str, enum.Enum):
    CHOPSTICKS = "chopsticks"
    SPOON = "spoon"
    HAND = "hand"


@dataclass(frozen=True)
class ImuSample:
    t: float
    accel: tuple[float, float, float]
    gyro: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class SensorStream:
    device: Device
    t: np.ndarray
    values: np.ndarray
    nominal_rate: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64).reshape(len(t), 6)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)
        if not self.nominal_rate:
            object.__setattr__(self, "nominal_rate", self.device.nominal_rate)
        if self.nominal_rate <= 0:
            raise InvalidSession("nominal_rate must be positive")
        if len(t) and np.any(np.diff(t) <= 0):
            raise InvalidSession("timestamps must be strictly increasing")
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(t)):
            raise InvalidSession("non-finite sample values")

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SensorStream):
            return NotImplemented
        return (
            self.device == other.device
            and self.nominal_rate == other.nominal_rate
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.values, other.values)
        )

    @property
    def samples(self) -> Iterator[ImuSample]:
        for t, row in zip(self.t, self.values):
            yield ImuSample(float(t), tuple(row[:3]), tuple(row[3:]))

    @property
    def start(self) -> float:
        return float(self.t[0])

    @property
    def end(self) -> float:
        return float(self.t[-1])


@dataclass(frozen=True)
class LabelInterval:
    start: float
    end: float
    state: State
    food: int | None = None

    def __post_init__(self):
        if not self.start < self.end:
            raise InvalidSession(f"label interval needs start < end, got [{self.start}, {self.end}]")
        if (self.state is State.EATING) != (self.food is not None):
            raise InvalidSession("food id must be present exactly for eating intervals")
        if self.food is not None and not 0 <= self.food < NUM_FOODS:
            raise InvalidSession(f"food id {self.food} outside [0, {NUM_FOODS})")


@dataclass(frozen=True)
class Session:
    subject_id: str
    utensil: Utensil
    watch: SensorStream
    glasses: SensorStream
    labels: tuple[LabelInterval, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        check_overlaps(self.labels)
        if self.labels:
            lo = min(iv.start for iv in self.labels)
            hi = max(iv.end for iv in self.labels)
            for s in (self.watch, self.glasses):
                if len(s) == 0 or s.start > lo + TIME_EPS or s.end < hi - TIME_EPS:
                    raise InvalidSession(f"{s.device.value} stream does not cover the labelled span")


@dataclass(frozen=True, eq=False)
class WindowPair:
    start_t: float
    watch_mat: np.ndarray
    glasses_mat: np.ndarray
    state_label: State
    food_label: int | None = None
    subject_id: str = ""
    session: str = ""

    def __post_init__(self):
        if self.watch_mat.shape != (WATCH_ROWS, 6) or self.glasses_mat.shape != (GLASSES_ROWS, 6):
            raise InvalidSession(
                f"window shapes {self.watch_mat.shape}, {self.glasses_mat.shape} "
                f"!= ({WATCH_ROWS}, 6), ({GLASSES_ROWS}, 6)"
            )
        if (self.state_label is State.EATING) != (self.food_label is not None):
            raise InvalidSession("food_label must be present exactly for eating windows")

    @property
    def is_eating(self) -> bool:
        return self.state_label is State.EATING

    def key(self) -> tuple[str, str, float]:
        return (self.subject_id, self.session, round(self.start_t, 9))


def check_overlaps(labels: Sequence[LabelInterval]) -> None:
    order = sorted(range(len(labels)), key=lambda i: labels[i].start)
    for a, b in zip(order, order[1:]):
        if labels[b].start < labels[a].end - TIME_EPS:
            raise OverlappingLabels(min(a, b), max(a, b))


# --- CSV ingestion ------------------------------------------------------------


def _read_rows(path: Path, header: tuple[str, ...]) -> list[tuple[int, list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise MalformedRow(1, "missing header") from None
        if tuple(h.strip() for h in head) != header:
            raise MalformedRow(1, f"expected header {','.join(header)}")
        return [(reader.line_num, row) for row in reader if row]


def read_stream(path: str | Path, device: Device) -> SensorStream:
    ts: list[float] = []
    vals: list[list[float]] = []
    for line, row in _read_rows(Path(path), STREAM_HEADER):
        if len(row) != 7:
            raise MalformedRow(line, f"expected 7 fields, got {len(row)}")
        try:
            nums = [float(x) for x in row]
        except ValueError as exc:
            raise MalformedRow(line, str(exc)) from None
        if not all(math.isfinite(x) for x in nums):
            raise MalformedRow(line, "non-finite value")
        if ts and nums[0] <= ts[-1]:
            raise NonMonotonicTime(line)
        ts.append(nums[0])
        vals.append(nums[1:])
    return SensorStream(device, np.array(ts), np.array(vals).reshape(len(ts), 6))


def read_labels(path: str | Path) -> tuple[LabelInterval, ...]:
    out = []
    for line, row in _read_rows(Path(path), LABEL_HEADER):
        if len(row) != 4:
            raise MalformedRow(line, f"expected 4 fields, got {len(row)}")
        try:
            start, end = float(row[0]), float(row[1])
            state = State(row[2].strip().lower())
            food = int(row[3]) if row[3].strip() else None
            out.append(LabelInterval(start, end, state, food))
        except (ValueError, InvalidSession) as exc:
            raise MalformedRow(line, str(exc)) from None
    check_overlaps(out)
    return tuple(out)


def parse_session(
    watch_path: str | Path,
    glasses_path: str | Path,
    labels_path: str | Path,
    subject_id: str,
    utensil: Utensil | str,
) -> Session:
    return Session(
        subject_id=subject_id,
        utensil=Utensil(utensil),
        watch=read_stream(watch_path, Device.WATCH),
        glasses=read_stream(glasses_path, Device.GLASSES),
        labels=read_labels(labels_path),
    )


def write_stream(stream: SensorStream, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STREAM_HEADER)
        for t, row in zip(stream.t.tolist(), stream.values.tolist()):
            w.writerow([repr(t)] + [repr(x) for x in row])


def write_labels(labels: Sequence[LabelInterval], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for iv in labels:
            w.writerow([repr(float(iv.start)), repr(float(iv.end)), iv.state.value, "" if iv.food is None else iv.food])


def write_session(session: Session, directory: str | Path, stem: str) -> dict[str, str]:
    """Write the three CSV files for ``session``; returns the manifest entry (relative paths)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {
        "watch_csv": f"{stem}_watch.csv",
        "glasses_csv": f"{stem}_glasses.csv",
        "labels_csv": f"{stem}_labels.csv",
    }
    write_stream(session.watch, directory / names["watch_csv"])
    write_stream(session.glasses, directory / names["glasses_csv"])
    write_labels(session.labels, directory / names["labels_csv"])
    return {"subject_id": session.subject_id, "utensil": session.utensil.value, **names}


# --- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    utensil: str
    watch_csv: Path
    glasses_csv: Path
    labels_csv: Path

    @property
    def name(self) -> str:
        return self.watch_csv.name.removesuffix("_watch.csv")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise InvalidSession("manifest must be a JSON array")
    base = path.parent
    out = []
    for e in entries:
        out.append(
            ManifestEntry(
                subject_id=str(e["subject_id"]),
                utensil=e["utensil"],
                watch_csv=base / e["watch_csv"],
                glasses_csv=base / e["glasses_csv"],
                labels_csv=base / e["labels_csv"],
            )
        )
    return out


def load_sessions(manifest_path: str | Path) -> list[tuple[ManifestEntry, Session]]:
    return [
        (e, parse_session(e.watch_csv, e.glasses_csv, e.labels_csv, e.subject_id, e.utensil))
        for e in read_manifest(manifest_path)
    ]


# --- resampling and windowing --------------------------------------------------


def resample(stream: SensorStream, t0: float, rate: float, n: int) -> np.ndarray:
    """Linear interpolation of every channel at ``t0 + k / rate`` for ``k < n``.

    Query times within :data:`TIME_EPS` of a sample time return that sample
    exactly.
    """
    t = stream.t
    q = t0 + np.arange(n) / rate
    if len(t) == 0 or q[0] < t[0] - TIME_EPS or q[-1] > t[-1] + TIME_EPS:
        raise OutOfRange(
            f"requested [{q[0]:.6f}, {q[-1]:.6f}] outside stream span "
            f"[{t[0] if len(t) else float('nan'):.6f}, {t[-1] if len(t) else float('nan'):.6f}]"
        )
    if len(t) == 1:
        return np.repeat(stream.values, n, axis=0)
    i = np.clip(np.searchsorted(t, q, side="right") - 1, 0, len(t) - 2)
    frac = (q - t[i]) / (t[i + 1] - t[i])
    lo, hi = stream.values[i], stream.values[i + 1]
    out = lo + frac[:, None] * (hi - lo)
    near_lo = np.abs(q - t[i]) <= TIME_EPS
    near_hi = np.abs(q - t[i + 1]) <= TIME_EPS
    out[near_lo] = lo[near_lo]
    out[near_hi] = hi[near_hi]
    return out


def window_count(duration: float, window_len: float = WINDOW_LEN, hop: float = HOP) -> int:
    if duration < window_len - TIME_EPS:
        return 0
    return int(math.floor((duration - window_len) / hop + 1e-7)) + 1


def _window_label(labels: Sequence[LabelInterval], s: float, e: float) -> tuple[State, int | None]:
    eating = 0.0
    best: tuple[float, int | None] = (0.0, None)
    for iv in labels:
        if iv.state is not State.EATING:
            continue
        ov = min(e, iv.end) - max(s, iv.start)
        if ov <= 0:
            continue
        eating += ov
        if ov > best[0] + TIME_EPS:
            best = (ov, iv.food)
    # Exactly half eating is a tie and goes to NonEating.
    if eating - 0.5 * (e - s) > TIME_EPS:
        return State.EATING, best[1]
    return State.NON_EATING, None


def segment(
    session: Session,
    window_len: float = WINDOW_LEN,
    hop: float = HOP,
    session_name: str = "",
) -> list[WindowPair]:
    """Slide a ``window_len`` window by ``hop`` over the span both streams cover."""
    if window_len <= 0 or not 0 < hop <= window_len:
        raise ValueError("need window_len > 0 and 0 < hop <= window_len")
    start = max(session.watch.start, session.glasses.start)
    end = min(session.watch.end, session.glasses.end)
    n = window_count(end - start, window_len, hop)
    if n == 0:
        raise SessionTooShort(f"session covers {end - start:.3f} s < window {window_len} s")
    watch_rate = WATCH_ROWS / window_len
    glasses_rate = GLASSES_ROWS / window_len
    out = []
    for k in range(n):
        s = start + k * hop
        state, food = _window_label(session.labels, s, s + window_len)
        out.append(
            WindowPair(
                start_t=s,
                watch_mat=resample(session.watch, s, watch_rate, WATCH_ROWS),
                glasses_mat=resample(session.glasses, s, glasses_rate, GLASSES_ROWS),
                state_label=state,
                food_label=food,
                subject_id=session.subject_id,
                session=session_name,
            )
        )
    return out


def load_windows(manifest_path: str | Path) -> list[WindowPair]:
    windows: list[WindowPair] = []
    for entry, session in load_sessions(manifest_path):
        windows.extend(segment(session, session_name=entry.name))
    return windows


# --- splits -----------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_subject_independent(
    groups: Mapping[str, Sequence[WindowPair]], test_fraction: float
) -> tuple[list[WindowPair], list[WindowPair]]:
    """Hold out the contiguous middle ``test_fraction`` of each group's time-ordered windows."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    train: list[WindowPair] = []
    test: list[WindowPair] = []
    for key in sorted(groups):
        ws = sorted(groups[key], key=lambda w: (w.session, w.start_t))
        n = len(ws)
        if n < 3:
            raise ValueError(f"group {key!r} has {n} windows; need at least 3")
        n_test = min(max(_round_half_up(n * test_fraction), 1), n - 1)
        lo = (n - n_test) // 2
        test.extend(ws[lo : lo + n_test])
        train.extend(ws[:lo] + ws[lo + n_test :])
    return train, test


def split_by_subject(
    windows: Sequence[WindowPair], held_out: Sequence[str]
) -> tuple[list[WindowPair], list[WindowPair]]:
    """Leave-subjects-out split: every window of a ``held_out`` subject goes to test."""
    held = set(held_out)
    train = [w for w in windows if w.subject_id not in held]
    test = [w for w in windows if w.subject_id in held]
    return train, test


def group_by(windows: Sequence[WindowPair], by: str = "subject") -> dict[str, list[WindowPair]]:
    out: dict[str, list[WindowPair]] = {}
    for w in windows:
        key = w.subject_id if by == "subject" else f"{w.subject_id}/{w.session}"
        out.setdefault(key, []).append(w)
    return out


def subjects_of(windows: Sequence[WindowPair]) -> list[str]:
    return sorted({w.subject_id for w in windows})


@dataclass
class Split:
    train: list[WindowPair] = field(default_factory=list)
    val: list[WindowPair] = field(default_factory=list)
    test: list[WindowPair] = field(default_factory=list)
