"""Deterministic synthetic eating sessions.

Each food class is a periodic multi-channel gesture (a base frequency, its
harmonics, and a per-channel amplitude profile). Non-eating time is filled
with distractor segments that a reconstruction model trained on gestures has
no reason to predict well: resting tremor with postural drift (``idle``),
high-frequency fidgeting (``jitter``) and gesticulation (``burst``): an
eating-like arm oscillation broken up by irregular jerks and extra sensor
noise, which a food classifier alone happily mistakes for a meal.

The glasses stream is the watch pattern attenuated by 0.3 plus independent
noise. All randomness comes from :class:`~mealsense.seeding.SplitMix64`.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .data import (
    FOOD_NAMES,
    HOP,
    Device,
    LabelInterval,
    SensorStream,
    Session,
    State,
    Utensil,
    WindowPair,
    segment,
    write_session,
)
from .seeding import SplitMix64, derive_seed

GLASSES_GAIN = 0.3
PHASES = np.arange(6) * math.pi / 6
WATCH_RATE = 50.0
GLASSES_RATE = 10.0

# Dataset layout, in units of the 1.28 s hop so that every label boundary
# falls on the window grid.
GESTURE_HOPS_TARGET = 16
DISTRACTOR_HOPS = 10
EATING_NOISE = 0.1
BURST_NOISE = 0.3
BURST_JERK_RATE = 1.0
BURST_JERK_AMP = 1.0


@dataclass(frozen=True)
class GestureSpec:
    class_id: int
    base_freq: float
    amp: tuple[float, ...]
    harmonics: int = 0
    harmonic_decay: float = 0.5
    noise_sigma: float = 0.05
    duration: float = 10.0

    def __post_init__(self):
        if not 0 <= self.class_id < len(FOOD_NAMES):
            raise ValueError(f"class_id {self.class_id} out of range")
        if self.base_freq <= 0 or self.duration <= 0 or self.noise_sigma < 0:
            raise ValueError("need base_freq > 0, duration > 0, noise_sigma >= 0")
        if len(self.amp) != 6:
            raise ValueError("amp needs one entry per channel")
        if self.harmonics < 0 or not 0 < self.harmonic_decay <= 1:
            raise ValueError("need harmonics >= 0 and harmonic_decay in (0, 1]")


class DistractorKind(str, enum.Enum):
    IDLE = "idle"
    JITTER = "jitter"
    BURST = "burst"


@dataclass(frozen=True)
class DistractorSpec:
    kind: DistractorKind
    intensity: float = 1.0
    duration: float = 10.0
    # burst only: food class whose motion is imitated; None draws one at random
    mimic: int | None = None

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")


SegmentSpec = Union[GestureSpec, DistractorSpec]
Pattern = Callable[[np.ndarray], np.ndarray]


def _gesture_pattern(spec: GestureSpec) -> Pattern:
    amp = np.asarray(spec.amp, dtype=np.float64)

    def f(tau: np.ndarray) -> np.ndarray:
        out = np.zeros((len(tau), 6))
        for h in range(spec.harmonics + 1):
            arg = 2 * math.pi * spec.base_freq * (h + 1) * tau[:, None] + PHASES[None, :]
            out += spec.harmonic_decay**h * np.sin(arg)
        return out * amp[None, :]

    return f


def _sinusoid_sum(freqs: np.ndarray, amps: np.ndarray, phases: np.ndarray) -> Pattern:
    # freqs/amps/phases: [components, 6]
    def f(tau: np.ndarray) -> np.ndarray:
        arg = 2 * math.pi * freqs[None] * tau[:, None, None] + phases[None]
        return (amps[None] * np.sin(arg)).sum(axis=1)

    return f


def _distractor_pattern(spec: DistractorSpec, rng: SplitMix64) -> tuple[Pattern, float]:
    """Returns the deterministic pattern and the white-noise sigma for a distractor."""
    a = spec.intensity
    if spec.kind is DistractorKind.IDLE:
        freqs = rng.uniform(18, 0.03, 0.3).reshape(3, 6)
        amps = rng.uniform(18, -0.5, 0.5).reshape(3, 6) * a
        phases = rng.uniform(18, 0, 2 * math.pi).reshape(3, 6)
        return _sinusoid_sum(freqs, amps, phases), 0.5 * a
    if spec.kind is DistractorKind.JITTER:
        freqs = rng.uniform(18, 6.0, 15.0).reshape(3, 6)
        amps = rng.uniform(18, 0.2, 0.6).reshape(3, 6) * a
        phases = rng.uniform(18, 0, 2 * math.pi).reshape(3, 6)
        return _sinusoid_sum(freqs, amps, phases), 0.2 * a

    # burst: eating-like arm oscillation (borrowed from a random food class)
    # interrupted by irregular jerks, as when gesticulating
    table = class_table(len(FOOD_NAMES))
    draw = int(rng.uniform(1, 0, len(table))[0]) % len(table)
    pick = table[draw if spec.mimic is None else spec.mimic]
    gesture = _gesture_pattern(
        GestureSpec(pick.class_id, pick.base_freq * float(rng.uniform(1, 0.9, 1.1)[0]), pick.amp, pick.harmonics)
    )
    n_jerks = max(1, int(spec.duration * BURST_JERK_RATE))
    jerk_t = rng.uniform(n_jerks, 0, spec.duration)
    jerk_a = rng.uniform(n_jerks * 6, -BURST_JERK_AMP, BURST_JERK_AMP).reshape(n_jerks, 6) * a

    def f(tau: np.ndarray) -> np.ndarray:
        d = tau[:, None] - jerk_t[None, :]
        bumps = np.exp(-0.5 * (d / 0.04) ** 2)
        return a * gesture(tau) + bumps @ jerk_a

    return f, BURST_NOISE * a


def generate_session(
    specs: Sequence[SegmentSpec],
    seed: int,
    subject_id: str = "s00",
    utensil: Utensil = Utensil.CHOPSTICKS,
) -> Session:
    """Concatenate ``specs`` in order into one labelled two-device session."""
    if not specs:
        raise ValueError("specs must be non-empty")
    starts = np.concatenate([[0.0], np.cumsum([s.duration for s in specs])])
    total = float(starts[-1])
    t_watch = np.arange(int(round(total * WATCH_RATE)) + 1) / WATCH_RATE
    t_glasses = np.arange(int(math.ceil(total * GLASSES_RATE - 1e-6)) + 1) / GLASSES_RATE

    watch = np.zeros((len(t_watch), 6))
    glasses = np.zeros((len(t_glasses), 6))
    seg_w = np.clip(np.searchsorted(starts, t_watch, side="right") - 1, 0, len(specs) - 1)
    seg_g = np.clip(np.searchsorted(starts, t_glasses, side="right") - 1, 0, len(specs) - 1)
    labels = []
    for i, spec in enumerate(specs):
        rng = SplitMix64(derive_seed(seed, f"segment:{i}"))
        if isinstance(spec, GestureSpec):
            pattern, sigma = _gesture_pattern(spec), spec.noise_sigma
            labels.append(LabelInterval(float(starts[i]), float(starts[i + 1]), State.EATING, spec.class_id))
        else:
            pattern, sigma = _distractor_pattern(spec, rng)
            labels.append(LabelInterval(float(starts[i]), float(starts[i + 1]), State.NON_EATING))
        mw, mg = seg_w == i, seg_g == i
        tw, tg = t_watch[mw] - starts[i], t_glasses[mg] - starts[i]
        watch[mw] = pattern(tw) + sigma * rng.normal(tw.size * 6).reshape(-1, 6)
        glasses[mg] = GLASSES_GAIN * pattern(tg) + sigma * rng.normal(tg.size * 6).reshape(-1, 6)

    return Session(
        subject_id=subject_id,
        utensil=utensil,
        watch=SensorStream(Device.WATCH, t_watch, watch),
        glasses=SensorStream(Device.GLASSES, t_glasses, glasses),
        labels=tuple(labels),
    )


# --- datasets -----------------------------------------------------------------


def class_table(class_count: int) -> list[GestureSpec]:
    """Canonical gesture for each class (duration placeholder of 1 s).

    Frequencies are spaced geometrically by 18%, six times the per-subject
    frequency perturbation; amplitude profiles come from a fixed-seed draw.
    """
    if not 2 <= class_count <= len(FOOD_NAMES):
        raise ValueError(f"class_count must lie in [2, {len(FOOD_NAMES)}]")
    rng = SplitMix64(derive_seed(0, "class-table"))
    amps = rng.uniform(len(FOOD_NAMES) * 6, 0.3, 1.2).reshape(len(FOOD_NAMES), 6)
    return [
        GestureSpec(
            class_id=k,
            base_freq=0.7 * 1.18**k,
            amp=tuple(float(a) for a in amps[k]),
            harmonics=k % 3,
            harmonic_decay=0.5,
            noise_sigma=EATING_NOISE,
            duration=1.0,
        )
        for k in range(class_count)
    ]


def subject_gesture(base: GestureSpec, rng: SplitMix64, duration: float) -> GestureSpec:
    u = rng.uniform(7, -1.0, 1.0)
    return GestureSpec(
        class_id=base.class_id,
        base_freq=base.base_freq * (1 + 0.03 * u[0]),
        amp=tuple(float(a * (1 + 0.1 * d)) for a, d in zip(base.amp, u[1:])),
        harmonics=base.harmonics,
        harmonic_decay=base.harmonic_decay,
        noise_sigma=base.noise_sigma,
        duration=duration,
    )


def session_plan(
    base: GestureSpec, minutes: float, rng: SplitMix64, kind_offset: int, n_classes: int
) -> list[SegmentSpec]:
    """Distractor, gesture, distractor, ... ending on a distractor."""
    eat_hops = max(2, int(round(minutes * 60 / HOP)))
    n_gestures = max(1, int(round(eat_hops / GESTURE_HOPS_TARGET)))
    per = [eat_hops // n_gestures + (1 if i < eat_hops % n_gestures else 0) for i in range(n_gestures)]
    kinds = (DistractorKind.IDLE, DistractorKind.BURST, DistractorKind.JITTER, DistractorKind.BURST)
    gesture = subject_gesture(base, rng, 1.0)
    plan: list[SegmentSpec] = []
    for i in range(n_gestures + 1):
        intensity = float(rng.uniform(1, 0.7, 1.3)[0])
        mimic = int(rng.uniform(1, 0, n_classes)[0]) % n_classes
        plan.append(DistractorSpec(kinds[(kind_offset + i) % len(kinds)], intensity, DISTRACTOR_HOPS * HOP, mimic))
        if i < n_gestures:
            plan.append(
                GestureSpec(
                    gesture.class_id, gesture.base_freq, gesture.amp, gesture.harmonics,
                    gesture.harmonic_decay, gesture.noise_sigma, per[i] * HOP,
                )
            )
    return plan


UTENSIL_BY_CLASS = (Utensil.CHOPSTICKS, Utensil.SPOON, Utensil.HAND)


def generate_dataset(
    out_dir: str | Path,
    class_count: int = 5,
    subjects: int = 4,
    minutes_per_class: float = 1.0,
    seed: int = 42,
) -> dict:
    """Write one session per (subject, class) plus ``manifest.json`` and ``certificate.json``.

    Returns the certificate, which records the nearest-centroid spectral
    oracle accuracy on the generated eating windows.
    """
    if class_count < 2 or subjects < 2:
        raise ValueError("need class_count >= 2 and subjects >= 2")
    out_dir = Path(out_dir)
    table = class_table(class_count)
    manifest = []
    windows: list[WindowPair] = []
    for s in range(subjects):
        subject_id = f"s{s:02d}"
        for k, base in enumerate(table):
            rng = SplitMix64(derive_seed(seed, f"plan:{subject_id}:{k}"))
            plan = session_plan(base, minutes_per_class, rng, kind_offset=s + k, n_classes=class_count)
            session = generate_session(
                plan, derive_seed(seed, f"session:{subject_id}:{k}"), subject_id, UTENSIL_BY_CLASS[k % 3]
            )
            stem = f"{subject_id}_c{k:02d}"
            manifest.append(write_session(session, out_dir / "sessions", stem))
            windows.extend(segment(session, session_name=stem))
    for entry in manifest:
        for key in ("watch_csv", "glasses_csv", "labels_csv"):
            entry[key] = f"sessions/{entry[key]}"
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    certificate = {
        "seed": seed,
        "class_count": class_count,
        "subjects": subjects,
        "minutes_per_class": minutes_per_class,
        "windows": len(windows),
        "eating_windows": sum(w.is_eating for w in windows),
        "oracle_accuracy": spectral_oracle_accuracy(windows),
    }
    (out_dir / "certificate.json").write_text(json.dumps(certificate, indent=2, sort_keys=True) + "\n")
    return certificate


# --- separability oracle --------------------------------------------------------


def spectral_features(w: WindowPair) -> np.ndarray:
    return np.abs(np.fft.rfft(w.watch_mat, axis=0)).ravel()


def spectral_oracle_accuracy(windows: Sequence[WindowPair]) -> float:
    """Nearest-centroid food accuracy on watch magnitude spectra.

    Centroids come from every subject but the last; the last subject's eating
    windows are scored.
    """
    eating = [w for w in windows if w.is_eating]
    subjects = sorted({w.subject_id for w in eating})
    if len(subjects) < 2:
        return 0.0
    train = [w for w in eating if w.subject_id != subjects[-1]]
    test = [w for w in eating if w.subject_id == subjects[-1]]
    classes = sorted({w.food_label for w in train})
    feats = {c: np.mean([spectral_features(w) for w in train if w.food_label == c], axis=0) for c in classes}
    centroids = np.stack([feats[c] for c in classes])
    hits = 0
    for w in test:
        d = np.linalg.norm(centroids - spectral_features(w)[None], axis=1)
        hits += classes[int(np.argmin(d))] == w.food_label
    return hits / len(test) if test else 0.0
