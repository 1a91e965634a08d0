from __future__ import annotations

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mealsense.classifier import FoodClassifier, SwinClassifier1d, SwinConfig, default_class_names
from mealsense.data import GLASSES_ROWS, WATCH_ROWS, State, WindowPair
from mealsense.detector import EatingDetector, InputStats, ThresholdCalibration, UNet1d, UNetConfig
from mealsense.errors import CheckpointError, ConfigError, EmptyTestSet
from mealsense.pipeline import (
    NON_EATING,
    NON_EATING_NAME,
    Pipeline,
    ablate_single_stage,
    ablation_csv,
    confusion_matrix,
    evaluate,
    export_report,
    measure_latency,
    report_from_predictions,
)


def window(start: float, food: int | None) -> WindowPair:
    state = State.NON_EATING if food is None else State.EATING
    return WindowPair(start, np.zeros((WATCH_ROWS, 6)), np.zeros((GLASSES_ROWS, 6)), state, food, "s00", "a")


class StubDetector:
    """Reconstruction errors looked up by window start."""

    def __init__(self, errors: dict[float, float], tau: float | None):
        self.cfg = UNetConfig()
        self.table = errors
        self.calibration = None if tau is None else ThresholdCalibration(80.0, tau, 10)

    def errors(self, windows):
        return np.array([self.table[w.start_t] for w in windows])


class StubClassifier:
    """Fixed probability rows looked up by window start."""

    def __init__(self, probs: dict[float, list[float]], num_classes: int):
        self.cfg = SwinConfig(num_classes=num_classes)
        self.class_names = default_class_names(num_classes)
        self.table = probs
        self.calls = 0

    def probabilities(self, windows):
        self.calls += 1
        return np.array([self.table[w.start_t] for w in windows], dtype=np.float64)


def fresh_pipeline(num_classes: int = 3, tau: float = 1e9) -> Pipeline:
    ucfg = UNetConfig(base_channels=4)
    scfg = SwinConfig(num_classes=num_classes)
    stats = InputStats(np.zeros(12, np.float32), np.ones(12, np.float32))
    det = EatingDetector(ucfg, UNet1d(ucfg, np.random.default_rng(0)), stats, ThresholdCalibration(80.0, tau, 10))
    clf = FoodClassifier(scfg, SwinClassifier1d(scfg, np.random.default_rng(1)), stats, default_class_names(num_classes))
    return Pipeline(det, clf)


# --- gating ------------------------------------------------------------------------------------------


def test_gate_blocks_classifier_above_tau():
    det = StubDetector({0.0: 0.5, 1.0: 0.51, 2.0: 0.2}, tau=0.5)
    clf = StubClassifier({0.0: [0.1, 0.9], 1.0: [0.9, 0.1], 2.0: [0.7, 0.3]}, 2)
    labels, errors = Pipeline(det, clf).predict([window(0.0, 1), window(1.0, 0), window(2.0, 0)])
    assert labels.tolist() == [1, NON_EATING, 0]  # error == tau counts as eating
    assert errors.tolist() == [0.5, 0.51, 0.2]


def test_no_classifier_call_when_everything_gated():
    det = StubDetector({0.0: 3.0, 1.0: 4.0}, tau=1.0)
    clf = StubClassifier({}, 2)
    labels, _ = Pipeline(det, clf).predict([window(0.0, 1), window(1.0, None)])
    assert labels.tolist() == [NON_EATING, NON_EATING] and clf.calls == 0


def test_tie_goes_to_lowest_class_id():
    det = StubDetector({0.0: 0.0}, tau=1.0)
    clf = StubClassifier({0.0: [0.1, 0.45, 0.45]}, 3)
    assert Pipeline(det, clf).run(window(0.0, 2)) == 1


def test_infinite_tau_reduces_to_classifier():
    probs = {float(i): list(np.random.default_rng(i).dirichlet(np.ones(4))) for i in range(20)}
    det = StubDetector({k: float(k) for k in probs}, tau=np.inf)
    clf = StubClassifier(probs, 4)
    labels, _ = Pipeline(det, clf).predict([window(k, 0) for k in probs])
    assert labels.tolist() == [int(np.argmax(probs[k])) for k in probs]


def test_pipeline_requires_calibration():
    with pytest.raises(ConfigError, match="calibration"):
        Pipeline(StubDetector({}, tau=None), StubClassifier({}, 2))


def test_pipeline_rejects_mismatched_shapes():
    det = StubDetector({}, tau=1.0)
    det.cfg = UNetConfig(seq_len=64)
    with pytest.raises(ConfigError):
        Pipeline(det, StubClassifier({}, 2))


# --- metrics -------------------------------------------------------------------------------------------


def test_confusion_example():
    cm = confusion_matrix([0, 1, NON_EATING, NON_EATING, 1], [0, NON_EATING, NON_EATING, 1, 1], 2)
    np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 1, 1]])


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5).flatmap(lambda k: st.tuples(
    st.just(k),
    st.lists(st.tuples(st.integers(-1, k - 1), st.integers(-1, k - 1)), min_size=1, max_size=60),
)))
def test_confusion_conserves_counts(args):
    k, pairs = args
    y_true, y_pred = zip(*pairs)
    cm = confusion_matrix(y_true, y_pred, k)
    assert cm.sum() == len(pairs)
    for c in range(-1, k):
        assert cm[k if c == NON_EATING else c].sum() == sum(t == c for t in y_true)
    rep = report_from_predictions(y_true, y_pred, k, default_class_names(k))
    assert rep.overall_accuracy == pytest.approx(np.mean(np.equal(y_true, y_pred)))
    assert 0 <= rep.stage1_accuracy <= 1 and rep.overall_accuracy <= rep.stage1_accuracy


def test_all_non_eating_predictions():
    rep = report_from_predictions([0, 1, NON_EATING, NON_EATING], [NON_EATING] * 4, 2, ["a", "b"])
    assert rep.overall_accuracy == 0.5 and rep.stage1_accuracy == 0.5
    assert rep.precision[:2] == [0.0, 0.0] and rep.recall[:2] == [0.0, 0.0]
    assert rep.labels == ["a", "b", NON_EATING_NAME] and rep.recall[2] == 1.0


def test_empty_evaluation():
    with pytest.raises(EmptyTestSet):
        report_from_predictions([], [], 2, ["a", "b"])


# --- ablation -------------------------------------------------------------------------------------------


def test_ablation_extremes_and_monotonicity():
    rng = np.random.default_rng(4)
    probs = {float(i): list(rng.dirichlet(np.ones(3))) for i in range(50)}
    foods = rng.integers(-1, 3, size=50)
    ws = [window(k, None if f < 0 else int(f)) for k, f in zip(probs, foods)]
    clf = StubClassifier(probs, 3)
    rows = ablate_single_stage(clf, ws, [0.0, 0.2, 0.4, 0.6, 0.8, 1.0 + 1e-9])
    assert rows[0].non_eating_predictions == 0
    assert rows[-1].non_eating_predictions == 50
    assert rows[-1].accuracy == pytest.approx(np.mean(foods < 0))
    counts = [r.non_eating_predictions for r in rows]
    assert counts == sorted(counts)
    text = ablation_csv(rows)
    assert text.splitlines()[0] == "threshold,accuracy,non_eating_predictions" and len(text.splitlines()) == 7


# --- reports -------------------------------------------------------------------------------------------


def test_metrics_json_round_trip(tmp_path):
    rep = report_from_predictions([0, 1, NON_EATING], [0, 1, 1], 2, ["rice", "soup"])
    paths = export_report(rep, tmp_path)
    assert sorted(p.name for p in paths) == ["confusion.csv", "metrics.json"]
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert set(data) == {"overall_accuracy", "stage1_accuracy", "per_class", "latency_ms", "n_windows", "notes"}
    assert data["overall_accuracy"] == rep.overall_accuracy
    assert [c["name"] for c in data["per_class"]] == ["rice", "soup", NON_EATING_NAME]
    assert data["latency_ms"] == {"mean": None, "std": None, "p95": None}
    lines = (tmp_path / "confusion.csv").read_text().splitlines()
    assert lines[0] == "true\\pred,rice,soup,Non-eating" and lines[3] == "Non-eating,0,1,0"


def test_export_overwrites_atomically(tmp_path):
    rep = report_from_predictions([0], [0], 2, ["a", "b"])
    export_report(rep, tmp_path)
    first = (tmp_path / "metrics.json").read_text()
    rep2 = report_from_predictions([0], [1], 2, ["a", "b"])
    export_report(rep2, tmp_path)
    assert (tmp_path / "metrics.json").read_text() != first
    assert sorted(os.listdir(tmp_path)) == ["confusion.csv", "metrics.json"]  # no temp files left


# --- real models -----------------------------------------------------------------------------------------


def test_fresh_pipeline_is_deterministic(small_windows):
    pipe = fresh_pipeline()
    ws = small_windows[:30]
    a, ea = pipe.predict(ws)
    b, eb = pipe.predict(ws)
    assert a.tolist() == b.tolist() and ea.tobytes() == eb.tobytes()
    rep = evaluate(pipe, ws)
    assert rep.notes["threshold_tau"] == 1e9 and rep.n_windows == 30
    assert NON_EATING not in a.tolist()


def test_latency_stats(small_windows):
    lat = measure_latency(fresh_pipeline(), small_windows[0], n_trials=5, warmup=1)
    assert set(lat) == {"mean", "std", "p95", "n_trials", "warmup"}
    assert lat["mean"] > 0 and lat["std"] >= 0 and lat["n_trials"] == 5
    with pytest.raises(ValueError):
        measure_latency(fresh_pipeline(), small_windows[0], n_trials=1)


def test_pipeline_load_from_checkpoints(tmp_path, small_windows):
    pipe = fresh_pipeline(tau=0.5)
    pipe.detector.to_checkpoint().save(tmp_path / "d.ckpt")
    pipe.classifier.to_checkpoint().save(tmp_path / "c.ckpt")
    back = Pipeline.load(tmp_path / "d.ckpt", tmp_path / "c.ckpt")
    ws = small_windows[:10]
    assert back.predict(ws)[0].tolist() == pipe.predict(ws)[0].tolist()
    with pytest.raises(CheckpointError):
        Pipeline.load(tmp_path / "c.ckpt", tmp_path / "d.ckpt")
