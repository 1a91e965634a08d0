from __future__ import annotations

import pytest

from mealsense.data import load_windows
from mealsense.synth import generate_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """3 classes x 3 subjects x 0.5 min: quick to segment and to train tiny models on."""
    root = tmp_path_factory.mktemp("small")
    generate_dataset(root, class_count=3, subjects=3, minutes_per_class=0.5, seed=3)
    return root / "manifest.json"


@pytest.fixture(scope="session")
def small_windows(small_dataset):
    return load_windows(small_dataset)


@pytest.fixture(scope="session")
def small_eating(small_windows):
    return [w for w in small_windows if w.is_eating]
