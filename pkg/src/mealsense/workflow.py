"""Dataset splits shared by the CLI and the acceptance suite.

``subject`` scheme: the last ``test_subjects`` subjects (sorted by id) are
held out for testing, the ``val_subjects`` before them for validation and
threshold calibration; the rest train.

``middle`` scheme: within every recording, the contiguous middle
``test_fraction`` of windows is test; the same rule applied again to the
remainder carves out validation windows.
"""

from __future__ import annotations

from typing import Sequence

from .data import Split, WindowPair, group_by, split_by_subject, split_subject_independent, subjects_of
from .errors import ConfigError

SCHEMES = ("subject", "middle")


def make_split(
    windows: Sequence[WindowPair],
    scheme: str = "subject",
    test_subjects: int = 1,
    val_subjects: int = 1,
    test_fraction: float = 1 / 9,
) -> Split:
    if scheme == "subject":
        subjects = subjects_of(windows)
        if len(subjects) < test_subjects + val_subjects + 1:
            raise ConfigError(
                f"subject split needs more than {test_subjects + val_subjects} subjects, got {len(subjects)}"
            )
        test_ids = subjects[len(subjects) - test_subjects :]
        val_ids = subjects[len(subjects) - test_subjects - val_subjects : len(subjects) - test_subjects]
        rest, test = split_by_subject(windows, test_ids)
        train, val = split_by_subject(rest, val_ids)
        return Split(train, val, test)
    if scheme == "middle":
        rest, test = split_subject_independent(group_by(windows, "session"), test_fraction)
        train, val = split_subject_independent(group_by(rest, "session"), test_fraction)
        return Split(train, val, test)
    raise ConfigError(f"unknown split scheme {scheme!r}; expected one of {SCHEMES}")


def eating(windows: Sequence[WindowPair]) -> list[WindowPair]:
    return [w for w in windows if w.is_eating]
