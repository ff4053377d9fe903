"""PAD error rates: APCER, BPCER, HTER and the EER operating point.

Decision rule everywhere: a sample is classified as an attack iff
``score >= threshold``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .synthgen import Dataset, Group, Label


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int8))
        if self.groups is not None:
            object.__setattr__(self, "groups", np.asarray(self.groups, dtype=np.int8))
        if self.ids is not None:
            object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-d arrays of equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_dataset(cls, scores, data: Dataset) -> "ScoreSet":
        return cls(scores, data.labels, data.groups, data.ids)

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def attack(self) -> np.ndarray:
        return self.scores[self.labels == Label.ATTACK]

    @property
    def bona_fide(self) -> np.ndarray:
        return self.scores[self.labels == Label.BONA_FIDE]

    def select(self, mask: np.ndarray) -> "ScoreSet":
        return ScoreSet(self.scores[mask], self.labels[mask],
                        None if self.groups is None else self.groups[mask],
                        None if self.ids is None else self.ids[mask])

    def group(self, group: Group) -> "ScoreSet":
        if self.groups is None:
            raise ValueError("score set carries no group information")
        return self.select(self.groups == int(group))


@dataclass(frozen=True)
class ErrorRates:
    apcer: float
    bpcer: float

    @property
    def hter(self) -> float:
        return (self.apcer + self.bpcer) / 2


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    eer: float
    apcer: float
    bpcer: float


def _require_both_labels(scores: ScoreSet) -> None:
    if len(scores) == 0:
        raise ValueError("score set is empty")
    if len(scores.attack) == 0 or len(scores.bona_fide) == 0:
        raise ValueError("score set must contain both bona fide and attack entries")


def error_rates_at(scores: ScoreSet, threshold: float) -> ErrorRates:
    _require_both_labels(scores)
    attack, bona = scores.attack, scores.bona_fide
    apcer = np.count_nonzero(attack < threshold) / len(attack)
    bpcer = np.count_nonzero(bona >= threshold) / len(bona)
    return ErrorRates(float(apcer), float(bpcer))


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Distinct scores and the midpoints between neighbours, ascending."""
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2
    return np.unique(np.concatenate([distinct, mids]))


def eer_operating_point(scores: ScoreSet) -> OperatingPoint:
    """Threshold minimising ``|APCER - BPCER|`` over :func:`candidate_thresholds`.

    Ties go to the lower threshold; ``eer`` is the HTER there.
    """
    _require_both_labels(scores)
    attack = np.sort(scores.attack)
    bona = np.sort(scores.bona_fide)
    cand = candidate_thresholds(scores.scores)
    apcer = np.searchsorted(attack, cand, side="left") / len(attack)
    bpcer = (len(bona) - np.searchsorted(bona, cand, side="left")) / len(bona)
    best = int(np.argmin(np.abs(apcer - bpcer)))
    a, b = float(apcer[best]), float(bpcer[best])
    return OperatingPoint(float(cand[best]), (a + b) / 2, a, b)


def eer_by_group(scores: ScoreSet) -> dict[Group, OperatingPoint]:
    return {g: eer_operating_point(scores.group(g)) for g in Group}


# ---------------------------------------------------------------------------
# scores CSV

SCORE_COLUMNS = ["sample_id", "group", "label", "score"]


def write_scores_csv(scores: ScoreSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for i in range(len(scores)):
            w.writerow([
                int(scores.ids[i]) if scores.ids is not None else i,
                Group(int(scores.groups[i])).tag if scores.groups is not None else "",
                Label(int(scores.labels[i])).tag,
                f"{scores.scores[i]:.6f}",
            ])


def read_scores_csv(path) -> ScoreSet:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ScoreSet(
        [float(r["score"]) for r in rows],
        [Label.parse(r["label"]) for r in rows],
        np.array([Group.parse(r["group"]) for r in rows], dtype=np.int8),
        np.array([int(r["sample_id"]) for r in rows], dtype=np.int64),
    )
