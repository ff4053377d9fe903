"""Saliency-ordered insertion/deletion curves and the AUC-difference bias score.

For each model the pooled EER threshold on the unaltered test set is frozen.
Every test image is explained once; its pixel ranking then drives both the
deletion curve (top pixels zeroed) and the insertion curve (top pixels copied
onto a black canvas).  HTER is measured per group at each fraction, the second
group's curve is shifted onto the first group's starting point, and the
absolute difference of the two AUCs is the bias score.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .metrics import ScoreSet, eer_operating_point, error_rates_at
from .saliency import EXPLAINERS, explain_images
from .synthgen import Dataset, Group, split_by

N_PIXELS = 32 * 32
DEFAULT_FRACTIONS = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30)

DELETION = "deletion"
INSERTION = "insertion"
MODES = (DELETION, INSERTION)

FIRST_POINT = "first_point"
UNALTERED = "unaltered"
ANCHORS = (FIRST_POINT, UNALTERED)

POOLED = "pooled"
PER_GROUP = "per_group"

MODEL_TAGS = ("PAD_B", "PAD_M", "PAD_F")


class InvariantError(RuntimeError):
    """An internal consistency check failed."""


def pixel_count(fraction: float, n_pixels: int = N_PIXELS) -> int:
    """Number of pixels perturbed at ``fraction`` (Python's round: half to even)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    return round(fraction * n_pixels)


def _check_permutation(ranking: np.ndarray, n: int) -> None:
    ranking = np.asarray(ranking)
    if ranking.shape[-1] != n or not np.all(np.sort(ranking, axis=-1) == np.arange(n)):
        raise ValueError("ranking is not a permutation of the pixel indices")


def perturb_batch(images: np.ndarray, rankings: np.ndarray, fraction: float, mode: str) -> np.ndarray:
    """Perturb (N, 1, 32, 32) images, each by its own ranking (N, 1024).

    Rankings are trusted here; :func:`perturb` validates.
    """
    k = pixel_count(fraction, images[0].size if len(images) else N_PIXELS)
    flat = images.reshape(len(images), -1)
    top = rankings[:, :k]
    if mode == DELETION:
        out = flat.copy()
        np.put_along_axis(out, top, 0.0, axis=1)
    elif mode == INSERTION:
        out = np.zeros_like(flat)
        np.put_along_axis(out, top, np.take_along_axis(flat, top, axis=1), axis=1)
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    return out.reshape(images.shape)


def perturb(image: np.ndarray, ranking: np.ndarray, fraction: float, mode: str) -> np.ndarray:
    """Delete (zero) or insert (onto black) the top ``round(fraction * pixels)`` ranked pixels."""
    image = np.asarray(image, dtype=np.float64)
    _check_permutation(ranking, image.size)
    return perturb_batch(image[None], np.asarray(ranking)[None], fraction, mode)[0]


@dataclass(frozen=True)
class EvalCurve:
    mode: str
    group: Group
    model_tag: str
    explainer: str
    fractions: tuple[float, ...]
    hter: tuple[float, ...]
    threshold: float
    unaltered_hter: float
    normalized: bool = False

    def __post_init__(self):
        if len(self.fractions) != len(self.hter):
            raise ValueError("fractions and values differ in length")
        if self.fractions[0] != 0.0 or any(b <= a for a, b in zip(self.fractions, self.fractions[1:])):
            raise ValueError("fractions must start at 0 and increase strictly")
        if not all(np.isfinite(self.hter)):
            raise ValueError("curve values must be finite")

    def value_at(self, anchor: str) -> float:
        if anchor == FIRST_POINT:
            return self.hter[0]
        if anchor == UNALTERED:
            return self.unaltered_hter
        raise ValueError(f"unknown normalization anchor {anchor!r}")


def _check_fractions(fractions: Sequence[float]) -> tuple[float, ...]:
    fr = tuple(float(f) for f in fractions)
    if not fr or fr[0] != 0.0:
        raise ValueError("fractions must start at 0")
    if any(b <= a for a, b in zip(fr, fr[1:])) or fr[-1] > 1.0:
        raise ValueError("fractions must increase strictly within [0, 1]")
    return fr


def evaluation_curve(model: nn.MiniPadNet, test_group_set: Dataset, explainer: str, mode: str,
                     fractions: Sequence[float] = DEFAULT_FRACTIONS, threshold: float = 0.5, *,
                     model_tag: str = "", rankings: Optional[np.ndarray] = None,
                     executor=None) -> EvalCurve:
    """HTER at a fixed threshold as the top-ranked pixels are deleted or inserted.

    Rankings come from the unaltered images and stay fixed across fractions.
    Pass ``rankings`` to reuse maps computed elsewhere (rows aligned with the
    dataset).  At fraction 0 deletion leaves the images untouched and
    insertion yields all-black canvases.
    """
    fractions = _check_fractions(fractions)
    if mode not in MODES:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    if len(test_group_set) == 0:
        raise ValueError("evaluation set is empty")
    groups = np.unique(test_group_set.groups)
    if len(groups) != 1:
        raise ValueError("evaluation set must hold exactly one group")
    labels = test_group_set.labels
    unaltered = ScoreSet(nn.score_images(model, test_group_set.images, executor), labels)
    unaltered_hter = error_rates_at(unaltered, threshold).hter
    if rankings is None:
        rankings = explain_images(model, test_group_set.images, threshold, (explainer,), executor)[explainer][1]

    values = []
    for f in fractions:
        perturbed = perturb_batch(test_group_set.images, rankings, f, mode)
        scores = ScoreSet(nn.score_images(model, perturbed, executor), labels)
        values.append(error_rates_at(scores, threshold).hter)
    return EvalCurve(mode, Group(int(groups[0])), model_tag, explainer, fractions, tuple(values),
                     float(threshold), unaltered_hter)


def normalize_pair(curve_male: EvalCurve, curve_female: EvalCurve, anchor: str = FIRST_POINT) -> EvalCurve:
    """Shift the second group's curve by its starting gap to the first group.

    ``first_point`` uses each curve's fraction-0 value, ``unaltered`` the
    HTER on unaltered images.  Values are not clamped.
    """
    m, f = curve_male, curve_female
    if (m.mode, m.model_tag, m.explainer, m.fractions) != (f.mode, f.model_tag, f.explainer, f.fractions):
        raise ValueError("curves differ in mode, model, explainer or fraction grid")
    offset = f.value_at(anchor) - m.value_at(anchor)
    return EvalCurve(f.mode, f.group, f.model_tag, f.explainer, f.fractions,
                     tuple(v - offset for v in f.hter), f.threshold, f.unaltered_hter - offset,
                     normalized=True)


def curve_auc(curve, include_anchor: bool = True) -> float:
    """Trapezoidal area divided by the fraction span (a mean error level).

    ``curve`` is an :class:`EvalCurve` or a ``(fractions, values)`` pair.
    """
    if isinstance(curve, EvalCurve):
        x, y = curve.fractions, curve.hter
    else:
        x, y = curve
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not include_anchor:
        x, y = x[1:], y[1:]
    if len(x) < 2:
        raise ValueError("need at least two points for an area")
    # integrate deviations from the first value so a constant curve returns that value exactly
    base = y[0]
    return float(base + np.trapezoid(y - base, x) / (x[-1] - x[0]))


def bias_delta(auc_male: float, auc_female_norm: float) -> float:
    if not (np.isfinite(auc_male) and np.isfinite(auc_female_norm)):
        raise ValueError("AUCs must be finite")
    return abs(auc_male - auc_female_norm)


@dataclass(frozen=True)
class BiasEntry:
    model_tag: str
    explainer: str
    mode: str
    auc_male: float
    auc_female_norm: float

    @property
    def delta(self) -> float:
        return bias_delta(self.auc_male, self.auc_female_norm)


@dataclass
class AuditSettings:
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    normalization_anchor: str = FIRST_POINT
    explainers: tuple[str, ...] = EXPLAINERS
    threshold_mode: str = POOLED
    include_anchor: bool = True
    threads: int = 1

    def __post_init__(self):
        self.fractions = _check_fractions(self.fractions)
        if self.normalization_anchor not in ANCHORS:
            raise ValueError(f"normalization_anchor must be one of {ANCHORS}")
        if not self.explainers or any(e not in EXPLAINERS for e in self.explainers):
            raise ValueError(f"explainers must be a non-empty subset of {EXPLAINERS}")
        if self.threshold_mode not in (POOLED, PER_GROUP):
            raise ValueError("threshold_mode must be 'pooled' or 'per_group'")
        if not isinstance(self.threads, int) or self.threads < 1:
            raise ValueError("threads must be a positive integer")


@dataclass
class BiasReport:
    entries: list[BiasEntry]
    curves: list[EvalCurve]
    thresholds: dict[str, float] = field(default_factory=dict)
    fingerprint: str = ""
    seeds: dict = field(default_factory=dict)

    def sorted_entries(self) -> list[BiasEntry]:
        return sorted(self.entries, key=lambda e: (e.model_tag, e.explainer, e.mode))

    def entry(self, model_tag: str, explainer: str, mode: str) -> BiasEntry:
        for e in self.entries:
            if (e.model_tag, e.explainer, e.mode) == (model_tag, explainer, mode):
                return e
        raise KeyError((model_tag, explainer, mode))

    def mean_delta(self, model_tag: Optional[str] = None, explainer: Optional[str] = None) -> float:
        sel = [e.delta for e in self.entries
               if (model_tag is None or e.model_tag == model_tag)
               and (explainer is None or e.explainer == explainer)]
        return float(np.mean(sel))


def run_audit(models: dict[str, nn.MiniPadNet], test: Dataset,
              settings: Optional[AuditSettings] = None) -> BiasReport:
    """Curves, normalized curves and bias entries for every model x explainer x mode.

    Group A plays the reference ("male") role, group B is normalized onto it.
    """
    settings = settings or AuditSettings()
    present = {(int(g), int(l)) for g, l in zip(test.groups, test.labels)}
    if len(present) != 4:
        raise ValueError("test set must contain both groups and both labels")
    group_sets = {g: split_by(test, group=g) for g in Group}

    executor = ThreadPoolExecutor(settings.threads) if settings.threads > 1 else None
    try:
        entries, curves, thresholds = [], [], {}
        for tag, model in models.items():
            scores = ScoreSet.from_dataset(nn.score_images(model, test.images, executor), test)
            pooled = eer_operating_point(scores).threshold
            thresholds[tag] = pooled
            if settings.threshold_mode == POOLED:
                group_thr = {g: pooled for g in Group}
            else:
                group_thr = {g: eer_operating_point(scores.group(g)).threshold for g in Group}

            maps = {g: explain_images(model, group_sets[g].images, group_thr[g],
                                      settings.explainers, executor) for g in Group}
            for explainer in settings.explainers:
                for mode in MODES:
                    pair = {
                        g: evaluation_curve(model, group_sets[g], explainer, mode, settings.fractions,
                                            group_thr[g], model_tag=tag, rankings=maps[g][explainer][1],
                                            executor=executor)
                        for g in Group
                    }
                    norm = normalize_pair(pair[Group.A], pair[Group.B], settings.normalization_anchor)
                    curves += [pair[Group.A], pair[Group.B], norm]
                    entries.append(BiasEntry(tag, explainer, mode,
                                             curve_auc(pair[Group.A], settings.include_anchor),
                                             curve_auc(norm, settings.include_anchor)))
    finally:
        if executor is not None:
            executor.shutdown()

    expected = len(models) * len(settings.explainers) * len(MODES)
    if len(entries) != expected or not all(np.isfinite(e.delta) for e in entries):
        raise InvariantError("bias report is incomplete or holds non-finite values")
    return BiasReport(entries, curves, thresholds, test.fingerprint)


# ---------------------------------------------------------------------------
# CSV output

CURVE_COLUMNS = ["model_tag", "explainer", "mode", "group", "normalized", "fraction", "hter"]
REPORT_COLUMNS = ["model_tag", "explainer", "mode", "auc_male", "auc_female_norm", "delta"]


def _series_key(c: EvalCurve):
    return (c.model_tag, c.explainer, c.mode, c.group.tag, int(c.normalized))


def write_curves_csv(curves: Sequence[EvalCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for c in sorted(curves, key=_series_key):
            for f, v in zip(c.fractions, c.hter):
                w.writerow([*_series_key(c), f"{f:.6f}", f"{v:.6f}"])


def write_report_csv(report: BiasReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for e in report.sorted_entries():
            w.writerow([e.model_tag, e.explainer, e.mode, f"{e.auc_male:.6f}",
                        f"{e.auc_female_norm:.6f}", f"{e.delta:.6f}"])


def read_curves_csv(path) -> dict[tuple, tuple[list[float], list[float]]]:
    """``{(model_tag, explainer, mode, group, normalized): (fractions, hter)}``."""
    series: dict[tuple, tuple[list[float], list[float]]] = {}
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["model_tag"], row["explainer"], row["mode"], row["group"], int(row["normalized"]))
            xs, ys = series.setdefault(key, ([], []))
            xs.append(float(row["fraction"]))
            ys.append(float(row["hter"]))
    return series


def read_report_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
