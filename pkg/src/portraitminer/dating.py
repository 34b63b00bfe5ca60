"""Portrait dating: task assembly, training, metrics, soft confusion matrix."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import corpus as corpus_mod
from .classify import predict_proba, train_softmax
from .features import (corpus_descriptors, fit_whitening, mirror_permutation,
                       whiten)

DEFAULT_YEAR_LO = 1928
DEFAULT_YEAR_HI = 2010
DEFAULT_MIN_PER_YEAR = 50

# SGD schedule used for the dating classifier.
DATING_LR = 0.001
DATING_MOMENTUM = 0.9
DATING_LR_DECAY = 0.1
DATING_STEP_ITERS = 20000
DATING_TOTAL_ITERS = 100000


class DatingError(Exception):
    pass


@dataclass(frozen=True)
class DatingTask:
    year_lo: int
    year_hi: int
    min_per_year: int
    split: corpus_mod.SplitSpec
    ids: tuple                 # all task portrait ids, sorted
    features: np.ndarray       # whitened descriptors, row order == ids
    features_mirror: np.ndarray
    years: np.ndarray          # true year per row
    whitening: object
    feature_ref: str = ""

    @property
    def K(self):
        return self.year_hi - self.year_lo + 1

    def label(self, year):
        return int(year) - self.year_lo

    def rows(self, id_set):
        index = [i for i, pid in enumerate(self.ids) if pid in id_set]
        return np.asarray(index, dtype=np.int64)


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    l1_mean: float
    l1_median: float
    chance: float
    confusion: np.ndarray      # K x K; empty rows are NaN, listed below
    empty_rows: tuple
    n_test: int
    l1_mean_expected: float = float("nan")   # probability-weighted year
    l1_median_expected: float = float("nan")
    extras: dict = field(default_factory=dict)

    def chance_display(self):
        return f"{100.0 * self.chance:.2f}%"


def median_filter3(raster):
    """Optional 3x3 median denoise applied before feature extraction."""
    from scipy.ndimage import median_filter
    return median_filter(raster, size=3, mode="nearest")


def build_task(corpus, crops_by_id, year_lo=DEFAULT_YEAR_LO,
               year_hi=DEFAULT_YEAR_HI, min_per_year=DEFAULT_MIN_PER_YEAR,
               gender="female", test_frac=0.2, separation_years=10, seed=0,
               cell_px=8, orientations=9, shrinkage=None, denoise=False,
               feature_ref=""):
    """Assemble features, labels and the train/test split for dating.

    Sparse years (fewer than ``min_per_year`` portraits of the requested
    gender, inclusive threshold) abort with a list; the caller must adjust
    the range explicitly rather than have it shrink silently.
    """
    if year_hi <= year_lo:
        raise DatingError("need at least 2 year classes")
    eligible = corpus.subset(
        lambda p: year_lo <= p.year <= year_hi
        and (gender in (None, "both") or p.gender == gender),
        note=f"dating({year_lo}-{year_hi},{gender})")
    counts = {y: 0 for y in range(year_lo, year_hi + 1)}
    for p in eligible:
        counts[p.year] += 1
    sparse = [y for y, c in sorted(counts.items()) if c < min_per_year]
    if sparse:
        raise DatingError(
            f"years below min_per_year={min_per_year}: {sparse}; "
            "adjust the year range explicitly")

    split = corpus_mod.split_dating(eligible, test_frac=test_frac,
                                    year_lo=year_lo, year_hi=year_hi,
                                    separation_years=separation_years,
                                    seed=seed)
    task_ids = sorted(split.train_ids | split.test_ids)
    crops = {pid: crops_by_id[pid] for pid in task_ids}
    if denoise:
        crops = {pid: median_filter3(r) for pid, r in crops.items()}
    ids, raw, geometry = corpus_descriptors(crops, cell_px=cell_px,
                                            orientations=orientations)
    perm = mirror_permutation(geometry)
    raw_mirror = raw[:, perm]

    train_rows = [i for i, pid in enumerate(ids) if pid in split.train_ids]
    whitening = fit_whitening(raw[train_rows], shrinkage=shrinkage)
    X = whiten(whitening, raw)
    X_mirror = whiten(whitening, raw_mirror)
    years = np.array([corpus.by_id(pid).year for pid in ids], dtype=np.int64)
    return DatingTask(year_lo=year_lo, year_hi=year_hi,
                      min_per_year=min_per_year, split=split,
                      ids=tuple(ids), features=X, features_mirror=X_mirror,
                      years=years, whitening=whitening,
                      feature_ref=feature_ref)


def train_dating(task, lr=DATING_LR, momentum=DATING_MOMENTUM,
                 lr_decay=DATING_LR_DECAY, step_iters=DATING_STEP_ITERS,
                 total_iters=DATING_TOTAL_ITERS, batch_size=64, seed=0,
                 mirror=True):
    """Softmax over whitened descriptors with the stepped SGD schedule and
    descriptor-space mirroring; trains only on the split's train ids."""
    rows = task.rows(task.split.train_ids)
    if len(rows) == 0:
        raise DatingError("empty training set")
    X = task.features[rows]
    y = np.array([task.label(task.years[i]) for i in rows])
    mirror_pairs = task.features_mirror[rows] if mirror else None
    labels = [str(task.year_lo + k) for k in range(task.K)]
    return train_softmax(X, y, K=task.K, lr=lr, momentum=momentum,
                         lr_decay=lr_decay, step_iters=step_iters,
                         total_iters=total_iters, batch_size=batch_size,
                         mirror_pairs=mirror_pairs, seed=seed,
                         label_names=labels)


def _lower_median(values):
    """Median of even-count lists takes the lower middle (integer-year style)."""
    v = np.sort(np.asarray(values))
    if len(v) == 0:
        raise DatingError("median of empty set")
    return float(v[(len(v) - 1) // 2])


def _test_arrays(task, external=None):
    """(features, true years) for the yearbook test split or an override set."""
    if external is not None:
        X, years = external
        return np.asarray(X), np.asarray(years, dtype=np.int64)
    rows = task.rows(task.split.test_ids)
    # Defense in depth: re-assert the school-decade separation.
    return task.features[rows], task.years[rows]


def evaluate(model, task, corpus=None, external=None):
    """Accuracy, L1 stats, chance and the soft confusion matrix on test data.

    ``external`` optionally supplies (features, years) from a
    user-provided test manifest (celebrity-style sets); otherwise the
    task's own test split is used and the school separation re-checked.
    """
    if external is None and corpus is not None:
        assert_separation(task, corpus)
    X, years = _test_arrays(task, external=external)
    if len(X) == 0:
        raise DatingError("empty test set")
    P = predict_proba(model, X)
    pred = np.argmax(P, axis=1)
    pred_years = task.year_lo + pred
    correct = pred_years == years
    l1 = np.abs(pred_years - years)
    expected_years = P @ (task.year_lo + np.arange(task.K))
    l1_exp = np.abs(expected_years - years)

    K = task.K
    confusion = np.full((K, K), np.nan)
    empty = []
    for k in range(K):
        mask = years == task.year_lo + k
        if mask.any():
            confusion[k] = P[mask].mean(axis=0)
        else:
            empty.append(task.year_lo + k)
    return EvalReport(
        accuracy=float(correct.mean()),
        l1_mean=float(l1.mean()),
        l1_median=_lower_median(l1),
        chance=1.0 / K,
        confusion=confusion,
        empty_rows=tuple(empty),
        n_test=int(len(X)),
        l1_mean_expected=float(l1_exp.mean()),
        l1_median_expected=_lower_median(l1_exp),
    )


def soft_confusion(model, task):
    """K x K matrix; row t is the mean probability vector over test samples
    with true year t. Rows without samples are NaN."""
    rows = task.rows(task.split.test_ids)
    X = task.features[rows]
    years = task.years[rows]
    P = predict_proba(model, X)
    K = task.K
    out = np.full((K, K), np.nan)
    for k in range(K):
        mask = years == task.year_lo + k
        if mask.any():
            out[k] = P[mask].mean(axis=0)
    return out


def assert_separation(task, corpus):
    """Brute-force recheck that no same-school train/test pair sits within
    the split's separation window."""
    sep = task.split.separation_years
    test = [(p.school_id, p.year) for p in corpus
            if p.id in task.split.test_ids]
    train = [(p.school_id, p.year) for p in corpus
             if p.id in task.split.train_ids]
    for ts, ty in test:
        for rs, ry in train:
            if ts == rs and abs(ty - ry) < sep:
                raise DatingError(
                    f"separation violated: school {ts}, years {ty} vs {ry}")


def diagonal_band_mass(confusion, band=2):
    """Per populated row: probability mass within +-band of the diagonal."""
    K = len(confusion)
    out = {}
    for k in range(K):
        row = confusion[k]
        if np.any(np.isnan(row)):
            continue
        lo, hi = max(0, k - band), min(K, k + band + 1)
        out[k] = float(row[lo:hi].sum())
    return out


def write_report(report, out_dir, prefix="dating"):
    """EvalReport JSON + confusion CSV + row-normalized grayscale heat map."""
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "accuracy": report.accuracy,
        "l1_mean": report.l1_mean,
        "l1_median": report.l1_median,
        "chance": report.chance,
        "chance_display": report.chance_display(),
        "n_test": report.n_test,
        "l1_mean_expected": report.l1_mean_expected,
        "l1_median_expected": report.l1_median_expected,
        "empty_rows": list(report.empty_rows),
    }
    with open(os.path.join(out_dir, f"{prefix}_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, f"{prefix}_confusion.csv"), "w",
              encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        for row in report.confusion:
            w.writerow(["" if np.isnan(v) else f"{v:.9g}" for v in row])
    heat = np.nan_to_num(report.confusion, nan=0.0)
    peak = heat.max() if heat.max() > 0 else 1.0
    img = np.clip(np.rint(heat / peak * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(
        os.path.join(out_dir, f"{prefix}_confusion.png"))
    return payload
