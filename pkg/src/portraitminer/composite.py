"""Pixel-mean composites over groups of aligned portraits."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

DEFAULT_MIN_COUNT = 5


class CompositeError(Exception):
    pass


@dataclass(frozen=True)
class CompositeImage:
    raster: np.ndarray
    group_key: tuple  # e.g. (decade, gender)
    n: int


def mean_image(rasters):
    """Per-pixel arithmetic mean, accumulated in extended precision.

    The 80-bit accumulator makes the mean of identical inputs bit-equal
    to the input after the final float64 rounding.
    """
    rasters = list(rasters)
    if not rasters:
        raise CompositeError("mean over empty raster list")
    shape = rasters[0].shape
    acc = np.zeros(shape, dtype=np.longdouble)
    for r in rasters:
        if r.shape != shape:
            raise CompositeError(f"raster shape {r.shape} != {shape}")
        acc += r
    return np.asarray(acc / len(rasters), dtype=np.float64)


def decade_composites(corpus, aligned_cache, min_count=DEFAULT_MIN_COUNT):
    """One composite per (decade, gender) group with at least min_count members.

    Accumulation runs in sorted-id order so results are independent of
    corpus ordering. Unknown-gender portraits are skipped; skipped counts
    and sparse groups are returned alongside the composites.
    """
    groups = {}
    skipped_unknown = 0
    for p in corpus:
        if p.gender == "unknown":
            skipped_unknown += 1
            continue
        groups.setdefault((p.decade, p.gender), []).append(p.id)

    composites = []
    sparse = {}
    for key in sorted(groups):
        ids = sorted(groups[key])
        if len(ids) < min_count:
            sparse[key] = len(ids)
            continue
        raster = mean_image([aligned_cache[i] for i in ids])
        composites.append(CompositeImage(raster=raster, group_key=key,
                                         n=len(ids)))
    report = {"skipped_unknown_gender": skipped_unknown, "sparse_groups": sparse}
    return composites, report


def write_composites(composites, out_dir):
    """Emit composite_<decade>_<gender>.png per group plus a size CSV."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "composite_sizes.csv"), "w",
              encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["decade", "gender", "n"])
        for comp in composites:
            decade, gender = comp.group_key
            arr = np.clip(np.rint(comp.raster * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(
                os.path.join(out_dir, f"composite_{decade}_{gender}.png"))
            w.writerow([decade, gender, comp.n])
