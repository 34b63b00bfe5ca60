"""Lip-curvature smile metric, expression-label validation, trend tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr


class SmileError(Exception):
    pass


@dataclass(frozen=True)
class SmileRecord:
    portrait_id: str
    curvature: float  # signed degrees, positive = raised corners


@dataclass(frozen=True)
class TrendRow:
    year: int
    gender: str
    mean_curvature: float
    std_curvature: float
    count: int


def lip_curvature(landmarks, schema):
    """Signed mean of the two mouth-corner angles, in degrees.

    Let L, R be the mouth corners and M the midpoint of (upper_lip_bottom,
    lower_lip_top). The metric averages the angle at L between chord L->R
    and segment L->M with the angle at R between chord R->L and segment
    R->M, signed positive when M lies below the chord in image coordinates
    (y down), i.e. when the corners are raised. Invariant to rigid motion
    and uniform scaling of the landmark set.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    L = landmarks[schema.role_index("mouth_left_corner")]
    R = landmarks[schema.role_index("mouth_right_corner")]
    M = 0.5 * (landmarks[schema.role_index("upper_lip_bottom")]
               + landmarks[schema.role_index("lower_lip_top")])
    chord = R - L
    if np.linalg.norm(chord) < 1e-12:
        raise SmileError("mouth corners coincide")
    if np.linalg.norm(M - L) < 1e-12 or np.linalg.norm(M - R) < 1e-12:
        raise SmileError("lip midpoint coincides with a mouth corner")

    def cross2(u, v):
        return u[0] * v[1] - u[1] * v[0]

    def corner_angle(vertex, other):
        u = other - vertex
        v = M - vertex
        return np.degrees(np.arctan2(abs(cross2(u, v)), np.dot(u, v)))

    cross = float(cross2(chord, M - L))
    sign = 1.0 if cross > 0 else (-1.0 if cross < 0 else 0.0)
    theta = 0.5 * (corner_angle(L, R) + corner_angle(R, L))
    value = sign * theta
    if not (-90.0 < value < 90.0):
        raise SmileError(f"curvature {value:.2f} outside (-90, 90)")
    return value


def smile_records(corpus):
    """lip_curvature for every portrait, in corpus order."""
    return [SmileRecord(p.id, lip_curvature(p.landmarks, corpus.schema))
            for p in corpus]


def smile_trend(corpus, records):
    """Per (year, gender) mean / sample std / count of curvature.

    Unknown-gender portraits are excluded from rows and counted in the
    returned report. Aggregation runs in sorted-id order.
    """
    by_id = {r.portrait_id: r.curvature for r in records}
    corpus_ids = {p.id for p in corpus}
    for pid in by_id:
        if pid not in corpus_ids:
            raise SmileError(f"record references unknown portrait {pid}")
    groups = {}
    skipped = 0
    for p in sorted(corpus, key=lambda p: p.id):
        if p.id not in by_id:
            continue
        if p.gender == "unknown":
            skipped += 1
            continue
        groups.setdefault((p.year, p.gender), []).append(by_id[p.id])
    rows = []
    for (year, gender) in sorted(groups):
        vals = np.asarray(groups[(year, gender)])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(TrendRow(year=year, gender=gender,
                             mean_curvature=float(vals.mean()),
                             std_curvature=std, count=len(vals)))
    return rows, {"skipped_unknown_gender": skipped}


def exemplar_nearest_mean(corpus, records, bin_years=10):
    """Per (bin, gender): the portrait whose curvature is closest to the
    bin mean; ties broken by lexicographically smallest id."""
    by_id = {r.portrait_id: r.curvature for r in records}
    groups = {}
    for p in sorted(corpus, key=lambda p: p.id):
        if p.gender == "unknown" or p.id not in by_id:
            continue
        b = p.year - (p.year % bin_years)
        groups.setdefault((b, p.gender), []).append((p.id, by_id[p.id]))
    exemplars = {}
    for key in sorted(groups):
        members = groups[key]
        mean = np.mean([c for _, c in members])
        exemplars[key] = min(members, key=lambda m: (abs(m[1] - mean), m[0]))[0]
    return exemplars


def intensity_validation(curvatures, levels):
    """Aggregate curvature per expression-intensity level (0..5).

    Returns (per-level rows, Spearman rank correlation between level index
    and level-mean curvature). Levels with zero samples are omitted and
    flagged in the rows' companion list.
    """
    curvatures = np.asarray(curvatures, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.int64)
    if len(curvatures) != len(levels):
        raise SmileError("curvatures and levels must have equal length")
    if levels.min() < 0 or levels.max() > 5:
        raise SmileError("levels must lie in 0..5")
    rows = []
    missing = []
    for lvl in range(6):
        vals = curvatures[levels == lvl]
        if len(vals) == 0:
            missing.append(lvl)
            continue
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append({"level": lvl, "mean": float(vals.mean()),
                     "std": std, "count": int(len(vals))})
    if len(rows) >= 2:
        corr = float(spearmanr([r["level"] for r in rows],
                               [r["mean"] for r in rows]).statistic)
    else:
        corr = float("nan")
    return rows, corr, missing


def write_records_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["portrait_id", "curvature_deg"])
        for r in records:
            w.writerow([r.portrait_id, f"{r.curvature:.9g}"])


def write_trend_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "gender", "mean", "std", "count"])
        for r in rows:
            w.writerow([r.year, r.gender, f"{r.mean_curvature:.9g}",
                        f"{r.std_curvature:.9g}", r.count])


def write_validation_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "mean", "std", "count"])
        for r in rows:
            w.writerow([r["level"], f"{r['mean']:.9g}", f"{r['std']:.9g}",
                        r["count"]])


def render_trend_svg(rows, path):
    """Minimal SVG trend plot: mean line per gender with a +-1 std band."""
    genders = sorted({r.gender for r in rows})
    if not rows:
        raise SmileError("no trend rows to plot")
    years = [r.year for r in rows]
    lo = min(r.mean_curvature - r.std_curvature for r in rows)
    hi = max(r.mean_curvature + r.std_curvature for r in rows)
    x0, x1 = min(years), max(years)
    W, H, pad = 640, 360, 40

    def sx(year):
        return pad + (W - 2 * pad) * (year - x0) / max(x1 - x0, 1)

    def sy(val):
        return H - pad - (H - 2 * pad) * (val - lo) / max(hi - lo, 1e-9)

    colors = {"female": "#c2185b", "male": "#1565c0"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>']
    for g in genders:
        series = sorted((r for r in rows if r.gender == g), key=lambda r: r.year)
        color = colors.get(g, "#555")
        band = " ".join(f"{sx(r.year):.1f},{sy(r.mean_curvature + r.std_curvature):.1f}"
                        for r in series)
        band += " " + " ".join(
            f"{sx(r.year):.1f},{sy(r.mean_curvature - r.std_curvature):.1f}"
            for r in reversed(series))
        parts.append(f'<polygon points="{band}" fill="{color}" opacity="0.15"/>')
        line = " ".join(f"{sx(r.year):.1f},{sy(r.mean_curvature):.1f}"
                        for r in series)
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
