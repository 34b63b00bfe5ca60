"""Decade-discriminative style discovery over whole-portrait descriptors.

Detectors are exemplar-LDA directions seeded from single target-decade
portraits and refined by retraining on their own top in-decade detections.
Clusters are ranked by how many of their top-20 detections fall in the
target decade, then greedily deduplicated by top-60 detection overlap.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .classify import LinearModel, lda_detector
from .composite import mean_image

TOP_DISCRIMINATIVE = 20
OVERLAP_WINDOW = 60
OVERLAP_MAX = 6
DEFAULT_N_SEEDS = 200
DEFAULT_ROUNDS = 3
DEFAULT_TOP_M = 5
DEFAULT_N_CLUSTERS = 4
DEFAULT_DISPLAY_K = 6


class ModeSeekError(Exception):
    pass


@dataclass(frozen=True)
class StyleCluster:
    detector: LinearModel
    target_decade: int
    detections: tuple        # ((portrait_id, score), ...) descending score
    discriminativeness: int  # in-decade count among top 20 detections
    average_image: np.ndarray | None = None
    display_ids: tuple = ()


@dataclass(frozen=True)
class DescriptorIndex:
    """Read-only descriptor table shared by every detector."""

    ids: tuple
    matrix: np.ndarray  # n x d, row order matches ids

    def __post_init__(self):
        if len(self.ids) != len(self.matrix):
            raise ModeSeekError("ids / matrix length mismatch")
        object.__setattr__(self, "_row_of",
                           {pid: i for i, pid in enumerate(self.ids)})

    def row(self, pid):
        return self.matrix[self._row_of[pid]]


def seed_detectors(corpus, decade, n_seeds, whitening, index, seed,
                   gender="female"):
    """Sample target-decade portraits and build one exemplar-LDA per seed."""
    pool = [p.id for p in corpus
            if p.decade == decade and (gender in (None, "both")
                                       or p.gender == gender)]
    pool.sort()
    if len(pool) < n_seeds:
        raise ModeSeekError(
            f"decade {decade} has {len(pool)} eligible portraits, "
            f"need {n_seeds}")
    rng = np.random.default_rng(seed)
    chosen = [pool[i] for i in rng.permutation(len(pool))[:n_seeds]]
    detectors = []
    for pid in chosen:
        detectors.append(lda_detector(index.row(pid), whitening,
                                      label=f"decade_{decade}_seed_{pid}"))
    return detectors, chosen


def score_all(detector, index):
    """Descending (portrait_id, score) list over the whole corpus.

    Ties break by id so rankings are deterministic.
    """
    scores = index.matrix @ detector.weights[0] + detector.bias[0]
    order = sorted(range(len(scores)),
                   key=lambda i: (-scores[i], index.ids[i]))
    return [(index.ids[i], float(scores[i])) for i in order]


def refine_detector(detector, corpus, decade, whitening, index,
                    rounds=DEFAULT_ROUNDS, top_m=DEFAULT_TOP_M):
    """Alternating refinement: rescore, retrain LDA on the mean of the
    top in-decade detections."""
    decade_ids = {p.id for p in corpus if p.decade == decade}
    for _ in range(rounds):
        ranked = score_all(detector, index)
        positives = [pid for pid, _ in ranked if pid in decade_ids][:top_m]
        if not positives:
            break
        pos_mean = np.mean([index.row(pid) for pid in positives], axis=0)
        detector = lda_detector(pos_mean, whitening,
                                label=detector.label_names[0])
    return detector


def discriminativeness(detections, decade_ids, top=TOP_DISCRIMINATIVE):
    return sum(1 for pid, _ in detections[:top] if pid in decade_ids)


def score_and_rank(detectors, corpus, decade, index, keep=OVERLAP_WINDOW):
    """Build clusters with full ranked detections, sorted by rank.

    Rank order: discriminativeness desc, then mean top-20 score desc,
    then input (seed) order.
    """
    decade_ids = {p.id for p in corpus if p.decade == decade}
    clusters = []
    for i, det in enumerate(detectors):
        ranked = score_all(det, index)
        disc = discriminativeness(ranked, decade_ids)
        retained = tuple(ranked[:max(keep, TOP_DISCRIMINATIVE)])
        top_mean = float(np.mean([s for _, s in ranked[:TOP_DISCRIMINATIVE]]))
        clusters.append(((-disc, -top_mean, i),
                         StyleCluster(detector=det, target_decade=decade,
                                      detections=retained,
                                      discriminativeness=disc)))
    clusters.sort(key=lambda c: c[0])
    return [c for _, c in clusters]


def dedup_clusters(ranked, overlap_max=OVERLAP_MAX, window=OVERLAP_WINDOW):
    """Greedy overlap suppression against the union of kept clusters'
    top-``window`` detection ids. Counts distinct portrait ids."""
    kept = []
    seen = set()
    for cluster in ranked:
        top_ids = {pid for pid, _ in cluster.detections[:window]}
        if len(top_ids & seen) <= overlap_max:
            kept.append(cluster)
            seen |= top_ids
    return kept


def one_per_class_ids(detections, corpus, k=DEFAULT_DISPLAY_K):
    """First k detection ids keeping at most one per (school_id, year)."""
    meta = {p.id: (p.school_id, p.year) for p in corpus}
    display = []
    seen_classes = set()
    for pid, _ in detections:
        key = meta[pid]
        if key in seen_classes:
            continue
        seen_classes.add(key)
        display.append(pid)
        if len(display) == k:
            break
    return tuple(display)


def render_cluster(cluster, corpus, crops_by_id, k=DEFAULT_DISPLAY_K):
    """Fill in display_ids (one per graduating class) and the average image
    over the top-60 detections' aligned crops."""
    display = one_per_class_ids(cluster.detections, corpus, k=k)
    top_ids = [pid for pid, _ in cluster.detections[:OVERLAP_WINDOW]]
    avg = mean_image([crops_by_id[pid] for pid in top_ids])
    return replace(cluster, display_ids=display, average_image=avg)


def mine_decade_styles(corpus, decade, whitening, index, crops_by_id,
                       n_clusters=DEFAULT_N_CLUSTERS,
                       n_seeds=DEFAULT_N_SEEDS, rounds=DEFAULT_ROUNDS,
                       top_m=DEFAULT_TOP_M, overlap_max=OVERLAP_MAX,
                       window=OVERLAP_WINDOW, display_k=DEFAULT_DISPLAY_K,
                       gender="female", seed=0):
    """End-to-end: seed, refine, rank, dedup, render the top clusters."""
    if n_clusters <= 0:
        return []
    detectors, _ = seed_detectors(corpus, decade, n_seeds, whitening, index,
                                  seed=seed, gender=gender)
    refined = [refine_detector(d, corpus, decade, whitening, index,
                               rounds=rounds, top_m=top_m)
               for d in detectors]
    ranked = score_and_rank(refined, corpus, decade, index, keep=window)
    kept = dedup_clusters(ranked, overlap_max=overlap_max, window=window)
    return [render_cluster(c, corpus, crops_by_id, k=display_k)
            for c in kept[:n_clusters]]


def _to_u8(raster):
    return np.clip(np.rint(raster * 255.0), 0, 255).astype(np.uint8)


def write_cluster_report(clusters, corpus, crops_by_id, out_dir):
    """JSON report plus one PNG sheet per cluster and a decade contact sheet.

    Each sheet is the cluster average followed by the display crops,
    left to right in score order.
    """
    os.makedirs(out_dir, exist_ok=True)
    report = []
    sheets = []
    for i, c in enumerate(clusters):
        tiles = [c.average_image] + [crops_by_id[pid] for pid in c.display_ids]
        h = max(t.shape[0] for t in tiles)
        w = sum(t.shape[1] for t in tiles) + 2 * (len(tiles) - 1)
        sheet = np.ones((h, w)) * 0.0
        x = 0
        for t in tiles:
            sheet[: t.shape[0], x: x + t.shape[1]] = t
            x += t.shape[1] + 2
        name = f"cluster_{c.target_decade}_{i:02d}.png"
        Image.fromarray(_to_u8(sheet), mode="L").save(
            os.path.join(out_dir, name))
        sheets.append(sheet)
        report.append({
            "decade": c.target_decade,
            "rank": i,
            "sheet": name,
            "discriminativeness": c.discriminativeness,
            "display_ids": list(c.display_ids),
            "detections": [[pid, s] for pid, s in c.detections],
        })
    if sheets:
        h = sum(s.shape[0] for s in sheets) + 2 * (len(sheets) - 1)
        w = max(s.shape[1] for s in sheets)
        contact = np.zeros((h, w))
        y = 0
        for s in sheets:
            contact[y: y + s.shape[0], : s.shape[1]] = s
            y += s.shape[0] + 2
        decade = clusters[0].target_decade
        Image.fromarray(_to_u8(contact), mode="L").save(
            os.path.join(out_dir, f"contact_sheet_{decade}.png"))
    with open(os.path.join(out_dir, "clusters.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report
