"""Portrait corpus: manifest I/O, validation, filtering, splitting, stats.

The manifest is UTF-8 JSON-lines, one object per portrait with keys
``id``, ``image_path``, ``year``, ``school_id``, ``state``, ``gender``
("F"/"M"/"?"), optional ``pose`` ([yaw, pitch, roll] in degrees) and
``landmarks`` (flat [x0, y0, x1, y1, ...]). Image paths are resolved
relative to the manifest location.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

REQUIRED_MOUTH_ROLES = (
    "mouth_left_corner",
    "mouth_right_corner",
    "upper_lip_bottom",
    "lower_lip_top",
)

# Rec. 601 luminance weights for color -> grayscale conversion.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class CorpusError(Exception):
    """Raised for manifest / corpus validation failures."""


class SplitInfeasibleError(CorpusError):
    """Requested train/test split cannot be satisfied."""

    def __init__(self, message, best_fraction=None):
        super().__init__(message)
        self.best_fraction = best_fraction


@dataclass(frozen=True)
class LandmarkSchema:
    """Landmark point-set convention: count plus named semantic roles."""

    point_count: int
    named_indices: dict

    def __post_init__(self):
        if self.point_count <= 0:
            raise CorpusError("point_count must be positive")
        for role in REQUIRED_MOUTH_ROLES:
            if role not in self.named_indices:
                raise CorpusError(f"schema missing required role {role!r}")
        mouth = [self.named_indices[r] for r in REQUIRED_MOUTH_ROLES]
        if len(set(mouth)) != 4:
            raise CorpusError("mouth roles must map to four distinct indices")
        for role, idx in self.named_indices.items():
            for i in idx if isinstance(idx, (list, tuple)) else [idx]:
                if not (0 <= int(i) < self.point_count):
                    raise CorpusError(
                        f"role {role!r} index {i} out of range for "
                        f"{self.point_count}-point schema"
                    )

    def role_index(self, role):
        return int(self.named_indices[role])

    def eye_indices(self, side):
        """Index list for 'left_eye' / 'right_eye', or None if absent."""
        key = f"{side}_eye"
        if key not in self.named_indices:
            return None
        val = self.named_indices[key]
        return [int(i) for i in (val if isinstance(val, (list, tuple)) else [val])]

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls(point_count=int(obj["point_count"]),
                   named_indices=obj["named_indices"])


@dataclass(frozen=True)
class Portrait:
    """One landmark-annotated grayscale portrait plus its metadata."""

    id: str
    image: np.ndarray          # H x W float64 in [0, 1]
    landmarks: np.ndarray      # N x 2 (x, y), y grows downward
    year: int
    school_id: str
    state: str = ""
    gender: str = "unknown"    # {female, male, unknown}
    pose: tuple | None = None  # (yaw, pitch, roll) degrees

    def __post_init__(self):
        if not np.all(np.isfinite(self.landmarks)):
            raise CorpusError(f"portrait {self.id}: non-finite landmarks")
        if not (1900 <= self.year <= 2100):
            raise CorpusError(f"portrait {self.id}: year {self.year} out of range")
        if self.gender not in ("female", "male", "unknown"):
            raise CorpusError(f"portrait {self.id}: bad gender {self.gender!r}")

    @property
    def decade(self):
        return self.year - (self.year % 10)


@dataclass(frozen=True)
class Corpus:
    """Immutable ordered collection of portraits under one schema."""

    schema: LandmarkSchema
    portraits: tuple
    provenance: tuple = ()

    def __post_init__(self):
        ids = [p.id for p in self.portraits]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate portrait ids")
        for p in self.portraits:
            if len(p.landmarks) != self.schema.point_count:
                raise CorpusError(
                    f"portrait {p.id}: {len(p.landmarks)} landmarks, "
                    f"schema expects {self.schema.point_count}"
                )

    def __len__(self):
        return len(self.portraits)

    def __iter__(self):
        return iter(self.portraits)

    def by_id(self, pid):
        for p in self.portraits:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def subset(self, predicate, note=""):
        kept = tuple(p for p in self.portraits if predicate(p))
        return replace(self, portraits=kept,
                       provenance=self.provenance + ((note or "subset"),))


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test id sets honoring school-decade separation."""

    train_ids: frozenset
    test_ids: frozenset
    year_lo: int
    year_hi: int
    separation_years: int
    seed: int

    def __post_init__(self):
        if self.train_ids & self.test_ids:
            raise CorpusError("train and test ids overlap")


GENDER_CODES = {"F": "female", "M": "male", "?": "unknown"}
GENDER_CODES_INV = {"female": "F", "male": "M", "unknown": "?"}


def _decode_image(path):
    """Decode PNG/PGM (8/16-bit, 1- or 3-channel) to float64 in [0,1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0 if "16" in im.mode else max(arr.max(), 1.0)
            gray = arr / scale
        elif im.mode in ("RGB", "RGBA"):
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            gray = (LUMA_WEIGHTS[0] * arr[..., 0]
                    + LUMA_WEIGHTS[1] * arr[..., 1]
                    + LUMA_WEIGHTS[2] * arr[..., 2])
        else:
            gray = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return np.clip(gray, 0.0, 1.0)


def load_manifest(path, schema):
    """Load a JSON-lines manifest into a Corpus (manifest order preserved)."""
    base = os.path.dirname(os.path.abspath(path))
    portraits = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: bad JSON ({exc})") from exc
            try:
                year = int(rec["year"])
            except (ValueError, TypeError) as exc:
                raise CorpusError(
                    f"{path}:{lineno}: non-numeric year {rec.get('year')!r}"
                ) from exc
            lm = np.asarray(rec["landmarks"], dtype=np.float64)
            if lm.size % 2 != 0:
                raise CorpusError(f"{path}:{lineno}: odd landmark array length")
            lm = lm.reshape(-1, 2)
            if len(lm) != schema.point_count:
                raise CorpusError(
                    f"{path}:{lineno}: {len(lm)} landmarks, schema expects "
                    f"{schema.point_count}"
                )
            img_path = os.path.join(base, rec["image_path"])
            if not os.path.isfile(img_path):
                raise CorpusError(f"{path}:{lineno}: missing image {img_path}")
            pose = rec.get("pose")
            portraits.append(Portrait(
                id=str(rec["id"]),
                image=_decode_image(img_path),
                landmarks=lm,
                year=year,
                school_id=str(rec["school_id"]),
                state=str(rec.get("state", "")),
                gender=GENDER_CODES.get(rec.get("gender", "?"), "unknown"),
                pose=tuple(float(v) for v in pose) if pose is not None else None,
            ))
    return Corpus(schema=schema, portraits=tuple(portraits),
                  provenance=(os.path.abspath(path),))


def save_manifest(corpus, path, image_dir=None):
    """Write corpus back out as manifest + 8-bit PGM images (round-trippable).

    Round-tripping is exact only up to 8-bit quantization of pixel values;
    landmark and metadata fields round-trip exactly.
    """
    base = os.path.dirname(os.path.abspath(path))
    image_dir = image_dir or base
    os.makedirs(image_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for p in corpus:
            img_name = f"{p.id}.pgm"
            img_path = os.path.join(image_dir, img_name)
            arr = np.clip(np.rint(p.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr, mode="L").save(img_path)
            rec = {
                "id": p.id,
                "image_path": os.path.relpath(img_path, base),
                "year": p.year,
                "school_id": p.school_id,
                "state": p.state,
                "gender": GENDER_CODES_INV[p.gender],
                "landmarks": [float(v) for v in p.landmarks.ravel()],
            }
            if p.pose is not None:
                rec["pose"] = list(p.pose)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def filter_frontal(corpus, yaw_max=15.0, pitch_max=15.0):
    """Drop portraits with |yaw| or |pitch| beyond thresholds.

    Portraits without pose fields are retained (manifests are often
    pre-filtered upstream).
    """
    def frontal(p):
        if p.pose is None:
            return True
        yaw, pitch = p.pose[0], p.pose[1]
        return abs(yaw) <= yaw_max and abs(pitch) <= pitch_max

    return corpus.subset(frontal, note=f"frontal(yaw<={yaw_max},pitch<={pitch_max})")


def split_dating(corpus, test_frac, year_lo, year_hi, separation_years, seed):
    """Deterministic stratified test sample plus school-separation pruning.

    Test portraits are drawn per-year (stratified, seeded shuffle); any
    train portrait within ``separation_years`` of a same-school test
    portrait is dropped from train rather than violating the separation.
    """
    if not (0.0 < test_frac < 1.0):
        raise CorpusError("test_frac must be in (0, 1)")
    eligible = [p for p in corpus if year_lo <= p.year <= year_hi]
    n = len(eligible)
    if n == 0:
        raise CorpusError(f"no portraits in {year_lo}..{year_hi}")
    n_test = int(round(test_frac * n))
    if n_test < 1 or n_test >= n:
        best = (max(1, min(n - 1, n_test))) / n
        raise SplitInfeasibleError(
            f"cannot take {n_test} of {n} portraits as test; "
            f"best achievable fraction {best:.4f}",
            best_fraction=best,
        )

    rng = np.random.default_rng(seed)
    by_year = {}
    for p in eligible:
        by_year.setdefault(p.year, []).append(p)

    # Per-year quotas: floor of proportional share, remainder to the years
    # with the largest fractional parts (deterministic tie-break by year).
    test_ids = []
    shares = {y: test_frac * len(ps) for y, ps in by_year.items()}
    quotas = {y: int(math.floor(s)) for y, s in shares.items()}
    deficit = n_test - sum(quotas.values())
    order = sorted(by_year, key=lambda y: (-(shares[y] - quotas[y]), y))
    for y in order:
        if deficit <= 0:
            break
        if quotas[y] < len(by_year[y]):
            quotas[y] += 1
            deficit -= 1
    # Concentrate test picks in a seeded school order: the same schools
    # supply test portraits across years, so the other schools survive the
    # separation pruning mostly intact.
    schools = sorted({p.school_id for p in eligible})
    perm = rng.permutation(len(schools))
    rank_of = {s: int(perm[i]) for i, s in enumerate(schools)}
    for y in sorted(by_year):
        ps = sorted(by_year[y], key=lambda p: p.id)
        within = rng.permutation(len(ps))
        order = sorted(range(len(ps)),
                       key=lambda i: (rank_of[ps[i].school_id], within[i]))
        test_ids.extend(ps[i].id for i in order[: quotas[y]])

    test_set = frozenset(test_ids)
    test_key = {}
    for p in eligible:
        if p.id in test_set:
            test_key.setdefault(p.school_id, []).append(p.year)
    train_ids = []
    for p in eligible:
        if p.id in test_set:
            continue
        years = test_key.get(p.school_id, ())
        if any(abs(p.year - ty) < separation_years for ty in years):
            continue  # dropped: too close to a same-school test portrait
        train_ids.append(p.id)
    if not train_ids:
        raise SplitInfeasibleError(
            "separation constraint eliminated the entire training set",
            best_fraction=0.0,
        )
    return SplitSpec(
        train_ids=frozenset(train_ids),
        test_ids=test_set,
        year_lo=year_lo,
        year_hi=year_hi,
        separation_years=separation_years,
        seed=seed,
    )


def corpus_stats(corpus):
    """Descriptive counts: per year, state, gender; mean per (school, year)."""
    per_year = {}
    per_state = {}
    per_gender = {"female": 0, "male": 0, "unknown": 0}
    per_class = {}
    for p in corpus:
        per_year[p.year] = per_year.get(p.year, 0) + 1
        if p.state:
            per_state[p.state] = per_state.get(p.state, 0) + 1
        per_gender[p.gender] += 1
        key = (p.school_id, p.year)
        per_class[key] = per_class.get(key, 0) + 1
    n = len(corpus)
    known = per_gender["female"] + per_gender["male"]
    return {
        "n": n,
        "per_year": dict(sorted(per_year.items())),
        "per_state": dict(sorted(per_state.items())),
        "per_gender": per_gender,
        "gender_pct": {
            g: (100.0 * per_gender[g] / known if known else 0.0)
            for g in ("female", "male")
        },
        "mean_per_school_year": (sum(per_class.values()) / len(per_class)
                                 if per_class else 0.0),
    }


def write_stats_csv(stats, path):
    """Stats as CSV: one row per (year, gender-count triple) and per state."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "key", "count"])
        for year, cnt in stats["per_year"].items():
            w.writerow(["year", year, cnt])
        for state, cnt in stats["per_state"].items():
            w.writerow(["state", state, cnt])
        for gender, cnt in stats["per_gender"].items():
            w.writerow(["gender", gender, cnt])
