"""Flat dotted-key configuration with file, environment and CLI overrides."""

from __future__ import annotations

import json
import os

ENV_PREFIX = "PORTRAITMINER_"

# key -> (default, description). Paths default to None and must be supplied.
DEFAULTS = {
    "data.manifest": (None, "portrait manifest (JSON-lines)"),
    "data.schema": (None, "landmark schema JSON"),
    "data.yaw_max": (15.0, "frontal filter: max |yaw| degrees"),
    "data.pitch_max": (15.0, "frontal filter: max |pitch| degrees"),
    "align.canonical_width": (128, "canonical frame width (px)"),
    "align.canonical_height": (160, "canonical frame height (px)"),
    "align.max_iter": (20, "mean-shape iteration cap"),
    "align.tol": (0.05, "mean-shape convergence tolerance (px RMS)"),
    "crop.bottom_band": (16, "px excluded at the canonical frame bottom"),
    "crop.size": (96, "analysis crop side length (px)"),
    "hog.cell_px": (8, "HOG cell size (px)"),
    "hog.orientations": (9, "HOG orientation bins (unsigned, 0-180)"),
    "whitening.shrinkage": (None, "covariance shrinkage; empty = auto"),
    "composite.min_count": (5, "min portraits per composite group"),
    "smile.bin_years": (10, "exemplar bin width (years)"),
    "smile.validation_manifest": (None, "expression-intensity manifest"),
    "mine.decade": (None, "target decade for style mining"),
    "mine.n_seeds": (200, "seed detectors per decade"),
    "mine.rounds": (3, "refinement rounds"),
    "mine.top_m": (5, "in-decade positives per refinement round"),
    "mine.top": (20, "detections counted for discriminativeness"),
    "mine.window": (60, "detections checked for cluster overlap"),
    "mine.overlap_max": (6, "max shared ids before a cluster is dropped"),
    "mine.n_clusters": (4, "clusters reported per decade"),
    "mine.display_k": (6, "member crops per cluster sheet"),
    "mine.gender": ("female", "gender slice mined (female/male/both)"),
    "dating.year_lo": (1928, "first dating class year"),
    "dating.year_hi": (2010, "last dating class year"),
    "dating.min_per_year": (50, "min portraits per year (inclusive)"),
    "dating.gender": ("female", "gender slice dated"),
    "dating.test_frac": (0.2, "test fraction"),
    "dating.separation_years": (10, "same-school train/test separation"),
    "dating.denoise": (False, "3x3 median filter before features"),
    "sgd.lr": (0.001, "initial learning rate"),
    "sgd.momentum": (0.9, "SGD momentum"),
    "sgd.lr_decay": (0.1, "learning-rate decay factor"),
    "sgd.step_iters": (20000, "iterations between decays"),
    "sgd.total_iters": (100000, "total SGD iterations"),
    "sgd.batch": (64, "minibatch size"),
    "run.seed": (0, "master seed; stages derive fixed offsets"),
    "run.output_dir": ("out", "artifact output directory"),
    "run.jobs": (1, "worker pool size for stage-internal parallelism"),
}

# Fixed per-stage seed offsets fanned out from run.seed.
SEED_OFFSETS = {"split": 1, "mine": 2, "sgd": 3, "svm": 4}


class ConfigError(Exception):
    pass


def _parse_value(text):
    text = text.strip()
    if text == "" or text.lower() == "none":
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


class PipelineConfig:
    def __init__(self, values=None):
        self.values = {k: v for k, (v, _) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def get(self, key):
        return self.values[key]

    def seed(self, stage=None):
        base = int(self.values["run.seed"])
        return base + SEED_OFFSETS.get(stage, 0)

    def snapshot(self):
        return dict(sorted(self.values.items()))

    def validate(self, require_manifest=True):
        if require_manifest:
            for key in ("data.manifest", "data.schema"):
                path = self.values[key]
                if not path:
                    raise ConfigError(f"{key} is required")
                if not os.path.isfile(path):
                    raise ConfigError(f"{key}: no such file {path}")
        for key in ("dating.test_frac",):
            v = float(self.values[key])
            if not (0.0 < v < 1.0):
                raise ConfigError(f"{key} must be in (0, 1), got {v}")
        for key in ("hog.cell_px", "hog.orientations", "crop.size",
                    "sgd.total_iters", "run.jobs"):
            if int(self.values[key]) <= 0:
                raise ConfigError(f"{key} must be positive")

    @classmethod
    def load(cls, path=None, overrides=None, env=None):
        """File, then PORTRAITMINER_* environment, then CLI overrides."""
        cfg = cls()
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, raw in enumerate(fh, start=1):
                    line = raw.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{lineno}: expected key = value")
                    key, val = (s.strip() for s in line.split("=", 1))
                    cfg.set(key, _parse_value(val))
        env = os.environ if env is None else env
        for key in DEFAULTS:
            env_key = ENV_PREFIX + key.upper().replace(".", "_")
            if env_key in env:
                cfg.set(key, _parse_value(env[env_key]))
        for key, val in (overrides or {}).items():
            cfg.set(key, val)
        return cfg


def describe_keys():
    """One help line per config key: key, default, description."""
    lines = []
    for key, (default, desc) in DEFAULTS.items():
        lines.append(f"  {key:<28} default={default!r:<10} {desc}")
    return "\n".join(lines)
