"""Landmark alignment: least-squares affine fits, mean shape, warping, crops."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

DEFAULT_CANONICAL_SIZE = (128, 160)  # (width, height)
DEFAULT_EYE_DISTANCE = 40.0
DEFAULT_RMS_RADIUS = 40.0
DEFAULT_BOTTOM_BAND = 16
DEFAULT_CROP_SIZE = (96, 96)


class AlignError(Exception):
    pass


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix [a b tx; c d ty] mapping source (x, y) -> destination."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise AlignError("affine matrix must be 2x3")
        if not np.all(np.isfinite(m)):
            raise AlignError("non-finite affine entries")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise AlignError("degenerate (non-invertible) affine transform")
        object.__setattr__(self, "matrix", m)

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self):
        A = self.matrix[:, :2]
        t = self.matrix[:, 2]
        Ainv = np.linalg.inv(A)
        return AffineTransform(np.hstack([Ainv, (-Ainv @ t)[:, None]]))

    @staticmethod
    def identity():
        return AffineTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


@dataclass(frozen=True)
class MeanShape:
    """Mean landmark configuration in the canonical frame."""

    points: np.ndarray
    canonical_size: tuple
    iterations_run: int
    final_delta: float


def fit_affine(src, dst):
    """Least-squares affine src -> dst.

    Returns (AffineTransform, residual) where residual is the root of the
    mean squared point error Sum ||T(src_i) - dst_i||^2 / n.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise AlignError("src/dst must be equal-shape Nx2 arrays")
    n = len(src)
    if n < 3:
        raise AlignError("need at least 3 correspondences")
    X = np.hstack([src, np.ones((n, 1))])
    if np.linalg.matrix_rank(X) < 3:
        raise AlignError("collinear or degenerate source points")
    # Two independent 3-parameter rows share the same design matrix.
    sol, _, _, _ = np.linalg.lstsq(X, dst, rcond=None)
    matrix = sol.T  # rows: [a b tx], [c d ty]
    T = AffineTransform(matrix)
    diff = T.apply(src) - dst
    residual = float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))
    return T, residual


def _canonicalize(points, canonical_size, schema=None):
    """Center a shape in the canonical frame and fix its scale.

    Scale anchors to the inter-eye distance (40 px) when the schema names
    eye roles, else to an RMS radius about the centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = None
    if schema is not None:
        left = schema.eye_indices("left")
        right = schema.eye_indices("right")
        if left and right:
            eye_l = pts[left].mean(axis=0)
            eye_r = pts[right].mean(axis=0)
            d = float(np.linalg.norm(eye_r - eye_l))
            if d > 1e-9:
                scale = DEFAULT_EYE_DISTANCE / d
    if scale is None:
        rms = float(np.sqrt(np.mean(np.sum(centered**2, axis=1))))
        if rms < 1e-12:
            raise AlignError("degenerate shape: zero spatial extent")
        scale = DEFAULT_RMS_RADIUS / rms
    w, h = canonical_size
    return centered * scale + np.array([w / 2.0, h / 2.0])


def compute_mean_shape(corpus, canonical_size=DEFAULT_CANONICAL_SIZE,
                       max_iter=20, tol=0.05):
    """Generalized-Procrustes-style iteration with affine per-shape fits.

    Initializes from the first portrait's landmarks scaled into the
    canonical frame, then alternates fit-all / average / re-canonicalize
    until the mean moves less than ``tol`` px RMS.
    """
    if len(corpus) == 0:
        raise AlignError("empty corpus")
    schema = corpus.schema
    shapes = []
    skipped = 0
    for p in corpus:
        pts = p.landmarks
        if np.linalg.matrix_rank(np.hstack([pts, np.ones((len(pts), 1))])) < 3:
            skipped += 1
            continue
        shapes.append(pts)
    if not shapes:
        raise AlignError("all landmark sets degenerate")

    mean = _canonicalize(shapes[0], canonical_size, schema)
    iterations = 0
    delta = np.inf
    for iterations in range(1, max_iter + 1):
        acc = np.zeros_like(mean)
        for pts in shapes:
            T, _ = fit_affine(pts, mean)
            acc += T.apply(pts)
        new_mean = _canonicalize(acc / len(shapes), canonical_size, schema)
        delta = float(np.sqrt(np.mean(np.sum((new_mean - mean) ** 2, axis=1))))
        mean = new_mean
        if delta < tol:
            break
    return MeanShape(points=mean, canonical_size=tuple(canonical_size),
                     iterations_run=iterations, final_delta=delta)


def _bilinear_sample(image, xs, ys, fill):
    """Sample image at float coords; out-of-bounds pixels take ``fill``."""
    h, w = image.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x0c = np.clip(x0, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    top = image[y0c, x0c] * (1 - fx) + image[y0c, x1c] * fx
    bot = image[y1c, x0c] * (1 - fx) + image[y1c, x1c] * fx
    out = top * (1 - fy) + bot * fy
    return np.where(valid, out, fill)


def warp_image(image, transform, out_size, fill=None):
    """Warp ``image`` by ``transform`` (source -> destination coords).

    Output pixel (u, v) samples the source at T^-1(u, v) bilinearly;
    samples outside the source take ``fill`` (default: source mean).
    """
    w, h = out_size
    if fill is None:
        fill = float(image.mean())
    inv = transform.inverse().matrix
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    xs = inv[0, 0] * us + inv[0, 1] * vs + inv[0, 2]
    ys = inv[1, 0] * us + inv[1, 1] * vs + inv[1, 2]
    return _bilinear_sample(image, xs, ys, fill)


def warp_to_mean(portrait, mean_shape):
    """Align one portrait onto the mean shape; returns the canonical raster."""
    T, _ = fit_affine(portrait.landmarks, mean_shape.points)
    return warp_image(portrait.image, T, mean_shape.canonical_size)


def default_crop_region(mean_shape, bottom_band=DEFAULT_BOTTOM_BAND):
    """Face-and-hair region: full canonical frame minus a bottom band."""
    w, h = mean_shape.canonical_size
    return (0, 0, w, h - bottom_band)


def resample(image, out_size):
    """Bilinear resample to (width, height)."""
    h, w = image.shape
    ow, oh = out_size
    sx = w / ow
    sy = h / oh
    # Align pixel centers: dest center (u+.5) maps to source (u+.5)*s - .5
    us, vs = np.meshgrid(np.arange(ow, dtype=np.float64),
                         np.arange(oh, dtype=np.float64))
    xs = (us + 0.5) * sx - 0.5
    ys = (vs + 0.5) * sy - 0.5
    return _bilinear_sample(image, xs, ys, float(image.mean()))


def crop_face_hair(aligned, mean_shape, region=None, out_size=None):
    """Crop the analysis window from an aligned raster.

    With no arguments the default region (frame minus the bottom band)
    is cut and resampled to 96x96. An explicit ``region`` (x0, y0, x1, y1)
    is cut exactly; resampling happens only when ``out_size`` is given.
    """
    h, w = aligned.shape
    if region is None:
        region = default_crop_region(mean_shape)
        if out_size is None:
            out_size = DEFAULT_CROP_SIZE
    x0, y0, x1, y1 = (int(v) for v in region)
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise AlignError(f"crop region {region} outside {w}x{h} frame")
    sub = aligned[y0:y1, x0:x1]
    if out_size is not None and (x1 - x0, y1 - y0) != tuple(out_size):
        sub = resample(sub, out_size)
    return sub


def write_aligned_cache(corpus, mean_shape, out_dir):
    """Warp every portrait and cache as <id>.aligned.pgm plus an index CSV.

    Returns {portrait_id: aligned raster}.
    """
    os.makedirs(out_dir, exist_ok=True)
    cache = {}
    rows = []
    for p in corpus:
        T, residual = fit_affine(p.landmarks, mean_shape.points)
        raster = warp_image(p.image, T, mean_shape.canonical_size)
        cache[p.id] = raster
        arr = np.clip(np.rint(raster * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(
            os.path.join(out_dir, f"{p.id}.aligned.pgm"))
        rows.append((p.id, residual))
    with open(os.path.join(out_dir, "index.csv"), "w",
              encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "residual"])
        for pid, res in rows:
            w.writerow([pid, f"{res:.9g}"])
    return cache


def load_aligned_cache(corpus, cache_dir):
    """Read back a warp cache written by write_aligned_cache."""
    cache = {}
    for p in corpus:
        path = os.path.join(cache_dir, f"{p.id}.aligned.pgm")
        with Image.open(path) as im:
            cache[p.id] = np.asarray(im, dtype=np.float64) / 255.0
    return cache
