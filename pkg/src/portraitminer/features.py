"""HOG descriptors and corpus-level whitening."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular

HOG_NORM_EPS = 1e-6


class FeatureError(Exception):
    pass


@dataclass(frozen=True)
class HogDescriptor:
    values: np.ndarray
    geometry: tuple  # (cells_x, cells_y, orientations)
    cell_px: int


@dataclass(frozen=True)
class WhiteningModel:
    """Corpus feature mean and lower-triangular factor of Sigma + lambda*I."""

    mean: np.ndarray
    cov_factor: np.ndarray  # L with L @ L.T = Sigma + shrinkage * I
    shrinkage: float
    dim: int


def hog(raster, cell_px=8, orientations=9):
    """Cell-level HOG: unsigned orientation histograms, one global L2 norm.

    Gradients are centered differences (one-sided at the border); each
    pixel's magnitude is split linearly between the two nearest
    orientation-bin centers (bin centers at k * 180/orientations, wrapping
    mod 180). A single global L2 normalization replaces block-level
    normalization since downstream whitening decorrelates anyway.
    """
    raster = np.asarray(raster, dtype=np.float64)
    h, w = raster.shape
    if h % cell_px or w % cell_px:
        raise FeatureError(f"raster {w}x{h} not divisible by cell {cell_px}")
    cells_x = w // cell_px
    cells_y = h // cell_px

    gy, gx = np.gradient(raster)
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0

    bin_width = 180.0 / orientations
    pos = ang / bin_width
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo_bin = lo % orientations
    hi_bin = (lo + 1) % orientations

    hist = np.zeros((cells_y, cells_x, orientations), dtype=np.float64)
    ys, xs = np.divmod(np.arange(h * w), w)
    cys = ys // cell_px
    cxs = xs // cell_px
    flat_mag = mag.ravel()
    np.add.at(hist, (cys, cxs, lo_bin.ravel()), flat_mag * (1.0 - frac.ravel()))
    np.add.at(hist, (cys, cxs, hi_bin.ravel()), flat_mag * frac.ravel())

    values = hist.ravel()
    norm = np.sqrt(np.sum(values**2) + HOG_NORM_EPS**2)
    values = values / norm
    return HogDescriptor(values=values,
                         geometry=(cells_x, cells_y, orientations),
                         cell_px=cell_px)


def mirror_permutation(geometry):
    """Index permutation realizing a horizontal image flip in HOG space.

    For d = hog(img).values, d[perm] == hog(fliplr(img)).values exactly
    (same cell grid, mirrored columns, orientation bin k -> (B-k) mod B).
    """
    cells_x, cells_y, orientations = geometry
    idx = np.arange(cells_y * cells_x * orientations).reshape(
        cells_y, cells_x, orientations)
    mirrored = np.empty_like(idx)
    for b in range(orientations):
        mirrored[:, :, b] = idx[:, ::-1, (orientations - b) % orientations]
    return mirrored.ravel()


def default_shrinkage(cov, dim):
    """Scale-relative default: 1% of the average variance."""
    return 0.01 * float(np.trace(cov)) / dim


def fit_whitening(descriptors, shrinkage=None):
    """Fit mean + Cholesky factor of the shrunk sample covariance.

    ``shrinkage=None`` selects the scale-relative default; pass an explicit
    lambda (0 allowed for full-rank data).
    """
    X = np.asarray(descriptors, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise FeatureError("need at least 2 descriptors to fit whitening")
    mu = X.mean(axis=0)
    cov = np.cov(X, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    lam = default_shrinkage(cov, d) if shrinkage is None else float(shrinkage)
    if lam < 0:
        raise FeatureError("shrinkage must be >= 0")
    try:
        L = cholesky(cov + lam * np.eye(d), lower=True)
    except np.linalg.LinAlgError as exc:
        raise FeatureError(
            f"covariance factorization failed (lambda={lam:g}); "
            "increase shrinkage") from exc
    return WhiteningModel(mean=mu, cov_factor=L, shrinkage=lam, dim=d)


def whiten(model, x):
    """L^-1 (x - mu) by forward substitution. Accepts a vector or n x d rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise FeatureError(f"dimension {x.shape[-1]} != model dim {model.dim}")
    centered = x - model.mean
    if centered.ndim == 1:
        return solve_triangular(model.cov_factor, centered, lower=True)
    return solve_triangular(model.cov_factor, centered.T, lower=True).T


def save_descriptor_cache(path, ids, matrix, geometry, cell_px):
    """Flat little-endian float32 blob + JSON sidecar (dims, geometry, ids)."""
    matrix = np.asarray(matrix, dtype="<f4")
    matrix.tofile(path)
    sidecar = {
        "n": int(matrix.shape[0]),
        "dim": int(matrix.shape[1]),
        "geometry": list(geometry),
        "cell_px": int(cell_px),
        "ids": list(ids),
    }
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_descriptor_cache(path):
    """Returns (ids, float64 matrix, geometry, cell_px)."""
    with open(path + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    raw = np.fromfile(path, dtype="<f4")
    matrix = raw.reshape(sidecar["n"], sidecar["dim"]).astype(np.float64)
    return (sidecar["ids"], matrix, tuple(sidecar["geometry"]),
            sidecar["cell_px"])


def corpus_descriptors(crops_by_id, cell_px=8, orientations=9):
    """HOG every crop; returns (sorted ids, stacked matrix, geometry)."""
    ids = sorted(crops_by_id)
    if not ids:
        raise FeatureError("no crops supplied")
    descs = [hog(crops_by_id[i], cell_px=cell_px, orientations=orientations)
             for i in ids]
    geometry = descs[0].geometry
    matrix = np.stack([d.values for d in descs])
    return ids, matrix, geometry
