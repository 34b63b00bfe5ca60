"""Linear models: hinge-loss SVM, exemplar-LDA detectors, softmax + SGD."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

DEFAULT_BATCH = 64


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray  # K x d (K=1 for binary)
    bias: np.ndarray     # length K
    kind: str            # {hinge, softmax, lda}
    label_names: tuple = ()
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights))
                and np.all(np.isfinite(self.bias))):
            raise ModelError("non-finite model parameters")

    @property
    def dim(self):
        return self.weights.shape[1]

    def decision(self, x):
        """Raw scores W x + b; scalar for binary models."""
        x = np.asarray(x, dtype=np.float64)
        scores = x @ self.weights.T + self.bias
        if self.weights.shape[0] == 1:
            return scores[..., 0]
        return scores


def train_svm(pos, neg, C=1.0, epochs=500, seed=0):
    """Binary hinge-loss SVM by full-batch subgradient descent.

    Objective: lambda/2 ||w||^2 + mean hinge loss with lambda = 1/(C n);
    step 1/(lambda t) with projection onto the 1/sqrt(lambda) ball, bias
    step 1/t (unregularized). Deterministic; ``seed`` is recorded for
    provenance only.
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(neg, dtype=np.float64))
    if len(pos) == 0 or len(neg) == 0:
        raise ModelError("both classes must be non-empty")
    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    n, d = X.shape
    lam = 1.0 / (C * n)
    radius = 1.0 / np.sqrt(lam)
    w = np.zeros(d)
    b = 0.0
    for t in range(1, epochs + 1):
        margins = y * (X @ w + b)
        viol = margins < 1.0
        gw = lam * w - (y[viol, None] * X[viol]).sum(axis=0) / n
        gb = -y[viol].sum() / n
        w = w - gw / (lam * t)
        b = b - gb / t
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
    return LinearModel(weights=w[None, :], bias=np.array([b]), kind="hinge",
                       label_names=("neg", "pos"),
                       hyperparams={"C": C, "epochs": epochs, "seed": seed})


def svm_objective(model, pos, neg, C=1.0):
    """lambda/2 ||w||^2 + mean hinge loss; used for optimizer cross-checks."""
    X = np.vstack([np.atleast_2d(pos), np.atleast_2d(neg)])
    y = np.concatenate([np.ones(len(np.atleast_2d(pos))),
                        -np.ones(len(np.atleast_2d(neg)))])
    lam = 1.0 / (C * len(X))
    w = model.weights[0]
    scores = X @ w + model.bias[0]
    hinge = np.maximum(0.0, 1.0 - y * scores).mean()
    return 0.5 * lam * float(w @ w) + float(hinge)


def lda_detector(pos_mean, whitening, label="target"):
    """Exemplar-LDA direction: solve(Sigma + lambda I, pos_mean - mu), unit norm."""
    pos_mean = np.asarray(pos_mean, dtype=np.float64)
    if pos_mean.shape != whitening.mean.shape:
        raise ModelError("dimension mismatch between seed and whitening model")
    delta = pos_mean - whitening.mean
    w = cho_solve((whitening.cov_factor, True), delta)
    norm = float(np.linalg.norm(w))
    if norm < 1e-12:
        raise ModelError("degenerate seed: positive mean equals corpus mean")
    return LinearModel(weights=(w / norm)[None, :], bias=np.zeros(1),
                       kind="lda", label_names=(label,))


def softmax_probs(logits):
    """Row-wise stable softmax (max subtraction)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def softmax_loss_grad(W, b, X, y):
    """Mean cross-entropy and its gradients on a batch."""
    logits = X @ W.T + b
    P = softmax_probs(logits)
    n = len(X)
    loss = -np.mean(np.log(P[np.arange(n), y] + 1e-300))
    P[np.arange(n), y] -= 1.0
    gW = P.T @ X / n
    gb = P.mean(axis=0)
    return loss, gW, gb


def train_softmax(X, y, K=None, lr=0.001, momentum=0.9, lr_decay=0.1,
                  step_iters=20000, total_iters=100000, batch_size=DEFAULT_BATCH,
                  mirror_pairs=None, seed=0, label_names=None):
    """Minibatch SGD with momentum and a stepped learning-rate schedule.

    The rate starts at ``lr`` and is multiplied by ``lr_decay`` every
    ``step_iters`` iterations. When ``mirror_pairs`` (an n x d array of
    horizontally-mirrored counterparts of X) is given, each sampled example
    is replaced by its mirror with probability 0.5. Deterministic for a
    fixed seed.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = X.shape
    if K is None:
        K = int(y.max()) + 1
    if n < K:
        raise ModelError(f"need at least K={K} examples, got {n}")
    if y.min() < 0 or y.max() >= K:
        raise ModelError("label out of range")
    if mirror_pairs is not None:
        mirror_pairs = np.asarray(mirror_pairs, dtype=np.float64)
        if mirror_pairs.shape != X.shape:
            raise ModelError("mirror_pairs must match X's shape")

    rng = np.random.default_rng(seed)
    W = np.zeros((K, d))
    b = np.zeros(K)
    vW = np.zeros_like(W)
    vb = np.zeros_like(b)
    for it in range(total_iters):
        idx = rng.integers(0, n, size=min(batch_size, n))
        Xb = X[idx]
        if mirror_pairs is not None:
            flip = rng.random(len(idx)) < 0.5
            Xb = np.where(flip[:, None], mirror_pairs[idx], Xb)
        _, gW, gb = softmax_loss_grad(W, b, Xb, y[idx])
        rate = lr * (lr_decay ** (it // step_iters))
        vW = momentum * vW - rate * gW
        vb = momentum * vb - rate * gb
        W = W + vW
        b = b + vb
    names = tuple(label_names) if label_names else tuple(str(k) for k in range(K))
    return LinearModel(weights=W, bias=b, kind="softmax", label_names=names,
                       hyperparams={"lr": lr, "momentum": momentum,
                                    "lr_decay": lr_decay,
                                    "step_iters": step_iters,
                                    "total_iters": total_iters,
                                    "batch_size": batch_size, "seed": seed})


def predict_proba(model, x):
    """Class probabilities for a softmax model; rows sum to 1."""
    if model.kind != "softmax":
        raise ModelError(f"predict_proba needs a softmax model, got {model.kind}")
    x = np.asarray(x, dtype=np.float64)
    return softmax_probs(x @ model.weights.T + model.bias)


def save_model(model, path):
    """JSON header + raw little-endian float64 weight blob in one file."""
    header = {
        "kind": model.kind,
        "k": int(model.weights.shape[0]),
        "dim": int(model.weights.shape[1]),
        "labels": list(model.label_names),
        "hyperparams": model.hyperparams,
    }
    blob = np.concatenate([model.weights.ravel(), model.bias]).astype("<f8")
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        fh.write(blob.tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    k, d = header["k"], header["dim"]
    weights = blob[: k * d].reshape(k, d).copy()
    bias = blob[k * d: k * d + k].copy()
    return LinearModel(weights=weights, bias=bias, kind=header["kind"],
                       label_names=tuple(header["labels"]),
                       hyperparams=header.get("hyperparams", {}))
