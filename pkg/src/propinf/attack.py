"""Attack-side machinery: model featurization, the property classifier, metrics.

White-box features pool each class row of the weight matrix with
permutation-robust statistics (mean, max, top-3 absolute entries) plus the
sorted bias, so any shared reordering of feature coordinates maps to the same
vector. Black-box features are the model's posteriors on a frozen probe
graph, rows sorted lexicographically to erase probe-node ordering. The attack
classifier is a binary logistic regression over z-scored features trained
with deterministic full-batch gradient descent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .graph import AttributedGraph
from .model import ModelParams, posteriors


@dataclass
class AttackSample:
    features: np.ndarray
    label: int
    origin: str  # "approximated" | "retrained-shadow" | "target"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.label not in (0, 1):
            raise ValueError("label must be binary")


@dataclass
class AttackTrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4


@dataclass
class AttackModelParams:
    weights: np.ndarray
    bias: float
    mean: np.ndarray    # z-score statistics from the training set
    scale: np.ndarray
    train_meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "train_meta": self.train_meta,
        }


@dataclass
class Metrics:
    accuracy: float
    roc_auc: float
    n: int
    degenerate: bool = False  # single-class truth vector

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "roc_auc": self.roc_auc,
                "n": self.n, "degenerate": self.degenerate}


def featurize_whitebox(params: ModelParams) -> np.ndarray:
    """Permutation-robust pooling of the parameters.

    Per class row: mean, max, and the 3 largest absolute entries in
    descending order (zero-padded when f < 3); then the bias vector sorted
    descending. Dimension is 6 * n_classes for any feature width.
    """
    w = params.weights()
    parts = []
    for row in w:
        top = np.sort(np.abs(row))[::-1][:3]
        if len(top) < 3:
            top = np.concatenate([top, np.zeros(3 - len(top))])
        parts.append([row.mean(), row.max(), *top])
    parts.append(np.sort(params.bias())[::-1])
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def featurize_blackbox(params: ModelParams, probe: AttributedGraph) -> np.ndarray:
    """Posteriors on the probe's nodes, rows sorted lexicographically, flat.

    The probe graph must stay fixed across every model of one experiment so
    the coordinates are comparable. Dimension is probe.node_count * n_classes.
    """
    if probe.feature_dim != params.n_features:
        raise ValueError("probe feature dimension does not match the model")
    post = posteriors(params, probe, range(probe.node_count))
    order = np.lexsort(post.T[::-1])  # sort rows by first column, then second, ...
    return post[order].ravel()


def save_samples(samples, path: str):
    """Write an attack dataset as CSV: feature columns, label, origin."""
    dim = samples[0].features.shape[0] if samples else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dim)] + ["label", "origin"])
        for s in samples:
            writer.writerow([repr(float(v)) for v in s.features] + [s.label, s.origin])


def load_samples(path: str) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 2
        return [
            AttackSample(np.array([float(v) for v in row[:dim]]),
                         int(row[dim]), row[dim + 1])
            for row in reader
        ]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def train_attack(samples, cfg: AttackTrainConfig = None) -> AttackModelParams:
    """Fit the binary property classifier on featurized models.

    Features are z-scored with training statistics (stored for inference);
    optimization is full-batch gradient descent on the mean cross-entropy
    plus weight decay, from zero initialization, hence deterministic and
    invariant to sample order and duplication.
    """
    cfg = cfg or AttackTrainConfig()
    x = np.stack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=np.float64)
    if len({s.features.shape[0] for s in samples}) != 1:
        raise ValueError("inconsistent feature dimensions")
    if len(set(y.tolist())) < 2:
        raise ValueError("training set contains a single class")

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale == 0.0, 1.0, scale)
    z = (x - mean) / scale

    n, dim = z.shape
    w = np.zeros(dim)
    b = 0.0
    for _ in range(cfg.epochs):
        p = _sigmoid(z @ w + b)
        err = (p - y) / n
        w -= cfg.learning_rate * (z.T @ err + cfg.weight_decay * w)
        b -= cfg.learning_rate * (float(err.sum()) + cfg.weight_decay * b)
    return AttackModelParams(
        weights=w, bias=b, mean=mean, scale=scale,
        train_meta={"epochs": cfg.epochs, "learning_rate": cfg.learning_rate,
                    "weight_decay": cfg.weight_decay, "n_samples": n},
    )


def infer_property(attack_model: AttackModelParams, features) -> tuple:
    """(label, score): sigmoid score with the strict > 0.5 label rule."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != attack_model.mean.shape:
        raise ValueError("feature dimension mismatch")
    z = (x - attack_model.mean) / attack_model.scale
    score = float(_sigmoid(np.array([z @ attack_model.weights + attack_model.bias]))[0])
    return int(score > 0.5), score


def roc_auc(scores, labels) -> tuple:
    """Rank-statistic ROC-AUC with ties counted 0.5.

    Returns (auc, degenerate); a single-class label vector reports 0.5 with
    the degenerate flag set.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5, True
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg), False


def evaluate(predictions, truths) -> Metrics:
    """Accuracy and ROC-AUC of (label, score) pairs against truth labels."""
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths differ in length")
    if len(truths) < 1:
        raise ValueError("need at least one sample")
    pred_labels = np.array([p[0] for p in predictions])
    scores = np.array([p[1] for p in predictions], dtype=np.float64)
    truths = np.asarray(truths)
    acc = float((pred_labels == truths).mean())
    auc, degenerate = roc_auc(scores, truths)
    return Metrics(accuracy=acc, roc_auc=float(auc), n=len(truths), degenerate=degenerate)
