"""Ranking metrics, bootstrap, dispersion baseline and linear probes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, UndefinedMetricError

SCORE_KINDS = ("entropy", "negative-log-likelihood", "log-likelihood", "probe-probability", "dispersion")


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    kind: str = "entropy"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(int)
        if self.scores.shape != self.labels.shape:
            raise DimensionError("scores and labels differ in length")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")

    def subset(self, idx) -> "ScoredSet":
        return ScoredSet(self.scores[idx], self.labels[idx], self.kind)


@dataclass
class EvalReport:
    metric: str
    point: float
    boot_mean: float
    boot_std: float
    resamples: int
    seed: int
    skipped: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def auroc(s: ScoredSet) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via mid-ranks."""
    pos = s.labels == 1
    n1 = int(pos.sum())
    n0 = s.labels.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    r = rankdata(s.scores)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auprc(s: ScoredSet) -> float:
    """Average precision: sum over distinct thresholds of (R_t - R_prev) * P_t."""
    n_pos = int(s.labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-s.scores, kind="mergesort")
    sc, lab = s.scores[order], s.labels[order]
    tp = np.cumsum(lab)
    # last index of every tie block
    ends = np.r_[np.nonzero(np.diff(sc))[0], sc.size - 1]
    tp_t = tp[ends]
    precision = tp_t / (ends + 1)
    recall = tp_t / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def spearman(a, b) -> float:
    """Pearson correlation of mid-ranks."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise DimensionError("spearman needs two equal-length vectors of length >= 2")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        raise UndefinedMetricError("spearman undefined: zero rank variance")
    return float(np.clip(ra @ rb / den, -1.0, 1.0))


METRICS: dict[str, Callable[[ScoredSet], float]] = {"auroc": auroc, "auprc": auprc}


def bootstrap(s: ScoredSet, metric="auroc", resamples: int = 1000, seed: int = 0) -> EvalReport:
    """Resample items with replacement; resamples where the metric is
    undefined (e.g. one class only) are skipped and counted."""
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    name = metric if isinstance(metric, str) else metric.__name__
    fn = METRICS[metric] if isinstance(metric, str) else metric
    point = fn(s)
    rng = np.random.default_rng(seed)
    n = s.scores.size
    vals, skipped = [], 0
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        try:
            vals.append(fn(s.subset(idx)))
        except UndefinedMetricError:
            skipped += 1
    if skipped * 2 > resamples:
        raise UndefinedMetricError(
            f"{name} undefined on {skipped}/{resamples} bootstrap resamples"
        )
    vals = np.asarray(vals)
    return EvalReport(name, point, float(vals.mean()), float(vals.std()), resamples, seed, skipped)


def teacher_dispersion(samples) -> float:
    """sqrt of the mean over dimensions of the unbiased per-dimension variance."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError("teacher dispersion needs at least two samples")
    return float(np.sqrt(x.var(axis=0, ddof=1).mean()))


# ---------------------------------------------------------------------------
# linear probes
# ---------------------------------------------------------------------------


@dataclass
class LinearProbe:
    weights: np.ndarray
    bias: float
    l2: float = 1e-3
    iterations: int = 500
    seed: int = 0
    final_loss: float = math.nan

    def decision_function(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weights.size:
            raise DimensionError(f"probe expects {self.weights.size} features, got {x.shape}")
        return x @ self.weights + self.bias

    def predict_proba(self, features) -> np.ndarray:
        return _sigmoid(self.decision_function(features))

    def predict(self, features) -> np.ndarray:
        return (self.decision_function(features) > 0).astype(int)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def train_probe(features, labels, l2: float = 1e-3, iterations: int = 500, seed: int = 0) -> LinearProbe:
    """L2-regularized logistic regression by full-batch gradient descent.

    Features are standardized internally and the fitted coefficients are
    mapped back to the original feature space. The step size is 1/L with L
    the smoothness constant of the standardized objective. ``seed`` is
    recorded only; the fit is deterministic.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.size:
        raise DimensionError("features must be (n, d) with one label per row")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise UndefinedMetricError("probe training needs both classes")
    n, d = x.shape
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xs = np.hstack([(x - mu) / sd, np.ones((n, 1))])
    lip = 0.25 * np.linalg.eigvalsh(xs.T @ xs / n).max() + l2
    step = 1.0 / lip
    w = np.zeros(d + 1)
    reg = np.r_[np.full(d, l2), 0.0]

    def objective(w):
        m = xs @ w
        return float(np.mean(np.logaddexp(0.0, m) - y * m) + 0.5 * np.sum(reg * w * w))

    for _ in range(iterations):
        grad = xs.T @ (_sigmoid(xs @ w) - y) / n + reg * w
        w = w - step * grad
    coef = w[:d] / sd
    bias = float(w[d] - coef @ mu)
    return LinearProbe(coef, bias, l2, iterations, seed, objective(w))


@dataclass
class LayerSweepResult:
    chosen_layer: object
    accuracy: dict  # layer -> validation accuracy


def sweep_layers(layer_features: dict, targets, val_fraction: float = 0.2, seed: int = 0,
                 l2: float = 1e-3, iterations: int = 500) -> LayerSweepResult:
    """Train one probe per layer and pick the best validation accuracy.

    Targets are any binary proxy (for instance a thresholded dispersion). Ties
    go to the deepest layer, where "deepest" is the largest key.
    """
    if not layer_features:
        raise ValueError("need at least one layer")
    y = np.asarray(targets).astype(int).ravel()
    n = y.size
    for layer, feats in layer_features.items():
        if np.shape(feats)[0] != n:
            raise DimensionError(f"layer {layer!r} has {np.shape(feats)[0]} rows, targets have {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    tr, va = perm[: n - n_val], perm[n - n_val:]
    acc = {}
    for layer in sorted(layer_features):
        x = np.asarray(layer_features[layer], dtype=np.float64)
        probe = train_probe(x[tr], y[tr], l2=l2, iterations=iterations, seed=seed)
        acc[layer] = float(np.mean(probe.predict(x[va]) == y[va]))
    best = max(acc.values())
    chosen = max(k for k, v in acc.items() if v == best)
    return LayerSweepResult(chosen, acc)
