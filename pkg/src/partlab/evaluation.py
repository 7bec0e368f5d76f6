"""Per-class AUC, inter-class similarity, novelty scores and small statistics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .data.labels import POS, UNK, LabelSchema
from .model import features_of, predict


class NotEvaluable(ValueError):
    """AUC needs at least one positive and one negative."""


def auc(scores, labels) -> float:
    """Mann-Whitney AUC via average ranks; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ContractError(f"auc: {scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise NotEvaluable(f"auc needs both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(scores, kind="mergesort")
    ranked = scores[order]
    # each run of equal scores gets the mean of its 1-based ranks
    bounds = np.flatnonzero(np.diff(ranked)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [scores.size]])
    ranks = np.empty(scores.size)
    ranks[order] = np.repeat((starts + 1 + ends) / 2.0, ends - starts)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_auc(scores, labels) -> float:
    """Exhaustive O(P*N) pair count; reference for :func:`auc`."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise NotEvaluable("auc needs both classes")
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (pos.size * neg.size)


@dataclass(frozen=True)
class ClassMetrics:
    schema: LabelSchema
    per_class: dict[str, float | None]

    @property
    def mauc(self) -> float:
        present = self.per_class_present()
        return float(np.mean(list(present.values()))) if present else float("nan")

    def per_class_present(self) -> dict[str, float]:
        return {k: v for k, v in self.per_class.items() if v is not None}

    def mean_over(self, classes: Sequence[str]) -> float:
        vals = [self.per_class[c] for c in classes if self.per_class.get(c) is not None]
        return float(np.mean(vals)) if vals else float("nan")


def metrics_from_scores(scores: np.ndarray, states: np.ndarray, schema: LabelSchema) -> ClassMetrics:
    """AUC per class over the samples whose state for that class is Known."""
    per_class: dict[str, float | None] = {}
    for c, name in enumerate(schema):
        known = states[:, c] != UNK
        try:
            per_class[name] = auc(scores[known, c], states[known, c] == POS)
        except NotEvaluable:
            per_class[name] = None
    return ClassMetrics(schema, per_class)


def evaluate(state, d) -> ClassMetrics:
    """Score un-augmented images; ``d``'s classes must exist in the model schema."""
    if len(d) == 0:
        raise ContractError("evaluate: dataset is empty")
    missing = [c for c in d.schema if c not in state.schema]
    if missing:
        raise ContractError(f"evaluate: classes {missing} are not in the model schema")
    scores = predict(state, d.images)[:, state.schema.indices(d.schema)]
    return metrics_from_scores(scores, d.states, d.schema)


# ------------------------------------------------------------ similarity


@dataclass(frozen=True)
class SimilarityMatrix:
    schema: LabelSchema
    values: np.ndarray  # NaN where a shifted class mean is zero

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class"] + list(self.schema))
        for name, row in zip(self.schema, self.values):
            w.writerow([name] + ["" if np.isnan(v) else repr(float(v)) for v in row])
        return buf.getvalue()


def similarity_from_features(features: np.ndarray, states: np.ndarray,
                             schema: LabelSchema) -> SimilarityMatrix:
    features = np.asarray(features, dtype=np.float64)
    positives = states == POS
    empty = [schema.classes[c] for c in range(schema.n) if not positives[:, c].any()]
    if empty:
        raise ContractError(f"class_similarity: no Positive samples for {empty}")
    origin = features.mean(axis=0)
    shifted = np.stack([features[positives[:, c]].mean(axis=0) - origin
                        for c in range(schema.n)])
    norms = np.linalg.norm(shifted, axis=1)
    values = np.full((schema.n, schema.n), np.nan)
    ok = norms > 0
    unit = shifted[ok] / norms[ok, None]
    values[np.ix_(ok, ok)] = np.clip(unit @ unit.T, -1.0, 1.0)
    # make exact symmetry/unit diagonal independent of BLAS rounding
    values = (values + values.T) / 2.0
    idx = np.flatnonzero(ok)
    values[idx, idx] = 1.0
    return SimilarityMatrix(schema, values)


def class_similarity(state, d) -> SimilarityMatrix:
    """Cosine similarity of class-mean features after moving the origin to the
    mean feature of all samples."""
    return similarity_from_features(features_of(state, d.images), d.states, d.schema)


# ------------------------------------------------------------ novelty

NOVELTY_MODES = ("max-complement", "adapter-query")


def novelty_from_answers(answers: np.ndarray, schema: LabelSchema, mode: str,
                         novel_class: str | None = None,
                         trained: Sequence[str] | None = None) -> np.ndarray:
    answers = np.asarray(answers, dtype=np.float64)
    if mode == "adapter-query":
        if novel_class is None or novel_class not in schema:
            raise ContractError("adapter-query novelty needs a reserved schema slot for the "
                                f"novel class, got {novel_class!r}")
        return answers[:, schema.index(novel_class)].copy()
    if mode != "max-complement":
        raise ContractError(f"unknown novelty mode {mode!r}; expected one of {NOVELTY_MODES}")
    if trained is None:
        trained = [c for c in schema if c != novel_class]
    return 1.0 - answers[:, schema.indices(trained)].max(axis=1)


def novelty_score(state, images: np.ndarray, mode: str = "max-complement",
                  novel_class: str | None = None,
                  trained: Sequence[str] | None = None) -> np.ndarray:
    if mode == "adapter-query" and (novel_class is None or novel_class not in state.schema):
        raise ContractError(f"adapter-query: {novel_class!r} has no slot in the model schema")
    return novelty_from_answers(predict(state, images), state.schema, mode, novel_class, trained)


# ------------------------------------------------------------ statistics


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def two_sample_t_test(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and its two-sided p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ContractError("t-test needs at least two values per group")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ContractError("t-test needs finite values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(se2)
    # Welch-Satterthwaite df written in variance shares so tiny variances
    # cannot underflow to 0/0
    wa, wb = va / se2, vb / se2
    df = 1.0 / (wa * wa / (a.size - 1) + wb * wb / (b.size - 1))
    return float(t), float(t_two_sided_p(t, df))


def pearson(x, y) -> float | None:
    """Sample correlation, or None when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ContractError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


# ------------------------------------------------------------ reports


def metrics_csv_rows(experiment: str, seed: int, metrics: ClassMetrics) -> list[list]:
    rows = [[experiment, seed, name, "" if v is None else repr(v)]
            for name, v in metrics.per_class.items()]
    rows.append([experiment, seed, "mAUC", repr(metrics.mauc)])
    return rows


def write_metrics_csv(path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "seed", "class", "auc"])
        w.writerows(rows)
