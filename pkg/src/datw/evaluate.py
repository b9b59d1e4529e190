"""k-NN classification, error rates, McNemar's test, EER and histograms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .data import Dataset


def knn_classify(dist: np.ndarray, train_labels: Sequence, k: int = 1) -> np.ndarray:
    """Majority vote among the ``k`` nearest references of each query.

    Neighbours with equal distance are taken in reference order. Vote ties
    go to the label with the smaller summed neighbour distance, then to the
    smaller label.
    """
    dist = np.asarray(dist, dtype=np.float64)
    labels = np.asarray(train_labels)
    if dist.ndim != 2 or dist.shape[1] != len(labels):
        raise ValueError(f"distance matrix {dist.shape} does not match "
                         f"{len(labels)} reference labels")
    if not 1 <= k <= dist.shape[1]:
        raise ValueError(f"k={k} must lie in [1, {dist.shape[1]}]")
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    preds = []
    for row, idx in zip(dist, order):
        votes: dict = {}
        for j in idx:
            count, total = votes.get(labels[j], (0, 0.0))
            votes[labels[j]] = (count + 1, total + row[j])
        best = min(votes.items(), key=lambda kv: (-kv[1][0], kv[1][1], kv[0]))
        preds.append(best[0])
    return np.array(preds)


def error_rate(predicted: Sequence, truth: Sequence) -> float:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise ValueError("empty prediction list")
    return float(np.mean(predicted != truth))


def pooled_error_rate(results: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Error rate over the union of test samples of several datasets.

    ``results`` holds one ``(predicted, truth)`` pair per dataset; large
    datasets weigh more than in a mean of per-dataset rates.
    """
    wrong = total = 0
    for predicted, truth in results:
        wrong += round(error_rate(predicted, truth) * len(truth))
        total += len(truth)
    if total == 0:
        raise ValueError("no datasets given")
    return wrong / total


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Counts of (method 1 correct?, method 2 correct?) per test sample.

    ``n01`` counts samples method 1 got wrong and method 2 got right.
    """

    n00: int
    n01: int
    n10: int
    n11: int

    def __post_init__(self):
        if min(self.n00, self.n01, self.n10, self.n11) < 0:
            raise ValueError("contingency counts must be non-negative")

    @property
    def total(self) -> int:
        return self.n00 + self.n01 + self.n10 + self.n11

    @classmethod
    def from_predictions(cls, pred1, pred2, truth) -> "ContingencyTable2x2":
        pred1, pred2, truth = map(np.asarray, (pred1, pred2, truth))
        if not pred1.shape == pred2.shape == truth.shape:
            raise ValueError("prediction and truth lengths differ")
        c1, c2 = pred1 == truth, pred2 == truth
        return cls(int(np.sum(~c1 & ~c2)), int(np.sum(~c1 & c2)),
                   int(np.sum(c1 & ~c2)), int(np.sum(c1 & c2)))


@dataclass(frozen=True)
class McNemarResult:
    table: ContingencyTable2x2
    mode: str
    statistic: float
    p_value: float

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha

    def report(self) -> str:
        t = self.table
        return "\n".join([
            f"n00={t.n00}", f"n01={t.n01}", f"n10={t.n10}", f"n11={t.n11}",
            f"mode={self.mode}", f"statistic={self.statistic!r}",
            f"p_value={self.p_value!r}",
            f"significant_5pct={str(self.significant()).lower()}",
        ])


def mcnemar_test(table: ContingencyTable2x2, mode: str = "exact") -> McNemarResult:
    b, c = table.n01, table.n10
    n = b + c
    if n == 0:
        raise ValueError("McNemar's test is undefined without discordant pairs")
    if mode == "exact":
        lo = min(b, c)
        tail = sum(math.comb(n, i) for i in range(lo + 1))
        p = min(1.0, 2 * tail / 2 ** n)
        return McNemarResult(table, mode, float(lo), p)
    if mode == "corrected_chi2":
        stat = max(abs(b - c) - 1, 0) ** 2 / n
        return McNemarResult(table, mode, stat, float(stats.chi2.sf(stat, 1)))
    raise ValueError(f"mode must be 'exact' or 'corrected_chi2', got {mode!r}")


def mcnemar(table: ContingencyTable2x2, mode: str = "exact") -> float:
    """p-value of McNemar's test (two-sided)."""
    return mcnemar_test(table, mode).p_value


@dataclass
class VerificationScores:
    scores: np.ndarray
    genuine: np.ndarray
    ids: list

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.genuine = np.asarray(self.genuine, dtype=bool)
        if self.scores.shape != self.genuine.shape:
            raise ValueError("scores and genuineness flags differ in length")


def verification_scores(dataset: Dataset, distance_matrix: Callable, n_refs: int = 5
                        ) -> VerificationScores:
    """Mean distance of every test signature to its subject's references.

    The first ``n_refs`` genuine samples of each subject (dataset order) are
    references; the remaining genuine samples and all forgeries are tests.
    ``distance_matrix(queries, references)`` returns a query x reference array.
    """
    scores, flags, ids = [], [], []
    for subject in dataset.classes:
        members = [s for s in dataset if s.label == subject]
        genuine = [s for s in members if s.genuine]
        if len(genuine) <= n_refs:
            raise ValueError(f"subject {subject} has {len(genuine)} genuine samples; "
                             f"need more than {n_refs}")
        refs = genuine[:n_refs]
        tests = genuine[n_refs:] + [s for s in members if not s.genuine]
        d = np.asarray(distance_matrix(tests, refs))
        scores.extend(d.mean(axis=1))
        flags.extend(bool(s.genuine) for s in tests)
        ids.extend(s.id for s in tests)
    return VerificationScores(np.array(scores), np.array(flags), ids)


def _operating_points(genuine: np.ndarray, forgery: np.ndarray, thresholds: np.ndarray):
    """(FAR, FRR) when accepting scores <= t."""
    g = np.sort(genuine)
    f = np.sort(forgery)
    frr = 1.0 - np.searchsorted(g, thresholds, side="right") / len(g)
    far = np.searchsorted(f, thresholds, side="right") / len(f)
    return far, frr


def _crossing(far: np.ndarray, frr: np.ndarray) -> float:
    delta = far - frr
    k = int(np.argmax(delta >= 0))
    if delta[k] == 0 or k == 0:
        return float(0.5 * (far[k] + frr[k]))
    alpha = -delta[k - 1] / (delta[k] - delta[k - 1])
    return float(far[k - 1] + alpha * (far[k] - far[k - 1]))


def eer(scores: VerificationScores | None = None, *, genuine=None, forgery=None) -> float:
    """Equal error rate of distance scores (lower means more genuine).

    The threshold is swept over the distinct scores; when FAR and FRR do not
    meet exactly, the crossing is interpolated linearly between the two
    neighbouring operating points.
    """
    if scores is not None:
        genuine = scores.scores[scores.genuine]
        forgery = scores.scores[~scores.genuine]
    genuine = np.asarray(genuine, dtype=np.float64)
    forgery = np.asarray(forgery, dtype=np.float64)
    if genuine.size == 0 or forgery.size == 0:
        raise ValueError("EER needs at least one genuine and one forgery score")
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([genuine, forgery]))])
    far, frr = _operating_points(genuine, forgery, thresholds)
    return _crossing(far, frr)


@dataclass
class Histograms:
    edges: np.ndarray
    same: np.ndarray
    different: np.ndarray

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,same,different"]
        for lo, hi, s, d in zip(self.edges[:-1], self.edges[1:], self.same, self.different):
            lines.append(f"{lo!r},{hi!r},{s!r},{d!r}")
        return "\n".join(lines) + "\n"


def histogram_export(same_dists, diff_dists, bins: int = 30) -> Histograms:
    """Unit-area histograms of both populations on shared bin edges."""
    same = np.asarray(same_dists, dtype=np.float64)
    diff = np.asarray(diff_dists, dtype=np.float64)
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if same.size == 0 or diff.size == 0:
        raise ValueError("both populations must be non-empty")
    edges = np.histogram_bin_edges(np.concatenate([same, diff]), bins=bins)
    hs, _ = np.histogram(same, bins=edges, density=True)
    hd, _ = np.histogram(diff, bins=edges, density=True)
    return Histograms(edges, hs, hd)


def scores_csv(scores: VerificationScores) -> str:
    lines = ["id,score,genuine"]
    for i, s, g in zip(scores.ids, scores.scores, scores.genuine):
        lines.append(f"{i},{s!r},{int(g)}")
    return "\n".join(lines) + "\n"
