"""Metrics and validation protocol: co-membership AUC, grid RMSE, k-fold plans, persistence baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .cluster import OUTLIER
from .errors import ConfigError, ContractError, InvalidInputError
from .ggnn import encode_graph
from .graph import GraphSequence, StationGraph
from .grid import GridCodec

DEFAULT_FOLDS = 5
MAX_PAIRS = 100_000


def _pairs_same(labels: np.ndarray) -> int:
    _, counts = np.unique(labels, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _singletons(labels: np.ndarray) -> np.ndarray:
    """Give every outlier its own label so outliers are never co-members."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    out = labels == OUTLIER
    labels[out] = labels.max(initial=0) + 1 + np.arange(int(out.sum()))
    return labels


def roc_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("AUC is undefined when all pairs share one class")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pairwise_comembership_auc(
    predicted_labels: Sequence[int],
    true_labels: Sequence[int],
    point_scores: Sequence[float] | None = None,
    max_pairs: int = MAX_PAIRS,
    rng_seed: int = 0,
) -> float:
    """ROC AUC of predicted co-membership against true co-membership over point pairs.

    With hard labels only (``point_scores`` is None) the pair score is 1 for
    pairs sharing a predicted cluster and 0 otherwise, and the AUC is
    computed exactly from the contingency table. With ``point_scores`` (for
    example normalised densities) a co-member pair scores the smaller of its
    two point scores; pairs are enumerated, or sampled down to
    ``max_pairs`` with a seeded generator. Predicted outliers never co-member.
    """
    pred = np.asarray(predicted_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ContractError("label lists differ in length")
    n = len(pred)
    if n < 2:
        raise InvalidInputError("need at least two points")
    pred = _singletons(pred)

    if point_scores is None:
        total = n * (n - 1) // 2
        pos = _pairs_same(true)
        neg = total - pos
        if pos == 0 or neg == 0:
            raise InvalidInputError("AUC is undefined when all pairs share one class")
        joint = pred * (int(true.max()) + 1 - int(true.min())) + (true - int(true.min()))
        tp = _pairs_same(joint)
        fp = _pairs_same(pred) - tp
        # P(score_pos > score_neg) + 0.5 * P(tie)
        wins = tp * (neg - fp)
        ties = tp * fp + (pos - tp) * (neg - fp)
        return (wins + 0.5 * ties) / (pos * neg)

    s = np.asarray(point_scores, dtype=np.float64)
    if s.shape != pred.shape:
        raise ContractError("point scores differ in length from labels")
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(rng_seed)
        i = rng.integers(0, n, size=max_pairs)
        j = rng.integers(0, n - 1, size=max_pairs)
        j = np.where(j >= i, j + 1, j)
    score = np.where(pred[i] == pred[j], np.minimum(s[i], s[j]), 0.0)
    return roc_auc(score, true[i] == true[j])


def graph_rmse(predicted: StationGraph, actual: StationGraph, codec: GridCodec,
               actual_codec: GridCodec | None = None) -> float:
    """Root mean squared difference between the two encoded grids."""
    if actual_codec is not None and actual_codec != codec:
        raise ContractError("graphs were encoded with different codecs")
    diff = encode_graph(predicted, codec) - encode_graph(actual, codec)
    return float(np.sqrt(np.mean(diff * diff)))


def vector_rmse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("vectors differ in shape")
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class FoldPlan:
    k: int
    folds: list[list]

    def rounds(self) -> Iterator[tuple[list, list]]:
        """Yield ``(train, test)`` once per fold, each fold serving as test exactly once."""
        for f in range(self.k):
            train = [s for g, fold in enumerate(self.folds) if g != f for s in fold]
            yield train, list(self.folds[f])

    def fold_of(self, subset) -> int:
        for f, fold in enumerate(self.folds):
            if subset in fold:
                return f
        raise KeyError(subset)

    @staticmethod
    def mean_score(scores: Sequence[float]) -> float:
        if not scores:
            raise InvalidInputError("no scores to average")
        return float(np.mean(scores))


def kfold_splits(subsets: Sequence, k: int = DEFAULT_FOLDS, rng_seed: int = 0) -> FoldPlan:
    """Seeded shuffle into ``k`` near-equal folds; the first ``len % k`` folds get one extra."""
    if k < 2:
        raise ConfigError("k must be at least 2")
    items = list(subsets)
    if len(items) < k:
        raise ConfigError(f"{len(items)} subsets cannot fill {k} folds")
    order = np.random.default_rng(rng_seed).permutation(len(items))
    base, extra = divmod(len(items), k)
    folds, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        folds.append([items[i] for i in order[start : start + size]])
        start += size
    return FoldPlan(k, folds)


def persistence_baseline(gs: GraphSequence | Sequence[StationGraph]) -> StationGraph:
    """Predict that the next period looks exactly like the last one."""
    graphs = gs.graphs if isinstance(gs, GraphSequence) else list(gs)
    if not graphs:
        raise InvalidInputError("empty sequence")
    return graphs[-1]
