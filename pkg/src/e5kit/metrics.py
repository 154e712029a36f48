"""Ranking, correlation, and clustering metrics.

All implementations are definitional and operate on plain sequences, so
they double as the scoring half of the evaluation harness and as
subjects for oracle tests against independent brute-force versions.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import UndefinedCorrelationError, ValidationError


def _rel(qrels: dict, doc_id: str) -> int:
    return int(qrels.get(doc_id, 0))


def ndcg_at_k(ranked_ids: list[str], qrels: dict, k: int = 10) -> float:
    """Normalized DCG with gain 2^rel - 1 and log2(rank+1) discount.

    `qrels` maps doc id -> graded relevance for one query. Returns 0.0
    when the query has no relevant documents at all.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    gains = sorted((g for g in qrels.values() if g > 0), reverse=True)
    if not gains:
        return 0.0
    dcg = 0.0
    for rank, doc_id in enumerate(ranked_ids[:k], start=1):
        rel = _rel(qrels, doc_id)
        if rel > 0:
            dcg += (2.0**rel - 1.0) / math.log2(rank + 1)
    ideal = 0.0
    for rank, rel in enumerate(gains[:k], start=1):
        ideal += (2.0**rel - 1.0) / math.log2(rank + 1)
    return dcg / ideal


def mrr_at_k(ranked_ids: list[str], qrels: dict, k: int = 10) -> float:
    """Reciprocal rank of the first relevant doc within the top k, else 0."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    for rank, doc_id in enumerate(ranked_ids[:k], start=1):
        if _rel(qrels, doc_id) > 0:
            return 1.0 / rank
    return 0.0


def recall_at_k(ranked_ids: list[str], qrels: dict, k: int) -> float:
    """|relevant ∩ top-k| / |relevant|; undefined without relevant docs."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    relevant = {d for d, g in qrels.items() if g > 0}
    if not relevant:
        raise ValidationError("recall undefined for a query with no relevant docs")
    hit = sum(1 for doc_id in ranked_ids[:k] if doc_id in relevant)
    return hit / len(relevant)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Fractional ranks (1-based); tied values share the mean of their ranks."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(pred: np.ndarray, gold: np.ndarray) -> float:
    """Spearman rho with average-rank tie handling."""
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape or pred.ndim != 1:
        raise ValidationError(f"score shapes differ: {pred.shape} vs {gold.shape}")
    if pred.size < 2:
        raise ValidationError("need at least 2 observations")
    if np.all(pred == pred[0]) or np.all(gold == gold[0]):
        raise UndefinedCorrelationError("zero variance input, correlation undefined")
    ra = _average_ranks(pred)
    rb = _average_ranks(gold)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float((ra * ra).sum()) * float((rb * rb).sum()))
    return float((ra * rb).sum()) / denom


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    probs = counts[counts > 0] / total
    return float(-(probs * np.log(probs)).sum())


def v_measure(assignment, gold_labels) -> float:
    """Harmonic mean of homogeneity and completeness (natural-log entropies)."""
    pred = np.asarray(assignment)
    gold = np.asarray(gold_labels)
    if pred.shape != gold.shape or pred.ndim != 1 or pred.size == 0:
        raise ValidationError(f"label shapes differ or empty: {pred.shape} vs {gold.shape}")
    _, pred_ids = np.unique(pred, return_inverse=True)
    _, gold_ids = np.unique(gold, return_inverse=True)
    n_pred = pred_ids.max() + 1
    n_gold = gold_ids.max() + 1
    contingency = np.zeros((n_gold, n_pred), dtype=np.float64)
    np.add.at(contingency, (gold_ids, pred_ids), 1.0)
    n = float(pred.size)

    h_gold = _entropy(contingency.sum(axis=1))
    h_pred = _entropy(contingency.sum(axis=0))

    # H(gold | pred) summed over clusters
    h_gold_given_pred = 0.0
    for col in range(n_pred):
        cluster = contingency[:, col]
        size = cluster.sum()
        if size > 0:
            h_gold_given_pred += (size / n) * _entropy(cluster)
    h_pred_given_gold = 0.0
    for row in range(n_gold):
        cls = contingency[row]
        size = cls.sum()
        if size > 0:
            h_pred_given_gold += (size / n) * _entropy(cls)

    homogeneity = 1.0 if h_gold == 0.0 else 1.0 - h_gold_given_pred / h_gold
    completeness = 1.0 if h_pred == 0.0 else 1.0 - h_pred_given_gold / h_pred
    if homogeneity + completeness == 0.0:
        return 0.0
    return 2.0 * homogeneity * completeness / (homogeneity + completeness)
