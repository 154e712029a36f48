"""Embedding evaluation harness: retrieval, STS, clustering, classification.

Retrieval is exact brute-force cosine search over an offline index.
Ranking ties break by ascending doc id so results are reproducible.
STS, clustering, and classification all embed texts with the query
prefix; retrieval uses the passage prefix for documents.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, encode_texts
from .errors import ParseError, ValidationError
from .io import atomic_write_text, dumps_json, read_jsonl
from .metrics import mrr_at_k, ndcg_at_k, recall_at_k, spearman, v_measure
from .pretrain import normalize_rows
from .tensor import read_matrix, write_matrix


@dataclass
class Corpus:
    """Doc ids plus row-aligned embeddings; texts optional after indexing."""

    ids: list[str]
    embeddings: np.ndarray
    texts: list[str] | None = None

    def __post_init__(self):
        seen = set()
        for doc_id in self.ids:
            if doc_id in seen:
                raise ValidationError(f"duplicate doc id {doc_id!r}")
            seen.add(doc_id)
        if self.embeddings.shape[0] != len(self.ids):
            raise ValidationError(
                f"embedding rows {self.embeddings.shape[0]} != doc count {len(self.ids)}"
            )

    def __len__(self) -> int:
        return len(self.ids)


def build_index(ids: list[str], texts: list[str], params: EncoderParams) -> Corpus:
    """Encode a document collection with the passage prefix.

    Embeddings are cast to float32 immediately so that search behaves
    identically before and after an index round-trips through disk.
    """
    if not ids:
        raise ValidationError("cannot index an empty corpus")
    if len(ids) != len(texts):
        raise ValidationError(f"{len(ids)} ids vs {len(texts)} texts")
    emb = encode_texts(texts, "passage", params).astype(np.float32)
    return Corpus(ids=list(ids), embeddings=emb, texts=list(texts))


def save_index(corpus: Corpus, prefix: str) -> None:
    """Persist embeddings (float32 matrix file) plus a one-id-per-line sidecar."""
    write_matrix(f"{prefix}.e5mx", corpus.embeddings, dtype=np.float32)
    atomic_write_text(f"{prefix}.ids", "".join(f"{i}\n" for i in corpus.ids))


def load_index(prefix: str) -> Corpus:
    emb = read_matrix(f"{prefix}.e5mx")
    with open(f"{prefix}.ids", encoding="utf-8") as f:
        ids = [line.rstrip("\n") for line in f if line != ""]
    return Corpus(ids=ids, embeddings=emb)


@dataclass
class RankedList:
    query_id: str
    items: list[tuple[str, float]]  # (doc id, score) descending, ties id-ascending

    def ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.items]


def search_embedding(query_vec: np.ndarray, corpus: Corpus, k: int, query_id: str = "q") -> RankedList:
    """Exact top-k by cosine against every corpus row."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(corpus) == 0:
        raise ValidationError("cannot search an empty corpus")
    q = np.asarray(query_vec, dtype=np.float64).reshape(1, -1)
    q_unit, _ = normalize_rows(q, "query")
    docs_unit, _ = normalize_rows(np.asarray(corpus.embeddings, dtype=np.float64), "corpus")
    scores = (docs_unit @ q_unit[0])
    id_arr = np.asarray(corpus.ids)
    order = np.lexsort((id_arr, -scores))
    top = order[: min(k, len(corpus))]
    return RankedList(query_id=query_id, items=[(str(id_arr[i]), float(scores[i])) for i in top])


def search_topk(query_text: str, corpus: Corpus, k: int, params: EncoderParams, query_id: str = "q") -> RankedList:
    """Encode the query (query prefix) and run exact cosine search."""
    q = encode_texts([query_text], "query", params)[0]
    return search_embedding(q, corpus, k, query_id=query_id)


def search_many(
    query_ids: list[str], query_texts: list[str], corpus: Corpus, k: int, params: EncoderParams
) -> list[RankedList]:
    """Batched exact search; one score matmul for all queries."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(corpus) == 0:
        raise ValidationError("cannot search an empty corpus")
    Q = encode_texts(query_texts, "query", params)
    q_unit, _ = normalize_rows(Q, "queries")
    docs_unit, _ = normalize_rows(np.asarray(corpus.embeddings, dtype=np.float64), "corpus")
    scores = q_unit @ docs_unit.T
    id_arr = np.asarray(corpus.ids)
    out = []
    take = min(k, len(corpus))
    for row, qid in enumerate(query_ids):
        order = np.lexsort((id_arr, -scores[row]))[:take]
        out.append(RankedList(query_id=qid, items=[(str(id_arr[i]), float(scores[row, i])) for i in order]))
    return out


@dataclass
class EvalReport:
    dataset: str
    metrics: dict[str, float]
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return dumps_json({"dataset": self.dataset, "metrics": self.metrics, "config": self.config})


def retrieval_report(
    ranked: list[RankedList],
    qrels: dict[str, dict[str, int]],
    dataset: str = "retrieval",
    k: int = 10,
    recall_k: int = 100,
    config: dict | None = None,
) -> EvalReport:
    """Average nDCG@k, MRR@k, Recall@recall_k over queries.

    Queries without any relevant document contribute 0 to nDCG/MRR but
    are excluded from the recall average with a warning, where recall is
    undefined.
    """
    if not ranked:
        raise ValidationError("no ranked lists to evaluate")
    ndcgs, mrrs, recalls = [], [], []
    skipped = 0
    for rl in ranked:
        judgments = qrels.get(rl.query_id, {})
        ids = rl.ids()
        ndcgs.append(ndcg_at_k(ids, judgments, k))
        mrrs.append(mrr_at_k(ids, judgments, k))
        if any(g > 0 for g in judgments.values()):
            recalls.append(recall_at_k(ids, judgments, recall_k))
        else:
            skipped += 1
    if skipped:
        warnings.warn(f"recall undefined for {skipped} queries with no relevant docs; excluded")
    metrics = {
        f"ndcg@{k}": float(np.mean(ndcgs)),
        f"mrr@{k}": float(np.mean(mrrs)),
        f"recall@{recall_k}": float(np.mean(recalls)) if recalls else 0.0,
    }
    return EvalReport(dataset=dataset, metrics=metrics, config=config or {})


def sts_score(pairs: list[tuple[str, str]], params: EncoderParams) -> np.ndarray:
    """Cosine similarity per text pair, both sides with the query prefix."""
    if not pairs:
        raise ValidationError("no text pairs")
    A = encode_texts([a for a, _ in pairs], "query", params)
    B = encode_texts([b for _, b in pairs], "query", params)
    a_unit, _ = normalize_rows(A, "left texts")
    b_unit, _ = normalize_rows(B, "right texts")
    return (a_unit * b_unit).sum(axis=1)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    iterations: int


def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iters: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding, deterministic per seed.

    Ties in the nearest-center assignment go to the lowest center index;
    an emptied cluster is re-seeded with the point farthest from its
    current center.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    if max_iters < 1:
        raise ValidationError(f"max_iters must be >= 1, got {max_iters}")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[int(rng.integers(n))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            pick = int(rng.choice(n, p=probs))
        else:
            pick = int(rng.integers(n))
        centers[c] = X[pick]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    for iteration in range(1, max_iters + 1):
        dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for c in range(k):
            members = new_labels == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
            else:
                far = int(dists[np.arange(n), new_labels].argmax())
                centers[c] = X[far]
                new_labels[far] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    inertia = float(((X - centers[labels]) ** 2).sum())
    return ClusterAssignment(labels=labels, centers=centers, inertia=inertia, iterations=iteration)


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 500
    lr: float = 0.1


def linear_probe(
    train_X: np.ndarray,
    train_y,
    test_X: np.ndarray,
    test_y,
    cfg: ProbeConfig = ProbeConfig(),
) -> float:
    """Multinomial logistic regression on frozen embeddings; test accuracy.

    Full-batch gradient descent from zero weights; no regularization.
    """
    train_X = np.asarray(train_X, dtype=np.float64)
    test_X = np.asarray(test_X, dtype=np.float64)
    classes, y = np.unique(np.asarray(train_y), return_inverse=True)
    if classes.size < 2:
        raise ValidationError("linear probe needs at least 2 classes in training data")
    n, d = train_X.shape
    C = classes.size
    W = np.zeros((d, C))
    b = np.zeros(C)
    onehot = np.zeros((n, C))
    onehot[np.arange(n), y] = 1.0
    for _ in range(cfg.steps):
        logits = train_X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        diff = (p - onehot) / n
        W -= cfg.lr * (train_X.T @ diff)
        b -= cfg.lr * diff.sum(axis=0)
    pred = (test_X @ W + b).argmax(axis=1)
    return float((classes[pred] == np.asarray(test_y)).mean())


@dataclass(frozen=True)
class PromptTemplate:
    """Input template with one {text} slot plus per-label rendered texts."""

    template: str
    labels: tuple[str, ...]
    label_texts: tuple[str, ...]

    def __post_init__(self):
        if self.template.count("{text}") != 1:
            raise ValidationError("template must contain the {text} placeholder exactly once")
        if len(self.labels) < 2:
            raise ValidationError("need at least 2 labels")
        if len(self.labels) != len(self.label_texts):
            raise ValidationError(
                f"{len(self.labels)} labels vs {len(self.label_texts)} label texts"
            )

    def render(self, text: str) -> str:
        return self.template.replace("{text}", text)


def zero_shot_classify_batch(
    texts: list[str], template: PromptTemplate, params: EncoderParams
) -> list[str]:
    """Predicted label per text: argmax cosine to the label-text embeddings.

    Inputs and label texts both use the query prefix; ties go to the
    first label in template order.
    """
    if not texts:
        raise ValidationError("no texts to classify")
    rendered = [template.render(t) for t in texts]
    X = encode_texts(rendered, "query", params)
    L = encode_texts(list(template.label_texts), "query", params)
    x_unit, _ = normalize_rows(X, "inputs")
    l_unit, _ = normalize_rows(L, "label texts")
    sims = x_unit @ l_unit.T
    picks = sims.argmax(axis=1)
    return [template.labels[int(i)] for i in picks]


def zero_shot_classify(text: str, template: PromptTemplate, params: EncoderParams) -> str:
    return zero_shot_classify_batch([text], template, params)[0]


def load_id_text_jsonl(path) -> tuple[list[str], list[str]]:
    """Read {id, text} JSON lines; ids must be unique."""
    ids, texts = [], []
    seen = set()
    for lineno, obj in read_jsonl(path):
        if "id" not in obj or "text" not in obj:
            raise ParseError("need fields 'id' and 'text'", line=lineno)
        doc_id = str(obj["id"])
        if doc_id in seen:
            raise ParseError(f"duplicate id {doc_id!r}", line=lineno)
        seen.add(doc_id)
        ids.append(doc_id)
        texts.append(obj["text"])
    return ids, texts


def load_labeled_jsonl(path) -> tuple[list[str], list[str]]:
    """Read {text, label} JSON lines."""
    texts, labels = [], []
    for lineno, obj in read_jsonl(path):
        if "text" not in obj or "label" not in obj:
            raise ParseError("need fields 'text' and 'label'", line=lineno)
        texts.append(obj["text"])
        labels.append(str(obj["label"]))
    return texts, labels


def load_sts_jsonl(path) -> tuple[list[tuple[str, str]], np.ndarray]:
    """Read {text_a, text_b, score} JSON lines."""
    pairs, gold = [], []
    for lineno, obj in read_jsonl(path):
        for key in ("text_a", "text_b", "score"):
            if key not in obj:
                raise ParseError(f"missing field {key!r}", line=lineno)
        pairs.append((obj["text_a"], obj["text_b"]))
        gold.append(float(obj["score"]))
    return pairs, np.asarray(gold, dtype=np.float64)


def load_qrels(path) -> dict[str, dict[str, int]]:
    """TREC qrels: whitespace-separated `query-id 0 doc-id grade` lines."""
    out: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", line=lineno)
            qid, _, did, grade = parts
            try:
                grade = int(grade)
            except ValueError:
                raise ParseError(f"bad relevance grade {parts[3]!r}", line=lineno) from None
            out.setdefault(qid, {})[did] = grade
    return out


def write_run(path, ranked: list[RankedList], tag: str = "e5kit") -> None:
    """TREC run format: `qid Q0 did rank score tag` per retrieved doc."""
    lines = []
    for rl in ranked:
        for rank, (did, score) in enumerate(rl.items, start=1):
            lines.append(f"{rl.query_id} Q0 {did} {rank} {score!r} {tag}")
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
