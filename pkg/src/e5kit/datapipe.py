"""Pair ingestion, quality filtering, and synthetic corpus generation.

The filtering funnel mirrors a weak-supervision curation pipeline:
cheap heuristics first (length, community score), exact-match
decontamination against evaluation texts, then the consistency filter,
which keeps a pair only if a scorer trained on the noisy data ranks the
pair's own passage within the top k against a large random passage
pool. Source-level sampling weights thin over-represented sources.

The synthetic generator builds topical pairs whose query-side and
passage-side vocabularies are disjoint, so an untrained (or purely
lexical) scorer gets no overlap signal; correspondence between the two
vocabularies is index-aligned per topic and must be learned.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, encode_texts
from .errors import ConfigurationError, ParseError, ValidationError
from .io import atomic_write_text, dumps_json, read_jsonl, write_jsonl
from .pretrain import normalize_rows


@dataclass
class TextPair:
    query: str
    passage: str
    source: str = "unknown"
    score: int | None = None

    def __post_init__(self):
        if not self.query.strip() or not self.passage.strip():
            raise ValidationError("query and passage must be non-empty")


@dataclass(frozen=True)
class FilterConfig:
    k: int = 2
    pool_size: int = 10000
    seed: int = 0
    max_chars: int = 4096
    min_score: int = 1
    # sources the heuristic rules apply to; None = every source
    heuristic_sources: frozenset[str] | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        # ranks run 1..pool_size+1, so k == pool_size+1 is a legal (vacuous) cutoff
        if self.k > self.pool_size + 1:
            raise ConfigurationError(f"k must be <= pool_size + 1, got {self.k} > {self.pool_size + 1}")


@dataclass
class FilterReport:
    """Stage counts for the filtering funnel; stages sum to the input count."""

    input: int = 0
    dropped_by_heuristic: int = 0
    dropped_by_decontamination: int = 0
    dropped_by_consistency: int = 0
    kept: int = 0
    per_source: dict = field(default_factory=dict)

    def check(self) -> None:
        total = (
            self.dropped_by_heuristic
            + self.dropped_by_decontamination
            + self.dropped_by_consistency
            + self.kept
        )
        if total != self.input:
            raise ValidationError(f"stage counts {total} do not sum to input {self.input}")

    def to_json(self) -> str:
        return dumps_json(
            {
                "input": self.input,
                "dropped_by_heuristic": self.dropped_by_heuristic,
                "dropped_by_decontamination": self.dropped_by_decontamination,
                "dropped_by_consistency": self.dropped_by_consistency,
                "kept": self.kept,
                "per_source": self.per_source,
            }
        )

    def bump(self, source: str, stage: str) -> None:
        per = self.per_source.setdefault(source, {})
        per[stage] = per.get(stage, 0) + 1


def pair_to_obj(pair: TextPair) -> dict:
    obj = {"query": pair.query, "passage": pair.passage, "source": pair.source}
    if pair.score is not None:
        obj["score"] = pair.score
    return obj


def ingest(path, lenient: bool = False):
    """Yield TextPair per JSON line, in file order.

    Malformed lines raise a ParseError carrying the line number; in
    lenient mode they are skipped with a warning instead.
    """
    for lineno, obj in read_jsonl(path):
        try:
            if "query" not in obj or "passage" not in obj:
                missing = "query" if "query" not in obj else "passage"
                raise ParseError(f"missing field {missing!r}", line=lineno)
            score = obj.get("score")
            if score is not None:
                score = int(score)
            yield TextPair(
                query=obj["query"],
                passage=obj["passage"],
                source=obj.get("source", "unknown"),
                score=score,
            )
        except (ParseError, ValidationError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                err = exc
            else:
                err = ParseError(str(exc), line=lineno)
            if lenient:
                warnings.warn(f"skipping bad pair: {err}", stacklevel=2)
                continue
            raise err from None


def heuristic_filter(
    pairs: list[TextPair], cfg: FilterConfig
) -> tuple[list[TextPair], list[tuple[TextPair, str]]]:
    """Drop over-long passages and low-scored pairs; returns (kept, drop log).

    A pair with no score passes the score rule. When cfg names heuristic
    sources, pairs from other sources bypass both rules.
    """
    kept, dropped = [], []
    for pair in pairs:
        if cfg.heuristic_sources is not None and pair.source not in cfg.heuristic_sources:
            kept.append(pair)
            continue
        if len(pair.passage) > cfg.max_chars:
            dropped.append((pair, f"passage length {len(pair.passage)} > {cfg.max_chars}"))
        elif pair.score is not None and pair.score < cfg.min_score:
            dropped.append((pair, f"score {pair.score} < {cfg.min_score}"))
        else:
            kept.append(pair)
    return kept, dropped


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def decontaminate(pairs: list[TextPair], eval_texts) -> list[TextPair]:
    """Drop pairs whose query or passage exactly matches an eval text.

    Matching is exact string equality after whitespace normalization.
    """
    blocked = {_normalize_ws(t) for t in eval_texts}
    if not blocked:
        return list(pairs)
    return [
        p
        for p in pairs
        if _normalize_ws(p.query) not in blocked and _normalize_ws(p.passage) not in blocked
    ]


def consistency_ranks(
    pairs: list[TextPair],
    scorer: EncoderParams,
    cfg: FilterConfig,
    chunk: int = 512,
) -> np.ndarray:
    """Rank each pair's own passage against a seeded pool of dataset passages.

    Rank counts pool passages scoring >= the true passage (ties are
    pessimistic: the pool wins), plus one. The pool is one seeded draw
    without replacement over the pairs' passages; a pair whose own
    passage lands in the pool has that entry masked out.
    """
    n = len(pairs)
    if cfg.pool_size > n:
        raise ConfigurationError(f"pool_size {cfg.pool_size} exceeds available passages {n}")
    rng = np.random.default_rng(cfg.seed)
    pool_idx = rng.choice(n, size=cfg.pool_size, replace=False)

    passages = [p.passage for p in pairs]
    P = encode_texts(passages, "passage", scorer)
    P_unit, _ = normalize_rows(P, "passages")
    pool_unit = P_unit[pool_idx]

    # own passage may sit in the pool: remember where, to mask its self-score
    pos_in_pool = np.full(n, -1, dtype=np.int64)
    for slot, idx in enumerate(pool_idx):
        pos_in_pool[idx] = slot

    ranks = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        Q = encode_texts([pairs[i].query for i in range(start, stop)], "query", scorer)
        Q_unit, _ = normalize_rows(Q, "queries")
        pool_scores = Q_unit @ pool_unit.T
        true_scores = (Q_unit * P_unit[start:stop]).sum(axis=1)
        beat = pool_scores >= true_scores[:, None]
        for row, i in enumerate(range(start, stop)):
            slot = pos_in_pool[i]
            count = int(beat[row].sum())
            if slot >= 0 and beat[row, slot]:
                count -= 1  # own pool entry always ties itself; not a competitor
            ranks[i] = 1 + count
    return ranks


def consistency_filter(
    pairs: list[TextPair],
    scorer: EncoderParams,
    cfg: FilterConfig,
) -> tuple[list[TextPair], FilterReport]:
    """Keep pairs whose own passage ranks within the top k (default k=2)."""
    ranks = consistency_ranks(pairs, scorer, cfg)
    report = FilterReport(input=len(pairs))
    kept = []
    for pair, rank in zip(pairs, ranks):
        if rank <= cfg.k:
            kept.append(pair)
            report.kept += 1
            report.bump(pair.source, "kept")
        else:
            report.dropped_by_consistency += 1
            report.bump(pair.source, "dropped_by_consistency")
    report.check()
    return kept, report


def weighted_sample(
    pairs: list[TextPair], weights: dict[str, float], seed: int = 0
) -> list[TextPair]:
    """Independently retain each pair with its source weight (default 1.0)."""
    for source, w in weights.items():
        if not 0.0 < w <= 1.0:
            raise ConfigurationError(f"weight for {source!r} must be in (0, 1], got {w}")
    rng = np.random.default_rng(seed)
    kept = []
    for pair in pairs:
        w = weights.get(pair.source, 1.0)
        if rng.random() < w:
            kept.append(pair)
    return kept


def run_filter_pipeline(
    pairs: list[TextPair],
    cfg: FilterConfig,
    eval_texts=(),
    scorer: EncoderParams | None = None,
) -> tuple[list[TextPair], FilterReport]:
    """heuristics -> decontamination -> consistency, with a reconciled report.

    The consistency stage runs only when a scorer is supplied.
    """
    report = FilterReport(input=len(pairs))
    kept, dropped = heuristic_filter(pairs, cfg)
    report.dropped_by_heuristic = len(dropped)
    for pair, _reason in dropped:
        report.bump(pair.source, "dropped_by_heuristic")

    survivors = decontaminate(kept, eval_texts)
    report.dropped_by_decontamination = len(kept) - len(survivors)
    if report.dropped_by_decontamination:
        gone = {id(p) for p in survivors}
        for pair in kept:
            if id(pair) not in gone:
                report.bump(pair.source, "dropped_by_decontamination")

    if scorer is not None and survivors:
        ranks = consistency_ranks(survivors, scorer, cfg)
        final = []
        for pair, rank in zip(survivors, ranks):
            if rank <= cfg.k:
                final.append(pair)
                report.bump(pair.source, "kept")
            else:
                report.dropped_by_consistency += 1
                report.bump(pair.source, "dropped_by_consistency")
        survivors = final
    else:
        for pair in survivors:
            report.bump(pair.source, "kept")
    report.kept = len(survivors)
    report.check()
    return survivors, report


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the topical pair generator."""

    topics: int = 50
    pairs_per_topic: int = 200
    vocab_per_topic: int = 30
    words_per_pair: int = 8
    extra_words: int = 4
    noise_fraction: float = 0.0
    holdout_per_topic: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ConfigurationError(f"noise_fraction must be in [0, 1), got {self.noise_fraction}")
        if self.words_per_pair + self.extra_words > self.vocab_per_topic:
            raise ConfigurationError("words_per_pair + extra_words must fit in vocab_per_topic")
        if self.topics < 2:
            raise ConfigurationError("need at least 2 topics")
        if self.pairs_per_topic < 1 or self.holdout_per_topic < 0:
            raise ConfigurationError("pairs_per_topic >= 1 and holdout_per_topic >= 0 required")


_STOPWORDS = ("the", "of", "and", "to", "in", "is", "for", "on")


def _query_text(topic: int, idx: np.ndarray, rng: np.random.Generator) -> str:
    words = [f"q{topic}w{k}" for k in idx]
    words.append(_STOPWORDS[int(rng.integers(len(_STOPWORDS)))])
    return " ".join(words)


def _passage_text(spec: SyntheticSpec, topic: int, idx: np.ndarray, rng: np.random.Generator) -> str:
    remaining = np.setdiff1d(np.arange(spec.vocab_per_topic), idx)
    extras = rng.choice(remaining, size=spec.extra_words, replace=False)
    words = [f"p{topic}w{k}" for k in idx]
    words += [f"p{topic}w{k}" for k in extras]
    words.append(_STOPWORDS[int(rng.integers(len(_STOPWORDS)))])
    order = rng.permutation(len(words))
    return " ".join(words[i] for i in order)


def _make_pair(spec: SyntheticSpec, topic: int, j: int) -> TextPair:
    rng = np.random.default_rng([spec.seed, topic, j])
    idx = rng.choice(spec.vocab_per_topic, size=spec.words_per_pair, replace=False)
    query = _query_text(topic, idx, rng)
    passage = _passage_text(spec, topic, idx, rng)
    return TextPair(query=query, passage=passage, source="synthetic")


@dataclass
class SyntheticCorpus:
    pairs: list[TextPair]          # training pairs, noise applied
    labels: list[bool]             # True = clean, aligned with pairs
    eval_pairs: list[TextPair]     # clean holdout, never corrupted
    spec: SyntheticSpec


def gen_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Generate topical pairs plus a clean evaluation holdout.

    Exactly round(noise_fraction * N) training pairs get their passage
    swapped for another pair's passage from a different topic (the donor
    pair keeps its copy, so every noisy passage is a real passage that
    stays anchored to its own query elsewhere in the data); the labels
    mark which pairs were corrupted. Every pair derives from its own rng
    substream, so any (seed, topic, j) cell is reproducible in isolation.
    """
    pairs = []
    for topic in range(spec.topics):
        for j in range(spec.pairs_per_topic):
            pairs.append(_make_pair(spec, topic, j))

    n = len(pairs)
    labels = [True] * n
    noisy_count = int(round(spec.noise_fraction * n))
    if noisy_count:
        originals = [p.passage for p in pairs]  # donors are always uncorrupted
        rng = np.random.default_rng([spec.seed, 999331])
        corrupt = rng.choice(n, size=noisy_count, replace=False)
        for i in corrupt:
            topic = int(i) // spec.pairs_per_topic
            shift = 1 + int(rng.integers(spec.topics - 1))
            other = (topic + shift) % spec.topics
            donor = other * spec.pairs_per_topic + int(rng.integers(spec.pairs_per_topic))
            pairs[int(i)] = TextPair(
                query=pairs[int(i)].query, passage=originals[donor], source="synthetic"
            )
            labels[int(i)] = False

    eval_pairs = []
    for topic in range(spec.topics):
        for j in range(spec.holdout_per_topic):
            eval_pairs.append(_make_pair(spec, topic, spec.pairs_per_topic + j))
    return SyntheticCorpus(pairs=pairs, labels=labels, eval_pairs=eval_pairs, spec=spec)


_TOPIC_WORD_RE = None


def _topic_words(text: str) -> set[tuple[int, int]]:
    global _TOPIC_WORD_RE
    if _TOPIC_WORD_RE is None:
        import re

        _TOPIC_WORD_RE = re.compile(r"\b[qp](\d+)w(\d+)\b")
    return {(int(t), int(k)) for t, k in _TOPIC_WORD_RE.findall(text)}


def synth_finetune_examples(corpus: SyntheticCorpus, m: int = 7, seed: int = 0) -> list:
    """Build distillation examples from a synthetic corpus.

    Each training pair becomes query + its passage (positive) + one
    lexically confusable same-topic passage + (m-1) random fills; the
    teacher logit for a candidate is the count of topic-word indices it
    shares with the query, which the generator guarantees is largest for
    the true positive.
    """
    from .finetune import FinetuneExample, fill_nli_negatives

    if m < 2:
        raise ConfigurationError(f"m must be >= 2 (1 hard + >= 1 fill), got {m}")
    ppt = corpus.spec.pairs_per_topic
    passages = [p.passage for p in corpus.pairs]
    rng = np.random.default_rng([corpus.spec.seed, seed, 777001])
    examples = []
    for i, pair in enumerate(corpus.pairs):
        topic = i // ppt
        offset = 1 + int(rng.integers(ppt - 1))
        hard = passages[topic * ppt + (i % ppt + offset) % ppt]
        stub = FinetuneExample(query=pair.query, positive=pair.passage, negatives=[hard])
        filled = fill_nli_negatives(stub, passages, m - 1, seed=int(rng.integers(2**62)))
        q_words = _topic_words(pair.query)
        scores = [
            float(len(q_words & _topic_words(cand)))
            for cand in [filled.positive] + filled.negatives
        ]
        filled.teacher_scores = np.asarray(scores, dtype=np.float64)
        examples.append(filled)
    return examples


def write_finetune_examples(path, examples) -> int:
    def as_obj(ex):
        obj = {"query": ex.query, "positive": ex.positive, "negatives": ex.negatives}
        if ex.teacher_scores is not None:
            obj["teacher_scores"] = [float(s) for s in ex.teacher_scores]
        return obj

    return write_jsonl(path, (as_obj(ex) for ex in examples))


def write_synthetic(corpus: SyntheticCorpus, out_dir) -> dict[str, str]:
    """Write pairs.jsonl, labels.jsonl, and the eval split; returns the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "pairs": os.path.join(out_dir, "pairs.jsonl"),
        "labels": os.path.join(out_dir, "labels.jsonl"),
        "eval_queries": os.path.join(out_dir, "eval_queries.jsonl"),
        "eval_corpus": os.path.join(out_dir, "eval_corpus.jsonl"),
        "eval_qrels": os.path.join(out_dir, "eval_qrels.txt"),
    }
    write_jsonl(paths["pairs"], (pair_to_obj(p) for p in corpus.pairs))
    write_jsonl(
        paths["labels"],
        ({"id": i, "clean": bool(c)} for i, c in enumerate(corpus.labels)),
    )
    write_jsonl(
        paths["eval_queries"],
        ({"id": f"q{i}", "text": p.query} for i, p in enumerate(corpus.eval_pairs)),
    )
    write_jsonl(
        paths["eval_corpus"],
        ({"id": f"d{i}", "text": p.passage} for i, p in enumerate(corpus.eval_pairs)),
    )
    qrels_lines = "".join(f"q{i} 0 d{i} 1\n" for i in range(len(corpus.eval_pairs)))
    atomic_write_text(paths["eval_qrels"], qrels_lines)
    return paths
