"""Supervised fine-tuning: listwise distillation plus contrastive loss.

Each example carries a positive and m hard negatives; an optional
teacher score vector (positive first) drives a KL term toward the
teacher's candidate distribution. The total objective is
mean KL + alpha * contrastive, where the contrastive candidates for an
example are its own positive, its own hard negatives, and the other
in-batch positives. Teacher scores exist only for the own m+1
candidates, so the KL term never sees the in-batch extras.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, encode_backward, encode_forward
from .errors import (
    ConfigurationError,
    DataStarvationError,
    DimensionError,
    ParseError,
)
from .io import atomic_write_text, read_jsonl
from .pretrain import score_matrix_backward, score_matrix_forward
from .tensor import AdamWState, LrSchedule, adamw_step, lr_at, softmax_rows

REQUIRED_FIELDS = ("query", "positive", "negatives")


@dataclass
class FinetuneExample:
    query: str
    positive: str
    negatives: list[str]
    teacher_scores: np.ndarray | None = None

    def __post_init__(self):
        if len(self.negatives) < 1:
            raise ConfigurationError("an example needs at least one hard negative")
        if self.teacher_scores is not None:
            self.teacher_scores = np.asarray(self.teacher_scores, dtype=np.float64)
            want = len(self.negatives) + 1
            if self.teacher_scores.shape != (want,):
                raise DimensionError(
                    f"teacher_scores must have length {want} (positive first), "
                    f"got {self.teacher_scores.shape}"
                )
            if not np.all(np.isfinite(self.teacher_scores)):
                raise ValueError("teacher_scores must be finite")


@dataclass(frozen=True)
class FinetuneConfig:
    alpha: float = 0.2
    m: int = 7
    temperature: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 40
    weight_decay: float = 0.01
    kd_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.m < 1:
            raise ConfigurationError(f"m must be >= 1, got {self.m}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")


def _log_softmax(v: np.ndarray) -> np.ndarray:
    hi = v.max()
    shifted = v - hi
    return shifted - np.log(np.exp(shifted).sum())


def kd_loss(teacher_scores: np.ndarray, student_scores: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(softmax(teacher) || softmax(student)) and its gradient p_stu - p_ce.

    Computed from log-softmax differences, so identical score vectors
    give exactly 0.0 rather than a rounding residue.
    """
    t = np.asarray(teacher_scores, dtype=np.float64)
    s = np.asarray(student_scores, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 1:
        raise DimensionError(f"score shapes differ: {t.shape} vs {s.shape}")
    if t.size < 2:
        raise DimensionError("KD needs at least 2 candidates")
    log_p_ce = _log_softmax(t)
    log_p_stu = _log_softmax(s)
    p_ce = np.exp(log_p_ce)
    loss = float((p_ce * (log_p_ce - log_p_stu)).sum())
    grad = np.exp(log_p_stu) - p_ce
    return loss, grad


@dataclass
class LossParts:
    kd: float
    contrastive: float
    total: float


def combined_loss(
    examples: list[FinetuneExample],
    params: EncoderParams,
    cfg: FinetuneConfig,
) -> tuple[LossParts, dict[str, np.ndarray]]:
    """Batch loss (mean KD + alpha * contrastive) and parameter gradients.

    Candidates are laid out as [all positives | all hard negatives in
    example order]; example i's contrastive row covers every positive
    plus its own negatives, its KD row covers only its own m+1.
    """
    if not examples:
        raise ConfigurationError("combined_loss needs a non-empty batch")
    B = len(examples)
    for i, ex in enumerate(examples):
        if len(ex.negatives) != cfg.m:
            raise ConfigurationError(
                f"example {i} has {len(ex.negatives)} negatives, config expects m={cfg.m}"
            )
        if cfg.kd_enabled and ex.teacher_scores is None:
            raise ConfigurationError(f"example {i} lacks teacher_scores but KD is enabled")

    queries = [ex.query for ex in examples]
    cand_texts = [ex.positive for ex in examples]
    for ex in examples:
        cand_texts.extend(ex.negatives)

    Qe, qcache = encode_forward(params, queries, "query")
    Ce, ccache = encode_forward(params, cand_texts, "passage")
    scores, scache = score_matrix_forward(Qe, Ce, cfg.temperature)

    grad_scores = np.zeros_like(scores)
    kd_total = 0.0
    cont_total = 0.0
    for i in range(B):
        own = np.concatenate(([i], np.arange(B + i * cfg.m, B + (i + 1) * cfg.m)))
        if cfg.kd_enabled:
            kl, g = kd_loss(examples[i].teacher_scores, scores[i, own])
            kd_total += kl
            grad_scores[i, own] += g / B
        # contrastive candidates: all positives plus own negatives; positive at column i
        cont_cols = np.concatenate((np.arange(B), own[1:]))
        row = scores[i, cont_cols]
        hi = row.max()
        lse = hi + np.log(np.exp(row - hi).sum())
        cont_total += float(lse - scores[i, i])
        g = softmax_rows(row[None, :])[0]
        g[i] -= 1.0
        grad_scores[i, cont_cols] += cfg.alpha * g / B

    kd_mean = kd_total / B
    cont_mean = cont_total / B
    parts = LossParts(kd=kd_mean, contrastive=cont_mean, total=kd_mean + cfg.alpha * cont_mean)

    dQ, dC = score_matrix_backward(scache, grad_scores)
    grads = encode_backward(params, qcache, dQ)
    encode_backward(params, ccache, dC, grads)
    return parts, grads


def fill_nli_negatives(
    example: FinetuneExample,
    corpus: list[str],
    count: int,
    seed: int = 0,
) -> FinetuneExample:
    """Pad an example's negatives with `count` sampled corpus sentences.

    Sampling is uniform without replacement over corpus entries that are
    neither the example's query nor its positive. Teacher scores are
    dropped if present, since the candidate list changes length.
    """
    if count < 0:
        raise ConfigurationError(f"count must be >= 0, got {count}")
    if count == 0:
        return example
    eligible = [s for s in corpus if s != example.positive and s != example.query]
    if len(eligible) < count:
        raise DataStarvationError(
            f"need {count} fill negatives, corpus has {len(eligible)} eligible sentences"
        )
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(eligible), size=count, replace=False)
    fills = [eligible[int(j)] for j in picks]
    return FinetuneExample(
        query=example.query,
        positive=example.positive,
        negatives=list(example.negatives) + fills,
        teacher_scores=None,
    )


def load_examples(path) -> list[FinetuneExample]:
    """Read finetune examples from JSON-lines, validating per line.

    Teacher-score vectors must have length len(negatives)+1; violations
    are rejected with the offending line number.
    """
    out = []
    for lineno, obj in read_jsonl(path):
        for key in REQUIRED_FIELDS:
            if key not in obj:
                raise ParseError(f"missing field {key!r}", line=lineno)
        teacher = obj.get("teacher_scores")
        if teacher is not None:
            want = len(obj["negatives"]) + 1
            if len(teacher) != want:
                raise ParseError(
                    f"teacher_scores has {len(teacher)} entries, expected {want}",
                    line=lineno,
                )
        try:
            out.append(
                FinetuneExample(
                    query=obj["query"],
                    positive=obj["positive"],
                    negatives=list(obj["negatives"]),
                    teacher_scores=teacher,
                )
            )
        except (ConfigurationError, DimensionError, ValueError) as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return out


@dataclass
class FinetuneRecord:
    step: int
    lr: float
    kd: float
    contrastive: float
    total: float


def finetune(
    examples: list[FinetuneExample],
    params: EncoderParams,
    cfg: FinetuneConfig,
) -> tuple[EncoderParams, list[FinetuneRecord]]:
    """Epoch loop over shuffled examples; mutates and returns `params`."""
    if not examples:
        raise DataStarvationError("no finetune examples")
    n = len(examples)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    if total_steps == 0:
        return params, []
    schedule = LrSchedule(cfg.peak_lr, min(cfg.warmup_steps, total_steps), total_steps)
    opt = AdamWState.for_params(params.arrays(), weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    log: list[FinetuneRecord] = []
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            parts, grads = combined_loss(batch, params, cfg)
            lr = lr_at(schedule, step)
            adamw_step(params.arrays(), grads, opt, lr)
            log.append(
                FinetuneRecord(
                    step=step, lr=lr, kd=parts.kd, contrastive=parts.contrastive, total=parts.total
                )
            )
            step += 1
    return params, log


def write_loss_log(path, log: list[FinetuneRecord]) -> None:
    lines = ["step,lr,kd,contrastive,total"]
    for rec in log:
        lines.append(f"{rec.step},{rec.lr!r},{rec.kd!r},{rec.contrastive!r},{rec.total!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
