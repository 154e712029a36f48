"""Contrastive pre-training on weakly aligned text pairs.

One shared encoder embeds queries and passages (role prefixes keep the
towers asymmetric); candidates are scored by temperature-scaled cosine
and trained with InfoNCE against in-batch negatives. Two alternative
negative supplies are available: a pre-batch bank that replays recent
passage embeddings as constants, and a momentum queue where candidates
come from a slowly trailing parameter copy and gradients flow through
the query tower only.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import EncoderParams, encode_backward, encode_forward, zero_grads
from .errors import (
    ConfigurationError,
    DataStarvationError,
    DegenerateEmbeddingError,
    DimensionError,
)
from .io import atomic_write_text
from .tensor import AdamWState, LrSchedule, adamw_step, lr_at, softmax_rows

STRATEGIES = ("in-batch", "pre-batch", "momentum-queue")


@dataclass(frozen=True)
class PretrainConfig:
    temperature: float = 0.01
    batch_size: int = 256
    total_steps: int = 2000
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    strategy: str = "in-batch"
    window: int = 2            # pre-batch: how many previous batches to replay
    queue_size: int = 1024     # momentum-queue: max stored negatives (rows)
    momentum: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.window < 0 or self.queue_size < 0:
            raise ConfigurationError("window and queue_size must be >= 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1], got {self.momentum}")

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, min(self.warmup_steps, self.total_steps), self.total_steps)


@dataclass
class ScoreCache:
    """Unit-normalized operands and cosines kept for the backward pass."""

    q_unit: np.ndarray
    p_unit: np.ndarray
    q_norm: np.ndarray
    p_norm: np.ndarray
    cos: np.ndarray
    temperature: float


def normalize_rows(m: np.ndarray, context: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(f"{context}: row {bad} has zero norm")
    return m / norms[:, None], norms


def score_matrix_forward(
    Q: np.ndarray, P: np.ndarray, temperature: float
) -> tuple[np.ndarray, ScoreCache]:
    """Temperature-scaled cosine scores with cached intermediates."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    if Q.ndim != 2 or P.ndim != 2 or Q.shape[1] != P.shape[1]:
        raise DimensionError(f"incompatible embedding shapes {Q.shape} and {P.shape}")
    q_unit, q_norm = normalize_rows(np.asarray(Q, dtype=np.float64), "queries")
    p_unit, p_norm = normalize_rows(np.asarray(P, dtype=np.float64), "candidates")
    cos = q_unit @ p_unit.T
    cache = ScoreCache(q_unit, p_unit, q_norm, p_norm, cos, temperature)
    return cos / temperature, cache


def score_matrix(Q: np.ndarray, P: np.ndarray, temperature: float) -> np.ndarray:
    """Entry (i, j) = cos(Q_i, P_j) / temperature."""
    scores, _ = score_matrix_forward(Q, P, temperature)
    return scores


def score_matrix_backward(cache: ScoreCache, grad_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain d(loss)/d(scores) back through cosine to both embedding matrices.

    For unit rows u_i, v_j: d cos(q_i, p_j)/dq_i = (v_j - cos_ij u_i)/|q_i|,
    summed over j with the incoming grad, all divided by the temperature.
    """
    g = np.asarray(grad_scores, dtype=np.float64)
    if g.shape != cache.cos.shape:
        raise DimensionError(f"grad shape {g.shape} != score shape {cache.cos.shape}")
    inv_t = 1.0 / cache.temperature
    row_mix = (g * cache.cos).sum(axis=1)
    dQ = inv_t * (g @ cache.p_unit - row_mix[:, None] * cache.q_unit) / cache.q_norm[:, None]
    col_mix = (g * cache.cos).sum(axis=0)
    dP = inv_t * (g.T @ cache.q_unit - col_mix[:, None] * cache.p_unit) / cache.p_norm[:, None]
    return dQ, dP


def infonce_loss(scores: np.ndarray, positives: np.ndarray) -> tuple[float, np.ndarray]:
    """InfoNCE over score rows; returns (loss, d loss / d scores).

    loss = -(1/n) sum_i [s_i,pos - logsumexp(row i)]; the exact gradient
    per row is (softmax(row) - onehot(pos)) / n, so rows sum to zero.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n, c = scores.shape
    positives = np.asarray(positives, dtype=np.int64)
    if positives.shape != (n,):
        raise DimensionError(f"need one positive index per row, got shape {positives.shape}")
    if positives.min() < 0 or positives.max() >= c:
        raise IndexError(f"positive index outside [0, {c})")
    hi = scores.max(axis=1)
    lse = hi + np.log(np.exp(scores - hi[:, None]).sum(axis=1))
    loss = float((lse - scores[np.arange(n), positives]).sum() / n)
    grad = softmax_rows(scores)
    grad[np.arange(n), positives] -= 1.0
    grad /= n
    return loss, grad


class PreBatchBank:
    """Passage embeddings from the last `window` batches, replayed as constants."""

    def __init__(self, window: int):
        if window < 0:
            raise ConfigurationError(f"window must be >= 0, got {window}")
        self.window = window
        self._batches: collections.deque[np.ndarray] = collections.deque(maxlen=window)

    def __len__(self) -> int:
        return sum(b.shape[0] for b in self._batches)

    def rows(self) -> list[np.ndarray]:
        return list(self._batches)

    def push(self, embeddings: np.ndarray) -> None:
        if self.window > 0:
            self._batches.append(np.array(embeddings, dtype=np.float64, copy=True))


class MomentumQueue:
    """FIFO negative store fed by a trailing copy of the encoder parameters."""

    def __init__(self, capacity: int, momentum: float, params: EncoderParams):
        if capacity < 0:
            raise ConfigurationError(f"capacity must be >= 0, got {capacity}")
        if not 0.0 <= momentum <= 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1], got {momentum}")
        self.capacity = capacity
        self.momentum = momentum
        self.key_params = params.copy()
        self._chunks: collections.deque[np.ndarray] = collections.deque()
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def rows(self) -> list[np.ndarray]:
        return list(self._chunks)

    def push(self, embeddings: np.ndarray) -> None:
        """Append rows, then evict oldest rows until size <= capacity."""
        if self.capacity == 0:
            return
        emb = np.array(embeddings, dtype=np.float64, copy=True)
        if emb.shape[0] > self.capacity:
            emb = emb[-self.capacity:]
        self._chunks.append(emb)
        self._size += emb.shape[0]
        while self._size > self.capacity:
            excess = self._size - self.capacity
            head = self._chunks[0]
            if head.shape[0] <= excess:
                self._chunks.popleft()
                self._size -= head.shape[0]
            else:
                self._chunks[0] = head[excess:]
                self._size -= excess


def momentum_update(live: EncoderParams, trailing: EncoderParams, m: float) -> EncoderParams:
    """In-place EMA: trailing <- m * trailing + (1 - m) * live."""
    if not 0.0 <= m <= 1.0:
        raise ConfigurationError(f"momentum must be in [0, 1], got {m}")
    live_arrays = live.arrays()
    for name, arr in trailing.arrays().items():
        src = live_arrays[name]
        if src.shape != arr.shape:
            raise DimensionError(f"shape mismatch for '{name}': {arr.shape} vs {src.shape}")
        arr *= m
        arr += (1.0 - m) * src
    return trailing


def assemble_candidates(
    P: np.ndarray, bank, strategy: str
) -> tuple[np.ndarray, np.ndarray]:
    """Stack batch embeddings with banked negatives per the chosen strategy.

    Row i's positive sits at candidate index i in every strategy; extra
    rows are negatives only. An empty bank (or the in-batch strategy)
    returns P unchanged.
    """
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    positives = np.arange(n, dtype=np.int64)
    if strategy == "in-batch":
        if bank is not None:
            raise ConfigurationError("in-batch strategy takes no negative bank")
        return P, positives
    if strategy == "pre-batch":
        if not isinstance(bank, PreBatchBank):
            raise ConfigurationError(f"pre-batch strategy needs a PreBatchBank, got {type(bank).__name__}")
    elif strategy == "momentum-queue":
        if not isinstance(bank, MomentumQueue):
            raise ConfigurationError(f"momentum-queue strategy needs a MomentumQueue, got {type(bank).__name__}")
    else:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    extra = bank.rows()
    if not extra:
        return P, positives
    return np.vstack([P] + extra), positives


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    candidate_count: int
    # embeddings to bank for later batches: the batch passages as this
    # step saw them (live for pre-batch, key-encoded for momentum)
    bank_payload: np.ndarray | None = None


def pretrain_step(
    params: EncoderParams,
    queries: list[str],
    passages: list[str],
    cfg: PretrainConfig,
    bank=None,
) -> StepResult:
    """Loss and parameter gradients for one batch under cfg.strategy.

    Gradients flow through both towers for in-batch and pre-batch (bank
    rows are constants); the momentum strategy trains the query tower
    only, except that an empty queue degenerates to the in-batch step,
    gradients included.
    """
    n = len(queries)
    if n != len(passages):
        raise DimensionError(f"query/passage count mismatch: {n} vs {len(passages)}")
    Qe, qcache = encode_forward(params, queries, "query")

    if cfg.strategy == "momentum-queue" and bank is not None:
        keys = _encode_keys(bank.key_params, passages)
        if len(bank) > 0:
            cands, pos = assemble_candidates(keys, bank, cfg.strategy)
            scores, scache = score_matrix_forward(Qe, cands, cfg.temperature)
            loss, gscores = infonce_loss(scores, pos)
            dQ, _ = score_matrix_backward(scache, gscores)
            grads = encode_backward(params, qcache, dQ)
            return StepResult(loss, grads, cands.shape[0], bank_payload=keys)

    Pe, pcache = encode_forward(params, passages, "passage")
    if cfg.strategy == "pre-batch" and bank is not None:
        cands, pos = assemble_candidates(Pe, bank, cfg.strategy)
    else:
        cands, pos = Pe, np.arange(n, dtype=np.int64)
    scores, scache = score_matrix_forward(Qe, cands, cfg.temperature)
    loss, gscores = infonce_loss(scores, pos)
    dQ, dC = score_matrix_backward(scache, gscores)
    grads = encode_backward(params, qcache, dQ)
    encode_backward(params, pcache, dC[:n], grads)  # banked rows are constants
    if cfg.strategy == "momentum-queue" and bank is not None:
        return StepResult(loss, grads, cands.shape[0], bank_payload=keys)
    if cfg.strategy == "pre-batch" and bank is not None:
        return StepResult(loss, grads, cands.shape[0], bank_payload=Pe)
    return StepResult(loss, grads, cands.shape[0])


def _encode_keys(key_params: EncoderParams, passages: list[str]) -> np.ndarray:
    emb, _ = encode_forward(key_params, passages, "passage")
    return emb


def _pair_texts(pairs) -> tuple[list[str], list[str]]:
    queries, passages = [], []
    for item in pairs:
        if hasattr(item, "query"):
            queries.append(item.query)
            passages.append(item.passage)
        else:
            q, p = item
            queries.append(q)
            passages.append(p)
    return queries, passages


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    candidates: int


def pretrain(
    pairs,
    cfg: PretrainConfig,
    params: EncoderParams,
) -> tuple[EncoderParams, list[StepRecord]]:
    """Run the contrastive training loop; mutates and returns `params`.

    Pair order is fixed by one seeded shuffle and then cycled, so runs
    are deterministic per (data, config, seed). Raises if the data
    cannot fill a single batch.
    """
    queries, passages = _pair_texts(pairs)
    n_pairs = len(queries)
    if n_pairs < cfg.batch_size:
        raise DataStarvationError(
            f"need at least one full batch ({cfg.batch_size} pairs), have {n_pairs}"
        )
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n_pairs)
    schedule = cfg.schedule()
    opt = AdamWState.for_params(params.arrays(), weight_decay=cfg.weight_decay)

    bank = None
    if cfg.strategy == "pre-batch":
        bank = PreBatchBank(cfg.window)
    elif cfg.strategy == "momentum-queue":
        bank = MomentumQueue(cfg.queue_size, cfg.momentum, params)

    log: list[StepRecord] = []
    cursor = 0
    for step in range(cfg.total_steps):
        take = []
        while len(take) < cfg.batch_size:
            take.append(order[cursor])
            cursor = (cursor + 1) % n_pairs
        batch_q = [queries[i] for i in take]
        batch_p = [passages[i] for i in take]

        result = pretrain_step(params, batch_q, batch_p, cfg, bank)
        lr = lr_at(schedule, step)
        adamw_step(params.arrays(), result.grads, opt, lr)

        if isinstance(bank, PreBatchBank):
            bank.push(result.bank_payload)
        elif isinstance(bank, MomentumQueue):
            # keys were encoded with the trailing params before this update
            momentum_update(params, bank.key_params, bank.momentum)
            bank.push(result.bank_payload)

        log.append(StepRecord(step=step, lr=lr, loss=result.loss, candidates=result.candidate_count))
    return params, log


def write_loss_log(path, log: list[StepRecord]) -> None:
    lines = ["step,lr,loss"]
    for rec in log:
        lines.append(f"{rec.step},{rec.lr!r},{rec.loss!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_manifest(path, cfg: PretrainConfig, log: list[StepRecord], extra: dict | None = None) -> None:
    """Key=value run summary: config echo, step count, final loss."""
    fields: dict[str, object] = {}
    for key, value in sorted(vars(cfg).items()):
        fields[f"config.{key}"] = value
    fields["steps_completed"] = len(log)
    if log:
        fields["final_loss"] = repr(log[-1].loss)
        fields["final_candidate_count"] = log[-1].candidates
    if extra:
        fields.update(extra)
    text = "".join(f"{k}={v}\n" for k, v in fields.items())
    atomic_write_text(path, text)
