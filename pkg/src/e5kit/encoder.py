"""Hashed bag-of-tokens text encoder with role prefixes.

Texts are lowercased, split into word tokens, and each token is hashed
(FNV-1a, 64-bit) into a fixed vocabulary. A reserved prefix id marks
whether the text is a query or a passage; the two roles therefore never
share an embedding for the same surface form of the prefix. Token rows
are mean-pooled, pushed through a square affine map, and squashed with
tanh. The whole thing is deliberately small: it exists to make the
contrastive pipeline measurable end to end on one machine, not to
compete with a real language model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEmbeddingError, DimensionError, EmptyInputError
from .io import atomic_writer
from .tensor import read_matrix, write_matrix

ID_QUERY = 0
ID_PASSAGE = 1
_NUM_RESERVED = 2

PREFIX_IDS = {"query": ID_QUERY, "passage": ID_PASSAGE, "none": None}

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes, seed: int = 0) -> int:
    """FNV-1a over bytes; `seed` is folded in as an extra leading byte stream."""
    h = _FNV_OFFSET
    if seed:
        for b in seed.to_bytes(8, "little"):
            h = ((h ^ b) * _FNV_PRIME) & _MASK64
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_size: int = 32768
    hash_seed: int = 0
    lowercase: bool = True
    max_tokens: int = 64

    def __post_init__(self):
        if self.vocab_size <= _NUM_RESERVED:
            raise ValueError(f"vocab_size must exceed {_NUM_RESERVED}, got {self.vocab_size}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")


def tokenize(text: str, role: str, config: TokenizerConfig) -> np.ndarray:
    """Map text to an id sequence: [role prefix id] + hashed word tokens.

    role is one of 'query', 'passage', or 'none' (no prefix). Truncation
    keeps the first max_tokens ids including the prefix, so the role
    marker always survives.
    """
    if role not in PREFIX_IDS:
        raise ValueError(f"role must be 'query', 'passage' or 'none', got {role!r}")
    if not text.strip():
        raise EmptyInputError("cannot tokenize empty text")
    if config.lowercase:
        text = text.lower()
    span = config.vocab_size - _NUM_RESERVED
    prefix = PREFIX_IDS[role]
    ids = [] if prefix is None else [prefix]
    for word in _WORD_RE.findall(text):
        if len(ids) >= config.max_tokens:
            break
        h = fnv1a_64(word.encode("utf-8"), config.hash_seed)
        ids.append(_NUM_RESERVED + h % span)
    return np.asarray(ids, dtype=np.int64)


@dataclass
class EncoderParams:
    """Learnable state: token table (vocab x dim), projection (dim x dim), bias (dim)."""

    table: np.ndarray
    proj: np.ndarray
    bias: np.ndarray
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)

    def __post_init__(self):
        if self.table.shape[0] != self.tokenizer.vocab_size:
            raise DimensionError(
                f"table rows {self.table.shape[0]} != vocab_size {self.tokenizer.vocab_size}"
            )
        d = self.table.shape[1]
        if self.proj.shape != (d, d):
            raise DimensionError(f"proj shape {self.proj.shape} != ({d}, {d})")
        if self.bias.shape != (d,):
            raise DimensionError(f"bias shape {self.bias.shape} != ({d},)")

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        """Named views of the learnable arrays, shared (not copied)."""
        return {"table": self.table, "proj": self.proj, "bias": self.bias}

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            table=self.table.copy(),
            proj=self.proj.copy(),
            bias=self.bias.copy(),
            tokenizer=self.tokenizer,
        )


def init_params(
    dim: int = 64,
    tokenizer: TokenizerConfig | None = None,
    seed: int = 0,
) -> EncoderParams:
    """Fresh parameters from a seeded generator.

    Scales are chosen so untrained embeddings are nearly parallel: the
    shared bias dominates, table and projection contribute a small
    text-dependent perturbation. Cosine similarities then start out in a
    band much narrower than the scoring temperature, which makes the
    initial contrastive loss land at ln(candidate count) and leaves no
    accidental lexical signal before training.
    """
    if tokenizer is None:
        tokenizer = TokenizerConfig()
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 0.02, size=(tokenizer.vocab_size, dim))
    proj = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim))
    bias = rng.normal(0.0, 0.5, size=(dim,))
    return EncoderParams(table=table, proj=proj, bias=bias, tokenizer=tokenizer)


def encode(tokens: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Embed one token sequence: mean-pooled table rows -> affine -> tanh."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise EmptyInputError("cannot encode an empty token sequence")
    if tokens.max() >= params.tokenizer.vocab_size or tokens.min() < 0:
        raise IndexError(f"token id outside [0, {params.tokenizer.vocab_size})")
    pooled = params.table[tokens].mean(axis=0)
    return np.tanh(pooled @ params.proj + params.bias)


def encode_batch(items: list[tuple[str, str]], params: EncoderParams) -> np.ndarray:
    """Embed (text, role) items into an (n, dim) array, preserving order.

    Errors from tokenize/encode are re-raised with the offending index.
    """
    if not items:
        raise EmptyInputError("encode_batch needs at least one item")
    out = np.empty((len(items), params.dim), dtype=np.float64)
    for i, (text, role) in enumerate(items):
        try:
            out[i] = encode(tokenize(text, role, params.tokenizer), params)
        except (EmptyInputError, IndexError, ValueError) as exc:
            raise type(exc)(f"item {i}: {exc}") from exc
    return out


def encode_texts(texts: list[str], role: str, params: EncoderParams) -> np.ndarray:
    """Embed a list of texts that all share one role."""
    return encode_batch([(t, role) for t in texts], params)


@dataclass
class ForwardCache:
    """Intermediates kept from `encode_forward` for the matching backward pass."""

    ids: list[np.ndarray]
    pooled: np.ndarray
    out: np.ndarray


def encode_forward(params: EncoderParams, texts: list[str], role: str) -> tuple[np.ndarray, ForwardCache]:
    """Batch forward pass that retains what the backward pass needs."""
    if not texts:
        raise EmptyInputError("encode_forward needs at least one text")
    ids = [tokenize(t, role, params.tokenizer) for t in texts]
    pooled = np.stack([params.table[seq].mean(axis=0) for seq in ids])
    out = np.tanh(pooled @ params.proj + params.bias)
    return out, ForwardCache(ids=ids, pooled=pooled, out=out)


def encode_backward(
    params: EncoderParams,
    cache: ForwardCache,
    grad_out: np.ndarray,
    grads: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients for a batch given d(loss)/d(embeddings).

    Pass an existing `grads` dict to accumulate across several forward
    passes (e.g. query and passage towers sharing weights).
    """
    if grad_out.shape != cache.out.shape:
        raise DimensionError(f"grad shape {grad_out.shape} != output shape {cache.out.shape}")
    if grads is None:
        grads = {
            "table": np.zeros_like(params.table),
            "proj": np.zeros_like(params.proj),
            "bias": np.zeros_like(params.bias),
        }
    # tanh'(z) = 1 - tanh(z)^2, and cache.out already holds tanh(z)
    dz = grad_out * (1.0 - cache.out**2)
    grads["proj"] += cache.pooled.T @ dz
    grads["bias"] += dz.sum(axis=0)
    dpooled = dz @ params.proj.T
    for i, seq in enumerate(cache.ids):
        np.add.at(grads["table"], seq, dpooled[i] / len(seq))
    return grads


def zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.arrays().items()}


def save_checkpoint(path, params: EncoderParams) -> None:
    """Persist parameters: text header, blank line, then three matrix sections.

    Header lines are `key=value` pairs covering the tokenizer settings
    and the embedding dim; sections follow in the fixed order table,
    proj, bias (bias stored as a 1 x dim matrix).
    """
    tok = params.tokenizer
    header = (
        f"vocab_size={tok.vocab_size}\n"
        f"dim={params.dim}\n"
        f"hash_seed={tok.hash_seed}\n"
        f"lowercase={int(tok.lowercase)}\n"
        f"max_tokens={tok.max_tokens}\n"
        "\n"
    )
    with atomic_writer(path, "wb") as f:
        f.write(header.encode("ascii"))
        write_matrix(f, params.table)
        write_matrix(f, params.proj)
        write_matrix(f, params.bias.reshape(1, -1))


def load_checkpoint(path) -> EncoderParams:
    """Load parameters written by `save_checkpoint`."""
    with open(path, "rb") as f:
        fields: dict[str, str] = {}
        while True:
            line = f.readline()
            if not line:
                raise ValueError("checkpoint header ended before blank separator")
            line = line.decode("ascii").rstrip("\n")
            if line == "":
                break
            key, _, value = line.partition("=")
            if not _:
                raise ValueError(f"malformed checkpoint header line {line!r}")
            fields[key] = value
        try:
            tok = TokenizerConfig(
                vocab_size=int(fields["vocab_size"]),
                hash_seed=int(fields["hash_seed"]),
                lowercase=bool(int(fields["lowercase"])),
                max_tokens=int(fields["max_tokens"]),
            )
            dim = int(fields["dim"])
        except KeyError as exc:
            raise ValueError(f"checkpoint header missing field {exc}") from exc
        table = read_matrix(f)
        proj = read_matrix(f)
        bias = read_matrix(f)
    if bias.shape[0] != 1:
        raise DimensionError(f"bias section must have one row, got {bias.shape[0]}")
    if table.shape[1] != dim:
        raise DimensionError(f"table dim {table.shape[1]} != header dim {dim}")
    return EncoderParams(table=table, proj=proj, bias=bias[0].copy(), tokenizer=tok)


def check_not_degenerate(embeddings: np.ndarray, context: str = "embeddings") -> None:
    """Raise if any row has (near-)zero norm; callers normalize right after."""
    norms = np.linalg.norm(embeddings, axis=-1)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(f"{context}: row {bad} has zero norm, cannot normalize")
