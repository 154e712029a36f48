"""Dense linear algebra, stable reductions, optimizer, and LR schedule.

Training math runs in float64 so gradient checks stay exact; embeddings
are persisted in float32. All reductions use numpy's fixed evaluation
order, so repeated calls on identical inputs are bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .io import atomic_writer

MATRIX_MAGIC = b"E5MX"
MATRIX_FORMAT_VERSION = 1

# dtype tag in the binary header: 0 = float64 (training), 1 = float32 (persisted embeddings)
_TAG_TO_DTYPE = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_TO_TAG = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-subtracted for stability. Rows sum to 1."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp_row(v: np.ndarray) -> float:
    """log(sum(exp(v))) for a 1-d vector, computed without overflow."""
    v = np.asarray(v, dtype=np.float64)
    hi = float(v.max())
    return hi + float(np.log(np.exp(v - hi).sum()))


def logsumexp_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise log(sum(exp(.))) for a 2-d array."""
    m = np.asarray(m, dtype=np.float64)
    hi = m.max(axis=-1, keepdims=True)
    return (hi + np.log(np.exp(m - hi).sum(axis=-1, keepdims=True)))[:, 0]


@dataclass
class AdamWState:
    """Per-parameter moment accumulators plus the shared step counter.

    `exp_avg` / `exp_avg_sq` mirror the parameter dict: same keys, same
    shapes. `step` increases by exactly 1 per `adamw_step` call.
    """

    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kwargs) -> "AdamWState":
        return cls(
            exp_avg={k: np.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: np.zeros_like(v) for k, v in params.items()},
            **kwargs,
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update, in place on `params` and `state`.

    Weight decay is decoupled: parameters are shrunk directly by
    lr * weight_decay before the bias-corrected Adam step, so the decay
    never passes through the moment accumulators.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if set(params) != set(grads):
        raise DimensionError(f"param/grad key mismatch: {sorted(params)} vs {sorted(grads)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.shape} for '{name}'")
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v / bc2) + state.eps
        p -= (lr / bc1) * (m / denom)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to peak, then linear decay back to 0."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.peak_lr < 0:
            raise ValueError(f"peak_lr must be >= 0, got {self.peak_lr}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"need 0 <= warmup_steps <= total_steps, got {self.warmup_steps}/{self.total_steps}"
            )


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at `step`: ramps 0 -> peak over warmup, decays peak -> 0 at total."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.peak_lr
    return schedule.peak_lr * (schedule.total_steps - step) / span


def write_matrix(dest, array: np.ndarray, dtype=np.float64) -> None:
    """Write a 2-d array in the binary matrix format.

    Layout: magic "E5MX", version u32, rows u64, cols u64, dtype tag u32,
    then row-major little-endian values. `dest` may be a path (written
    atomically) or an open binary file positioned where the section goes.
    """
    array = np.ascontiguousarray(array, dtype=dtype)
    if array.ndim != 2:
        raise DimensionError(f"matrix format stores 2-d arrays, got {array.ndim}-d")
    tag = _DTYPE_TO_TAG.get(array.dtype)
    if tag is None:
        raise ValueError(f"unsupported dtype {array.dtype}")
    header = MATRIX_MAGIC + struct.pack(
        "<IQQI", MATRIX_FORMAT_VERSION, array.shape[0], array.shape[1], tag
    )
    payload = array.astype(f"<f{array.dtype.itemsize}", copy=False).tobytes(order="C")
    if hasattr(dest, "write"):
        dest.write(header)
        dest.write(payload)
    else:
        with atomic_writer(dest, "wb") as f:
            f.write(header)
            f.write(payload)


def read_matrix(src) -> np.ndarray:
    """Read one matrix section written by `write_matrix`."""
    if hasattr(src, "read"):
        return _read_matrix_from(src)
    with open(src, "rb") as f:
        return _read_matrix_from(f)


def _read_matrix_from(f) -> np.ndarray:
    magic = f.read(4)
    if magic != MATRIX_MAGIC:
        raise ValueError(f"bad matrix magic {magic!r}")
    version, rows, cols, tag = struct.unpack("<IQQI", f.read(24))
    if version != MATRIX_FORMAT_VERSION:
        raise ValueError(f"unsupported matrix format version {version}")
    dtype = _TAG_TO_DTYPE.get(tag)
    if dtype is None:
        raise ValueError(f"unknown dtype tag {tag}")
    count = rows * cols
    raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ValueError("truncated matrix payload")
    return np.frombuffer(raw, dtype=dtype).reshape(rows, cols).copy()
