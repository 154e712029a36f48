"""Flat key=value run configuration with per-command schemas.

Config files are line-oriented `section.key=value` pairs; `#` starts a
comment line. Every command declares its key schema here, unknown keys
are rejected by name, and the fully resolved mapping is echoed into the
output directory so a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError


@dataclass(frozen=True)
class Key:
    type: type
    default: object = None
    required: bool = False
    choices: tuple | None = None


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_ENCODER_KEYS = {
    "encoder.vocab_size": Key(int, 32768),
    "encoder.dim": Key(int, 64),
    "encoder.hash_seed": Key(int, 0),
    "encoder.lowercase": Key(bool, True),
    "encoder.max_tokens": Key(int, 64),
    "encoder.seed": Key(int, 0),
}

_DATA_KEYS = {
    "data.topics": Key(int, 50),
    "data.pairs_per_topic": Key(int, 200),
    "data.vocab_per_topic": Key(int, 30),
    "data.words_per_pair": Key(int, 8),
    "data.extra_words": Key(int, 4),
    "data.noise_fraction": Key(float, 0.0),
    "data.holdout_per_topic": Key(int, 8),
    "data.seed": Key(int, 0),
}

_PRETRAIN_KEYS = {
    "pretrain.batch_size": Key(int, 256),
    "pretrain.total_steps": Key(int, 2000),
    "pretrain.temperature": Key(float, 0.01),
    "pretrain.peak_lr": Key(float, 2e-3),
    "pretrain.warmup_steps": Key(int, 100),
    "pretrain.weight_decay": Key(float, 0.01),
    "pretrain.strategy": Key(str, "in-batch", choices=("in-batch", "pre-batch", "momentum-queue")),
    "pretrain.window": Key(int, 2),
    "pretrain.queue_size": Key(int, 1024),
    "pretrain.momentum": Key(float, 0.999),
    "pretrain.seed": Key(int, 0),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "gen-synthetic": {
        "data.out_dir": Key(str, required=True),
        **_DATA_KEYS,
    },
    "filter": {
        "filter.pairs": Key(str, required=True),
        "filter.out_dir": Key(str, required=True),
        "filter.checkpoint": Key(str, ""),
        "filter.k": Key(int, 2),
        "filter.pool_size": Key(int, 10000),
        "filter.seed": Key(int, 0),
        "filter.max_chars": Key(int, 4096),
        "filter.min_score": Key(int, 1),
        "filter.heuristic_sources": Key(str, ""),
        "filter.decontaminate": Key(str, ""),
        "filter.lenient": Key(bool, False),
        "filter.sample_seed": Key(int, 0),
    },
    "pretrain": {
        "pretrain.pairs": Key(str, required=True),
        "pretrain.out_dir": Key(str, required=True),
        "pretrain.init_checkpoint": Key(str, ""),
        **_PRETRAIN_KEYS,
        **_ENCODER_KEYS,
    },
    "finetune": {
        "finetune.examples": Key(str, required=True),
        "finetune.out_dir": Key(str, required=True),
        "finetune.init_checkpoint": Key(str, ""),
        "finetune.alpha": Key(float, 0.2),
        "finetune.m": Key(int, 7),
        "finetune.temperature": Key(float, 0.01),
        "finetune.epochs": Key(int, 3),
        "finetune.batch_size": Key(int, 32),
        "finetune.peak_lr": Key(float, 1e-3),
        "finetune.warmup_steps": Key(int, 40),
        "finetune.weight_decay": Key(float, 0.01),
        "finetune.kd_enabled": Key(bool, True),
        "finetune.fill_corpus": Key(str, ""),
        "finetune.fill_count": Key(int, 6),
        "finetune.seed": Key(int, 0),
        **_ENCODER_KEYS,
    },
    "embed": {
        "embed.checkpoint": Key(str, required=True),
        "embed.input": Key(str, required=True),
        "embed.role": Key(str, "passage", choices=("query", "passage", "none")),
        "embed.out_dir": Key(str, required=True),
    },
    "search": {
        "search.checkpoint": Key(str, required=True),
        "search.index": Key(str, required=True),
        "search.queries": Key(str, required=True),
        "search.k": Key(int, 10),
        "search.out_dir": Key(str, required=True),
    },
    "eval-retrieval": {
        "eval.checkpoint": Key(str, required=True),
        "eval.queries": Key(str, required=True),
        "eval.corpus": Key(str, ""),
        "eval.index": Key(str, ""),
        "eval.qrels": Key(str, required=True),
        "eval.k": Key(int, 10),
        "eval.recall_k": Key(int, 100),
        "eval.dataset": Key(str, "retrieval"),
        "eval.out_dir": Key(str, ""),
    },
    "eval-sts": {
        "eval.checkpoint": Key(str, required=True),
        "eval.pairs": Key(str, required=True),
        "eval.dataset": Key(str, "sts"),
        "eval.out_dir": Key(str, ""),
    },
    "eval-cluster": {
        "eval.checkpoint": Key(str, required=True),
        "eval.input": Key(str, required=True),
        "eval.k": Key(int, 0),  # 0 = number of gold classes
        "eval.seed": Key(int, 0),
        "eval.max_iters": Key(int, 100),
        "eval.dataset": Key(str, "clustering"),
        "eval.out_dir": Key(str, ""),
    },
    "eval-classify": {
        "eval.checkpoint": Key(str, required=True),
        "eval.mode": Key(str, "probe", choices=("probe", "zero-shot")),
        "eval.train": Key(str, ""),
        "eval.test": Key(str, required=True),
        "eval.steps": Key(int, 500),
        "eval.lr": Key(float, 0.1),
        "eval.template": Key(str, "{text}"),
        "eval.labels": Key(str, ""),
        "eval.dataset": Key(str, "classification"),
        "eval.out_dir": Key(str, ""),
    },
    "recipe": {
        "recipe.name": Key(
            str, required=True, choices=("batch-size-sweep", "filter-ablation", "negative-strategy-sweep")
        ),
        "recipe.out_dir": Key(str, required=True),
        "recipe.seeds": Key(str, "0,1,2"),
        "recipe.steps": Key(int, 600),
        "recipe.scorer_steps": Key(int, 800),
        "recipe.batch_size": Key(int, 64),
        "recipe.peak_lr": Key(float, 2e-3),
        "recipe.warmup_steps": Key(int, 50),
        "recipe.temperature": Key(float, 0.01),
        "recipe.k": Key(int, 2),
        "recipe.pool_size": Key(int, 0),  # 0 = all training passages
        "recipe.window": Key(int, 2),
        "recipe.queue_size": Key(int, 512),
        "recipe.momentum": Key(float, 0.99),
        **_DATA_KEYS,
        **_ENCODER_KEYS,
    },
}

# dynamic key families allowed per command: (prefix, value type)
WILDCARDS: dict[str, list[tuple[str, type]]] = {
    "filter": [("filter.weight.", float)],
    "eval-classify": [("eval.label_text.", str)],
}

COMMANDS = tuple(sorted(SCHEMAS))


def parse_config_file(path) -> dict[str, str]:
    """Read key=value lines; blank lines and # comments are skipped."""
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigurationError(f"line {lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key in raw:
                raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
            raw[key] = value.strip()
    return raw


def _wildcard_type(command: str, key: str) -> type | None:
    for prefix, value_type in WILDCARDS.get(command, []):
        if key.startswith(prefix) and len(key) > len(prefix):
            return value_type
    return None


def _coerce(key: str, raw: str, target: type):
    try:
        if target is bool:
            return _bool(raw)
        return target(raw)
    except ValueError:
        raise ConfigurationError(
            f"config key {key!r}: cannot parse {raw!r} as {target.__name__}"
        ) from None


def resolve(command: str, raw: dict[str, str]) -> dict:
    """Validate raw strings against the command schema and apply defaults."""
    if command not in SCHEMAS:
        raise ConfigurationError(f"unknown command {command!r}")
    schema = SCHEMAS[command]
    out: dict = {}
    for key, value in raw.items():
        if key in schema:
            spec = schema[key]
            typed = _coerce(key, value, spec.type)
            if spec.choices is not None and typed not in spec.choices:
                raise ConfigurationError(
                    f"config key {key!r}: {typed!r} not in {spec.choices}"
                )
            out[key] = typed
        else:
            wtype = _wildcard_type(command, key)
            if wtype is None:
                raise ConfigurationError(f"unknown config key {key!r} for command {command!r}")
            out[key] = _coerce(key, value, wtype)
    for key, spec in schema.items():
        if key in out:
            continue
        if spec.required:
            raise ConfigurationError(f"missing required config key {key!r}")
        out[key] = spec.default
    return out


def override_seed(cfg: dict, seed: int) -> dict:
    """Set every `<section>.seed` key to the global seed."""
    for key in cfg:
        if key.split(".")[-1] == "seed":
            cfg[key] = seed
    return cfg


def render_resolved(cfg: dict) -> str:
    """Deterministic key=value text of a resolved config."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
