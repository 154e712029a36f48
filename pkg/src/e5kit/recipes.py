"""Trend-reproduction recipes: small sequential experiment grids.

Each recipe generates its own synthetic data per seed, trains the
configured cells one after another, and aggregates held-out retrieval
nDCG@10 into a CSV table (one row per cell, one column per seed plus
the mean). A failing cell aborts the whole recipe and names itself.
"""

from __future__ import annotations

import numpy as np

from .datapipe import FilterConfig, SyntheticSpec, consistency_ranks, gen_synthetic
from .encoder import TokenizerConfig, init_params
from .evaluate import build_index, retrieval_report, search_many
from .pretrain import PretrainConfig, pretrain

RECIPES = ("batch-size-sweep", "filter-ablation", "negative-strategy-sweep")


class RecipeError(RuntimeError):
    pass


def _spec_from_cfg(cfg: dict, seed: int) -> SyntheticSpec:
    return SyntheticSpec(
        topics=cfg["data.topics"],
        pairs_per_topic=cfg["data.pairs_per_topic"],
        vocab_per_topic=cfg["data.vocab_per_topic"],
        words_per_pair=cfg["data.words_per_pair"],
        extra_words=cfg["data.extra_words"],
        noise_fraction=cfg["data.noise_fraction"],
        holdout_per_topic=cfg["data.holdout_per_topic"],
        seed=seed,
    )


def _tokenizer_from_cfg(cfg: dict) -> TokenizerConfig:
    return TokenizerConfig(
        vocab_size=cfg["encoder.vocab_size"],
        hash_seed=cfg["encoder.hash_seed"],
        lowercase=cfg["encoder.lowercase"],
        max_tokens=cfg["encoder.max_tokens"],
    )


def _train_and_eval(pairs, corpus, cfg: dict, seed: int, **overrides) -> float:
    """Train from scratch on `pairs`, return held-out nDCG@10."""
    params = init_params(cfg["encoder.dim"], _tokenizer_from_cfg(cfg), seed=seed)
    train_cfg = PretrainConfig(
        temperature=overrides.get("temperature", cfg["recipe.temperature"]),
        batch_size=overrides.get("batch_size", cfg["recipe.batch_size"]),
        total_steps=overrides.get("total_steps", cfg["recipe.steps"]),
        peak_lr=cfg["recipe.peak_lr"],
        warmup_steps=cfg["recipe.warmup_steps"],
        strategy=overrides.get("strategy", "in-batch"),
        window=cfg["recipe.window"],
        queue_size=cfg["recipe.queue_size"],
        momentum=overrides.get("momentum", cfg["recipe.momentum"]),
        seed=seed,
    )
    params, _log = pretrain(pairs, train_cfg, params)
    return _holdout_ndcg(params, corpus)


def _holdout_ndcg(params, corpus) -> float:
    qids = [f"q{i}" for i in range(len(corpus.eval_pairs))]
    dids = [f"d{i}" for i in range(len(corpus.eval_pairs))]
    index = build_index(dids, [p.passage for p in corpus.eval_pairs], params)
    ranked = search_many(qids, [p.query for p in corpus.eval_pairs], index, 10, params)
    qrels = {f"q{i}": {f"d{i}": 1} for i in range(len(corpus.eval_pairs))}
    return retrieval_report(ranked, qrels).metrics["ndcg@10"]


def _rows_to_csv(label: str, rows: list[tuple[str, list[float]]], seeds: list[int]) -> str:
    header = [label] + [f"ndcg10_seed{s}" for s in seeds] + ["ndcg10_mean"]
    lines = [",".join(header)]
    for name, values in rows:
        mean = float(np.mean(values))
        lines.append(",".join([name] + [repr(v) for v in values] + [repr(mean)]))
    return "\n".join(lines) + "\n"


def batch_size_sweep(cfg: dict, seeds: list[int]) -> str:
    """Held-out nDCG@10 per training batch size (Table-5-style trend)."""
    rows = []
    for batch_size in (16, 64, 256):
        values = []
        for seed in seeds:
            cell = f"batch={batch_size},seed={seed}"
            try:
                corpus = gen_synthetic(_spec_from_cfg(cfg, seed))
                values.append(
                    _train_and_eval(corpus.pairs, corpus, cfg, seed, batch_size=batch_size)
                )
            except Exception as exc:
                raise RecipeError(f"cell {cell!r} failed: {exc}") from exc
        rows.append((str(batch_size), values))
    return _rows_to_csv("batch_size", rows, seeds)


def filter_ablation(cfg: dict, seeds: list[int]) -> str:
    """Filtered subset vs equal-size random subset (Table-7-style trend)."""
    filtered_vals, random_vals = [], []
    for seed in seeds:
        cell = f"seed={seed}"
        try:
            corpus = gen_synthetic(_spec_from_cfg(cfg, seed))
            scorer = init_params(cfg["encoder.dim"], _tokenizer_from_cfg(cfg), seed=seed)
            scorer_cfg = PretrainConfig(
                temperature=cfg["recipe.temperature"],
                batch_size=cfg["recipe.batch_size"],
                total_steps=cfg["recipe.scorer_steps"],
                peak_lr=cfg["recipe.peak_lr"],
                warmup_steps=cfg["recipe.warmup_steps"],
                seed=seed,
            )
            scorer, _ = pretrain(corpus.pairs, scorer_cfg, scorer)
            pool = cfg["recipe.pool_size"] or len(corpus.pairs)
            fcfg = FilterConfig(k=cfg["recipe.k"], pool_size=pool, seed=seed)
            ranks = consistency_ranks(corpus.pairs, scorer, fcfg)
            keep_idx = np.flatnonzero(ranks <= fcfg.k)
            filtered = [corpus.pairs[i] for i in keep_idx]

            rng = np.random.default_rng([seed, 424243])
            rand_idx = np.sort(rng.choice(len(corpus.pairs), size=len(filtered), replace=False))
            randomed = [corpus.pairs[i] for i in rand_idx]

            filtered_vals.append(_train_and_eval(filtered, corpus, cfg, seed))
            random_vals.append(_train_and_eval(randomed, corpus, cfg, seed))
        except RecipeError:
            raise
        except Exception as exc:
            raise RecipeError(f"cell {cell!r} failed: {exc}") from exc
    rows = [("filtered", filtered_vals), ("random", random_vals)]
    return _rows_to_csv("subset", rows, seeds)


def negative_strategy_sweep(cfg: dict, seeds: list[int]) -> str:
    """In-batch vs pre-batch vs momentum queue (Table-8-style plumbing)."""
    rows = []
    for strategy in ("in-batch", "pre-batch", "momentum-queue"):
        values = []
        for seed in seeds:
            cell = f"strategy={strategy},seed={seed}"
            try:
                corpus = gen_synthetic(_spec_from_cfg(cfg, seed))
                values.append(
                    _train_and_eval(corpus.pairs, corpus, cfg, seed, strategy=strategy)
                )
            except Exception as exc:
                raise RecipeError(f"cell {cell!r} failed: {exc}") from exc
        rows.append((strategy, values))
    return _rows_to_csv("strategy", rows, seeds)


def run_recipe(name: str, cfg: dict, seeds: list[int]) -> str:
    if name == "batch-size-sweep":
        return batch_size_sweep(cfg, seeds)
    if name == "filter-ablation":
        return filter_ablation(cfg, seeds)
    if name == "negative-strategy-sweep":
        return negative_strategy_sweep(cfg, seeds)
    raise RecipeError(f"unknown recipe {name!r}")
