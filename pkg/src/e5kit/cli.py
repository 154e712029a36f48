"""Command-line entry point wiring the pipeline together.

Usage: e5kit <command> --config run.cfg [--set key=value ...] [--seed N]

Config handling is strict: keys are validated against the command's
schema, unknown keys exit 2 naming the key, runtime failures exit 1.
Errors go to stderr as one JSON object per failure; reports go to
stdout; artifacts are written atomically into the configured output
directory together with the fully resolved config.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

# the package root re-exports the pretrain/finetune callables, which
# shadows those submodule attributes; import the names directly instead
from . import datapipe, evaluate, recipes
from .config import COMMANDS, override_seed, parse_config_file, render_resolved, resolve
from .encoder import TokenizerConfig, init_params, load_checkpoint, save_checkpoint
from .errors import ConfigurationError
from .finetune import (
    FinetuneConfig,
    fill_nli_negatives,
    finetune as run_finetune,
    load_examples,
    write_loss_log as write_finetune_loss_log,
)
from .io import atomic_write_text, dumps_json
from .pretrain import (
    PretrainConfig,
    pretrain as run_pretrain,
    write_loss_log as write_pretrain_loss_log,
    write_manifest,
)
from .tensor import write_matrix


def _emit(obj) -> None:
    sys.stdout.write(dumps_json(obj) + "\n")


def _error(exc: BaseException) -> None:
    sys.stderr.write(dumps_json({"error": type(exc).__name__, "message": str(exc)}) + "\n")


def _prepare_out_dir(cfg: dict, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "resolved.cfg"), render_resolved(cfg))
    return out_dir


def _manifest(path: str, fields: dict) -> None:
    atomic_write_text(path, "".join(f"{k}={fields[k]}\n" for k in sorted(fields)))


def _tokenizer(cfg: dict) -> TokenizerConfig:
    return TokenizerConfig(
        vocab_size=cfg["encoder.vocab_size"],
        hash_seed=cfg["encoder.hash_seed"],
        lowercase=cfg["encoder.lowercase"],
        max_tokens=cfg["encoder.max_tokens"],
    )


def _load_or_init(cfg: dict, checkpoint_key: str):
    path = cfg.get(checkpoint_key, "")
    if path:
        return load_checkpoint(path)
    return init_params(cfg["encoder.dim"], _tokenizer(cfg), seed=cfg["encoder.seed"])


def _cmd_gen_synthetic(cfg: dict) -> None:
    spec = datapipe.SyntheticSpec(
        topics=cfg["data.topics"],
        pairs_per_topic=cfg["data.pairs_per_topic"],
        vocab_per_topic=cfg["data.vocab_per_topic"],
        words_per_pair=cfg["data.words_per_pair"],
        extra_words=cfg["data.extra_words"],
        noise_fraction=cfg["data.noise_fraction"],
        holdout_per_topic=cfg["data.holdout_per_topic"],
        seed=cfg["data.seed"],
    )
    corpus = datapipe.gen_synthetic(spec)
    out_dir = _prepare_out_dir(cfg, cfg["data.out_dir"])
    paths = datapipe.write_synthetic(corpus, out_dir)
    _emit({"pairs": len(corpus.pairs), "eval_pairs": len(corpus.eval_pairs), "paths": paths})


def _cmd_filter(cfg: dict) -> None:
    pairs = list(datapipe.ingest(cfg["filter.pairs"], lenient=cfg["filter.lenient"]))
    weights = {
        key[len("filter.weight."):]: value
        for key, value in cfg.items()
        if key.startswith("filter.weight.")
    }
    if weights:
        pairs = datapipe.weighted_sample(pairs, weights, seed=cfg["filter.sample_seed"])
    eval_texts: list[str] = []
    if cfg["filter.decontaminate"]:
        with open(cfg["filter.decontaminate"], encoding="utf-8") as f:
            eval_texts = [line.rstrip("\n") for line in f if line.strip()]
    scorer = None
    if cfg["filter.checkpoint"]:
        scorer = load_checkpoint(cfg["filter.checkpoint"])
    sources = cfg["filter.heuristic_sources"]
    fcfg = datapipe.FilterConfig(
        k=cfg["filter.k"],
        pool_size=cfg["filter.pool_size"],
        seed=cfg["filter.seed"],
        max_chars=cfg["filter.max_chars"],
        min_score=cfg["filter.min_score"],
        heuristic_sources=frozenset(s.strip() for s in sources.split(",") if s.strip()) or None
        if sources
        else None,
    )
    kept, report = datapipe.run_filter_pipeline(pairs, fcfg, eval_texts, scorer)
    out_dir = _prepare_out_dir(cfg, cfg["filter.out_dir"])
    from .io import write_jsonl

    write_jsonl(os.path.join(out_dir, "kept.jsonl"), (datapipe.pair_to_obj(p) for p in kept))
    atomic_write_text(os.path.join(out_dir, "report.json"), report.to_json() + "\n")
    _emit({"input": report.input, "kept": report.kept})


def _cmd_pretrain(cfg: dict) -> None:
    pairs = list(datapipe.ingest(cfg["pretrain.pairs"]))
    params = _load_or_init(cfg, "pretrain.init_checkpoint")
    run_cfg = PretrainConfig(
        temperature=cfg["pretrain.temperature"],
        batch_size=cfg["pretrain.batch_size"],
        total_steps=cfg["pretrain.total_steps"],
        peak_lr=cfg["pretrain.peak_lr"],
        warmup_steps=cfg["pretrain.warmup_steps"],
        weight_decay=cfg["pretrain.weight_decay"],
        strategy=cfg["pretrain.strategy"],
        window=cfg["pretrain.window"],
        queue_size=cfg["pretrain.queue_size"],
        momentum=cfg["pretrain.momentum"],
        seed=cfg["pretrain.seed"],
    )
    params, log = run_pretrain(pairs, run_cfg, params)
    out_dir = _prepare_out_dir(cfg, cfg["pretrain.out_dir"])
    save_checkpoint(os.path.join(out_dir, "checkpoint.e5ck"), params)
    write_pretrain_loss_log(os.path.join(out_dir, "loss.csv"), log)
    write_manifest(os.path.join(out_dir, "manifest.txt"), run_cfg, log)
    _emit({"steps": len(log), "final_loss": log[-1].loss if log else None})


def _cmd_finetune(cfg: dict) -> None:
    examples = load_examples(cfg["finetune.examples"])
    if cfg["finetune.fill_corpus"]:
        with open(cfg["finetune.fill_corpus"], encoding="utf-8") as f:
            sentences = [line.rstrip("\n") for line in f if line.strip()]
        examples = [
            fill_nli_negatives(ex, sentences, cfg["finetune.fill_count"], seed=cfg["finetune.seed"] + i)
            for i, ex in enumerate(examples)
        ]
    params = _load_or_init(cfg, "finetune.init_checkpoint")
    run_cfg = FinetuneConfig(
        alpha=cfg["finetune.alpha"],
        m=cfg["finetune.m"],
        temperature=cfg["finetune.temperature"],
        epochs=cfg["finetune.epochs"],
        batch_size=cfg["finetune.batch_size"],
        peak_lr=cfg["finetune.peak_lr"],
        warmup_steps=cfg["finetune.warmup_steps"],
        weight_decay=cfg["finetune.weight_decay"],
        kd_enabled=cfg["finetune.kd_enabled"],
        seed=cfg["finetune.seed"],
    )
    params, log = run_finetune(examples, params, run_cfg)
    out_dir = _prepare_out_dir(cfg, cfg["finetune.out_dir"])
    save_checkpoint(os.path.join(out_dir, "checkpoint.e5ck"), params)
    write_finetune_loss_log(os.path.join(out_dir, "loss.csv"), log)
    fields = {f"config.{k}": v for k, v in sorted(vars(run_cfg).items())}
    fields["steps_completed"] = len(log)
    if log:
        fields["final_total_loss"] = repr(log[-1].total)
    _manifest(os.path.join(out_dir, "manifest.txt"), fields)
    _emit({"steps": len(log), "final_loss": log[-1].total if log else None})


def _cmd_embed(cfg: dict) -> None:
    params = load_checkpoint(cfg["embed.checkpoint"])
    ids, texts = evaluate.load_id_text_jsonl(cfg["embed.input"])
    from .encoder import encode_texts

    emb = encode_texts(texts, cfg["embed.role"], params).astype(np.float32)
    out_dir = _prepare_out_dir(cfg, cfg["embed.out_dir"])
    prefix = os.path.join(out_dir, "embeddings")
    write_matrix(f"{prefix}.e5mx", emb, dtype=np.float32)
    atomic_write_text(f"{prefix}.ids", "".join(f"{i}\n" for i in ids))
    _emit({"count": len(ids), "dim": int(emb.shape[1])})


def _cmd_search(cfg: dict) -> None:
    params = load_checkpoint(cfg["search.checkpoint"])
    corpus = evaluate.load_index(cfg["search.index"])
    qids, qtexts = evaluate.load_id_text_jsonl(cfg["search.queries"])
    ranked = evaluate.search_many(qids, qtexts, corpus, cfg["search.k"], params)
    out_dir = _prepare_out_dir(cfg, cfg["search.out_dir"])
    evaluate.write_run(os.path.join(out_dir, "run.txt"), ranked)
    _emit({"queries": len(qids), "k": cfg["search.k"]})


def _finish_eval(cfg: dict, report: evaluate.EvalReport) -> None:
    sys.stdout.write(report.to_json() + "\n")
    if cfg["eval.out_dir"]:
        out_dir = _prepare_out_dir(cfg, cfg["eval.out_dir"])
        atomic_write_text(os.path.join(out_dir, "report.json"), report.to_json() + "\n")


def _public_config(cfg: dict) -> dict:
    return {k: cfg[k] for k in sorted(cfg)}


def _cmd_eval_retrieval(cfg: dict) -> None:
    params = load_checkpoint(cfg["eval.checkpoint"])
    if bool(cfg["eval.corpus"]) == bool(cfg["eval.index"]):
        raise ConfigurationError("set exactly one of eval.corpus or eval.index")
    if cfg["eval.index"]:
        corpus = evaluate.load_index(cfg["eval.index"])
    else:
        dids, dtexts = evaluate.load_id_text_jsonl(cfg["eval.corpus"])
        corpus = evaluate.build_index(dids, dtexts, params)
    qids, qtexts = evaluate.load_id_text_jsonl(cfg["eval.queries"])
    qrels = evaluate.load_qrels(cfg["eval.qrels"])
    depth = max(cfg["eval.k"], cfg["eval.recall_k"])
    ranked = evaluate.search_many(qids, qtexts, corpus, depth, params)
    report = evaluate.retrieval_report(
        ranked,
        qrels,
        dataset=cfg["eval.dataset"],
        k=cfg["eval.k"],
        recall_k=cfg["eval.recall_k"],
        config=_public_config(cfg),
    )
    _finish_eval(cfg, report)


def _cmd_eval_sts(cfg: dict) -> None:
    params = load_checkpoint(cfg["eval.checkpoint"])
    pairs, gold = evaluate.load_sts_jsonl(cfg["eval.pairs"])
    from .metrics import spearman

    pred = evaluate.sts_score(pairs, params)
    report = evaluate.EvalReport(
        dataset=cfg["eval.dataset"],
        metrics={"spearman": spearman(pred, gold)},
        config=_public_config(cfg),
    )
    _finish_eval(cfg, report)


def _cmd_eval_cluster(cfg: dict) -> None:
    params = load_checkpoint(cfg["eval.checkpoint"])
    texts, labels = evaluate.load_labeled_jsonl(cfg["eval.input"])
    from .encoder import encode_texts
    from .metrics import v_measure

    X = encode_texts(texts, "query", params)
    k = cfg["eval.k"] or len(set(labels))
    result = evaluate.kmeans(X, k, seed=cfg["eval.seed"], max_iters=cfg["eval.max_iters"])
    report = evaluate.EvalReport(
        dataset=cfg["eval.dataset"],
        metrics={"v_measure": v_measure(result.labels, labels), "k": float(k)},
        config=_public_config(cfg),
    )
    _finish_eval(cfg, report)


def _majority(labels: list[str]) -> float:
    counts: dict[str, int] = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    return max(counts.values()) / len(labels)


def _cmd_eval_classify(cfg: dict) -> None:
    params = load_checkpoint(cfg["eval.checkpoint"])
    test_texts, test_labels = evaluate.load_labeled_jsonl(cfg["eval.test"])
    from .encoder import encode_texts

    if cfg["eval.mode"] == "probe":
        if not cfg["eval.train"]:
            raise ConfigurationError("probe mode requires eval.train")
        train_texts, train_labels = evaluate.load_labeled_jsonl(cfg["eval.train"])
        train_X = encode_texts(train_texts, "query", params)
        test_X = encode_texts(test_texts, "query", params)
        acc = evaluate.linear_probe(
            train_X,
            train_labels,
            test_X,
            test_labels,
            evaluate.ProbeConfig(steps=cfg["eval.steps"], lr=cfg["eval.lr"]),
        )
    else:
        labels = [s.strip() for s in cfg["eval.labels"].split(",") if s.strip()]
        if len(labels) < 2:
            raise ConfigurationError("zero-shot mode requires eval.labels with >= 2 names")
        label_texts = []
        for lab in labels:
            key = f"eval.label_text.{lab}"
            if key not in cfg:
                raise ConfigurationError(f"missing {key!r} for zero-shot label {lab!r}")
            label_texts.append(cfg[key])
        template = evaluate.PromptTemplate(
            template=cfg["eval.template"], labels=tuple(labels), label_texts=tuple(label_texts)
        )
        preds = evaluate.zero_shot_classify_batch(test_texts, template, params)
        acc = float(np.mean([p == g for p, g in zip(preds, test_labels)]))
    report = evaluate.EvalReport(
        dataset=cfg["eval.dataset"],
        metrics={"accuracy": acc, "majority_baseline": _majority(test_labels)},
        config=_public_config(cfg),
    )
    _finish_eval(cfg, report)


def _cmd_recipe(cfg: dict) -> None:
    seeds = [int(s) for s in cfg["recipe.seeds"].split(",") if s.strip()]
    if not seeds:
        raise ConfigurationError("recipe.seeds must name at least one seed")
    csv_text = recipes.run_recipe(cfg["recipe.name"], cfg, seeds)
    out_dir = _prepare_out_dir(cfg, cfg["recipe.out_dir"])
    atomic_write_text(os.path.join(out_dir, "table.csv"), csv_text)
    sys.stdout.write(csv_text)


_DISPATCH = {
    "gen-synthetic": _cmd_gen_synthetic,
    "filter": _cmd_filter,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "embed": _cmd_embed,
    "search": _cmd_search,
    "eval-retrieval": _cmd_eval_retrieval,
    "eval-sts": _cmd_eval_sts,
    "eval-cluster": _cmd_eval_cluster,
    "eval-classify": _cmd_eval_classify,
    "recipe": _cmd_recipe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="e5kit",
        description="Contrastive text-embedding pipeline: filter, train, embed, evaluate.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="override every <section>.seed key")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = parse_config_file(args.config) if args.config else {}
        for item in args.set:
            if "=" not in item:
                raise ConfigurationError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            raw[key.strip()] = value.strip()
        cfg = resolve(args.command, raw)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigurationError("--seed must be >= 0")
            override_seed(cfg, args.seed)
    except (ConfigurationError, OSError) as exc:
        _error(exc)
        return 2
    try:
        _DISPATCH[args.command](cfg)
        return 0
    except Exception as exc:  # runtime failure: structured error, exit 1
        _error(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
