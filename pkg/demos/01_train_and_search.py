"""Train a small bi-encoder on synthetic pairs and run a few searches.

Everything fits in a coffee break: a 20-topic corpus, a short
contrastive run, then top-k retrieval over the held-out passages.
"""

import argparse

import numpy as np

from e5kit.datapipe import SyntheticSpec, gen_synthetic
from e5kit.encoder import TokenizerConfig, init_params
from e5kit.evaluate import build_index, retrieval_report, search_many, search_topk
from e5kit.pretrain import PretrainConfig, pretrain


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--topics", type=int, default=20)
    ap.add_argument("--steps", type=int, default=800)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = SyntheticSpec(topics=args.topics, pairs_per_topic=100, seed=args.seed)
    corpus = gen_synthetic(spec)
    print(f"corpus: {len(corpus.pairs)} training pairs, {len(corpus.eval_pairs)} held out")

    params = init_params(dim=64, tokenizer=TokenizerConfig(), seed=args.seed)
    cfg = PretrainConfig(batch_size=128, total_steps=args.steps, peak_lr=2e-3,
                         warmup_steps=80, seed=args.seed)
    params, log = pretrain(corpus.pairs, cfg, params)
    print(f"trained {len(log)} steps, loss {log[0].loss:.3f} -> {log[-1].loss:.3f}")

    n = len(corpus.eval_pairs)
    doc_ids = [f"d{i}" for i in range(n)]
    index = build_index(doc_ids, [p.passage for p in corpus.eval_pairs], params)

    # eyeball three queries before scoring the whole holdout
    for i in (0, n // 2, n - 1):
        hits = search_topk(corpus.eval_pairs[i].query, index, 3, params)
        mark = "hit " if hits.ids()[0] == f"d{i}" else ("top3" if f"d{i}" in hits.ids() else "miss")
        print(f"[{mark}] q={corpus.eval_pairs[i].query!r:48s} top3={hits.ids()}")

    ranked = search_many([f"q{i}" for i in range(n)],
                         [p.query for p in corpus.eval_pairs], index, 10, params)
    qrels = {f"q{i}": {f"d{i}": 1} for i in range(n)}
    report = retrieval_report(ranked, qrels)
    for name in ("ndcg@10", "mrr@10", "recall@100"):
        print(f"{name:10s} {report.metrics[name]:.4f}")


if __name__ == "__main__":
    main()
