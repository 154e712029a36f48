"""Distillation fine-tuning on top of a contrastive checkpoint.

Builds listwise training examples (positive + hard negative + random
negatives, each with a synthetic teacher score), fine-tunes with the
KL-to-teacher objective plus a contrastive term, then compares the
two checkpoints on retrieval, STS and zero-shot classification.
"""

import argparse

import numpy as np

from e5kit.datapipe import SyntheticSpec, gen_synthetic, synth_finetune_examples
from e5kit.encoder import TokenizerConfig, init_params
from e5kit.evaluate import (
    PromptTemplate,
    build_index,
    retrieval_report,
    search_many,
    sts_score,
    zero_shot_classify_batch,
)
from e5kit.finetune import FinetuneConfig, finetune
from e5kit.metrics import spearman
from e5kit.pretrain import PretrainConfig, pretrain


def holdout_scores(params, corpus, tag):
    n = len(corpus.eval_pairs)
    index = build_index([f"d{i}" for i in range(n)],
                        [p.passage for p in corpus.eval_pairs], params)
    ranked = search_many([f"q{i}" for i in range(n)],
                         [p.query for p in corpus.eval_pairs], index, 10, params)
    report = retrieval_report(ranked, {f"q{i}": {f"d{i}": 1} for i in range(n)})

    # matched pairs should score above shuffled ones; Spearman vs that split
    pairs = [(p.query, p.passage) for p in corpus.eval_pairs[:50]]
    pairs += [(corpus.eval_pairs[i].query, corpus.eval_pairs[i + 1].passage)
              for i in range(50, 100)]
    gold = np.r_[np.ones(50), np.zeros(50)]
    rho = spearman(sts_score(pairs, params), gold)

    template = PromptTemplate(
        template="{text}",
        labels=("topic0", "topic1"),
        label_texts=("q0w0 q0w1 q0w2 q0w3", "q1w0 q1w1 q1w2 q1w3"),
    )
    texts, want = [], []
    for t in (0, 1):
        for p in corpus.pairs[t * 100:t * 100 + 100]:
            texts.append(p.passage)
            want.append(f"topic{t}")
    preds = zero_shot_classify_batch(texts, template, params)
    acc = float(np.mean([a == b for a, b in zip(preds, want)]))

    print(f"{tag:10s} ndcg@10={report.metrics['ndcg@10']:.4f} "
          f"sts_rho={rho:.4f} zero_shot={acc:.3f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    corpus = gen_synthetic(SyntheticSpec(topics=20, pairs_per_topic=100, seed=args.seed))
    params = init_params(dim=64, tokenizer=TokenizerConfig(), seed=args.seed)
    cfg = PretrainConfig(batch_size=64, total_steps=300, peak_lr=2e-3,
                         warmup_steps=40, seed=args.seed)
    params, _ = pretrain(corpus.pairs, cfg, params)
    holdout_scores(params, corpus, "pretrained")

    examples = synth_finetune_examples(corpus, m=7, seed=args.seed)
    ft_cfg = FinetuneConfig(alpha=0.2, m=7, epochs=2, batch_size=32,
                            peak_lr=5e-4, warmup_steps=40, seed=args.seed)
    tuned, records = finetune(examples, params, ft_cfg)
    print(f"finetuned {len(records)} steps, kd {records[0].kd:.4f} -> {records[-1].kd:.4f}")
    holdout_scores(tuned, corpus, "finetuned")


if __name__ == "__main__":
    main()
