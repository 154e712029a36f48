import re
import warnings

import numpy as np
import pytest

from e5kit.datapipe import (
    FilterConfig,
    FilterReport,
    SyntheticSpec,
    TextPair,
    consistency_filter,
    consistency_ranks,
    decontaminate,
    gen_synthetic,
    heuristic_filter,
    ingest,
    pair_to_obj,
    run_filter_pipeline,
    synth_finetune_examples,
    weighted_sample,
    write_synthetic,
)
from e5kit.encoder import EncoderParams, TokenizerConfig, tokenize
from e5kit.errors import ConfigurationError, ParseError, ValidationError
from e5kit.io import write_jsonl

TOPIC_WORD = re.compile(r"\b[qp](\d+)w(\d+)\b")


def topic_of(text):
    topics = {int(t) for t, _ in TOPIC_WORD.findall(text)}
    assert len(topics) == 1, text
    return topics.pop()


def axis_scorer(word_to_axis: dict, dim=8, vocab=256):
    """Encoder whose embedding for a one-word text points along a chosen axis.

    Prefix and stopword rows are zero; proj is identity, bias zero, so a
    text's direction is the mean of its word rows pushed through tanh,
    which preserves axis-aligned directions exactly.
    """
    tok = TokenizerConfig(vocab_size=vocab, max_tokens=8)
    table = np.zeros((vocab, dim))
    for word, axis in word_to_axis.items():
        ids = tokenize(word, "none", tok)
        assert len(ids) == 1
        table[ids[0], axis] = 1.0
    return EncoderParams(table=table, proj=np.eye(dim), bias=np.zeros(dim), tokenizer=tok)


class TestTextPair:
    def test_blank_sides_rejected(self):
        with pytest.raises(ValidationError):
            TextPair(query=" ", passage="p")
        with pytest.raises(ValidationError):
            TextPair(query="q", passage="\t")

    def test_to_obj_omits_missing_score(self):
        assert pair_to_obj(TextPair("q", "p", source="web")) == {
            "query": "q",
            "passage": "p",
            "source": "web",
        }
        assert pair_to_obj(TextPair("q", "p", score=3))["score"] == 3


class TestIngest:
    def test_order_preserved(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        write_jsonl(path, [{"query": f"q{i}", "passage": f"p{i}"} for i in range(3)])
        pairs = list(ingest(path))
        assert [p.query for p in pairs] == ["q0", "q1", "q2"]
        assert all(p.source == "unknown" for p in pairs)

    def test_empty_file_empty_stream(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text("")
        assert list(ingest(path)) == []

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"query":"q","passage":"p"}\n{"query":"q2"}\n')
        with pytest.raises(ParseError, match="line 2"):
            list(ingest(path))

    def test_lenient_mode_skips_with_warning(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"query":"q","passage":"p"}\n{"query":"q2"}\n{"query":"q3","passage":"p3"}\n')
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            pairs = list(ingest(path, lenient=True))
        assert [p.query for p in pairs] == ["q", "q3"]
        assert any("line 2" in str(w.message) for w in caught)

    def test_score_coerced_to_int(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        write_jsonl(path, [{"query": "q", "passage": "p", "score": 5}])
        [pair] = list(ingest(path))
        assert pair.score == 5


class TestHeuristicFilter:
    def test_long_passage_dropped(self):
        cfg = FilterConfig(max_chars=100)
        keep = TextPair("q", "x" * 100)
        drop = TextPair("q", "x" * 101)
        kept, dropped = heuristic_filter([keep, drop], cfg)
        assert kept == [keep]
        assert dropped[0][0] is drop
        assert "length" in dropped[0][1]

    def test_low_score_dropped(self):
        cfg = FilterConfig(min_score=1)
        kept, dropped = heuristic_filter([TextPair("q", "p", score=0)], cfg)
        assert kept == []
        assert "score" in dropped[0][1]

    def test_missing_score_passes(self):
        kept, dropped = heuristic_filter([TextPair("q", "p")], FilterConfig())
        assert len(kept) == 1

    def test_source_scoping(self):
        cfg = FilterConfig(min_score=1, heuristic_sources=frozenset({"forum"}))
        forum = TextPair("q", "p", source="forum", score=0)
        wiki = TextPair("q", "p", source="wiki", score=0)
        kept, dropped = heuristic_filter([forum, wiki], cfg)
        assert kept == [wiki]
        assert dropped[0][0] is forum


class TestDecontaminate:
    def test_exact_match_on_either_side_drops(self):
        pairs = [TextPair("qa", "pa"), TextPair("qb", "pb"), TextPair("qc", "pc")]
        out = decontaminate(pairs, ["pa", "qc"])
        assert [p.query for p in out] == ["qb"]

    def test_whitespace_normalized_match(self):
        pairs = [TextPair("q", "some  doc   text")]
        assert decontaminate(pairs, ["some doc text"]) == []

    def test_near_duplicate_kept(self):
        pairs = [TextPair("q", "some doc text!")]
        assert len(decontaminate(pairs, ["some doc text"])) == 1

    def test_empty_eval_set_keeps_all(self):
        pairs = [TextPair("q", "p")]
        assert decontaminate(pairs, []) == pairs


class TestConsistencyRanks:
    def test_perfectly_aligned_scorer_ranks_own_passage_first(self):
        n = 6
        axes = {}
        for i in range(n):
            axes[f"qw{i}"] = i
            axes[f"pw{i}"] = i
        scorer = axis_scorer(axes)
        pairs = [TextPair(f"qw{i}", f"pw{i}") for i in range(n)]
        cfg = FilterConfig(k=1, pool_size=n, seed=0)
        ranks = consistency_ranks(pairs, scorer, cfg)
        np.testing.assert_array_equal(ranks, np.ones(n, dtype=np.int64))

    def test_mismatched_pair_ranks_behind_true_matches(self):
        axes = {}
        for i in range(8):
            axes[f"qw{i}"] = i
            axes[f"pw{i}"] = i
        scorer = axis_scorer(axes)
        pairs = [TextPair(f"qw{i}", f"pw{i}") for i in range(4)]
        pairs.append(TextPair("qw4", "pw7"))  # off-topic passage for this query
        cfg = FilterConfig(k=1, pool_size=5, seed=0)
        ranks = consistency_ranks(pairs, scorer, cfg)
        assert list(ranks[:4]) == [1, 1, 1, 1]
        assert ranks[4] > 1

    def test_duplicate_passages_tie_pessimistically(self):
        axes = {"qw0": 0, "pw0": 0, "qw1": 1, "pw1": 1}
        scorer = axis_scorer(axes)
        # two pairs share the identical passage text; with both in the pool
        # the twin ties the true passage and is counted ahead of it
        pairs = [TextPair("qw0", "pw0"), TextPair("qw0", "pw0"), TextPair("qw1", "pw1")]
        cfg = FilterConfig(k=1, pool_size=3, seed=0)
        ranks = consistency_ranks(pairs, scorer, cfg)
        assert list(ranks[:2]) == [2, 2]
        assert ranks[2] == 1

    def test_matches_brute_force_on_random_scorer(self):
        from e5kit.encoder import encode_texts, init_params

        rng = np.random.default_rng(20)
        words = [f"word{i}" for i in range(30)]
        pairs = [
            TextPair(
                " ".join(rng.choice(words, size=3, replace=False)),
                " ".join(rng.choice(words, size=4, replace=False)),
            )
            for _ in range(12)
        ]
        params = init_params(dim=8, tokenizer=TokenizerConfig(vocab_size=64), seed=21)
        cfg = FilterConfig(k=2, pool_size=7, seed=5)
        got = consistency_ranks(pairs, params, cfg)

        # definitional re-computation: seeded pool, cosine scores, count
        # pool passages scoring >= own (ties favor the pool), mask own slot
        pool_idx = np.random.default_rng(5).choice(12, size=7, replace=False)
        P = encode_texts([p.passage for p in pairs], "passage", params)
        Q = encode_texts([p.query for p in pairs], "query", params)
        for i in range(12):
            q = Q[i] / np.linalg.norm(Q[i])
            own = float(q @ (P[i] / np.linalg.norm(P[i])))
            beat = 0
            for slot, j in enumerate(pool_idx):
                if j == i:
                    continue
                s = float(q @ (P[j] / np.linalg.norm(P[j])))
                if s >= own:
                    beat += 1
            assert got[i] == 1 + beat

    def test_pool_larger_than_data_rejected(self):
        pairs = [TextPair("q", "p")] * 3
        scorer = axis_scorer({"q": 0, "p": 0})
        with pytest.raises(ConfigurationError):
            consistency_ranks(pairs, scorer, FilterConfig(k=1, pool_size=4))

    def test_chunking_does_not_change_ranks(self):
        from e5kit.encoder import init_params

        rng = np.random.default_rng(22)
        words = [f"w{i}" for i in range(40)]
        pairs = [
            TextPair(
                " ".join(rng.choice(words, size=3, replace=False)),
                " ".join(rng.choice(words, size=3, replace=False)),
            )
            for _ in range(9)
        ]
        params = init_params(dim=6, tokenizer=TokenizerConfig(vocab_size=64), seed=23)
        cfg = FilterConfig(k=2, pool_size=9, seed=1)
        np.testing.assert_array_equal(
            consistency_ranks(pairs, params, cfg, chunk=2),
            consistency_ranks(pairs, params, cfg, chunk=512),
        )


class TestConsistencyFilter:
    def _pairs_and_scorer(self):
        axes = {}
        for i in range(8):
            axes[f"qw{i}"] = i
            axes[f"pw{i}"] = i
        pairs = [TextPair(f"qw{i}", f"pw{i}") for i in range(6)]
        pairs += [TextPair("qw6", "pw0"), TextPair("qw7", "pw1")]  # mismatched
        return pairs, axis_scorer(axes)

    def test_keeps_aligned_drops_mismatched(self):
        pairs, scorer = self._pairs_and_scorer()
        kept, report = consistency_filter(pairs, scorer, FilterConfig(k=2, pool_size=8, seed=0))
        assert [p.query for p in kept] == [f"qw{i}" for i in range(6)]
        assert report.kept == 6
        assert report.dropped_by_consistency == 2
        report.check()

    def test_k1_keep_set_is_subset_of_k2(self):
        from e5kit.encoder import init_params

        rng = np.random.default_rng(24)
        words = [f"w{i}" for i in range(30)]
        pairs = [
            TextPair(
                " ".join(rng.choice(words, size=3, replace=False)),
                " ".join(rng.choice(words, size=3, replace=False)),
            )
            for _ in range(15)
        ]
        params = init_params(dim=8, tokenizer=TokenizerConfig(vocab_size=128), seed=25)
        kept1, _ = consistency_filter(pairs, params, FilterConfig(k=1, pool_size=10, seed=3))
        kept2, _ = consistency_filter(pairs, params, FilterConfig(k=2, pool_size=10, seed=3))
        ids1 = {id(p) for p in kept1}
        ids2 = {id(p) for p in kept2}
        assert ids1 <= ids2

    def test_vacuous_cutoff_keeps_everything(self):
        pairs, scorer = self._pairs_and_scorer()
        cfg = FilterConfig(k=9, pool_size=8, seed=0)  # k == pool_size + 1
        kept, _ = consistency_filter(pairs, scorer, cfg)
        assert len(kept) == len(pairs)


class TestWeightedSample:
    def test_weight_one_keeps_all(self):
        pairs = [TextPair("q", "p", source="a") for _ in range(50)]
        assert len(weighted_sample(pairs, {"a": 1.0}, seed=0)) == 50

    def test_unlisted_source_defaults_to_one(self):
        pairs = [TextPair("q", "p", source="b") for _ in range(20)]
        assert len(weighted_sample(pairs, {"a": 0.1}, seed=0)) == 20

    def test_binomial_bound_at_pt3(self):
        pairs = [TextPair("q", "p", source="s") for _ in range(10000)]
        n = len(weighted_sample(pairs, {"s": 0.3}, seed=0))
        assert 2700 <= n <= 3300  # 3 sigma

    def test_deterministic(self):
        pairs = [TextPair(f"q{i}", "p", source="s") for i in range(100)]
        a = weighted_sample(pairs, {"s": 0.5}, seed=9)
        b = weighted_sample(pairs, {"s": 0.5}, seed=9)
        assert [p.query for p in a] == [p.query for p in b]

    def test_out_of_range_weight_rejected(self):
        pairs = [TextPair("q", "p", source="s")]
        with pytest.raises(ConfigurationError):
            weighted_sample(pairs, {"s": 0.0})
        with pytest.raises(ConfigurationError):
            weighted_sample(pairs, {"s": 1.2})


class TestFilterReport:
    def test_check_catches_mismatch(self):
        report = FilterReport(input=5, kept=3)
        with pytest.raises(ValidationError):
            report.check()

    def test_to_json_is_deterministic(self):
        r = FilterReport(input=2, kept=2)
        r.bump("web", "kept")
        r.bump("web", "kept")
        assert r.to_json() == (
            '{"dropped_by_consistency":0,"dropped_by_decontamination":0,'
            '"dropped_by_heuristic":0,"input":2,"kept":2,'
            '"per_source":{"web":{"kept":2}}}'
        )


class TestFilterPipeline:
    def test_stages_compose_and_report_reconciles(self):
        axes = {}
        for i in range(6):
            axes[f"qw{i}"] = i
            axes[f"pw{i}"] = i
        scorer = axis_scorer(axes)
        pairs = [TextPair(f"qw{i}", f"pw{i}", source="good") for i in range(4)]
        pairs.append(TextPair("qw4", "x" * 5000, source="long"))     # heuristic
        pairs.append(TextPair("qw5", "pw5", source="leak"))          # decontamination
        pairs.append(TextPair("qw0", "pw3", source="noisy"))         # consistency
        # k=2 tolerates the tie the duplicated pw3 text creates for pair 3
        cfg = FilterConfig(k=2, pool_size=5, seed=0)
        kept, report = run_filter_pipeline(pairs, cfg, eval_texts=["pw5"], scorer=scorer)
        assert report.input == 7
        assert report.dropped_by_heuristic == 1
        assert report.dropped_by_decontamination == 1
        assert report.dropped_by_consistency == 1
        assert report.kept == len(kept) == 4
        assert {p.source for p in kept} == {"good"}
        report.check()

    def test_no_scorer_skips_consistency(self):
        pairs = [TextPair("q1", "p1"), TextPair("q2", "p2")]
        kept, report = run_filter_pipeline(pairs, FilterConfig())
        assert len(kept) == 2
        assert report.dropped_by_consistency == 0

    def test_subset_property(self):
        pairs = [TextPair(f"q{i}", f"p{i}") for i in range(10)]
        kept, _ = run_filter_pipeline(pairs, FilterConfig(max_chars=1))
        assert all(any(k is p for p in pairs) for k in kept)


class TestGenSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(topics=3, pairs_per_topic=10, noise_fraction=0.2, seed=4)
        a = gen_synthetic(spec)
        b = gen_synthetic(spec)
        assert [p.passage for p in a.pairs] == [p.passage for p in b.pairs]
        assert a.labels == b.labels
        assert [p.query for p in a.eval_pairs] == [p.query for p in b.eval_pairs]

    def test_shapes_and_counts(self):
        spec = SyntheticSpec(topics=4, pairs_per_topic=25, holdout_per_topic=3, seed=0)
        c = gen_synthetic(spec)
        assert len(c.pairs) == 100
        assert len(c.labels) == 100
        assert len(c.eval_pairs) == 12

    def test_noise_count_is_exact(self):
        for nf, want in ((0.0, 0), (0.2, 20), (0.015, 2)):  # round(0.015*100) = 2
            spec = SyntheticSpec(topics=4, pairs_per_topic=25, noise_fraction=nf, seed=1)
            c = gen_synthetic(spec)
            assert sum(1 for x in c.labels if not x) == want

    def test_clean_pairs_share_topic_noisy_pairs_do_not(self):
        spec = SyntheticSpec(topics=5, pairs_per_topic=20, noise_fraction=0.3, seed=2)
        c = gen_synthetic(spec)
        for pair, clean in zip(c.pairs, c.labels):
            qt, pt = topic_of(pair.query), topic_of(pair.passage)
            if clean:
                assert qt == pt
            else:
                assert qt != pt

    def test_noisy_passages_are_swapped_from_real_pairs(self):
        spec = SyntheticSpec(topics=5, pairs_per_topic=20, noise_fraction=0.2, seed=3)
        c = gen_synthetic(spec)
        clean_spec = SyntheticSpec(topics=5, pairs_per_topic=20, noise_fraction=0.0, seed=3)
        original = {p.passage for p in gen_synthetic(clean_spec).pairs}
        for pair, clean in zip(c.pairs, c.labels):
            if not clean:
                assert pair.passage in original

    def test_query_and_passage_vocabularies_disjoint(self):
        spec = SyntheticSpec(topics=2, pairs_per_topic=5, seed=5)
        c = gen_synthetic(spec)
        for pair in c.pairs:
            q_topic_words = set(re.findall(r"\bq\d+w\d+\b", pair.query))
            p_topic_words = set(re.findall(r"\bp\d+w\d+\b", pair.passage))
            assert q_topic_words
            assert p_topic_words
            assert not (q_topic_words & set(pair.passage.split()))

    def test_clean_pair_indices_correspond(self):
        spec = SyntheticSpec(topics=2, pairs_per_topic=5, seed=6)
        c = gen_synthetic(spec)
        for pair in c.pairs:
            q_idx = {int(k) for _, k in TOPIC_WORD.findall(pair.query)}
            p_idx = {int(k) for _, k in TOPIC_WORD.findall(pair.passage)}
            assert q_idx <= p_idx
            assert len(p_idx) == spec.words_per_pair + spec.extra_words

    def test_holdout_disjoint_from_training(self):
        spec = SyntheticSpec(topics=3, pairs_per_topic=8, holdout_per_topic=4, seed=7)
        c = gen_synthetic(spec)
        train_queries = {p.query for p in c.pairs}
        assert not any(p.query in train_queries for p in c.eval_pairs)

    def test_bad_noise_fraction_rejected(self):
        with pytest.raises(ConfigurationError):
            SyntheticSpec(noise_fraction=1.0)

    def test_vocab_too_small_rejected(self):
        with pytest.raises(ConfigurationError):
            SyntheticSpec(vocab_per_topic=10, words_per_pair=8, extra_words=4)


class TestSynthFinetuneExamples:
    def test_structure_and_teacher_scores(self):
        spec = SyntheticSpec(topics=3, pairs_per_topic=10, seed=8)
        c = gen_synthetic(spec)
        examples = synth_finetune_examples(c, m=4, seed=0)
        assert len(examples) == len(c.pairs)
        for ex, pair in zip(examples, c.pairs):
            assert ex.query == pair.query
            assert ex.positive == pair.passage
            assert len(ex.negatives) == 4
            assert ex.teacher_scores.shape == (5,)
            # positive overlap is exactly words_per_pair and never beaten
            assert ex.teacher_scores[0] == spec.words_per_pair
            assert ex.teacher_scores[0] == ex.teacher_scores.max()

    def test_hard_negative_is_same_topic(self):
        spec = SyntheticSpec(topics=3, pairs_per_topic=10, seed=9)
        c = gen_synthetic(spec)
        examples = synth_finetune_examples(c, m=3, seed=1)
        for ex in examples:
            assert topic_of(ex.negatives[0]) == topic_of(ex.query)
            assert ex.negatives[0] != ex.positive

    def test_deterministic(self):
        spec = SyntheticSpec(topics=2, pairs_per_topic=6, seed=10)
        c = gen_synthetic(spec)
        a = synth_finetune_examples(c, m=3, seed=5)
        b = synth_finetune_examples(c, m=3, seed=5)
        assert all(x.negatives == y.negatives for x, y in zip(a, b))

    def test_m_below_two_rejected(self):
        c = gen_synthetic(SyntheticSpec(topics=2, pairs_per_topic=3, seed=0))
        with pytest.raises(ConfigurationError):
            synth_finetune_examples(c, m=1)


class TestWriteSynthetic:
    def test_files_round_trip(self, tmp_path):
        spec = SyntheticSpec(topics=2, pairs_per_topic=5, noise_fraction=0.2, holdout_per_topic=2, seed=11)
        c = gen_synthetic(spec)
        paths = write_synthetic(c, tmp_path / "corpus")
        pairs = list(ingest(paths["pairs"]))
        assert len(pairs) == 10
        assert [p.query for p in pairs] == [p.query for p in c.pairs]

        from e5kit.evaluate import load_id_text_jsonl, load_qrels

        q_ids, q_texts = load_id_text_jsonl(paths["eval_queries"])
        d_ids, d_texts = load_id_text_jsonl(paths["eval_corpus"])
        qrels = load_qrels(paths["eval_qrels"])
        assert len(q_ids) == len(d_ids) == 4
        assert q_ids == [f"q{i}" for i in range(4)]
        assert qrels["q0"] == {"d0": 1}

    def test_rerun_is_byte_identical(self, tmp_path):
        spec = SyntheticSpec(topics=2, pairs_per_topic=4, noise_fraction=0.25, seed=12)
        p1 = write_synthetic(gen_synthetic(spec), tmp_path / "one")
        p2 = write_synthetic(gen_synthetic(spec), tmp_path / "two")
        for key in p1:
            b1 = open(p1[key], "rb").read()
            b2 = open(p2[key], "rb").read()
            assert b1 == b2, key
