import math
from fractions import Fraction

import numpy as np
import pytest

from pivotlab import corpus, evaluate, model


class TestCandidateSet:
    def test_nucleus_cut_on_known_distribution(self):
        # probs after softmax of log([0.5, 0.3, 0.15, 0.05]) at T=1
        logits = np.log(np.array([0.5, 0.3, 0.15, 0.05]))
        cfg = evaluate.GenConfig(mode="sample", temperature=1.0, nucleus_p=0.8, seed=0)
        ids, probs = evaluate.candidate_set(logits, cfg)
        assert list(ids) == [0, 1]
        assert probs == pytest.approx([0.5 / 0.8, 0.3 / 0.8])

    def test_nucleus_boundary_inclusive(self):
        logits = np.log(np.array([0.5, 0.3, 0.2]))
        cfg = evaluate.GenConfig(temperature=1.0, nucleus_p=0.5, seed=0)
        ids, probs = evaluate.candidate_set(logits, cfg)
        assert list(ids) == [0]
        assert probs == pytest.approx([1.0])

    def test_probability_ties_break_to_lowest_id(self):
        logits = np.zeros(5)
        cfg = evaluate.GenConfig(temperature=1.0, nucleus_p=0.4, seed=0)
        ids, _ = evaluate.candidate_set(logits, cfg)
        assert list(ids) == [0, 1]

    def test_top_k_applies_before_nucleus(self):
        logits = np.log(np.array([0.4, 0.3, 0.2, 0.1]))
        cfg = evaluate.GenConfig(temperature=1.0, nucleus_p=1.0, top_k=2, seed=0)
        ids, probs = evaluate.candidate_set(logits, cfg)
        assert list(ids) == [0, 1]
        assert probs == pytest.approx([0.4 / 0.7, 0.3 / 0.7])

    def test_temperature_sharpens(self):
        logits = np.array([2.0, 1.0, 0.0])
        hot = evaluate.candidate_set(logits, evaluate.GenConfig(temperature=2.0, nucleus_p=1.0, seed=0))[1]
        cold = evaluate.candidate_set(logits, evaluate.GenConfig(temperature=0.5, nucleus_p=1.0, seed=0))[1]
        assert cold[0] > hot[0]

    def test_full_nucleus_matches_softmax_frequencies(self):
        """Chi-square oracle: sampling with p=1.0, T=1.0 reproduces softmax."""
        logits = np.array([1.0, 0.0, -1.0])
        expected = np.exp(logits) / np.exp(logits).sum()
        cfg = evaluate.GenConfig(mode="sample", temperature=1.0, nucleus_p=1.0, seed=0)
        rng = np.random.default_rng(42)
        n = 10_000
        counts = np.zeros(3)
        for _ in range(n):
            counts[evaluate._pick(logits, cfg, rng)] += 1
        chi2 = float(((counts - n * expected) ** 2 / (n * expected)).sum())
        # df=2, p=0.999 critical value ~ 13.8
        assert chi2 < 13.8

    def test_bad_config_rejected(self):
        with pytest.raises(evaluate.EvalError):
            evaluate.GenConfig(temperature=0.0).validate()
        with pytest.raises(evaluate.EvalError):
            evaluate.GenConfig(nucleus_p=0.0).validate()
        with pytest.raises(evaluate.EvalError):
            evaluate.GenConfig(mode="beam").validate()


class TestSegmentation:
    def test_eos_after_separator(self, vocab):
        gen = [5, 6, vocab.think_end, 7, 8, vocab.eos]
        res = evaluate._segment([1], gen, True, vocab)
        assert res.cot_segment == [5, 6]
        assert res.answer_segment == [7, 8]
        assert res.terminated == "EOS"

    def test_budget_exhausted_without_separator(self, vocab):
        res = evaluate._segment([1], [5, 5, 5], False, vocab)
        assert res.terminated == "LENGTH"
        assert res.cot_segment == [5, 5, 5]
        assert res.answer_segment == []

    def test_eos_without_separator(self, vocab):
        res = evaluate._segment([1], [5, vocab.eos], True, vocab)
        assert res.terminated == "SEPARATOR_MISSING"

    def test_budget_exhausted_after_separator(self, vocab):
        res = evaluate._segment([1], [5, vocab.think_end, 6], False, vocab)
        assert res.terminated == "LENGTH"
        assert res.answer_segment == [6]


class TestGenerate:
    def test_deterministic_per_seed(self, tiny_ckpt, vocab):
        cfg = evaluate.GenConfig(mode="sample", seed=7, max_new_tokens=12)
        a = evaluate.generate(tiny_ckpt, [vocab.bos, 5, 6], cfg, vocab, rng_seed=123)
        b = evaluate.generate(tiny_ckpt, [vocab.bos, 5, 6], cfg, vocab, rng_seed=123)
        assert a.generated == b.generated

    def test_greedy_ignores_seed(self, tiny_ckpt, vocab):
        cfg1 = evaluate.GenConfig(mode="greedy", seed=1, max_new_tokens=10)
        cfg2 = evaluate.GenConfig(mode="greedy", seed=2, max_new_tokens=10)
        a = evaluate.generate(tiny_ckpt, [vocab.bos, 5], cfg1, vocab)
        b = evaluate.generate(tiny_ckpt, [vocab.bos, 5], cfg2, vocab)
        assert a.generated == b.generated

    def test_respects_token_budget(self, tiny_ckpt, vocab):
        cfg = evaluate.GenConfig(mode="greedy", max_new_tokens=5)
        res = evaluate.generate(tiny_ckpt, [vocab.bos, 3], cfg, vocab)
        assert len(res.generated) <= 5

    def test_stops_at_context_limit(self, tiny_config, vocab):
        ckpt = model.init(tiny_config)
        cfg = evaluate.GenConfig(mode="greedy", max_new_tokens=10_000)
        res = evaluate.generate(ckpt, [vocab.bos, 3], cfg, vocab)
        assert len(res.prompt) + len(res.generated) <= tiny_config.max_context

    def test_prompt_too_long_rejected(self, tiny_config, vocab):
        ckpt = model.init(tiny_config)
        cfg = evaluate.GenConfig(mode="greedy")
        with pytest.raises(evaluate.EvalError):
            evaluate.generate(ckpt, [3] * tiny_config.max_context, cfg, vocab)

    def test_batch_matches_single(self, tiny_ckpt, vocab):
        """Batched decode is item-for-item identical to one-at-a-time decode."""
        cfg = evaluate.GenConfig(mode="sample", seed=11, max_new_tokens=16)
        prompts = [[vocab.bos, 4, 9], [vocab.bos, 2], [vocab.bos, 4, 9, 1, 3]]
        ids = ["x-1", "x-2", "x-3"]
        batched = evaluate.generate_batch(tiny_ckpt, prompts, ids, cfg, vocab)
        for prompt, item_id, got in zip(prompts, ids, batched):
            solo = evaluate.generate(tiny_ckpt, prompt, cfg, vocab,
                                     rng_seed=evaluate.item_seed(cfg.seed, item_id))
            assert got.generated == solo.generated
            assert got.terminated == solo.terminated

    def test_item_seed_stable(self):
        assert evaluate.item_seed(3, "a-001") == evaluate.item_seed(3, "a-001")
        assert evaluate.item_seed(3, "a-001") != evaluate.item_seed(4, "a-001")
        assert evaluate.item_seed(3, "a-001") != evaluate.item_seed(3, "a-002")


class TestExtractAnswer:
    def result_from_text(self, vocab, text, terminated="EOS"):
        return evaluate.GenerationResult(
            prompt=[], generated=[], cot_segment=[],
            answer_segment=vocab.tokenize(text), terminated=terminated)

    def test_well_formed(self, vocab, languages):
        pivot, _ = languages
        res = self.result_from_text(vocab, "the answer is -42")
        assert evaluate.extract_answer(res, pivot, vocab) == -42

    def test_wrong_language_phrase(self, vocab, languages):
        pivot, target = languages
        res = self.result_from_text(vocab, "the answer is 7")
        assert evaluate.extract_answer(res, target, vocab) is None

    def test_trailing_garbage(self, vocab, languages):
        pivot, _ = languages
        res = self.result_from_text(vocab, "the answer is 7 step")
        assert evaluate.extract_answer(res, pivot, vocab) is None

    def test_separator_missing_is_none(self, vocab, languages):
        pivot, _ = languages
        res = self.result_from_text(vocab, "the answer is 7", terminated="SEPARATOR_MISSING")
        assert evaluate.extract_answer(res, pivot, vocab) is None

    def test_empty_answer(self, vocab, languages):
        pivot, _ = languages
        res = self.result_from_text(vocab, "")
        assert evaluate.extract_answer(res, pivot, vocab) is None


class TestConformance:
    def test_pure_pivot_cot(self, vocab, languages):
        pivot, _ = languages
        toks = vocab.tokenize("step 1 : 3 add 4 = 7 ;")
        assert evaluate.conformance(toks, pivot, vocab) == 1.0

    def test_mixed_cot(self, vocab, languages):
        pivot, target = languages
        toks = vocab.tokenize("step pasi add rem")
        assert evaluate.conformance(toks, pivot, vocab) == 0.5
        assert evaluate.conformance(toks, target, vocab) == 0.5

    def test_digits_do_not_count(self, vocab, languages):
        pivot, _ = languages
        toks = vocab.tokenize("1 2 3")
        assert evaluate.conformance(toks, pivot, vocab) == 0.0

    def test_empty_is_zero(self, vocab, languages):
        pivot, _ = languages
        assert evaluate.conformance([], pivot, vocab) == 0.0


class TestScore:
    def test_gold_echo_stub_scores_perfectly(self, tiny_ckpt, vocab, languages, monkeypatch):
        """A stub generator that echoes the gold continuation must score 1.0."""
        samples = [
            corpus.make_sample(corpus.gen_problem(i, max_steps=2), "PIVOTED",
                               f"t-{i:03d}", vocab, languages)
            for i in range(8)
        ]
        gold = {s.id: s for s in samples}

        def fake_batch(ckpt, prompts, ids, cfg, vocab_):
            out = []
            for item_id in ids:
                s = gold[item_id]
                sep = s.tokens.index(vocab_.think_end)
                generated = s.tokens[sep - len(vocab_.tokenize(s.cot_text)):]
                hit_eos = generated[-1] == vocab_.eos
                out.append(evaluate._segment(s.tokens[:sep], generated, hit_eos, vocab_))
            return out

        monkeypatch.setattr(evaluate, "generate_batch", fake_batch)
        pivot, _ = languages
        report, records = evaluate.score(
            tiny_ckpt, samples, evaluate.GenConfig(mode="greedy"), vocab, languages, pivot)
        assert report["accuracy"] == 1.0
        assert report["conformance_mean"] == 1.0
        assert report["n"] == 8
        assert all(r["terminated"] == "EOS" for r in records)
        assert set(report["by_regime"]) == {"PIVOTED"}

    def test_untrained_model_scores_zero_but_runs(self, tiny_ckpt, vocab, languages):
        samples = [
            corpus.make_sample(corpus.gen_problem(i, max_steps=1), "NATIVE",
                               f"u-{i:03d}", vocab, languages)
            for i in range(4)
        ]
        _, target = languages
        cfg = evaluate.GenConfig(mode="sample", seed=0, max_new_tokens=24)
        report, records = evaluate.score(tiny_ckpt, samples, cfg, vocab, languages, target)
        assert 0.0 <= report["accuracy"] <= 1.0
        assert len(records) == 4
        for r in records:
            assert set(r) == {"id", "gold", "predicted", "correct", "terminated",
                              "conformance", "regime"}
            assert r["terminated"] in {"EOS", "SEPARATOR_MISSING", "LENGTH"}

    def test_empty_testset_rejected(self, tiny_ckpt, vocab, languages):
        with pytest.raises(evaluate.EvalError):
            evaluate.score(tiny_ckpt, [], evaluate.GenConfig(), vocab, languages, languages[0])


class TestCorrectionMatrix:
    def rec(self, rid, correct):
        return {"id": rid, "correct": correct}

    def test_exact_fractions(self):
        base = [self.rec("a", True), self.rec("b", True), self.rec("c", False),
                self.rec("d", False), self.rec("e", False), self.rec("f", True)]
        new = [self.rec("a", True), self.rec("b", False), self.rec("c", True),
               self.rec("d", False), self.rec("e", True), self.rec("f", True)]
        m = evaluate.correction_matrix(base, new)
        assert m.cc == Fraction(2, 6)
        assert m.ci == Fraction(1, 6)
        assert m.ic == Fraction(2, 6)
        assert m.ii == Fraction(1, 6)
        assert m.cc + m.ci + m.ic + m.ii == 1
        assert m.acc_base == Fraction(3, 6)
        assert m.acc_new == m.acc_base + m.ic - m.ci == Fraction(4, 6)

    def test_identity_decomposition_holds_randomly(self):
        import random
        rng = random.Random(0)
        for _ in range(50):
            n = rng.randint(1, 30)
            ids = [f"r{i}" for i in range(n)]
            base = [self.rec(i, rng.random() < 0.5) for i in ids]
            new = [self.rec(i, rng.random() < 0.5) for i in ids]
            m = evaluate.correction_matrix(base, new)
            assert m.cc + m.ci + m.ic + m.ii == 1
            assert m.acc_new == m.acc_base + m.ic - m.ci

    def test_mismatched_ids_rejected(self):
        with pytest.raises(evaluate.EvalError):
            evaluate.correction_matrix([self.rec("a", True)], [self.rec("b", True)])

    def test_to_json_shape(self):
        m = evaluate.correction_matrix([self.rec("a", True)], [self.rec("a", False)])
        obj = m.to_json()
        assert obj["n_items"] == 1
        assert obj["rates"]["ci"] == 1.0
        assert obj["counts"]["ci"] == 1
        assert obj["acc_base"] == 1.0 and obj["acc_new"] == 0.0
