"""Decoding, answer extraction, scoring, and correction-rate matrices."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import corpus, model


class EvalError(Exception):
    pass


@dataclass
class GenConfig:
    mode: str = "sample"          # "greedy" or "sample"
    temperature: float = 0.6
    nucleus_p: float = 0.95
    top_k: int | None = None      # optional integer top-k restriction
    max_new_tokens: int = 192
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("greedy", "sample"):
            raise EvalError(f"unknown mode {self.mode!r}")
        if self.mode == "sample" and self.temperature <= 0:
            raise EvalError("temperature must be > 0 when sampling")
        if not 0.0 < self.nucleus_p <= 1.0:
            raise EvalError("nucleus_p must lie in (0, 1]")
        if self.top_k is not None and self.top_k < 1:
            raise EvalError("top_k must be >= 1")
        if self.max_new_tokens < 1:
            raise EvalError("max_new_tokens must be >= 1")


@dataclass
class GenerationResult:
    prompt: list
    generated: list
    cot_segment: list      # generated tokens before the first separator
    answer_segment: list   # generated tokens after it (separator and EOS excluded)
    terminated: str        # "EOS", "SEPARATOR_MISSING", or "LENGTH"


def item_seed(base_seed: int, item_id: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{item_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def candidate_set(logits: np.ndarray, cfg: GenConfig):
    """Token ids and renormalized probabilities after temperature, top-k and
    nucleus truncation. Sort order breaks probability ties by lowest id."""
    z = np.asarray(logits, dtype=np.float64) / cfg.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.lexsort((np.arange(len(p)), -p))
    if cfg.top_k is not None:
        order = order[: cfg.top_k]
    probs = p[order]
    cum = np.cumsum(probs)
    cut = int(np.searchsorted(cum, cfg.nucleus_p * cum[-1] - 1e-12)) + 1
    ids = order[:cut]
    probs = probs[:cut]
    return ids, probs / probs.sum()


def _pick(logits: np.ndarray, cfg: GenConfig, rng) -> int:
    if cfg.mode == "greedy":
        return int(np.argmax(logits))
    ids, probs = candidate_set(logits, cfg)
    u = rng.random()
    return int(ids[np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(ids) - 1)])


def _segment(prompt, generated, terminated_eos: bool, vocab: corpus.Vocab) -> GenerationResult:
    if vocab.think_end in generated:
        sep = generated.index(vocab.think_end)
        cot = generated[:sep]
        answer = [t for t in generated[sep + 1 :] if t != vocab.eos]
        terminated = "EOS" if terminated_eos else "LENGTH"
    else:
        cot = [t for t in generated if t != vocab.eos]
        answer = []
        # EOS without a separator means the trace never terminated properly;
        # running out of budget is reported as LENGTH either way.
        terminated = "SEPARATOR_MISSING" if terminated_eos else "LENGTH"
    return GenerationResult(prompt=list(prompt), generated=list(generated),
                            cot_segment=cot, answer_segment=answer, terminated=terminated)


def generate(ckpt: model.Checkpoint, prompt, cfg: GenConfig, vocab: corpus.Vocab,
             rng_seed: int | None = None) -> GenerationResult:
    """Autoregressive decode of a single prompt with its own RNG stream."""
    cfg.validate()
    prompt = list(prompt)
    if len(prompt) >= ckpt.config.max_context:
        raise EvalError("prompt does not fit the model context")
    rng = np.random.default_rng(cfg.seed if rng_seed is None else rng_seed)
    seq = list(prompt)
    generated = []
    hit_eos = False
    for _ in range(cfg.max_new_tokens):
        if len(seq) >= ckpt.config.max_context:
            break
        trace = model.forward(ckpt, seq, need_cache=False)
        tok = _pick(trace.logits[0, -1], cfg, rng)
        generated.append(tok)
        seq.append(tok)
        if tok == vocab.eos:
            hit_eos = True
            break
    return _segment(prompt, generated, hit_eos, vocab)


def generate_batch(ckpt: model.Checkpoint, prompts: list, ids: list, cfg: GenConfig,
                   vocab: corpus.Vocab) -> list:
    """Decode many prompts, grouped by prompt length for batched forwards.

    Each item draws from its own seeded RNG stream, so results are identical
    to one-at-a-time generation regardless of grouping.
    """
    cfg.validate()
    results = [None] * len(prompts)
    by_len = {}
    for idx, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(idx)
    for plen, idxs in sorted(by_len.items()):
        if plen >= ckpt.config.max_context:
            raise EvalError("prompt does not fit the model context")
        seqs = [list(prompts[i]) for i in idxs]
        rngs = [np.random.default_rng(item_seed(cfg.seed, ids[i])) for i in idxs]
        gens = [[] for _ in idxs]
        done = [False] * len(idxs)
        hit_eos = [False] * len(idxs)
        for _ in range(cfg.max_new_tokens):
            if all(done) or len(seqs[0]) >= ckpt.config.max_context:
                break
            trace = model.forward(ckpt, np.asarray(seqs, dtype=np.int64), need_cache=False)
            for j in range(len(idxs)):
                if done[j]:
                    seqs[j].append(vocab.pad)
                    continue
                tok = _pick(trace.logits[j, -1], cfg, rngs[j])
                gens[j].append(tok)
                seqs[j].append(tok)
                if tok == vocab.eos:
                    done[j] = True
                    hit_eos[j] = True
        for j, idx in enumerate(idxs):
            results[idx] = _segment(prompts[idx], gens[j], hit_eos[j], vocab)
    return results


def extract_answer(result: GenerationResult, lang: corpus.Language, vocab: corpus.Vocab):
    """Signed integer parsed from the answer segment, or None."""
    if result.terminated == "SEPARATOR_MISSING" or not result.answer_segment:
        return None
    try:
        text = vocab.detokenize(result.answer_segment)
    except corpus.UnknownWordError:
        return None
    words = text.split()
    phrase = lang.lexicon["answer_phrase"].split()
    if words[: len(phrase)] != phrase:
        return None
    rest = words[len(phrase) :]
    if len(rest) != 1 or not corpus._NUMBER_RE.fullmatch(rest[0]):
        return None
    return int(rest[0])


def conformance(cot_tokens, expected: corpus.Language, vocab: corpus.Vocab) -> float:
    """Fraction of lexical trace tokens drawn from the expected lexicon."""
    word_ids = [t for t in cot_tokens if t in vocab.id_to_word and vocab.is_lexical(t)]
    if not word_ids:
        return 0.0
    expected_words = expected.words()
    hits = sum(1 for t in word_ids if vocab.id_to_word[t] in expected_words)
    return hits / len(word_ids)


def score(ckpt: model.Checkpoint, testset, cfg: GenConfig, vocab: corpus.Vocab,
          languages, expected_cot_lang: corpus.Language):
    """Exact-match accuracy plus trace-language conformance.

    Returns (report dict, per-item record list). Gold answers come from the
    testset samples' answer segments.
    """
    if not testset:
        raise EvalError("empty testset")
    by_id = {lang.id: lang for lang in languages}
    prompts = [[vocab.bos] + vocab.tokenize(s.question_text) for s in testset]
    results = generate_batch(ckpt, prompts, [s.id for s in testset], cfg, vocab)
    records = []
    for s, res in zip(testset, results):
        gold = s.answer_value()
        predicted = extract_answer(res, by_id[s.answer_lang], vocab)
        records.append({
            "id": s.id,
            "gold": gold,
            "predicted": predicted,
            "correct": bool(predicted is not None and predicted == gold),
            "terminated": res.terminated,
            "conformance": conformance(res.cot_segment, expected_cot_lang, vocab),
            "regime": s.regime,
        })
    report = _summarize(records)
    return report, records


def _summarize(records) -> dict:
    def agg(rs):
        return {
            "accuracy": sum(r["correct"] for r in rs) / len(rs),
            "n": len(rs),
            "conformance_mean": sum(r["conformance"] for r in rs) / len(rs),
        }

    regimes = sorted({r["regime"] for r in records})
    out = agg(records)
    out["by_regime"] = {reg: agg([r for r in records if r["regime"] == reg]) for reg in regimes}
    return out


@dataclass
class CorrectionMatrix:
    n_items: int
    n_cc: int  # base correct -> new correct
    n_ci: int  # base correct -> new incorrect
    n_ic: int  # base incorrect -> new correct
    n_ii: int  # base incorrect -> new incorrect

    @property
    def cc(self) -> Fraction:
        return Fraction(self.n_cc, self.n_items)

    @property
    def ci(self) -> Fraction:
        return Fraction(self.n_ci, self.n_items)

    @property
    def ic(self) -> Fraction:
        return Fraction(self.n_ic, self.n_items)

    @property
    def ii(self) -> Fraction:
        return Fraction(self.n_ii, self.n_items)

    @property
    def acc_base(self) -> Fraction:
        return self.cc + self.ci

    @property
    def acc_new(self) -> Fraction:
        return self.cc + self.ic

    def to_json(self) -> dict:
        return {
            "n_items": self.n_items,
            "counts": {"cc": self.n_cc, "ci": self.n_ci, "ic": self.n_ic, "ii": self.n_ii},
            "rates": {"cc": float(self.cc), "ci": float(self.ci),
                      "ic": float(self.ic), "ii": float(self.ii)},
            "acc_base": float(self.acc_base),
            "acc_new": float(self.acc_new),
        }


def correction_matrix(base_records, new_records) -> CorrectionMatrix:
    """Correctness-transition counts between two per-item record sets."""
    base = {r["id"]: bool(r["correct"]) for r in base_records}
    new = {r["id"]: bool(r["correct"]) for r in new_records}
    if set(base) != set(new):
        raise EvalError("record id sets differ")
    if not base:
        raise EvalError("empty record sets")
    counts = {"cc": 0, "ci": 0, "ic": 0, "ii": 0}
    for iid, b in base.items():
        n = new[iid]
        key = ("c" if b else "i") + ("c" if n else "i")
        counts[key] += 1
    return CorrectionMatrix(n_items=len(base), n_cc=counts["cc"], n_ci=counts["ci"],
                            n_ic=counts["ic"], n_ii=counts["ii"])
