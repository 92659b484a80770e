"""Synthetic QA data: toy n-gram generator, cloze candidate proposals,
likelihood and roundtrip filtering, shifted two-domain corpus construction,
and SQuAD-format file IO.

The bundled generator is intentionally simple: it samples answer spans from a
context, turns them into cloze questions (span replaced by a placeholder), and
scores the answer tokens with an add-one-smoothed n-gram table fitted on the
raw contexts. Any external generator can be substituted by writing candidate
records or a SQuAD-format dataset file.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import SOURCE, TARGET_SYNTHETIC, SpanModel, TokenizationError, predict_span, tokenize_sample

log = logging.getLogger(__name__)

PLACEHOLDER = "___"
START_SYMBOL = "<s>"
UNK_SYMBOL = "<unk>"

CANDIDATE_POOL_FACTOR = 4  # proposals per context ahead of top-k filtering


class DatasetError(ValueError):
    """Dataset file is structurally malformed."""


@dataclass(frozen=True)
class RawQASample:
    question: str
    context: str
    answer_text: str
    answer_start: int
    sample_id: str = ""

    def __post_init__(self):
        got = self.context[self.answer_start:self.answer_start + len(self.answer_text)]
        if got != self.answer_text or not self.answer_text:
            raise ValueError(
                f"answer {self.answer_text!r} not at offset {self.answer_start} of context"
            )


@dataclass(frozen=True)
class ContextOnly:
    context: str
    domain_id: str = ""

    def __post_init__(self):
        if not self.context.strip():
            raise ValueError("empty context")


@dataclass(frozen=True)
class GenCandidate:
    context_id: str
    context: str
    question: str
    answer_text: str
    answer_start: int
    token_probs: tuple[float, ...]
    lm_score: float

    def __post_init__(self):
        prod = math.prod(self.token_probs)
        if abs(prod - self.lm_score) > 1e-12:
            raise ValueError("lm_score does not equal the product of token probabilities")
        if not 0.0 < self.lm_score <= 1.0:
            raise ValueError(f"lm_score {self.lm_score} outside (0, 1]")
        if self.context[self.answer_start:self.answer_start + len(self.answer_text)] != self.answer_text:
            raise ValueError("candidate answer is not a substring at the recorded offset")


@dataclass
class DomainDataset:
    samples: list[RawQASample]
    domain_tag: str  # "source" | "target_synthetic"
    provenance: str  # "human" | "synthetic"
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.samples)


# -- toy likelihood model -----------------------------------------------------

_WORD = re.compile(r"\S+")


def _words_with_offsets(text: str) -> list[tuple[str, int]]:
    return [(m.group(0), m.start()) for m in _WORD.finditer(text)]


@dataclass
class ToyGenerator:
    """Add-one-smoothed n-gram tables over whitespace tokens."""

    order: str  # "unigram" | "bigram"
    vocab: set[str]
    unigram_counts: Counter
    total_tokens: int
    bigram_counts: dict[str, Counter]
    context_totals: Counter
    seed: int

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _key(self, word: str) -> str:
        return word if word in self.vocab else UNK_SYMBOL

    def unigram_prob(self, word: str) -> float:
        return (self.unigram_counts[self._key(word)] + 1) / (self.total_tokens + self.vocab_size)

    def bigram_prob(self, word: str, prev: str | None) -> float:
        prev_key = START_SYMBOL if prev is None else self._key(prev)
        counts = self.bigram_counts.get(prev_key, Counter())
        return (counts[self._key(word)] + 1) / (self.context_totals[prev_key] + self.vocab_size)

    def token_probs(self, words: Sequence[str], prev: str | None) -> tuple[float, ...]:
        if self.order == "unigram":
            return tuple(self.unigram_prob(w) for w in words)
        probs = []
        for w in words:
            probs.append(self.bigram_prob(w, prev))
            prev = w
        return tuple(probs)


def fit_toy_generator(corpus: Sequence[ContextOnly], order: str = "bigram", seed: int = 0) -> ToyGenerator:
    """Count-based maximum-likelihood fit with add-one smoothing; the <unk>
    symbol is part of the vocabulary so unseen words keep positive mass."""
    if order not in ("unigram", "bigram"):
        raise ValueError(f"unknown model order {order!r}")
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    unigrams: Counter = Counter()
    bigrams: dict[str, Counter] = {}
    context_totals: Counter = Counter()
    total = 0
    for ctx in corpus:
        words = [w for w, _ in _words_with_offsets(ctx.context)]
        prev = START_SYMBOL
        for w in words:
            unigrams[w] += 1
            total += 1
            bigrams.setdefault(prev, Counter())[w] += 1
            context_totals[prev] += 1
            prev = w
    vocab = set(unigrams) | {UNK_SYMBOL}
    return ToyGenerator(
        order=order,
        vocab=vocab,
        unigram_counts=unigrams,
        total_tokens=total,
        bigram_counts=bigrams,
        context_totals=context_totals,
        seed=seed,
    )


# -- candidate generation and filtering ----------------------------------------

def _cloze_question(words: list[str], start: int, length: int, window: int) -> str:
    before = words[max(0, start - window):start]
    after = words[start + length:start + length + window]
    return " ".join(before + [PLACEHOLDER] + after)


def generate_candidates(
    gen: ToyGenerator,
    ctx: ContextOnly,
    n: int,
    seed: int,
    max_answer_words: int = 6,
    question_window: int = 3,
) -> list[GenCandidate]:
    """Propose up to n distinct answer spans with cloze questions, scored by
    the product of the toy model's per-token probabilities."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pairs = _words_with_offsets(ctx.context)
    if not pairs:
        raise ValueError("context shorter than the minimum one-word span")
    words = [w for w, _ in pairs]
    n_words = len(words)
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    seen: set[tuple[int, int]] = set()
    spans: list[tuple[int, int]] = []
    for _ in range(20 * n):
        if len(spans) == n:
            break
        start = int(rng.integers(0, n_words))
        length = 1 + int(rng.integers(0, min(max_answer_words, n_words - start)))
        if (start, length) not in seen:
            seen.add((start, length))
            spans.append((start, length))

    candidates = []
    for start, length in spans:
        char_start = pairs[start][1]
        last_word, last_off = pairs[start + length - 1]
        answer_text = ctx.context[char_start:last_off + len(last_word)]
        probs = gen.token_probs(words[start:start + length], words[start - 1] if start > 0 else None)
        candidates.append(
            GenCandidate(
                context_id=ctx.domain_id,
                context=ctx.context,
                question=_cloze_question(words, start, length, question_window),
                answer_text=answer_text,
                answer_start=char_start,
                token_probs=probs,
                lm_score=math.prod(probs),
            )
        )
    return candidates


def lm_filter(candidates: Sequence[GenCandidate], k: int) -> list[GenCandidate]:
    """Top-k candidates by likelihood score; stable, so ties keep input order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return sorted(candidates, key=lambda c: -c.lm_score)[:k]


def roundtrip_filter(
    candidates: Sequence[GenCandidate],
    qa_model: SpanModel,
    max_answer_len: int = 48,
) -> list[GenCandidate]:
    """Keep candidates whose predicted answer, normalized, equals the generated
    answer. Candidates the model cannot tokenize are dropped, not fatal."""
    from .evaluation import normalize_answer  # local import to avoid a cycle

    kept = []
    for cand in candidates:
        try:
            ts = tokenize_sample(
                cand.question, cand.context, cand.answer_start, cand.answer_text,
                domain_tag=TARGET_SYNTHETIC, max_len=qa_model.config.max_len,
            )
        except TokenizationError as err:
            log.warning("roundtrip: dropping untokenizable candidate (%s)", err)
            continue
        logits = qa_model.span_logits(qa_model.encode(ts))
        s, e = predict_span(logits, ts.context_mask, max_answer_len)
        ctx_bytes = cand.context.encode("utf-8")
        offset = ts.context_token_start
        predicted = ctx_bytes[s - offset:e - offset + 1].decode("utf-8", errors="ignore")
        if normalize_answer(predicted) == normalize_answer(cand.answer_text):
            kept.append(cand)
    return kept


def candidates_to_dataset(candidates: Sequence[GenCandidate], domain_tag: str = TARGET_SYNTHETIC) -> DomainDataset:
    samples = [
        RawQASample(
            question=c.question,
            context=c.context,
            answer_text=c.answer_text,
            answer_start=c.answer_start,
            sample_id=f"{c.context_id}-q{i}",
        )
        for i, c in enumerate(candidates)
    ]
    return DomainDataset(samples=samples, domain_tag=domain_tag, provenance="synthetic")


# -- shifted two-domain corpus --------------------------------------------------

@dataclass(frozen=True)
class DomainShiftSpec:
    """Controls for the artificial source/target split: a shared word list with
    per-domain mixture weights and per-domain answer-length distributions."""

    vocab_words: int = 30
    n_source: int = 150
    n_target_contexts: int = 60
    qa_per_target_context: int = 2
    context_words: tuple[int, int] = (8, 12)
    source_answer_mean: float = 1.89
    target_answer_mean: float = 4.43
    vocab_shift: float = 1.0  # 0 = identical token frequency profiles
    question_window: int = 3

    def __post_init__(self):
        if self.vocab_words < 2:
            raise ValueError("vocab_words must be >= 2")
        if self.n_source < 1 or self.n_target_contexts < 1 or self.qa_per_target_context < 1:
            raise ValueError("corpus sizes must be positive")
        lo, hi = self.context_words
        if not 1 <= lo <= hi:
            raise ValueError(f"bad context word range {self.context_words}")
        if self.source_answer_mean < 1.0 or self.target_answer_mean < 1.0:
            raise ValueError("answer-length means must be >= 1 word")
        if not 0.0 <= self.vocab_shift <= 1.0:
            raise ValueError("vocab_shift must lie in [0, 1]")
        if self.question_window < 0:
            raise ValueError("question_window must be >= 0")


_SYLLABLES = ("ba", "re", "mi", "to", "lu", "ka", "si", "no", "ve", "du",
              "po", "za", "fe", "gu", "hi", "wo", "ny", "che", "dra", "pli")


def _word_list(count: int) -> list[str]:
    words = []
    i = 0
    while len(words) < count:
        a = _SYLLABLES[i % len(_SYLLABLES)]
        b = _SYLLABLES[(i // len(_SYLLABLES) + 3 * i) % len(_SYLLABLES)]
        w = a + b
        if w not in words:
            words.append(w)
        i += 1
    return words


def _domain_weights(count: int, shift: float) -> tuple[np.ndarray, np.ndarray]:
    base = 1.0 / (1.0 + np.arange(count))
    source = base / base.sum()
    reversed_ = source[::-1]
    target = (1.0 - shift) * source + shift * reversed_
    target = target / target.sum()
    if np.any(source <= 0) or np.any(target <= 0):
        raise ValueError("degenerate vocabulary weights")
    return source, target


def _sample_answer_len(rng: np.random.Generator, mean: float, n_words: int) -> int:
    return min(1 + int(rng.poisson(mean - 1.0)), n_words)


def _make_qa(rng, words_list, weights, spec, answer_mean, sample_id):
    lo, hi = spec.context_words
    n_words = int(rng.integers(lo, hi + 1))
    words = list(rng.choice(words_list, size=n_words, p=weights))
    context = " ".join(words)
    length = _sample_answer_len(rng, answer_mean, n_words)
    start = int(rng.integers(0, n_words - length + 1))
    char_start = sum(len(w) + 1 for w in words[:start])
    answer_text = " ".join(words[start:start + length])
    question = _cloze_question(words, start, length, spec.question_window)
    return RawQASample(
        question=question,
        context=context,
        answer_text=answer_text,
        answer_start=char_start,
        sample_id=sample_id,
    )


def make_synthetic_domains(
    spec: DomainShiftSpec, seed: int = 0
) -> tuple[DomainDataset, list[ContextOnly], DomainDataset]:
    """Build a labeled source corpus, an unlabeled target context corpus, and
    the hidden target gold labels (for evaluation only, never for training)."""
    words_list = np.array(_word_list(spec.vocab_words))
    w_source, w_target = _domain_weights(spec.vocab_words, spec.vocab_shift)

    rng_s = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    source_samples = [
        _make_qa(rng_s, words_list, w_source, spec, spec.source_answer_mean, f"src-{i:04d}")
        for i in range(spec.n_source)
    ]
    source = DomainDataset(samples=source_samples, domain_tag=SOURCE, provenance="human")

    rng_t = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    contexts: list[ContextOnly] = []
    gold: list[RawQASample] = []
    for i in range(spec.n_target_contexts):
        first = _make_qa(rng_t, words_list, w_target, spec, spec.target_answer_mean, f"tgt-{i:04d}-0")
        contexts.append(ContextOnly(context=first.context, domain_id=f"tgt-{i:04d}"))
        gold.append(first)
        words = first.context.split(" ")
        for j in range(1, spec.qa_per_target_context):
            length = _sample_answer_len(rng_t, spec.target_answer_mean, len(words))
            start = int(rng_t.integers(0, len(words) - length + 1))
            char_start = sum(len(w) + 1 for w in words[:start])
            gold.append(
                RawQASample(
                    question=_cloze_question(words, start, length, spec.question_window),
                    context=first.context,
                    answer_text=" ".join(words[start:start + length]),
                    answer_start=char_start,
                    sample_id=f"tgt-{i:04d}-{j}",
                )
            )
    target_gold = DomainDataset(samples=gold, domain_tag=TARGET_SYNTHETIC, provenance="human")
    return source, contexts, target_gold


# -- SQuAD-format IO -------------------------------------------------------------

def load_squad_json(path, domain_tag: str = SOURCE, provenance: str = "human") -> DomainDataset:
    """Read a SQuAD v1.1 layout file. Structural problems raise DatasetError
    with a path into the document; answer/offset mismatches reject the sample
    and are counted on the returned dataset."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise DatasetError(f"{path}: invalid JSON: {err}") from err

    def need(obj, key, where):
        if not isinstance(obj, dict) or key not in obj:
            raise DatasetError(f"{path}: missing {key!r} at {where}")
        return obj[key]

    samples: list[RawQASample] = []
    rejected = 0
    for di, article in enumerate(need(doc, "data", "$")):
        for pi, para in enumerate(need(article, "paragraphs", f"data[{di}]")):
            where = f"data[{di}].paragraphs[{pi}]"
            context = need(para, "context", where)
            for qi, qa in enumerate(need(para, "qas", where)):
                qwhere = f"{where}.qas[{qi}]"
                question = need(qa, "question", qwhere)
                answers = need(qa, "answers", qwhere)
                if not answers:
                    raise DatasetError(f"{path}: empty answers at {qwhere}")
                ans = answers[0]
                text = need(ans, "text", f"{qwhere}.answers[0]")
                start = need(ans, "answer_start", f"{qwhere}.answers[0]")
                try:
                    samples.append(
                        RawQASample(
                            question=question,
                            context=context,
                            answer_text=text,
                            answer_start=int(start),
                            sample_id=str(qa.get("id", f"{di}-{pi}-{qi}")),
                        )
                    )
                except ValueError:
                    rejected += 1
    if rejected:
        log.warning("%s: rejected %d sample(s) with answer/offset mismatches", path, rejected)
    return DomainDataset(samples=samples, domain_tag=domain_tag, provenance=provenance, rejected=rejected)


def write_dataset(path, dataset: DomainDataset, title: str = "synthetic") -> None:
    """Write SQuAD v1.1 layout; samples sharing a context are grouped into one
    paragraph in first-occurrence order."""
    paragraphs: dict[str, list[RawQASample]] = {}
    for s in dataset.samples:
        paragraphs.setdefault(s.context, []).append(s)
    doc = {
        "version": "1.1",
        "data": [
            {
                "title": title,
                "paragraphs": [
                    {
                        "context": context,
                        "qas": [
                            {
                                "question": s.question,
                                "id": s.sample_id,
                                "answers": [
                                    {"text": s.answer_text, "answer_start": s.answer_start}
                                ],
                            }
                            for s in group
                        ],
                    }
                    for context, group in paragraphs.items()
                ],
            }
        ],
    }
    Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def write_contexts(path, contexts: Iterable[ContextOnly]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ctx in contexts:
            fh.write(json.dumps({"id": ctx.domain_id, "context": ctx.context}, ensure_ascii=False) + "\n")


def load_contexts(path) -> list[ContextOnly]:
    contexts = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                contexts.append(ContextOnly(context=rec["context"], domain_id=str(rec.get("id", lineno))))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise DatasetError(f"{path}:{lineno + 1}: bad context record: {err}") from err
    return contexts


def write_candidates(path, candidates: Iterable[GenCandidate]) -> None:
    """One JSON record per line: context id, question, answer, offset,
    per-token probabilities, likelihood score."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in candidates:
            fh.write(json.dumps({
                "context_id": c.context_id,
                "question": c.question,
                "answer": c.answer_text,
                "answer_start": c.answer_start,
                "token_probs": list(c.token_probs),
                "lm_score": c.lm_score,
            }, ensure_ascii=False) + "\n")


def derive_seed(*entropy: int) -> int:
    """Stable child seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])
