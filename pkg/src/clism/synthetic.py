"""Synthetic copy-language corpora for end-to-end experiments.

A synthetic language pairs every source word with a distinct target word
(a bijective dictionary), and translation is word-by-word in the same order,
so the true alignment of every pair is the identity ``i-i``. Source
sentences mix lowercase filler words with capitalized multi-word entity
names; most names are listed in a gazetteer. QA and NER sets reuse the same
dictionary so that a pre-trained encoder has something to transfer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .corpus_io import LabeledSpan, TaggedSentence, spans_to_bio

# A handful of real stopwords among the fillers exercises the span filters.
FILLER_STOPWORDS = ("the", "of", "and", "in", "to", "with", "for", "on", "at", "by")
ENTITY_LABELS = ("PER", "LOC", "ORG")

_ONSETS = "b c d f g h j k l m n p r s t v w z br dr gr kr pl st tr".split()
_VOWELS = "a e i o u ai ou ei".split()
_CODAS = ["", "", "n", "r", "s", "l", "k", "m"]


@dataclass
class SyntheticLanguage:
    fillers: List[str]
    entity_words: List[str]
    dictionary: Dict[str, str]  # lowercase source word -> lowercase target word
    names: List[Tuple[str, ...]]
    name_labels: List[str]
    gazetteer: List[str]

    def translate(self, words: Sequence[str]) -> List[str]:
        out = []
        for w in words:
            t = self.dictionary[w.lower()]
            out.append(t.capitalize() if w[:1].isupper() else t)
        return out


@dataclass
class SyntheticSentence:
    source: List[str]
    target: List[str]
    entities: List[Tuple[int, int, int]]  # (start, end, name index), inclusive

    @property
    def source_text(self) -> str:
        return " ".join(self.source)

    @property
    def target_text(self) -> str:
        return " ".join(self.target)


def _pseudo_words(rng: np.random.Generator, count: int, taken: set) -> List[str]:
    words = []
    while len(words) < count:
        n_syll = int(rng.integers(2, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n_syll)
        ) + _CODAS[rng.integers(len(_CODAS))]
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def make_language(vocab_size: int = 200, seed: int = 0, n_names: int = 120, gazetteer_fraction: float = 0.8) -> SyntheticLanguage:
    """Build a dictionary of ``vocab_size`` source words (60% filler, 40% entity words)."""
    if vocab_size < 40:
        raise ValueError("synthetic vocabulary needs at least 40 source words")
    rng = np.random.default_rng([seed, 0])
    taken = set(FILLER_STOPWORDS)
    n_entity = int(round(0.4 * vocab_size))
    n_filler = vocab_size - n_entity
    fillers = list(FILLER_STOPWORDS) + _pseudo_words(rng, n_filler - len(FILLER_STOPWORDS), taken)
    entity_words = _pseudo_words(rng, n_entity, taken)
    targets = _pseudo_words(rng, vocab_size, taken)
    dictionary = dict(zip(fillers + entity_words, targets))

    names: List[Tuple[str, ...]] = []
    seen = set()
    while len(names) < n_names:
        k = int(rng.choice([1, 2, 3], p=[0.3, 0.45, 0.25]))
        pick = rng.choice(n_entity, size=k, replace=False)
        name = tuple(entity_words[i].capitalize() for i in pick)
        if name not in seen:
            seen.add(name)
            names.append(name)
    labels = [ENTITY_LABELS[int(i)] for i in rng.integers(len(ENTITY_LABELS), size=n_names)]
    listed = rng.random(n_names) < gazetteer_fraction
    gazetteer = [" ".join(n).lower() for n, keep in zip(names, listed) if keep]
    return SyntheticLanguage(fillers, entity_words, dictionary, names, labels, gazetteer)


def sample_sentence(lang: SyntheticLanguage, rng: np.random.Generator, min_len: int = 6, max_len: int = 12) -> SyntheticSentence:
    """Fillers with 1-3 entity names, no word repeated, entities never adjacent."""
    while True:
        k = int(rng.integers(1, 4))
        name_ids = [int(i) for i in rng.choice(len(lang.names), size=k, replace=False)]
        words = [w.lower() for i in name_ids for w in lang.names[i]]
        if len(set(words)) == len(words):
            break
    n_ent = len(words)
    length = int(rng.integers(min_len, max_len + 1))
    n_fill = max(length - n_ent, k)
    fill = [lang.fillers[int(i)] for i in rng.choice(len(lang.fillers), size=n_fill, replace=False)]
    gaps = sorted(int(g) for g in rng.choice(n_fill + 1, size=k, replace=False))
    order = [int(i) for i in rng.permutation(k)]
    source: List[str] = []
    entities = []
    gap_iter = iter(zip(gaps, order))
    nxt = next(gap_iter, None)
    for pos in range(n_fill + 1):
        while nxt is not None and nxt[0] == pos:
            name = lang.names[name_ids[nxt[1]]]
            entities.append((len(source), len(source) + len(name) - 1, name_ids[nxt[1]]))
            source.extend(name)
            nxt = next(gap_iter, None)
        if pos < n_fill:
            source.append(fill[pos])
    return SyntheticSentence(source, lang.translate(source), entities)


def make_sentences(lang: SyntheticLanguage, n: int, seed: int, stream: int = 1) -> List[SyntheticSentence]:
    """``n`` sentences; ``stream`` separates independent draws (train vs held-out)."""
    if n <= 0:
        raise ValueError("number of pairs must be positive")
    rng = np.random.default_rng([seed, stream])
    return [sample_sentence(lang, rng) for _ in range(n)]


def identity_pharaoh(sentences: Sequence[SyntheticSentence]) -> str:
    return "".join(" ".join(f"{i}-{i}" for i in range(len(s.source))) + "\n" for s in sentences)


def qa_records(lang: SyntheticLanguage, sentences: Sequence[SyntheticSentence], seed: int, max_lead: int = 5) -> List[dict]:
    """Cloze-style QA over translated sentences.

    Question: the source words leading up to one entity. Passage: the target
    sentence after 0..``max_lead`` unrelated target filler words, so the
    answer position cannot be read off the question length. Answer: the
    entity's translation. Sentences whose entities all open the sentence
    yield no record.
    """
    rng = np.random.default_rng([seed, 99])
    target_fillers = [lang.dictionary[w] for w in lang.fillers]
    records = []
    for sent in sentences:
        candidates = [ent for ent in sent.entities if ent[0] > 0]
        if not candidates:
            continue
        start, end, _ = candidates[int(rng.integers(len(candidates)))]
        lead_len = int(rng.integers(0, max_lead + 1))
        lead = [target_fillers[int(i)] for i in rng.choice(len(target_fillers), size=lead_len, replace=False)]
        context = lead + sent.target
        a0 = lead_len + start
        records.append(
            {
                "id": f"q{len(records)}",
                "question": " ".join(sent.source[:start]),
                "context": " ".join(context),
                "answer_text": " ".join(context[a0 : a0 + end - start + 1]),
                "answer_start": sum(len(w) + 1 for w in context[:a0]),
            }
        )
    return records


def tagged_sentences(lang: SyntheticLanguage, sentences: Sequence[SyntheticSentence]) -> List[TaggedSentence]:
    """Target sentences tagged with their entities' types."""
    out = []
    for sent in sentences:
        spans = [LabeledSpan(s, e, lang.name_labels[i]) for s, e, i in sent.entities]
        out.append(TaggedSentence(list(sent.target), spans_to_bio(spans, len(sent.target)), spans))
    return out


def write_conll(sentences: Sequence[TaggedSentence], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for sent in sentences:
            for tok, tag in zip(sent.tokens, sent.tags):
                f.write(f"{tok}\t{tag}\n")
            f.write("\n")


def write_jsonl(records: Sequence[dict], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def write_synthetic(
    out_dir: Path | str,
    pairs: int,
    vocab_size: int = 200,
    seed: int = 0,
    qa_train: int = 1024,
    qa_test: int = 256,
    ner_train: int = 512,
    ner_test: int = 128,
) -> Dict[str, Path]:
    """Write the parallel corpus with its identity alignments and gazetteer,
    plus held-out parallel, QA and NER files. Returns the paths by role."""
    if pairs <= 0:
        raise ValueError("number of pairs must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lang = make_language(vocab_size, seed)
    paths: Dict[str, Path] = {}

    train = make_sentences(lang, pairs, seed, stream=1)
    paths["parallel"] = out / "parallel.tsv"
    paths["parallel"].write_text("".join(f"{s.source_text}\t{s.target_text}\n" for s in train), encoding="utf-8")
    paths["alignments"] = out / "parallel.pharaoh"
    paths["alignments"].write_text(identity_pharaoh(train), encoding="utf-8")
    paths["gazetteer"] = out / "gazetteer.txt"
    paths["gazetteer"].write_text("".join(t + "\n" for t in lang.gazetteer), encoding="utf-8")

    heldout = make_sentences(lang, max(pairs // 5, 1), seed, stream=2)
    paths["heldout"] = out / "heldout.tsv"
    paths["heldout"].write_text("".join(f"{s.source_text}\t{s.target_text}\n" for s in heldout), encoding="utf-8")

    for role, n, stream in (("qa_train", qa_train, 3), ("qa_test", qa_test, 4)):
        if n > 0:
            paths[role] = out / f"{role}.jsonl"
            # over-draw: a few sentences open with their only entity and yield no record
            records = qa_records(lang, make_sentences(lang, 2 * n, seed, stream), seed + stream)[:n]
            write_jsonl(records, paths[role])
    for role, n, stream in (("ner_train", ner_train, 5), ("ner_test", ner_test, 6)):
        if n > 0:
            paths[role] = out / f"{role}.conll"
            write_conll(tagged_sentences(lang, make_sentences(lang, n, seed, stream)), paths[role])
    return paths
