"""Corpus readers, vocabulary construction and word-level tokenization.

Three on-disk formats are understood:

* parallel corpus: one ``source<TAB>target`` pair per line (UTF-8)
* tagged corpus: CoNLL two-column ``token<TAB>tag`` blocks with BIO tags,
  sentences separated by blank lines
* QA corpus: JSONL, one ``{id, question, context, answer_text, answer_start}``
  record per line, ``answer_start`` being a character offset into ``context``
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK, QUE = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[QUE]"
SPECIAL_TOKENS: Tuple[str, ...] = (PAD, UNK, CLS, SEP, MASK, QUE)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID, QUE_ID = range(len(SPECIAL_TOKENS))
NUM_SPECIAL = len(SPECIAL_TOKENS)

MAX_SENTENCE_TOKENS = 128

_TOKEN_RE = re.compile(r"\S+")


class CorpusFormatError(ValueError):
    """A corpus file violates its line format. The message names path and line."""


class UnlocatableAnswerError(ValueError):
    """A QA record's answer text is not found at its character offset."""


@dataclass
class Vocabulary:
    token_to_id: Dict[str, int]
    id_to_token: List[str]

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        id_to_token = list(SPECIAL_TOKENS)
        for tok in tokens:
            if tok in SPECIAL_TOKENS:
                raise ValueError(f"corpus token collides with special token {tok!r}")
            id_to_token.append(tok)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        return cls(token_to_id=token_to_id, id_to_token=id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path: Path | str) -> None:
        """Persist as a JSON array of the non-special tokens (index = id - 6)."""
        Path(path).write_text(
            json.dumps(self.id_to_token[NUM_SPECIAL:], ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: Path | str) -> "Vocabulary":
        tokens = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(tokens, list):
            raise ValueError(f"{path}: vocabulary file must hold a JSON array")
        return cls.from_tokens(tokens)


@dataclass(frozen=True)
class ParallelPair:
    pair_id: int
    source_tokens: Tuple[int, ...]
    target_tokens: Tuple[int, ...]
    source_text: str
    target_text: str

    @property
    def source_surface(self) -> List[str]:
        return self.source_text.split()

    @property
    def target_surface(self) -> List[str]:
        return self.target_text.split()


@dataclass(frozen=True)
class LabeledSpan:
    """Inclusive token span ``[start, end]`` with a label."""

    start: int
    end: int
    label: str

    def __post_init__(self) -> None:
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid span ({self.start}, {self.end})")

    def as_tuple(self) -> Tuple[int, int, str]:
        return (self.start, self.end, self.label)


@dataclass
class TaggedSentence:
    tokens: List[str]
    tags: List[str]
    spans: List[LabeledSpan] = field(default_factory=list)


@dataclass
class QaExample:
    record_id: str
    question_tokens: List[int]
    passage_tokens: List[int]
    passage_surface: List[str]
    answer: LabeledSpan
    answer_text: str


def split_words(text: str) -> List[str]:
    return text.lower().split()


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    """Whitespace-split, lowercase, map to ids (OOV -> [UNK])."""
    return [vocab.token_to_id.get(tok, UNK_ID) for tok in split_words(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


def _corpus_texts(path: Path) -> Iterator[str]:
    """Yield every text field of a corpus file, whatever its format."""
    with open(path, "r", encoding="utf-8") as f:
        if path.suffix == ".jsonl":
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
                yield rec.get("question", "")
                yield rec.get("context", "")
        elif path.suffix == ".conll":
            for line in f:
                if line.strip():
                    yield line.split("\t", 1)[0]
        else:
            for line in f:
                yield from line.rstrip("\r\n").split("\t")


def build_vocabulary(corpus_paths: Sequence[Path | str], min_count: int = 1) -> Vocabulary:
    """Count tokens over all files and keep those seen at least ``min_count`` times.

    Non-special ids are ordered by descending frequency, ties broken
    lexicographically, so the result does not depend on line order.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for p in corpus_paths:
        path = Path(p)
        try:
            for text in _corpus_texts(path):
                counts.update(split_words(text))
        except OSError as exc:
            raise OSError(f"cannot read corpus file {path}: {exc}") from exc
    if not counts:
        raise ValueError("empty corpus")
    kept = [tok for tok, c in counts.items() if c >= min_count and tok not in SPECIAL_TOKENS]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary.from_tokens(kept)


def load_parallel_corpus(
    path: Path | str,
    vocab: Vocabulary,
    max_tokens: int = MAX_SENTENCE_TOKENS,
    stats: Optional[Dict[str, int]] = None,
) -> List[ParallelPair]:
    """Read a ``source<TAB>target`` file into pairs.

    ``pair_id`` is the 1-based line number, which is also the line of the
    matching Pharaoh alignment file. Sides longer than ``max_tokens`` are
    truncated; pairs with an empty side are skipped and counted in
    ``stats["skipped"]``.
    """
    path = Path(path)
    pairs: List[ParallelPair] = []
    skipped = truncated = 0
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected 'source<TAB>target', got {len(fields)} field(s)"
                )
            src_words, tgt_words = fields[0].split(), fields[1].split()
            if not src_words or not tgt_words:
                skipped += 1
                continue
            src_text, tgt_text = fields[0].strip(), fields[1].strip()
            if len(src_words) > max_tokens or len(tgt_words) > max_tokens:
                truncated += 1
                src_words, tgt_words = src_words[:max_tokens], tgt_words[:max_tokens]
                src_text, tgt_text = " ".join(src_words), " ".join(tgt_words)
            pairs.append(
                ParallelPair(
                    pair_id=lineno,
                    source_tokens=tuple(tokenize(src_text, vocab)),
                    target_tokens=tuple(tokenize(tgt_text, vocab)),
                    source_text=src_text,
                    target_text=tgt_text,
                )
            )
    if skipped:
        logger.warning("%s: skipped %d pair(s) with an empty side", path, skipped)
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
        stats["truncated"] = stats.get("truncated", 0) + truncated
    return pairs


def bio_to_spans(tags: Sequence[str]) -> List[LabeledSpan]:
    """Decode BIO tags into inclusive spans.

    An ``I-X`` that does not continue an open ``X`` entity starts a new one
    (the usual CoNLL repair).
    """
    spans: List[LabeledSpan] = []
    start: Optional[int] = None
    label: Optional[str] = None
    for i, tag in enumerate(tags):
        if tag == "O":
            if start is not None:
                spans.append(LabeledSpan(start, i - 1, label))  # type: ignore[arg-type]
            start = label = None
            continue
        prefix, _, typ = tag.partition("-")
        if prefix not in ("B", "I") or not typ:
            raise ValueError(f"invalid BIO tag {tag!r} at position {i}")
        if prefix == "B" or start is None or typ != label:
            if start is not None:
                spans.append(LabeledSpan(start, i - 1, label))  # type: ignore[arg-type]
            start, label = i, typ
    if start is not None:
        spans.append(LabeledSpan(start, len(tags) - 1, label))  # type: ignore[arg-type]
    return spans


def spans_to_bio(spans: Iterable[LabeledSpan], length: int) -> List[str]:
    tags = ["O"] * length
    for span in spans:
        tags[span.start] = f"B-{span.label}"
        for k in range(span.start + 1, span.end + 1):
            tags[k] = f"I-{span.label}"
    return tags


def load_tagged_corpus(path: Path | str) -> List[TaggedSentence]:
    path = Path(path)
    sentences: List[TaggedSentence] = []
    tokens: List[str] = []
    tags: List[str] = []

    def flush() -> None:
        if tokens:
            sentences.append(TaggedSentence(list(tokens), list(tags), bio_to_spans(tags)))
            tokens.clear()
            tags.clear()

    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise CorpusFormatError(f"{path}:{lineno}: expected 'token<TAB>tag': {line!r}")
            tag = parts[1].strip()
            if tag != "O" and not re.fullmatch(r"[BI]-\S+", tag):
                raise CorpusFormatError(f"{path}:{lineno}: invalid BIO tag {tag!r}")
            tokens.append(parts[0])
            tags.append(tag)
    flush()
    return sentences


def _char_offsets(text: str) -> List[Tuple[int, int]]:
    return [(m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def _norm_ws(text: str) -> str:
    return " ".join(text.lower().split())


def load_qa_corpus(path: Path | str, vocab: Vocabulary) -> List[QaExample]:
    """Read flat JSONL QA records and project each answer onto passage tokens."""
    path = Path(path)
    examples: List[QaExample] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                record_id = str(rec.get("id", lineno))
                question, context = rec["question"], rec["context"]
                answer_text, answer_start = rec["answer_text"], int(rec["answer_start"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed QA record ({exc})") from exc
            answer_end = answer_start + len(answer_text)
            if (
                not answer_text.strip()
                or answer_start < 0
                or _norm_ws(context[answer_start:answer_end]) != _norm_ws(answer_text)
            ):
                raise UnlocatableAnswerError(f"{path}:{lineno}: unlocatable answer in record {record_id}")
            offsets = _char_offsets(context)
            covered = [k for k, (s, e) in enumerate(offsets) if s < answer_end and e > answer_start]
            if not covered:
                raise UnlocatableAnswerError(f"{path}:{lineno}: unlocatable answer in record {record_id}")
            examples.append(
                QaExample(
                    record_id=record_id,
                    question_tokens=tokenize(question, vocab),
                    passage_tokens=tokenize(context, vocab),
                    passage_surface=split_words(context),
                    answer=LabeledSpan(covered[0], covered[-1], "ANS"),
                    answer_text=answer_text,
                )
            )
    return examples
