"""Informative span selection, projection to the target side, and
construction of masked-span pre-training instances.

An instance is ``[CLS] masked-source [SEP] target [SEP]`` where every selected
source span collapses to a single ``[QUE]`` token whose answer is the aligned
target span. MLM corruption is layered on top, never touching answer tokens.
"""

from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .aligner import Alignment
from .corpus_io import (
    CLS_ID,
    MASK_ID,
    NUM_SPECIAL,
    PAD_ID,
    QUE_ID,
    SEP_ID,
    LabeledSpan,
    ParallelPair,
    Vocabulary,
)

ANNOTATION = "annotation"
GAZETTEER = "gazetteer"
CAPITALIZATION = "capitalization-heuristic"
_ORIGIN_PRIORITY = {ANNOTATION: 0, GAZETTEER: 1, CAPITALIZATION: 2}

MAX_SPAN_TOKENS = 10
IGNORE_LABEL = -1


class InstanceDropped(Exception):
    """The pair cannot yield a valid instance; ``reason`` says why."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class SpanProposal:
    start: int
    end: int
    origin: str

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass
class InstanceConfig:
    max_length: int = 256
    max_spans: int = 4
    mlm_probability: float = 0.15
    mask_fraction: float = 0.8
    random_fraction: float = 0.1


@dataclass
class ClismInstance:
    pair_id: int
    input_ids: List[int]
    attention_mask: List[int]
    que_positions: List[int]
    answer_starts: List[int]
    answer_ends: List[int]
    mlm_labels: List[int]
    segment_bounds: List[List[int]]
    # unmasked source tokens, encoded separately as [CLS] s [SEP] for the consistency views
    source_ids: List[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "ClismInstance":
        return cls(**json.loads(line))


class Gazetteer:
    """Lowercased multi-word terms, indexed by first word for longest match."""

    def __init__(self, terms: Iterable[str]):
        self._by_first: Dict[str, List[Tuple[str, ...]]] = {}
        for term in terms:
            words = tuple(term.lower().split())
            if words:
                self._by_first.setdefault(words[0], []).append(words)
        for cands in self._by_first.values():
            cands.sort(key=len, reverse=True)

    @classmethod
    def load(cls, path: Path | str) -> "Gazetteer":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def longest_match(self, words: Sequence[str], start: int) -> int:
        """Length of the longest term starting at ``start`` (0 if none)."""
        for cand in self._by_first.get(words[start], ()):
            if tuple(words[start : start + len(cand)]) == cand:
                return len(cand)
        return 0


def load_stopwords(source: Path | str = "en") -> Set[str]:
    """Load a stopword file (one token per line, ``#`` comments).

    A bare language code loads the list shipped with the package.
    """
    path = Path(source)
    if path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        text = resources.files("clism").joinpath(f"resources/stopwords/{source}.txt").read_text(encoding="utf-8")
    return {ln.strip().lower() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")}


def _capitalized_runs(surface: Sequence[str]) -> List[Tuple[int, int]]:
    runs, start = [], None
    for k, word in enumerate(surface):
        if word[:1].isupper():
            if start is None:
                start = k
        elif start is not None:
            runs.append((start, k - 1))
            start = None
    if start is not None:
        runs.append((start, len(surface) - 1))
    return runs


def resolve_overlaps(proposals: Iterable[SpanProposal]) -> List[SpanProposal]:
    """Keep longer spans first, then earlier ones; result ordered by start."""
    kept: List[SpanProposal] = []
    taken: Set[int] = set()
    for p in sorted(set(proposals), key=lambda p: (-len(p), p.start, _ORIGIN_PRIORITY[p.origin])):
        cells = range(p.start, p.end + 1)
        if taken.isdisjoint(cells):
            kept.append(p)
            taken.update(cells)
    return sorted(kept, key=lambda p: p.start)


def propose_spans(
    pair: ParallelPair,
    gazetteer: Optional[Gazetteer | Iterable[str]] = None,
    annotations: Optional[Sequence[LabeledSpan]] = None,
    capitalization: bool = True,
) -> List[SpanProposal]:
    if gazetteer is None and annotations is None and not capitalization:
        raise ValueError("no span proposal source enabled")
    surface = pair.source_surface
    words = [w.lower() for w in surface]
    found: List[SpanProposal] = []
    for span in annotations or ():
        if span.end >= len(words):
            raise ValueError(f"annotation {span} exceeds sentence length {len(words)}")
        found.append(SpanProposal(span.start, span.end, ANNOTATION))
    if gazetteer is not None:
        if not isinstance(gazetteer, Gazetteer):
            gazetteer = Gazetteer(gazetteer)
        for i in range(len(words)):
            n = gazetteer.longest_match(words, i)
            if n:
                found.append(SpanProposal(i, i + n - 1, GAZETTEER))
    if capitalization:
        found.extend(SpanProposal(s, e, CAPITALIZATION) for s, e in _capitalized_runs(surface))
    return resolve_overlaps(found)


def is_word(token: str) -> bool:
    return any(ch.isalnum() for ch in token)


def filter_spans(
    proposals: Sequence[SpanProposal], source_tokens: Sequence[str], stopwords: Set[str]
) -> List[SpanProposal]:
    """Drop stopword-only spans, spans with a non-word boundary token, and
    spans longer than ``MAX_SPAN_TOKENS``. Order is preserved."""
    kept = []
    for p in proposals:
        toks = [t.lower() for t in source_tokens[p.start : p.end + 1]]
        if len(p) > MAX_SPAN_TOKENS:
            continue
        if all(t in stopwords for t in toks):
            continue
        if not is_word(toks[0]) or not is_word(toks[-1]):
            continue
        kept.append(p)
    return kept


def project_span(span: SpanProposal, alignment: Alignment) -> Optional[Tuple[int, int]]:
    """Envelope of the target positions linked from the span, or ``None``.

    Rejects the envelope when more than half of it is not linked back into
    the span.
    """
    linked = {j for i, j in alignment.links if span.start <= i <= span.end}
    if not linked:
        return None
    lo, hi = min(linked), max(linked)
    unlinked = (hi - lo + 1) - len(linked)
    if unlinked > 0.5 * (hi - lo + 1):
        return None
    return lo, hi


def select_spans(projected, max_spans: int):
    """The ``max_spans`` longest spans (earlier first on ties), in source order."""
    chosen = sorted(projected, key=lambda sp: (-len(sp[0]), sp[0].start))[:max_spans]
    return sorted(chosen, key=lambda sp: sp[0].start)


def _fit_segments(src_len: int, tgt_len: int, budget: int) -> Tuple[int, int]:
    while src_len + tgt_len > budget:
        if src_len > tgt_len:
            src_len -= 1
        else:
            tgt_len -= 1
    return src_len, tgt_len


def build_instance(
    pair: ParallelPair,
    projected: Sequence[Tuple[SpanProposal, Tuple[int, int]]],
    vocab: Vocabulary,
    rng_seed: int,
    config: InstanceConfig = InstanceConfig(),
) -> ClismInstance:
    if not projected:
        raise InstanceDropped("no projected spans")
    by_start = sorted(projected, key=lambda sp: sp[0].start)
    for (a, _), (b, _) in zip(by_start, by_start[1:]):
        if b.start <= a.end:
            raise ValueError(f"overlapping source spans {a} and {b}")

    chosen = select_spans(by_start, config.max_spans)

    masked: List[int] = []
    orig_end: List[int] = []  # last original source index covered by each masked position
    que_local: List[int] = []
    i, k = 0, 0
    src = pair.source_tokens
    while i < len(src):
        if k < len(chosen) and chosen[k][0].start == i:
            que_local.append(len(masked))
            masked.append(QUE_ID)
            orig_end.append(chosen[k][0].end)
            i = chosen[k][0].end + 1
            k += 1
        else:
            masked.append(src[i])
            orig_end.append(i)
            i += 1

    tgt = list(pair.target_tokens)
    n_src, n_tgt = _fit_segments(len(masked), len(tgt), config.max_length - 3)
    answers = [target for _, target in chosen]
    if any(q >= n_src for q in que_local) or any(te >= n_tgt for _, te in answers):
        raise InstanceDropped("answer truncated away")
    masked, tgt = masked[:n_src], tgt[:n_tgt]

    src_lo, tgt_lo = 1, n_src + 2
    input_ids = [CLS_ID, *masked, SEP_ID, *tgt, SEP_ID]
    que_positions = [src_lo + q for q in que_local]
    answer_starts = [tgt_lo + ts for ts, _ in answers]
    answer_ends = [tgt_lo + te for _, te in answers]

    protected = set()
    for s, e in zip(answer_starts, answer_ends):
        protected.update(range(s, e + 1))
    eligible = [
        p for p, tok in enumerate(input_ids) if tok >= NUM_SPECIAL and p not in protected
    ]
    rng = np.random.default_rng([rng_seed, pair.pair_id])
    mlm_labels = [IGNORE_LABEL] * len(input_ids)
    hit = rng.random(len(eligible)) < config.mlm_probability
    picked = [p for p, h in zip(eligible, hit) if h]
    action = rng.random(len(picked))
    replacement = rng.integers(NUM_SPECIAL, max(vocab.size, NUM_SPECIAL + 1), size=len(picked))
    for p, u, r in zip(picked, action, replacement):
        mlm_labels[p] = input_ids[p]
        if u < config.mask_fraction:
            input_ids[p] = MASK_ID
        elif u < config.mask_fraction + config.random_fraction:
            input_ids[p] = int(r)

    length = len(input_ids)
    pad = config.max_length - length
    return ClismInstance(
        pair_id=pair.pair_id,
        input_ids=input_ids + [PAD_ID] * pad,
        attention_mask=[1] * length + [0] * pad,
        que_positions=que_positions,
        answer_starts=answer_starts,
        answer_ends=answer_ends,
        mlm_labels=mlm_labels + [IGNORE_LABEL] * pad,
        segment_bounds=[[src_lo, src_lo + n_src - 1], [tgt_lo, tgt_lo + n_tgt - 1]],
        source_ids=list(src[: orig_end[n_src - 1] + 1]),
    )


@dataclass
class PipelineStats:
    pairs_in: int = 0
    dropped_no_spans: int = 0
    dropped_unprojectable: int = 0
    dropped_truncated: int = 0
    instances_out: int = 0
    span_origins: Dict[str, int] = field(default_factory=dict)


def build_dataset(
    pairs: Sequence[ParallelPair],
    alignments: Sequence[Alignment],
    vocab: Vocabulary,
    seed: int,
    gazetteer: Optional[Gazetteer] = None,
    stopwords: Optional[Set[str]] = None,
    config: InstanceConfig = InstanceConfig(),
    annotations: Optional[Dict[int, Sequence[LabeledSpan]]] = None,
    threads: int = 1,
) -> Tuple[List[ClismInstance], PipelineStats]:
    """Run proposal -> filter -> projection -> instance for every pair.

    Output order follows ``pairs``; per-pair randomness is keyed by
    ``(seed, pair_id)`` so the thread count cannot change the result.
    """
    if len(pairs) != len(alignments):
        raise ValueError(f"{len(pairs)} pairs but {len(alignments)} alignments")
    stopwords = stopwords if stopwords is not None else load_stopwords("en")

    def one(item):
        pair, alignment = item
        props = propose_spans(pair, gazetteer, (annotations or {}).get(pair.pair_id))
        props = filter_spans(props, pair.source_surface, stopwords)
        if not props:
            return "no_spans", None
        projected = [(p, t) for p in props if (t := project_span(p, alignment)) is not None]
        if not projected:
            return "unprojectable", None
        try:
            inst = build_instance(pair, projected, vocab, seed, config)
        except InstanceDropped:
            return "truncated", None
        kept = Counter(p.origin for p, _ in select_spans(projected, config.max_spans))
        return "ok", (inst, kept)

    items = list(zip(pairs, alignments))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]

    stats = PipelineStats(pairs_in=len(pairs))
    origins: Counter = Counter()
    instances = []
    for status, payload in results:
        if status == "no_spans":
            stats.dropped_no_spans += 1
        elif status == "unprojectable":
            stats.dropped_unprojectable += 1
        elif status == "truncated":
            stats.dropped_truncated += 1
        else:
            inst, kept = payload
            instances.append(inst)
            origins.update(kept)
    stats.instances_out = len(instances)
    stats.span_origins = dict(sorted(origins.items()))
    return instances, stats


def write_instances(instances: Iterable[ClismInstance], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(inst.to_json() + "\n")


def read_instances(path: Path | str) -> List[ClismInstance]:
    with open(path, "r", encoding="utf-8") as f:
        return [ClismInstance.from_json(line) for line in f if line.strip()]
