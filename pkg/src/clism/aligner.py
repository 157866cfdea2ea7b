"""IBM Model 1 word alignment (source -> target) trained with EM.

Each target word is generated by one source word or by a NULL token that is
prepended to every source sentence. The translation table holds
``t(target | source)``; Viterbi decoding links each source position to its
most probable target position unless NULL explains that target word better.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from .corpus_io import ParallelPair, Vocabulary

NULL = -1
# Fixed chunking keeps the reduction order independent of the thread count.
_CHUNK = 256

Table = Dict[int, Dict[int, float]]


@dataclass
class TranslationTable:
    t: Table
    log_likelihoods: List[float] = field(default_factory=list)

    def prob(self, source: int, target: int) -> float:
        return self.t.get(source, {}).get(target, 0.0)

    def support(self, source: int) -> FrozenSet[int]:
        return frozenset(self.t.get(source, {}))

    def best_target(self, source: int) -> Optional[int]:
        row = self.t.get(source)
        if not row:
            return None
        return min(row, key=lambda tgt: (-row[tgt], tgt))

    def save_jsonl(self, path: Path | str, vocab: Vocabulary) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for src in sorted(self.t):
                row = self.t[src]
                src_tok = None if src == NULL else vocab.id_to_token[src]
                for tgt in sorted(row):
                    rec = {"source": src_tok, "target": vocab.id_to_token[tgt], "prob": row[tgt]}
                    f.write(json.dumps(rec, ensure_ascii=False) + "\n")

    @classmethod
    def load_jsonl(cls, path: Path | str, vocab: Vocabulary) -> "TranslationTable":
        t: Table = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                src = NULL if rec["source"] is None else vocab.token_to_id[rec["source"]]
                t.setdefault(src, {})[vocab.token_to_id[rec["target"]]] = float(rec["prob"])
        return cls(t=t)


@dataclass(frozen=True)
class Alignment:
    links: FrozenSet[Tuple[int, int]]

    @classmethod
    def of(cls, links: Iterable[Tuple[int, int]]) -> "Alignment":
        return cls(frozenset((int(i), int(j)) for i, j in links))

    def sorted_links(self) -> List[Tuple[int, int]]:
        return sorted(self.links)


def _initial_table(bitext: Sequence[Tuple[Tuple[int, ...], Tuple[int, ...]]]) -> Table:
    support: Dict[int, set] = {}
    for src, tgt in bitext:
        tgt_set = set(tgt)
        for s in (NULL, *src):
            support.setdefault(s, set()).update(tgt_set)
    return {s: {t: 1.0 / len(ts) for t in ts} for s, ts in support.items()}


def _e_step_chunk(chunk, t: Table):
    counts: Dict[int, Dict[int, float]] = {}
    ll = 0.0
    for src, tgt in chunk:
        sources = (NULL, *src)
        rows = [t[s] for s in sources]
        for w in tgt:
            probs = [row[w] for row in rows]
            z = math.fsum(probs)
            ll += math.log(z / len(sources))
            for s, p in zip(sources, probs):
                c = counts.setdefault(s, {})
                c[w] = c.get(w, 0.0) + p / z
    return counts, ll


def _expected_counts(bitext, t: Table, threads: int):
    chunks = [bitext[k : k + _CHUNK] for k in range(0, len(bitext), _CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(lambda ch: _e_step_chunk(ch, t), chunks))
    else:
        partials = [_e_step_chunk(ch, t) for ch in chunks]
    counts: Dict[int, Dict[int, float]] = {}
    ll = 0.0
    for part, part_ll in partials:
        ll += part_ll
        for s, row in part.items():
            acc = counts.setdefault(s, {})
            for w, c in row.items():
                acc[w] = acc.get(w, 0.0) + c
    return counts, ll


def _m_step(counts: Dict[int, Dict[int, float]]) -> Table:
    table: Table = {}
    for s, row in counts.items():
        z = math.fsum(row.values())
        table[s] = {w: c / z for w, c in row.items()}
    return table


def log_likelihood(pairs: Sequence[ParallelPair], table: TranslationTable) -> float:
    """Data log-likelihood under Model 1 (uniform alignment prior)."""
    bitext = [(p.source_tokens, p.target_tokens) for p in pairs]
    return _e_step_chunk(bitext, table.t)[1]


def train_model1(pairs: Sequence[ParallelPair], iterations: int = 5, threads: int = 1) -> TranslationTable:
    """Run ``iterations`` rounds of EM.

    ``log_likelihoods`` records the likelihood of the initial table and of the
    table after every M-step (``iterations + 1`` values).
    """
    if not pairs:
        raise ValueError("train_model1 needs at least one sentence pair")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    bitext = [(p.source_tokens, p.target_tokens) for p in pairs]
    t = _initial_table(bitext)
    history: List[float] = []
    for _ in range(iterations):
        counts, ll = _expected_counts(bitext, t, threads)
        history.append(ll)
        t = _m_step(counts)
    history.append(_expected_counts(bitext, t, threads)[1])
    return TranslationTable(t=t, log_likelihoods=history)


def viterbi_align(pair: ParallelPair, table: TranslationTable) -> Alignment:
    links = []
    null_row = table.t.get(NULL, {})
    for i, s in enumerate(pair.source_tokens):
        row = table.t.get(s)
        if not row:
            continue
        best_j, best_p = -1, -1.0
        for j, w in enumerate(pair.target_tokens):
            p = row.get(w, 0.0)
            if p > best_p:
                best_j, best_p = j, p
        if best_p > null_row.get(pair.target_tokens[best_j], 0.0):
            links.append((i, best_j))
    return Alignment.of(links)


def write_pharaoh(alignments: Iterable[Alignment]) -> str:
    return "".join(" ".join(f"{i}-{j}" for i, j in a.sorted_links()) + "\n" for a in alignments)


def read_pharaoh(text: str) -> List[Alignment]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        links = []
        for item in line.split():
            i, sep, j = item.partition("-")
            if not sep or not i.isdigit() or not j.isdigit():
                raise ValueError(f"line {lineno}: malformed Pharaoh link {item!r}")
            links.append((int(i), int(j)))
        out.append(Alignment.of(links))
    return out
