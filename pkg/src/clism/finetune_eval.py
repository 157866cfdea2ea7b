"""Fine-tuning on span-extraction QA and BIO tagging, answer/entity metrics,
and the few-shot sampling protocol.

QA inputs are ``[CLS] question [QUE] [SEP] passage [SEP]``: the appended
``[QUE]`` row drives start/end scoring through the same bilinear head used in
pre-training. With ``use_que=False`` the token is omitted and the ``[CLS]``
row takes its place.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus_io import CLS_ID, PAD_ID, QUE_ID, SEP_ID, LabeledSpan, QaExample, TaggedSentence, Vocabulary, bio_to_spans
from .encoder import Encoder, encode, load_model, save_model, span_logits
from .objectives import clism_loss
from .trainer import ADAM_BETAS, ADAM_EPS, _step_generator, batch_indices

logger = logging.getLogger(__name__)

MAX_ANSWER_TOKENS = 30


# -- metrics ------------------------------------------------------------------

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    return " ".join(_ARTICLES.sub(" ", text).split())


def exact_match(prediction: str, gold: str) -> int:
    return int(normalize_answer(prediction) == normalize_answer(gold))


def span_f1(prediction: str, gold: str) -> float:
    """Token-bag F1 of the normalized strings (1.0 when both normalize to empty)."""
    pred, ref = normalize_answer(prediction).split(), normalize_answer(gold).split()
    if not pred or not ref:
        return float(pred == ref)
    same = sum((Counter(pred) & Counter(ref)).values())
    if same == 0:
        return 0.0
    p, r = same / len(pred), same / len(ref)
    return 2 * p * r / (p + r)


def entity_f1(
    predicted: Sequence[Sequence[LabeledSpan]], gold: Sequence[Sequence[LabeledSpan]]
) -> Tuple[float, float, float]:
    """Micro (precision, recall, F1) over per-sentence span sets.

    A prediction counts only if start, end and label all match. Two empty
    corpora score (1, 1, 1).
    """
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predicted sentences but {len(gold)} gold")
    tp = n_pred = n_gold = 0
    for pred_spans, gold_spans in zip(predicted, gold):
        p = Counter(s.as_tuple() for s in pred_spans)
        g = Counter(s.as_tuple() for s in gold_spans)
        tp += sum((p & g).values())
        n_pred += sum(p.values())
        n_gold += sum(g.values())
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# -- QA inputs and decoding -----------------------------------------------------


@dataclass
class QaInput:
    record_id: str
    input_ids: List[int]
    attention_mask: List[int]
    que_position: int
    passage_bounds: Tuple[int, int]  # inclusive positions of the passage in input_ids
    answer_start: int
    answer_end: int
    truncated: bool = False


def build_qa_input(example: QaExample, max_length: int, use_que: bool = True) -> QaInput:
    """Lay out one example, truncating the passage (then the question) to fit.

    ``truncated`` is set when the gold answer no longer fits; the gold
    positions are then clamped to the passage end.
    """
    overhead = 4 if use_que else 3
    question = list(example.question_tokens)
    if len(question) + overhead >= max_length:
        question = question[: max(max_length // 2 - overhead, 1)]
    room = max_length - overhead - len(question)
    passage = list(example.passage_tokens)[:room]
    if not passage:
        raise ValueError(f"record {example.record_id}: no room left for the passage")
    head = [CLS_ID, *question] + ([QUE_ID] if use_que else []) + [SEP_ID]
    p0 = len(head)
    ids = head + passage + [SEP_ID]
    truncated = example.answer.end >= len(passage)
    return QaInput(
        record_id=example.record_id,
        input_ids=ids,
        attention_mask=[1] * len(ids),
        que_position=len(question) + 1 if use_que else 0,
        passage_bounds=(p0, p0 + len(passage) - 1),
        answer_start=p0 + min(example.answer.start, len(passage) - 1),
        answer_end=p0 + min(example.answer.end, len(passage) - 1),
        truncated=truncated,
    )


def best_span(start_logits, end_logits, lo: int, hi: int, max_answer_length: int = MAX_ANSWER_TOKENS) -> Tuple[int, int]:
    """Argmax of ``start[s] + end[e]`` over ``lo <= s <= e <= min(hi, s + max_len - 1)``.

    Ties go to the smaller ``s``, then the smaller ``e``.
    """
    if not 0 <= lo <= hi or max_answer_length < 1:
        raise ValueError("empty passage segment or non-positive answer length")
    start = np.asarray(start_logits, dtype=np.float64)[lo : hi + 1]
    end = np.asarray(end_logits, dtype=np.float64)[lo : hi + 1]
    n = len(start)
    scores = start[:, None] + end[None, :]
    offset = np.arange(n)[None, :] - np.arange(n)[:, None]
    scores[(offset < 0) | (offset >= max_answer_length)] = -np.inf
    # argmax returns the first maximum in row-major order: smallest s, then e
    flat = int(np.argmax(scores))
    return lo + flat // n, lo + flat % n


def predict_span(model: Encoder, qa: QaInput, max_answer_length: int = MAX_ANSWER_TOKENS) -> Tuple[int, int]:
    model.eval()
    with torch.no_grad():
        out = encode(model, [qa.input_ids], [qa.attention_mask])
        start, end = span_logits(out, [qa.que_position], model)
    return best_span(start[0], end[0], *qa.passage_bounds, max_answer_length)


def _pad(rows: Sequence[Sequence[int]], value: int) -> torch.Tensor:
    width = max(len(r) for r in rows)
    return torch.tensor([list(r) + [value] * (width - len(r)) for r in rows], dtype=torch.long)


# -- configuration ------------------------------------------------------------


@dataclass
class FinetuneConfig:
    lr: float = 3e-4
    batch_size: int = 16
    max_length: int = 128
    epochs: int = 5
    steps: Optional[int] = None  # overrides epochs when set
    seed: int = 0
    max_answer_length: int = MAX_ANSWER_TOKENS
    use_que: bool = True
    reinit_span_head: bool = False
    preset: str = "desk"

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.batch_size <= 0 or self.max_length <= 0 or self.epochs <= 0:
            raise ValueError("learning rate, batch size, max length and epochs must be positive")
        if self.steps is not None and self.steps <= 0:
            raise ValueError("steps must be positive")

    @classmethod
    def preset_config(cls, task: str, name: str, **overrides) -> "FinetuneConfig":
        if name == "desk":
            base = cls(preset="desk")
        elif name == "paper-ref" and task == "qa":
            base = cls(lr=3e-5, batch_size=32, max_length=384, epochs=5, preset="paper-ref")
        elif name == "paper-ref" and task == "ner":
            base = cls(lr=5e-5, batch_size=32, max_length=128, epochs=5, preset="paper-ref")
        else:
            raise ValueError(f"unknown preset {name!r} for task {task!r}")
        return replace(base, **overrides)


def step_schedule(n_items: int, config: FinetuneConfig) -> List[List[int]]:
    """Batches of item indices for the whole run.

    With ``steps`` unset: ``epochs`` passes, each a seeded shuffle cut into
    ``ceil(n / batch)`` batches. With ``steps``: consecutive batches over
    the same per-epoch shuffles until ``steps`` is reached.
    """
    if n_items <= 0:
        raise ValueError("no training examples")
    if config.steps is not None:
        b = min(config.batch_size, n_items)
        return [batch_indices(step, n_items, b, config.seed) for step in range(1, config.steps + 1)]
    schedule = []
    for epoch in range(config.epochs):
        perm = [int(i) for i in np.random.default_rng([config.seed, epoch]).permutation(n_items)]
        schedule += [perm[k : k + config.batch_size] for k in range(0, n_items, config.batch_size)]
    return schedule


def _optimizer(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


@dataclass
class FinetuneResult:
    steps: int
    dropped: int
    losses: List[float] = field(default_factory=list)


# -- QA ---------------------------------------------------------------------------


def qa_inputs(examples: Sequence[QaExample], model: Encoder, config: FinetuneConfig) -> List[QaInput]:
    max_length = min(config.max_length, model.cfg.max_length)
    return [build_qa_input(ex, max_length, config.use_que) for ex in examples]


def finetune_qa(model: Encoder, examples: Sequence[QaExample], config: FinetuneConfig) -> FinetuneResult:
    """Train the encoder and span head in place on the span-extraction loss."""
    torch.set_num_threads(1)
    inputs = qa_inputs(examples, model, config)
    kept = [qa for qa in inputs if not qa.truncated]
    dropped = len(inputs) - len(kept)
    if dropped:
        logger.warning("dropped %d QA examples whose answer was truncated away", dropped)
    if config.reinit_span_head:
        model.reset_span_head(config.seed)
    optimizer = _optimizer(model.parameters(), config.lr)
    losses = []
    model.train()
    schedule = step_schedule(len(kept), config)
    for step, idx in enumerate(schedule, 1):
        batch = [kept[i] for i in idx]
        out = encode(model, _pad([b.input_ids for b in batch], PAD_ID), _pad([b.attention_mask for b in batch], 0), _step_generator(config.seed, step))
        start, end = span_logits(out, [b.que_position for b in batch], model)
        loss = clism_loss(start, end, [b.answer_start for b in batch], [b.answer_end for b in batch])
        if not math.isfinite(float(loss.detach())):
            raise FloatingPointError(f"non-finite fine-tuning loss at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        optimizer.step()
        losses.append(float(loss.detach()))
    model.eval()
    return FinetuneResult(steps=len(schedule), dropped=dropped, losses=losses)


def evaluate_qa(model: Encoder, examples: Sequence[QaExample], config: FinetuneConfig, batch_size: int = 64) -> Dict[str, float]:
    """Mean EM and span F1 (percent) of predicted passage spans against gold text."""
    if not examples:
        raise ValueError("no evaluation examples")
    inputs = qa_inputs(examples, model, config)
    model.eval()
    em = f1 = 0.0
    with torch.no_grad():
        for k in range(0, len(inputs), batch_size):
            chunk = inputs[k : k + batch_size]
            out = encode(model, _pad([b.input_ids for b in chunk], PAD_ID), _pad([b.attention_mask for b in chunk], 0))
            start, end = span_logits(out, [b.que_position for b in chunk], model)
            for row, (qa, ex) in enumerate(zip(chunk, examples[k : k + batch_size])):
                s, e = best_span(start[row], end[row], *qa.passage_bounds, config.max_answer_length)
                p0 = qa.passage_bounds[0]
                text = " ".join(ex.passage_surface[s - p0 : e - p0 + 1])
                em += exact_match(text, ex.answer_text)
                f1 += span_f1(text, ex.answer_text)
    return {"em": 100.0 * em / len(inputs), "f1": 100.0 * f1 / len(inputs), "n": len(inputs)}


# -- NER ----------------------------------------------------------------------------


class TagHead(nn.Module):
    def __init__(self, hidden: int, tags: Sequence[str], seed: int = 0):
        super().__init__()
        self.tags = list(tags)
        self.linear = nn.Linear(hidden, len(self.tags))
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.linear.weight.copy_(torch.randn(self.linear.weight.shape, generator=gen) * 0.02)
            self.linear.bias.zero_()

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.linear(hidden)


def tag_set(sentences: Sequence[TaggedSentence]) -> List[str]:
    labels = sorted({t[2:] for s in sentences for t in s.tags if t != "O"})
    return ["O"] + [f"{p}-{lab}" for lab in labels for p in ("B", "I")]


def _tag_rows(sentences: Sequence[TaggedSentence], vocab: Vocabulary, max_length: int):
    """``[CLS] tokens [SEP]`` id rows, truncated to ``max_length``."""
    room = max_length - 2
    return [[CLS_ID, *(vocab.id(w.lower()) for w in s.tokens[:room]), SEP_ID] for s in sentences]


@dataclass
class TagPrediction:
    tag_ids: List[int]
    tags: List[str]
    spans: List[LabeledSpan]


def finetune_ner(
    model: Encoder,
    sentences: Sequence[TaggedSentence],
    vocab: Vocabulary,
    config: FinetuneConfig,
    tags: Optional[Sequence[str]] = None,
) -> Tuple[TagHead, FinetuneResult]:
    """Token-level cross-entropy over BIO tags with a fresh linear head."""
    torch.set_num_threads(1)
    tags = list(tags) if tags is not None else tag_set(sentences)
    index = {t: i for i, t in enumerate(tags)}
    head = TagHead(model.cfg.hidden, tags, config.seed).to(next(model.parameters()).dtype)
    max_length = min(config.max_length, model.cfg.max_length)
    rows = _tag_rows(sentences, vocab, max_length)
    labels = []
    for s, row in zip(sentences, rows):
        gold = [index[t] for t in s.tags[: len(row) - 2]]
        labels.append([-1, *gold, -1])
    optimizer = _optimizer([*model.parameters(), *head.parameters()], config.lr)
    losses = []
    model.train()
    schedule = step_schedule(len(rows), config)
    for step, idx in enumerate(schedule, 1):
        ids = _pad([rows[i] for i in idx], PAD_ID)
        mask = ids != PAD_ID
        gold = _pad([labels[i] for i in idx], -1)
        out = encode(model, ids, mask, _step_generator(config.seed, step))
        logits = head(out.hidden)
        loss = F.cross_entropy(logits[gold != -1], gold[gold != -1])
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_([*model.parameters(), *head.parameters()], 1.0)
        optimizer.step()
        losses.append(float(loss.detach()))
    model.eval()
    return head, FinetuneResult(steps=len(schedule), dropped=0, losses=losses)


def predict_tags(model: Encoder, head: TagHead, sentences: Sequence[TaggedSentence], vocab: Vocabulary, max_length: int = 128) -> List[TagPrediction]:
    """Greedy per-token tags; tokens past ``max_length`` get ``O``. Illegal
    ``I-`` continuations are repaired when decoding spans."""
    model.eval()
    rows = _tag_rows(sentences, vocab, min(max_length, model.cfg.max_length))
    preds = []
    with torch.no_grad():
        for sent, row in zip(sentences, rows):
            out = encode(model, [row], [[1] * len(row)])
            ids = head(out.hidden)[0, 1 : len(row) - 1].argmax(dim=-1).tolist()
            ids += [0] * (len(sent.tokens) - len(ids))
            tags = [head.tags[i] for i in ids]
            preds.append(TagPrediction(ids, tags, bio_to_spans(tags)))
    return preds


def evaluate_ner(model: Encoder, head: TagHead, sentences: Sequence[TaggedSentence], vocab: Vocabulary, max_length: int = 128) -> Dict[str, float]:
    preds = predict_tags(model, head, sentences, vocab, max_length)
    p, r, f = entity_f1([x.spans for x in preds], [s.spans for s in sentences])
    return {"precision": 100.0 * p, "recall": 100.0 * r, "entity_f1": 100.0 * f, "n": len(sentences)}


def save_finetuned(prefix: Path | str, model: Encoder, task: str, config: FinetuneConfig, head: Optional[TagHead] = None):
    extra = {}
    meta = {"task": task, "finetune_config": asdict(config)}
    if head is not None:
        extra = {f"tag_head.{k}": v for k, v in head.state_dict().items()}
        meta["tags"] = head.tags
    return save_model(prefix, model, extra, meta)


def load_finetuned(prefix: Path | str) -> Tuple[Encoder, Optional[TagHead], dict]:
    model, tensors, meta = load_model(prefix)
    head = None
    if "tags" in meta:
        head = TagHead(model.cfg.hidden, meta["tags"])
        head.load_state_dict({k[len("tag_head.") :]: v for k, v in tensors.items() if k.startswith("tag_head.")})
    return model, head, meta


# -- few-shot protocol ------------------------------------------------------------------


@dataclass
class FewShotPlan:
    sizes: Tuple[int, ...] = (64, 128, 256, 512, 1024)
    seeds: int = 5
    steps: int = 200
    master_seed: int = 0

    def __post_init__(self) -> None:
        self.sizes = tuple(int(s) for s in self.sizes)
        if not self.sizes or min(self.sizes) <= 0 or self.seeds <= 0 or self.steps <= 0:
            raise ValueError("few-shot sizes, seeds and steps must be positive")

    def run_seed(self, i: int) -> int:
        return self.master_seed + i


def fewshot_subset(n_train: int, size: int, seed: int) -> List[int]:
    """First ``size`` items of a seeded permutation: no duplicates, and the
    subsets of one seed are nested across sizes."""
    if size > n_train:
        raise ValueError(f"few-shot size {size} exceeds the {n_train} training examples")
    return [int(i) for i in np.random.default_rng([seed]).permutation(n_train)[:size]]


@dataclass
class MetricsReport:
    task: str
    dataset: str
    per_eval_file: Dict[str, Dict[str, float]] = field(default_factory=dict)
    fewshot: Dict[str, dict] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def write(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def plot_csv(self) -> str:
        """``size,mean_f1,mean_em`` rows for the few-shot curve."""
        lines = ["size,mean_f1,mean_em"]
        for size in sorted(self.fewshot, key=int):
            mean = self.fewshot[size]["mean"]
            lines.append(f"{size},{mean['f1']:.6f},{mean['em']:.6f}")
        return "\n".join(lines) + "\n"


def run_fewshot(
    base_model: Encoder,
    train: Sequence[QaExample],
    test: Sequence[QaExample],
    plan: FewShotPlan,
    config: FinetuneConfig,
    dataset: str = "",
    threads: int = 1,
) -> MetricsReport:
    """Fine-tune a fresh copy of ``base_model`` for every (size, seed) and
    evaluate on ``test``. Runs are independent; the report is keyed by
    sorted (size, seed) so ordering never depends on scheduling."""
    jobs = [(size, i) for size in sorted(plan.sizes) for i in range(plan.seeds)]

    def one(job):
        size, i = job
        seed = plan.run_seed(i)
        subset = [train[k] for k in fewshot_subset(len(train), size, seed)]
        model = copy.deepcopy(base_model)
        cfg = replace(config, steps=plan.steps, seed=seed)
        finetune_qa(model, subset, cfg)
        return evaluate_qa(model, test, cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]

    fewshot: Dict[str, dict] = {}
    for (size, i), metrics in zip(jobs, results):
        entry = fewshot.setdefault(str(size), {"per_seed": []})
        entry["per_seed"].append({"seed": plan.run_seed(i), "em": metrics["em"], "f1": metrics["f1"]})
    for entry in fewshot.values():
        entry["mean"] = {
            "em": math.fsum(r["em"] for r in entry["per_seed"]) / len(entry["per_seed"]),
            "f1": math.fsum(r["f1"] for r in entry["per_seed"]) / len(entry["per_seed"]),
        }
    return MetricsReport(task="qa", dataset=dataset, fewshot=fewshot, config={"plan": asdict(plan), "finetune": asdict(config)})
