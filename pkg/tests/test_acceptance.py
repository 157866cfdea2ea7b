"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The heavy fixtures build a 5,000-pair synthetic copy corpus, align it with
Model 1, pre-train the desk model for 2,000 steps and reuse that checkpoint
for the transfer experiments. Expect a few minutes on one CPU.
"""

from __future__ import annotations

import contextlib
import io
import itertools
import json
import math
import string
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clism import cli
from clism.aligner import Alignment, read_pharaoh, train_model1, viterbi_align
from clism.corpus_io import NUM_SPECIAL, LabeledSpan, ParallelPair, Vocabulary, build_vocabulary, load_parallel_corpus, load_qa_corpus
from clism.encoder import Encoder, ModelConfig, encode, load_model, save_model, span_logits
from clism.finetune_eval import (
    FewShotPlan,
    FinetuneConfig,
    QaInput,
    best_span,
    entity_f1,
    exact_match,
    predict_span,
    run_fewshot,
    span_f1,
)
from clism.objectives import TERMS, LossFlags, total_loss
from clism.span_pipeline import (
    IGNORE_LABEL,
    MAX_SPAN_TOKENS,
    ANNOTATION,
    Gazetteer,
    InstanceConfig,
    SpanProposal,
    build_dataset,
    filter_spans,
    load_stopwords,
)
from clism.synthetic import write_synthetic
from clism.trainer import (
    GRADCHECK_TOLERANCE,
    TrainConfig,
    collate,
    compute_losses,
    grad_check,
    make_optimizer,
    pretrain,
    read_log,
    train_step,
)

pytestmark = pytest.mark.slow

SEED = 7


def verdict(record_property, number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    print(line)
    record_property("acceptance", line)
    assert ok, line


# -- shared fixtures ------------------------------------------------------------


@dataclass
class Pretrained:
    paths: Dict[str, Path]
    vocab: Vocabulary
    instances: list
    model: Encoder
    log: List[dict]
    seconds: float


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept")
    paths = write_synthetic(out / "syn", pairs=5000, vocab_size=200, seed=SEED)
    vocab = build_vocabulary([paths[k] for k in ("parallel", "heldout", "qa_train", "qa_test")])
    pairs = load_parallel_corpus(paths["parallel"], vocab)
    table = train_model1(pairs, iterations=5)
    alignments = [viterbi_align(p, table) for p in pairs]
    instances, _ = build_dataset(pairs, alignments, vocab, seed=0, gazetteer=Gazetteer.load(paths["gazetteer"]))
    return out, paths, vocab, instances


@pytest.fixture(scope="module")
def pretrained(corpus) -> Pretrained:
    out, paths, vocab, instances = corpus
    t0 = time.perf_counter()
    res = pretrain(instances, ModelConfig.preset("desk", vocab.size), TrainConfig.preset_config("desk"), out / "pt")
    seconds = time.perf_counter() - t0
    model, _, _ = load_model(res.final_checkpoint)
    return Pretrained(paths, vocab, instances, model.eval(), read_log(res.log_path), seconds)


# -- 1. gradient correctness -----------------------------------------------------


def test_criterion_1_gradient_check(record_property):
    t0 = time.perf_counter()
    reports = [grad_check(loss, n_params=100) for loss in ("clism", "cacr", "mlm", "total")]
    seconds = time.perf_counter() - t0
    ok = all(r.passed and r.checked >= 100 for r in reports) and seconds < 60
    detail = ", ".join(f"{r.loss} {r.max_rel_error:.1e}" for r in reports) + f"; tol {GRADCHECK_TOLERANCE:g}; {seconds:.1f}s"
    verdict(record_property, 1, "gradient check", ok, detail)


# -- 2. normalization invariants ---------------------------------------------------


def _random_corpus(seed: int, n: int = 150) -> List[ParallelPair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n):
        src = tuple(int(t) for t in rng.integers(NUM_SPECIAL, 60, rng.integers(1, 12)))
        tgt = tuple(int(t) for t in rng.integers(60, 120, rng.integers(1, 12)))
        pairs.append(ParallelPair(k + 1, src, tgt, "", ""))
    return pairs


def test_criterion_2_normalization(record_property, pretrained):
    worst_softmax = 0.0
    model = pretrained.model
    with torch.no_grad():
        for k in range(0, 256, 64):
            batch = collate(pretrained.instances[k : k + 64])
            out = encode(model, batch.input_ids, batch.attention_mask)
            for logits in span_logits(out, batch.que_positions, model, rows=batch.que_rows):
                probs = torch.softmax(logits.double(), dim=-1)
                worst_softmax = max(worst_softmax, float((probs.sum(-1) - 1).abs().max()))
                assert float(probs[~batch.attention_mask[batch.que_rows]].abs().max()) == 0.0

    worst_t, monotone = 0.0, True
    for seed in range(3):
        pairs = _random_corpus(seed)
        for iterations in range(1, 6):
            table = train_model1(pairs, iterations=iterations)
            for row in table.t.values():
                worst_t = max(worst_t, abs(math.fsum(row.values()) - 1))
        ll = table.log_likelihoods
        monotone &= all(b >= a for a, b in zip(ll, ll[1:]))
    ok = worst_softmax <= 1e-5 and worst_t <= 1e-9 and monotone
    verdict(
        record_property, 2, "normalization invariants", ok,
        f"softmax dev {worst_softmax:.1e}, t(.|s) dev {worst_t:.1e}, EM monotone on 3 corpora: {monotone}",
    )


# -- 3. masking contract -----------------------------------------------------------


def test_criterion_3_masking(record_property, pretrained):
    eligible = corrupted = on_answers = 0
    for inst in pretrained.instances:
        answers = set()
        for s, e in zip(inst.answer_starts, inst.answer_ends):
            answers.update(range(s, e + 1))
        for p, (tok, label, live) in enumerate(zip(inst.input_ids, inst.mlm_labels, inst.attention_mask)):
            if not live:
                continue
            hit = label != IGNORE_LABEL
            original = label if hit else tok
            if p in answers:
                on_answers += hit
            elif original >= NUM_SPECIAL:
                eligible += 1
                corrupted += hit
    rate = corrupted / eligible
    ok = eligible >= 10_000 and 0.135 <= rate <= 0.165 and on_answers == 0
    verdict(record_property, 3, "masking contract", ok, f"rate {rate:.4f} over {eligible} eligible positions, {on_answers} answer tokens corrupted")


# -- 4. span filters -------------------------------------------------------------------

STOP = load_stopwords("en")
STOPWORDS = sorted(STOP)[:40]
CONTENT = ["drm", "paris", "Acme", "x1", "data", "zeta", "42"]
NONWORD = ["(", ")", "--", "%", "&", ",", ".", "'"]


@st.composite
def _proposals(draw):
    toks = draw(st.lists(st.sampled_from(STOPWORDS + CONTENT + NONWORD), min_size=1, max_size=30))
    spans = []
    for _ in range(draw(st.integers(1, 8))):
        s = draw(st.integers(0, len(toks) - 1))
        e = draw(st.integers(s, len(toks) - 1))
        spans.append(SpanProposal(s, e, ANNOTATION))
    return toks, spans


def _violates(toks: List[str]) -> bool:
    return (
        len(toks) > MAX_SPAN_TOKENS
        or set(t.lower() for t in toks) <= STOP
        or not any(c.isalnum() for c in toks[0])
        or not any(c.isalnum() for c in toks[-1])
    )


@settings(max_examples=1000, deadline=None, derandomize=True)
@given(_proposals())
def _filter_property(case):
    toks, spans = case
    kept = filter_spans(spans, toks, STOP)
    assert kept == [p for p in spans if not _violates(toks[p.start : p.end + 1])]


@settings(max_examples=300, deadline=None, derandomize=True)
@given(st.lists(st.sampled_from(STOPWORDS), min_size=1, max_size=10), st.lists(st.sampled_from(CONTENT), min_size=MAX_SPAN_TOKENS + 1, max_size=20), st.sampled_from(NONWORD), st.lists(st.sampled_from(CONTENT + STOPWORDS), max_size=8))
def _filter_rules(stop_only, too_long, edge, inner):
    assert filter_spans([SpanProposal(0, len(stop_only) - 1, ANNOTATION)], stop_only, STOP) == []
    assert filter_spans([SpanProposal(0, len(too_long) - 1, ANNOTATION)], too_long, STOP) == []
    for toks in ([edge, *inner, "drm"], ["drm", *inner, edge]):
        assert filter_spans([SpanProposal(0, len(toks) - 1, ANNOTATION)], toks, STOP) == []
    valid = ["drm", *inner[:7], "paris"]
    assert filter_spans([SpanProposal(0, len(valid) - 1, ANNOTATION)], valid, STOP) == [SpanProposal(0, len(valid) - 1, ANNOTATION)]


def test_criterion_4_span_filters(record_property):
    try:
        _filter_property()
        _filter_rules()
        ok, detail = True, "1000 random proposal sets + 300 rule-targeted cases"
    except AssertionError as exc:
        ok, detail = False, f"counterexample: {exc}"
    verdict(record_property, 4, "span filters", ok, detail)


# -- 5. metric oracles -----------------------------------------------------------------


def _ref_tokens(text: str) -> List[str]:
    kept = "".join(c for c in text.lower() if c not in string.punctuation)
    return [w for w in kept.split() if w not in ("a", "an", "the")]


def _ref_f1(pred: str, gold: str) -> float:
    p, g = _ref_tokens(pred), _ref_tokens(gold)
    if not p or not g:
        return float(p == g)
    remaining = list(g)
    same = 0
    for tok in p:
        if tok in remaining:
            remaining.remove(tok)
            same += 1
    if same == 0:
        return 0.0
    precision, recall = same / len(p), same / len(g)
    return 2 * precision * recall / (precision + recall)


def _ref_entity(pred_sets, gold_sets):
    tp = n_pred = n_gold = 0
    for pred, gold in zip(pred_sets, gold_sets):
        used = [False] * len(gold)
        for span in pred:
            for k, g in enumerate(gold):
                if not used[k] and (span.start, span.end, span.label) == (g.start, g.end, g.label):
                    used[k] = True
                    tp += 1
                    break
        n_pred += len(pred)
        n_gold += len(gold)
    if n_pred == n_gold == 0:
        return 1.0, 1.0, 1.0
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def _ref_best_span(start, end, lo, hi, max_len):
    best, arg = -math.inf, None
    for s in range(lo, hi + 1):
        for e in range(s, min(hi, s + max_len - 1) + 1):
            if start[s] + end[e] > best:
                best, arg = start[s] + end[e], (s, e)
    return arg


def test_criterion_5_metric_oracles(record_property):
    rng = np.random.default_rng(5)
    vocab_words = ["The", "a", "DRM", "drm", "clause,", "Paris", "an", "x", "!", "of", "big"]

    def phrase():
        return " ".join(rng.choice(vocab_words, size=int(rng.integers(0, 6))))

    mismatches = Counter()
    for _ in range(50):
        pred = phrase()
        gold = phrase() if rng.random() < 0.6 else pred.upper()
        mismatches["em"] += exact_match(pred, gold) != int(_ref_tokens(pred) == _ref_tokens(gold))
        mismatches["f1"] += span_f1(pred, gold) != _ref_f1(pred, gold)
    for _ in range(50):
        sents_pred, sents_gold = [], []
        for _ in range(int(rng.integers(1, 4))):
            make = lambda: [LabeledSpan(int(s), int(s) + int(rng.integers(0, 2)), str(rng.choice(["PER", "LOC"]))) for s in rng.integers(0, 5, size=int(rng.integers(0, 4)))]
            gold = make()
            pred = [g for g in gold if rng.random() < 0.5] + make()
            sents_pred.append(pred)
            sents_gold.append(gold)
        mismatches["entity"] += entity_f1(sents_pred, sents_gold) != _ref_entity(sents_pred, sents_gold)

    for k in range(100):
        n = int(rng.integers(3, 60))
        # coarse values force ties so the tie rule is exercised
        start = rng.integers(-3, 4, n).astype(float) if k % 2 else rng.normal(size=n)
        end = rng.integers(-3, 4, n).astype(float) if k % 2 else rng.normal(size=n)
        lo = int(rng.integers(0, n))
        hi = int(rng.integers(lo, n))
        max_len = int(rng.integers(1, 35))
        mismatches["best_span"] += best_span(start, end, lo, hi, max_len) != _ref_best_span(start, end, lo, hi, max_len)

    model = Encoder(ModelConfig(vocab_size=40, layers=1, hidden=16, heads=2, max_length=64), seed=3).eval()
    for _ in range(100):
        q, p = int(rng.integers(1, 8)), int(rng.integers(1, 40))
        ids = [2, *rng.integers(6, 40, q).tolist(), 5, 3, *rng.integers(6, 40, p).tolist(), 3]
        qa = QaInput("r", ids, [1] * len(ids), q + 1, (q + 3, q + 2 + p), q + 3, q + 3)
        with torch.no_grad():
            s_log, e_log = span_logits(encode(model, [ids], [qa.attention_mask]), [qa.que_position], model)
        ref = _ref_best_span(s_log[0].double().tolist(), e_log[0].double().tolist(), *qa.passage_bounds, 30)
        mismatches["predict_span"] += predict_span(model, qa) != ref

    ok = sum(mismatches.values()) == 0
    verdict(record_property, 5, "metric oracles", ok, "mismatches " + json.dumps({k: mismatches[k] for k in ("em", "f1", "entity", "best_span", "predict_span")}))


# -- 6. aligner recovery ------------------------------------------------------------


def test_criterion_6_aligner_recovery(record_property, tmp_path):
    paths = write_synthetic(tmp_path, pairs=1000, vocab_size=200, seed=SEED, qa_train=0, qa_test=0, ner_train=0, ner_test=0)
    vocab = build_vocabulary([paths["parallel"]])
    pairs = load_parallel_corpus(paths["parallel"], vocab)
    gold = read_pharaoh(paths["alignments"].read_text(encoding="utf-8"))
    t0 = time.perf_counter()
    table = train_model1(pairs, iterations=5)
    predicted = [viterbi_align(p, table) for p in pairs]
    seconds = time.perf_counter() - t0
    hit = sum(len(a.links & g.links) for a, g in zip(predicted, gold))
    total = sum(len(g.links) for g in gold)
    ok = hit / total >= 0.99 and seconds < 30
    verdict(record_property, 6, "aligner recovery", ok, f"{hit}/{total} = {hit / total:.4f} identity links, {seconds:.1f}s")


# -- 7. CLISM learnability -------------------------------------------------------------


def test_criterion_7_clism_learnability(record_property, pretrained):
    vocab = pretrained.vocab
    held = load_parallel_corpus(pretrained.paths["heldout"], vocab)
    gold = [Alignment.of((i, i) for i in range(len(p.source_tokens))) for p in held]
    instances, _ = build_dataset(held, gold, vocab, seed=1, gazetteer=Gazetteer.load(pretrained.paths["gazetteer"]), config=InstanceConfig(mlm_probability=0.0))
    model = pretrained.model
    correct = slots = 0
    with torch.no_grad():
        for k in range(0, len(instances), 64):
            batch = collate(instances[k : k + 64])
            out = encode(model, batch.input_ids, batch.attention_mask)
            start, end = span_logits(out, batch.que_positions, model, rows=batch.que_rows)
            correct += int(((start.argmax(1) == batch.answer_starts) & (end.argmax(1) == batch.answer_ends)).sum())
            slots += len(batch.answer_starts)
    accuracy = correct / slots
    early = np.mean([r["l_clism"] for r in pretrained.log if 1 <= r["step"] <= 200])
    late = np.mean([r["l_clism"] for r in pretrained.log if 1800 <= r["step"] <= 2000])
    ratio = late / early
    ok = len(pretrained.log) == 2000 and accuracy >= 0.90 and ratio < 0.25 and pretrained.seconds < 600
    verdict(
        record_property, 7, "CLISM learnability", ok,
        f"held-out exact-span acc {accuracy:.4f} over {slots} slots, loss ratio {ratio:.3f}, pre-training {pretrained.seconds:.0f}s",
    )


# -- 8./9. transfer experiments ------------------------------------------------------


def _fewshot(model, paths, vocab, size, use_que):
    train = load_qa_corpus(paths["qa_train"], vocab)
    test = load_qa_corpus(paths["qa_test"], vocab)
    plan = FewShotPlan(sizes=(size,), seeds=5, steps=200)
    report = run_fewshot(model, train, test, plan, FinetuneConfig(use_que=use_que))
    return [r["f1"] for r in report.fewshot[str(size)]["per_seed"]]


def test_criterion_8_transfer_direction(record_property, pretrained):
    random_init = Encoder(pretrained.model.cfg, seed=0)
    pre = _fewshot(pretrained.model, pretrained.paths, pretrained.vocab, 128, True)
    rnd = _fewshot(random_init, pretrained.paths, pretrained.vocab, 128, True)
    gap = np.mean(pre) - np.mean(rnd)
    wins = sum(a > b for a, b in zip(pre, rnd))
    ok = gap >= 10 and wins >= 4
    verdict(
        record_property, 8, "transfer direction", ok,
        f"pre-trained {np.mean(pre):.1f} vs random {np.mean(rnd):.1f} F1, gap {gap:.1f}, wins {wins}/5",
    )


def test_criterion_9_que_ablation(record_property, pretrained):
    with_que = _fewshot(pretrained.model, pretrained.paths, pretrained.vocab, 64, True)
    without = _fewshot(pretrained.model, pretrained.paths, pretrained.vocab, 64, False)
    ok = np.mean(with_que) > np.mean(without)
    verdict(record_property, 9, "[QUE] ablation direction", ok, f"[QUE] {np.mean(with_que):.1f} vs no-[QUE] {np.mean(without):.1f} mean F1 at 64 examples")


# -- 10. ablation arithmetic -------------------------------------------------------

# parameters that only one objective can reach
EXCLUSIVE = {"clism": ("w_start", "w_end"), "mlm": ("mlm_bias",)}


def test_criterion_10_ablation_arithmetic(record_property, corpus, tmp_path):
    _, _, vocab, instances = corpus
    cfg = ModelConfig.preset("desk", vocab.size)
    batch = collate(instances[:16])
    worst_sum, worst_grad, problems = 0.0, 0.0, []
    for r in range(1, 4):
        for enabled in itertools.combinations(TERMS, r):
            ablate = [t for t in TERMS if t not in enabled]
            flags = LossFlags.ablate(*ablate)
            # logged arithmetic over a short run
            res = pretrain(instances[:64], cfg, TrainConfig(steps=3, warmup=1, ablate=ablate), tmp_path / "-".join(enabled))
            for row in read_log(res.log_path):
                parts = [row[f"l_{t}"] for t in enabled]
                worst_sum = max(worst_sum, abs(row["l_total"] - sum(parts)))
                if any(row[f"l_{t}"] is not None for t in ablate):
                    problems.append(f"{ablate} logged")
            # the gradient of the total is the sum of the enabled terms' gradients (float64 to keep
            # summation noise far below the tolerance)
            model = Encoder(cfg, seed=0).double().eval()
            model.zero_grad()
            total_loss(compute_losses(model, batch, flags), flags).total.backward()
            total = {n: p.grad.clone() if p.grad is not None else torch.zeros_like(p) for n, p in model.named_parameters()}
            summed = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
            for t in enabled:
                only = LossFlags.ablate(*[x for x in TERMS if x != t])
                model.zero_grad()
                compute_losses(model, batch, only)[t].backward()
                for n, p in model.named_parameters():
                    if p.grad is not None:
                        summed[n] += p.grad
            for n in total:
                worst_grad = max(worst_grad, float((total[n] - summed[n]).abs().max()))
            # parameter-delta: one step with the disabled terms frozen leaves their exclusive parameters untouched
            model = Encoder(cfg, seed=0)
            before = {n: p.detach().clone() for n, p in model.named_parameters()}
            train_step(model, make_optimizer(model), batch, 1, TrainConfig(steps=1, warmup=0, lr=1e-3, ablate=ablate))
            after = dict(model.named_parameters())
            for t in ablate:
                for name in EXCLUSIVE.get(t, ()):
                    if not torch.equal(before[name], after[name].detach()):
                        problems.append(f"{name} moved with {t} disabled")
            for t in enabled:
                for name in EXCLUSIVE.get(t, ()):
                    if torch.equal(before[name], after[name].detach()):
                        problems.append(f"{name} frozen with {t} enabled")
    ok = worst_sum <= 1e-6 and worst_grad <= 1e-6 and not problems
    verdict(
        record_property, 10, "ablation arithmetic", ok,
        f"7 flag subsets; max |l_total - sum| {worst_sum:.1e}, max grad residual {worst_grad:.1e}, issues {problems or 'none'}",
    )


# -- 11. determinism and persistence -------------------------------------------------


def _cli_pipeline(root: Path, syn: Path, threads: int) -> List[str]:
    def run(*argv) -> str:
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli.main([str(a) for a in argv] + ["--threads", str(threads)])
        payload = json.loads(buf.getvalue())
        assert code == 0, payload
        return payload["output_hash"]

    return [
        run("build-data", "--out", root / "data", "--parallel", syn / "parallel.tsv", "--gazetteer", syn / "gazetteer.txt", "--vocab-extra", syn / "qa_train.jsonl", syn / "qa_test.jsonl"),
        run("pretrain", "--out", root / "pt", "--instances", root / "data/instances.jsonl", "--steps", 40, "--warmup", 10, "--checkpoint-interval", 20),
        run("finetune", "--out", root / "ft", "--checkpoint", root / "pt/final", "--task", "qa", "--train", syn / "qa_train.jsonl", "--steps", 20),
        run("eval", "--out", root / "ev", "--checkpoint", root / "ft/finetuned", "--eval-files", syn / "qa_test.jsonl"),
        run("fewshot", "--out", root / "fs", "--checkpoint", root / "pt/final", "--train", syn / "qa_train.jsonl", "--test", syn / "qa_test.jsonl", "--sizes", 16, 32, "--seeds", 2, "--fewshot-steps", 10),
    ]


def test_criterion_11_determinism(record_property, pretrained, tmp_path):
    syn = tmp_path / "syn"
    write_synthetic(syn, pairs=600, vocab_size=200, seed=SEED, qa_train=64, qa_test=32, ner_train=0, ner_test=0)
    runs = {
        "threads=1": _cli_pipeline(tmp_path / "a", syn, 1),
        "threads=1 again": _cli_pipeline(tmp_path / "b", syn, 1),
        "threads=2": _cli_pipeline(tmp_path / "c", syn, 2),
    }
    identical = len({tuple(h) for h in runs.values()}) == 1
    files_equal = all(
        (tmp_path / "a" / rel).read_bytes() == (tmp_path / other / rel).read_bytes()
        for other in ("b", "c")
        for rel in ("data/instances.jsonl", "pt/final.bin", "pt/ckpt-000020.bin", "ft/finetuned.bin", "ev/metrics.json", "fs/metrics.json")
    )
    save_model(tmp_path / "rt", pretrained.model)
    reloaded, _, _ = load_model(tmp_path / "rt")
    save_model(tmp_path / "rt2", reloaded)
    round_trip = all(torch.equal(a, b) for a, b in zip(pretrained.model.state_dict().values(), reloaded.state_dict().values()))
    round_trip &= (tmp_path / "rt.bin").read_bytes() == (tmp_path / "rt2.bin").read_bytes()
    ok = identical and files_equal and round_trip
    verdict(
        record_property, 11, "determinism and persistence", ok,
        f"instances/checkpoints/reports identical across runs and --threads 1/2: {identical and files_equal}; bit-exact round trip: {round_trip}",
    )
