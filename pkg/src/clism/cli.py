"""Command-line entry point: ``clism <command> [options]``.

Every command writes ``run_manifest.json`` into its output directory and
prints a single JSON summary line on stdout. Options may also come from a
JSON file given with ``--config``; explicit flags win over the file.

Exit codes:
  0  success
  1  unexpected internal error
  2  usage error (bad flags or config)
  3  input error (missing file, malformed corpus, unlocatable answer)
  4  numerical failure (non-finite loss)
  5  validation failure (e.g. gradient check above tolerance)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from . import aligner, finetune_eval, span_pipeline, synthetic, trainer
from .corpus_io import CorpusFormatError, UnlocatableAnswerError, Vocabulary, build_vocabulary, load_parallel_corpus, load_qa_corpus, load_tagged_corpus
from .encoder import Encoder, ModelConfig, load_model

logger = logging.getLogger("clism")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC, EXIT_VALIDATION = 0, 1, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "CLISM_OUTPUT_ROOT"
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class ValidationFailed(Exception):
    pass


# -- manifest -------------------------------------------------------------------


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def tree_hash(root: Path, exclude: Sequence[str] = (MANIFEST_NAME,)) -> Dict[str, object]:
    """Per-file git blob ids plus one digest over the sorted ``path blob`` lines."""
    files = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel not in exclude:
            files[rel] = git_blob_hash(path.read_bytes())
    listing = "".join(f"{rel} {blob}\n" for rel, blob in files.items()).encode()
    return {"files": files, "tree": hashlib.sha1(listing).hexdigest()}


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict[str, object]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    output_hash: str = ""
    duration_seconds: float = 0.0

    def write(self, out_dir: Path) -> Path:
        """Atomic write: temp file in the same directory, then rename."""
        target = out_dir / MANIFEST_NAME
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True)
            f.write("\n")
        os.replace(tmp, target)
        return target


# -- option handling --------------------------------------------------------------


def _resolve(args: argparse.Namespace, defaults: Dict[str, object]) -> Dict[str, object]:
    """defaults < --config file < explicit flags (flags default to None)."""
    resolved = dict(defaults)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(overrides) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(overrides)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _vocab_path(explicit: Optional[str], beside: Path) -> Path:
    return _require(explicit or str(beside.parent / "vocab.json"), "vocabulary (--vocab)")


def _checkpoint_prefix(path: Optional[str], what: str = "--checkpoint") -> Path:
    """Accept ``prefix``, ``prefix.json`` or ``prefix.bin``; both files must exist."""
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    prefix = p.with_suffix("") if p.suffix in (".json", ".bin") else p
    for suffix in (".json", ".bin"):
        if not prefix.with_suffix(suffix).is_file():
            raise FileNotFoundError(f"{what} not found: {prefix.with_suffix(suffix)}")
    return prefix


# -- commands ---------------------------------------------------------------------


def cmd_make_synthetic(args, out: Path) -> dict:
    cfg = _resolve(args, {"pairs": 1000, "vocab": 200, "seed": 0, "qa_train": 1024, "qa_test": 256, "ner_train": 512, "ner_test": 128})
    if cfg["pairs"] <= 0:
        raise UsageError("--pairs must be positive")
    paths = synthetic.write_synthetic(
        out, cfg["pairs"], cfg["vocab"], cfg["seed"], cfg["qa_train"], cfg["qa_test"], cfg["ner_train"], cfg["ner_test"]
    )
    return {"config": cfg, "inputs": [], "summary": {role: str(p) for role, p in paths.items()}}


def cmd_build_data(args, out: Path) -> dict:
    cfg = _resolve(
        args,
        {"seed": 0, "max_spans": 4, "max_length": 256, "em_iterations": 5, "stopwords": "en", "min_count": 1},
    )
    parallel = _require(args.parallel, "--parallel")
    inputs = [parallel]
    if args.vocab:
        vocab = Vocabulary.load(_require(args.vocab, "--vocab"))
        inputs.append(Path(args.vocab))
    else:
        extra = [_require(p, "--vocab-extra") for p in args.vocab_extra or []]
        inputs += extra
        vocab = build_vocabulary([parallel, *extra], cfg["min_count"])
    vocab.save(out / "vocab.json")
    stats: Dict[str, int] = {}
    pairs = load_parallel_corpus(parallel, vocab, stats=stats)
    if not pairs:
        raise CorpusFormatError(f"{parallel}: no usable sentence pairs")
    if args.alignments:
        path = _require(args.alignments, "--alignments")
        inputs.append(path)
        all_links = aligner.read_pharaoh(path.read_text(encoding="utf-8"))
        alignments = []
        for pair in pairs:
            if pair.pair_id - 1 >= len(all_links):
                raise CorpusFormatError(f"{path}: no alignment line for pair on line {pair.pair_id}")
            alignments.append(all_links[pair.pair_id - 1])
    else:
        table = aligner.train_model1(pairs, cfg["em_iterations"], threads=args.threads)
        table.save_jsonl(out / "ttable.jsonl", vocab)
        alignments = [aligner.viterbi_align(p, table) for p in pairs]
        # one line per TSV line; skipped pairs get an empty line
        by_line = {p.pair_id: a for p, a in zip(pairs, alignments)}
        with open(parallel, "r", encoding="utf-8") as f:
            n_lines = sum(1 for _ in f)
        lines = [by_line.get(k, aligner.Alignment.of([])) for k in range(1, n_lines + 1)]
        (out / "alignments.pharaoh").write_text(aligner.write_pharaoh(lines), encoding="utf-8")
    gazetteer = None
    if args.gazetteer:
        inputs.append(_require(args.gazetteer, "--gazetteer"))
        gazetteer = span_pipeline.Gazetteer.load(args.gazetteer)
    stop_src = cfg["stopwords"]
    if Path(stop_src).exists():
        inputs.append(Path(stop_src))
    stopwords = span_pipeline.load_stopwords(stop_src)
    instances, pstats = span_pipeline.build_dataset(
        pairs,
        alignments,
        vocab,
        cfg["seed"],
        gazetteer,
        stopwords,
        span_pipeline.InstanceConfig(max_length=cfg["max_length"], max_spans=cfg["max_spans"]),
        threads=args.threads,
    )
    span_pipeline.write_instances(instances, out / "instances.jsonl")
    report = {**asdict(pstats), "pairs_skipped": stats.get("skipped", 0), "pairs_truncated": stats.get("truncated", 0)}
    (out / "build_stats.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return {"config": cfg, "inputs": inputs, "summary": report}


def cmd_pretrain(args, out: Path) -> dict:
    preset = args.preset or "desk"
    base = asdict(trainer.TrainConfig.preset_config(preset))
    base.pop("ablate")
    base.pop("preset")
    cfg = _resolve(args, base)
    instances_path = _require(args.instances, "--instances")
    vocab_file = _vocab_path(args.vocab, instances_path)
    vocab = Vocabulary.load(vocab_file)
    train_cfg = trainer.TrainConfig(**cfg, ablate=sorted(set(args.ablate or [])), preset=preset)
    instances = span_pipeline.read_instances(instances_path)
    model_cfg = ModelConfig.preset(preset, vocab.size)
    width = max(len(i.input_ids) for i in instances)
    if width > model_cfg.max_length:
        raise UsageError(f"instances of length {width} exceed the model's {model_cfg.max_length} positions")
    shutil.copyfile(vocab_file, out / "vocab.json")
    resume = _checkpoint_prefix(args.resume, "--resume") if args.resume else None
    result = trainer.pretrain(instances, model_cfg, train_cfg, out, resume=resume)
    log = trainer.read_log(result.log_path)
    inputs = [instances_path, vocab_file] + ([resume.with_suffix(".json"), resume.with_suffix(".bin")] if resume else [])
    summary = {"final_checkpoint": str(result.final_checkpoint.with_suffix("")), "steps": result.steps, "last": log[-1] if log else None}
    return {"config": {**asdict(train_cfg), "model": asdict(model_cfg)}, "inputs": inputs, "summary": summary}


def _finetune_config(args, task: str) -> finetune_eval.FinetuneConfig:
    preset = args.preset or "desk"
    base = asdict(finetune_eval.FinetuneConfig.preset_config(task, preset))
    for key in ("preset", "use_que", "reinit_span_head"):
        base.pop(key)
    cfg = _resolve(args, base)
    return finetune_eval.FinetuneConfig(
        **cfg, use_que=not args.no_que, reinit_span_head=bool(getattr(args, "reinit_span_head", False)), preset=preset
    )


def _load_pretrained(args) -> tuple[Encoder, Path, List[Path]]:
    prefix = _checkpoint_prefix(args.checkpoint)
    model, _, _ = load_model(prefix)
    vocab_file = _vocab_path(args.vocab, prefix)
    return model, vocab_file, [prefix.with_suffix(".json"), prefix.with_suffix(".bin"), vocab_file]


def cmd_finetune(args, out: Path) -> dict:
    if args.checkpoint is None and not args.random_init:
        raise UsageError("--checkpoint or --random-init is required")
    config = _finetune_config(args, args.task)
    if args.random_init:
        vocab_file = _require(args.vocab, "--vocab")
        vocab = Vocabulary.load(vocab_file)
        model = Encoder(ModelConfig.preset(config.preset, vocab.size), seed=config.seed)
        inputs = [vocab_file]
    else:
        model, vocab_file, inputs = _load_pretrained(args)
        vocab = Vocabulary.load(vocab_file)
    train_path = _require(args.train, "--train")
    inputs.append(train_path)
    head = None
    if args.task == "qa":
        result = finetune_eval.finetune_qa(model, load_qa_corpus(train_path, vocab), config)
    else:
        head, result = finetune_eval.finetune_ner(model, load_tagged_corpus(train_path), vocab, config)
    finetune_eval.save_finetuned(out / "finetuned", model, args.task, config, head)
    shutil.copyfile(vocab_file, out / "vocab.json")
    # paths relative to the run directory keep the report relocatable
    report = {"checkpoint": "finetuned", "steps": result.steps, "dropped": result.dropped, "final_loss": result.losses[-1]}
    (out / "finetune_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return {"config": asdict(config), "inputs": inputs, "summary": {**report, "checkpoint": str(out / "finetuned")}}


def cmd_eval(args, out: Path) -> dict:
    prefix = _checkpoint_prefix(args.checkpoint)
    model, head, meta = finetune_eval.load_finetuned(prefix)
    task = args.task or meta.get("task")
    if task not in ("qa", "ner"):
        raise UsageError("--task must be qa or ner")
    if task == "ner" and head is None:
        raise UsageError("checkpoint has no tagging head; fine-tune with --task ner first")
    vocab_file = _vocab_path(args.vocab, prefix)
    vocab = Vocabulary.load(vocab_file)
    config = finetune_eval.FinetuneConfig(**meta["finetune_config"])
    if not args.eval_files:
        raise UsageError("--eval-files needs at least one file")
    report = finetune_eval.MetricsReport(task=task, dataset=args.dataset or "", config={"finetune": asdict(config)})
    inputs = [prefix.with_suffix(".json"), prefix.with_suffix(".bin"), vocab_file]
    for name in args.eval_files:
        path = _require(name, "--eval-files")
        inputs.append(path)
        if task == "qa":
            metrics = finetune_eval.evaluate_qa(model, load_qa_corpus(path, vocab), config)
        else:
            metrics = finetune_eval.evaluate_ner(model, head, load_tagged_corpus(path), vocab, config.max_length)
        report.per_eval_file[path.name] = metrics
    report.write(out / "metrics.json")
    return {"config": {"task": task, **asdict(config)}, "inputs": inputs, "summary": report.per_eval_file}


def cmd_fewshot(args, out: Path) -> dict:
    config = _finetune_config(args, "qa")
    if args.random_init:
        vocab_file = _require(args.vocab, "--vocab")
        vocab = Vocabulary.load(vocab_file)
        model = Encoder(ModelConfig.preset(config.preset, vocab.size), seed=args.init_seed)
        inputs = [vocab_file]
    else:
        if args.checkpoint is None:
            raise UsageError("--checkpoint or --random-init is required")
        model, vocab_file, inputs = _load_pretrained(args)
        vocab = Vocabulary.load(vocab_file)
    train_path, test_path = _require(args.train, "--train"), _require(args.test, "--test")
    inputs += [train_path, test_path]
    plan = finetune_eval.FewShotPlan(
        sizes=tuple(args.sizes or (64, 128, 256, 512, 1024)),
        seeds=args.seeds if args.seeds is not None else 5,
        steps=args.fewshot_steps if args.fewshot_steps is not None else 200,
        master_seed=args.master_seed,
    )
    report = finetune_eval.run_fewshot(
        model, load_qa_corpus(train_path, vocab), load_qa_corpus(test_path, vocab), plan, config, args.dataset or test_path.stem, args.threads
    )
    report.write(out / "metrics.json")
    (out / "fewshot.csv").write_text(report.plot_csv(), encoding="utf-8")
    summary = {size: entry["mean"] for size, entry in report.fewshot.items()}
    return {"config": report.config, "inputs": inputs, "summary": summary}


def cmd_gradcheck(args, out: Path) -> dict:
    losses = ["clism", "cacr", "mlm", "total"] if args.loss == "all" else [args.loss]
    reports = [trainer.grad_check(loss, n_params=args.params, seed=args.seed or 0) for loss in losses]
    payload = {r.loss: r.as_dict() for r in reports}
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    result = {"config": {"losses": losses, "params": args.params, "tolerance": trainer.GRADCHECK_TOLERANCE}, "inputs": [], "summary": payload}
    if not all(r.passed for r in reports):
        raise ValidationFailed(result)
    return result


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "build-data": cmd_build_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "fewshot": cmd_fewshot,
    "gradcheck": cmd_gradcheck,
}


def _finetune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=["desk", "paper-ref"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-length", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--max-answer-length", type=int)
    p.add_argument("--no-que", action="store_true", help="omit [QUE]; the [CLS] row scores spans")
    p.add_argument("--vocab")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command> or ./runs/<command>)")
    common.add_argument("--config", help="JSON file of option overrides")
    common.add_argument("--threads", type=int, default=1, help="worker threads for data-side work; results do not depend on it")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="clism", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", parents=[common], help="write a synthetic copy-language corpus")
    p.add_argument("--pairs", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--qa-train", type=int)
    p.add_argument("--qa-test", type=int)
    p.add_argument("--ner-train", type=int)
    p.add_argument("--ner-test", type=int)

    p = sub.add_parser("build-data", parents=[common], help="align, select spans and write pre-training instances")
    p.add_argument("--parallel", required=True)
    p.add_argument("--gazetteer")
    p.add_argument("--stopwords", help="stopword file or language code (default: en)")
    p.add_argument("--alignments", help="Pharaoh file; skips the aligner")
    p.add_argument("--vocab", help="existing vocabulary JSON")
    p.add_argument("--vocab-extra", nargs="*", help="extra corpora (QA/NER files) to include in the vocabulary")
    p.add_argument("--max-spans", type=int)
    p.add_argument("--max-length", type=int)
    p.add_argument("--em-iterations", type=int)
    p.add_argument("--min-count", type=int)

    p = sub.add_parser("pretrain", parents=[common], help="multi-task pre-training")
    p.add_argument("--instances", required=True)
    p.add_argument("--vocab", help="vocabulary JSON (default: beside the instances file)")
    p.add_argument("--preset", choices=["desk", "paper-ref"])
    p.add_argument("--ablate", nargs="*", choices=["clism", "cacr", "mlm"])
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--resume", help="checkpoint prefix to continue from")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune on QA or NER")
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true", help="start from a freshly initialized encoder")
    p.add_argument("--task", choices=["qa", "ner"], required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--reinit-span-head", action="store_true")
    _finetune_flags(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=["qa", "ner"])
    p.add_argument("--eval-files", nargs="+", required=True)
    p.add_argument("--dataset")
    p.add_argument("--vocab")

    p = sub.add_parser("fewshot", parents=[common], help="few-shot QA protocol")
    p.add_argument("--checkpoint")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--seeds", type=int, help="runs per size")
    p.add_argument("--fewshot-steps", type=int, help="optimizer steps per run (default 200)")
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--dataset")
    _finetune_flags(p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--loss", choices=["clism", "cacr", "mlm", "total", "all"], default="all")
    p.add_argument("--params", type=int, default=100)
    return parser


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True, default=str) + "\n")
    sys.stdout.flush()


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        _emit({"command": args.command, "status": "usage_error", "error": "--threads must be >= 1"})
        return EXIT_USAGE
    # Torch stays single-threaded so results never depend on --threads.
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    out = _out_dir(args)
    status, code, result, error = "ok", EXIT_OK, None, None
    try:
        result = COMMANDS[args.command](args, out)
    except UsageError as exc:
        status, code, error = "usage_error", EXIT_USAGE, str(exc)
    except (FileNotFoundError, CorpusFormatError, UnlocatableAnswerError) as exc:
        status, code, error = "input_error", EXIT_INPUT, str(exc)
    except (trainer.NonFiniteLoss, FloatingPointError) as exc:
        status, code, error = "numeric_error", EXIT_NUMERIC, str(exc)
    except ValidationFailed as exc:
        status, code, result, error = "validation_failed", EXIT_VALIDATION, exc.args[0], "check above tolerance"
    except ValueError as exc:
        status, code, error = "input_error", EXIT_INPUT, str(exc)
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        logger.exception("internal error")
        status, code, error = "internal_error", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}"
    hashes = tree_hash(out)
    manifest = RunManifest(
        command=args.command,
        argv=argv,
        config=(result or {}).get("config", {}),
        inputs={str(p): sha256_file(p) for p in (result or {}).get("inputs", []) if Path(p).is_file()},
        outputs=hashes["files"],
        output_hash=hashes["tree"],
        duration_seconds=round(time.perf_counter() - t0, 3),
    )
    manifest.write(out)
    payload = {"command": args.command, "status": status, "out": str(out), "output_hash": hashes["tree"]}
    if result is not None:
        payload["summary"] = result.get("summary")
    if error is not None:
        payload["error"] = error
    _emit(payload)
    return code


if __name__ == "__main__":
    sys.exit(main())
