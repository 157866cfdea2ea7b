"""Multi-task pre-training loop and finite-difference gradient check."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .corpus_io import CLS_ID, NUM_SPECIAL, PAD_ID, SEP_ID, ParallelPair, Vocabulary
from .encoder import Encoder, EncoderOutput, ModelConfig, encode, load_model, mlm_logits, pool, save_model, span_logits
from .objectives import CacrConfig, LossFlags, LossReport, cacr_loss, clism_loss, mlm_loss, total_loss
from .span_pipeline import ClismInstance, InstanceConfig, SpanProposal, build_instance

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, report: LossReport):
        super().__init__(f"non-finite loss at step {step}: {report.as_log()}")
        self.step = step
        self.report = report


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 2000
    lr: float = 3e-4
    warmup: int = 200
    seed: int = 0
    checkpoint_interval: int = 500
    clip_norm: Optional[float] = 1.0
    temperature: float = 20.0
    ablate: List[str] = field(default_factory=list)
    preset: str = "desk"

    def __post_init__(self) -> None:
        if self.batch_size <= 0 or self.steps <= 0 or self.lr <= 0 or self.checkpoint_interval <= 0:
            raise ValueError("batch size, steps, learning rate and checkpoint interval must be positive")
        if not 0 <= self.warmup <= self.steps:
            raise ValueError("warmup must lie in [0, steps]")
        LossFlags.ablate(*self.ablate)

    @property
    def flags(self) -> LossFlags:
        return LossFlags.ablate(*self.ablate)

    @classmethod
    def preset_config(cls, name: str, **overrides) -> "TrainConfig":
        if name == "desk":
            base = cls(preset="desk")
        elif name == "paper-ref":
            base = cls(batch_size=64, steps=15_000, lr=1e-5, warmup=1_500, checkpoint_interval=5_000, preset="paper-ref")
        else:
            raise ValueError(f"unknown training preset {name!r}")
        return replace(base, **overrides)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``config.lr`` over ``config.warmup`` steps, then constant."""
    if config.warmup == 0:
        return config.lr
    return config.lr * min(1.0, step / config.warmup)


@dataclass
class Batch:
    input_ids: torch.Tensor
    attention_mask: torch.Tensor
    que_rows: torch.Tensor
    que_positions: torch.Tensor
    answer_starts: torch.Tensor
    answer_ends: torch.Tensor
    mlm_labels: torch.Tensor
    source_bounds: torch.Tensor
    target_bounds: torch.Tensor
    plain_ids: torch.Tensor
    plain_mask: torch.Tensor


def collate(instances: Sequence[ClismInstance]) -> Batch:
    """Stack instances, trimming padding beyond the longest real sequence."""
    if not instances:
        raise ValueError("empty batch")
    width = max(sum(inst.attention_mask) for inst in instances)
    ids = torch.tensor([inst.input_ids[:width] for inst in instances], dtype=torch.long)
    mask = torch.tensor([inst.attention_mask[:width] for inst in instances], dtype=torch.bool)
    labels = torch.tensor([inst.mlm_labels[:width] for inst in instances], dtype=torch.long)
    rows, ques, starts, ends = [], [], [], []
    for b, inst in enumerate(instances):
        if not (len(inst.que_positions) == len(inst.answer_starts) == len(inst.answer_ends) >= 1):
            raise ValueError(f"instance {inst.pair_id}: question slots and answers disagree")
        rows += [b] * len(inst.que_positions)
        ques += inst.que_positions
        starts += inst.answer_starts
        ends += inst.answer_ends
    plain_width = max(len(inst.source_ids) for inst in instances) + 2
    plain = torch.full((len(instances), plain_width), PAD_ID, dtype=torch.long)
    plain_mask = torch.zeros_like(plain, dtype=torch.bool)
    for b, inst in enumerate(instances):
        n = len(inst.source_ids)
        plain[b, : n + 2] = torch.tensor([CLS_ID, *inst.source_ids, SEP_ID])
        plain_mask[b, : n + 2] = True
    return Batch(
        input_ids=ids,
        attention_mask=mask,
        que_rows=torch.tensor(rows),
        que_positions=torch.tensor(ques),
        answer_starts=torch.tensor(starts),
        answer_ends=torch.tensor(ends),
        mlm_labels=labels,
        source_bounds=torch.tensor([inst.segment_bounds[0] for inst in instances]),
        target_bounds=torch.tensor([inst.segment_bounds[1] for inst in instances]),
        plain_ids=plain,
        plain_mask=plain_mask,
    )


def compute_losses(
    model: Encoder,
    batch: Batch,
    flags: LossFlags,
    cacr: CacrConfig = CacrConfig(),
    generator: Optional[torch.Generator] = None,
) -> Dict[str, torch.Tensor]:
    """Forward pass(es) for the enabled objectives only."""
    out = encode(model, batch.input_ids, batch.attention_mask, generator)
    terms: Dict[str, torch.Tensor] = {}
    if flags.clism:
        start, end = span_logits(out, batch.que_positions, model, rows=batch.que_rows)
        terms["clism"] = clism_loss(start, end, batch.answer_starts, batch.answer_ends)
    if flags.cacr:
        plain = encode(model, batch.plain_ids, batch.plain_mask, generator)
        n = batch.plain_mask.sum(dim=1) - 2
        r_s = pool(plain, torch.stack([torch.ones_like(n), n], dim=1))
        r_hat_s = pool(out, batch.source_bounds)
        r_t = pool(out, batch.target_bounds)
        terms["cacr"] = cacr_loss(r_hat_s, r_t, r_s, cacr)
    if flags.mlm:
        terms["mlm"] = mlm_loss(mlm_logits(out, model), batch.mlm_labels)
    return terms


def make_optimizer(model: Encoder, lr: float = 0.0) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + step)


def train_step(
    model: Encoder,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    step: int,
    config: TrainConfig,
) -> tuple[LossReport, float]:
    """One forward/backward/Adam update at 1-based ``step``; returns (report, grad norm)."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    terms = compute_losses(model, batch, config.flags, CacrConfig(config.temperature), _step_generator(config.seed, step))
    report = total_loss(terms, config.flags)
    if not math.isfinite(report.l_total):
        raise NonFiniteLoss(step, report)
    report.total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    if config.clip_norm is not None:
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, config.clip_norm))
    else:
        grad_norm = float(torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in params])))
    lr = lr_at(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return report, grad_norm


def batch_indices(step: int, n_items: int, batch_size: int, seed: int) -> List[int]:
    """Items for 1-based ``step``: consecutive slices of per-epoch seeded shuffles."""
    out = []
    pos = (step - 1) * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n_items)
        perm = np.random.default_rng([seed, epoch]).permutation(n_items)
        take = min(batch_size - len(out), n_items - offset)
        out.extend(int(i) for i in perm[offset : offset + take])
        pos += take
    return out


def optimizer_tensors(model: Encoder, optimizer: torch.optim.Optimizer) -> Dict[str, torch.Tensor]:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if state:
            out[f"adam.exp_avg.{name}"] = state["exp_avg"]
            out[f"adam.exp_avg_sq.{name}"] = state["exp_avg_sq"]
    return out


def restore_optimizer(model: Encoder, optimizer: torch.optim.Optimizer, tensors: Dict[str, torch.Tensor], step: int) -> None:
    for name, p in model.named_parameters():
        key = f"adam.exp_avg.{name}"
        if key in tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": tensors[key].to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"adam.exp_avg_sq.{name}"].to(p.dtype).clone(),
            }


def save_checkpoint(prefix: Path | str, model: Encoder, optimizer: Optional[torch.optim.Optimizer], step: int, config: TrainConfig) -> Path:
    prefix = Path(prefix)
    extra = optimizer_tensors(model, optimizer) if optimizer is not None else {}
    manifest, _ = save_model(prefix, model, extra, {"step": step, "train_config": asdict(config)})
    snapshot = {"model_config": asdict(model.cfg), "train_config": asdict(config), "step": step}
    prefix.with_suffix(".config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


@dataclass
class PretrainResult:
    final_checkpoint: Path
    log_path: Path
    steps: int
    seconds: float


def pretrain(
    instances: Sequence[ClismInstance],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: Path | str,
    resume: Optional[Path | str] = None,
    stop_after: Optional[int] = None,
    on_step: Optional[Callable[[int, LossReport], None]] = None,
) -> PretrainResult:
    """Train for ``config.steps`` steps, logging every step as JSONL.

    ``resume`` continues from a checkpoint written by this function;
    ``stop_after`` halts early (used to test interrupted runs).
    """
    if not instances:
        raise ValueError("no training instances")
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    if resume is not None:
        model, tensors, meta = load_model(resume)
        optimizer = make_optimizer(model)
        start = int(meta["step"])
        restore_optimizer(model, optimizer, tensors, start)
        mode = "a"
    else:
        model = Encoder(model_config, seed=config.seed)
        optimizer = make_optimizer(model)
        start = 0
        mode = "w"
    last = config.steps if stop_after is None else min(config.steps, stop_after)
    t0 = time.perf_counter()
    with open(log_path, mode, encoding="utf-8") as log:
        for step in range(start + 1, last + 1):
            idx = batch_indices(step, len(instances), config.batch_size, config.seed)
            batch = collate([instances[i] for i in idx])
            report, grad_norm = train_step(model, optimizer, batch, step, config)
            record = {"step": step, **report.as_log(), "lr": lr_at(step, config), "grad_norm": grad_norm}
            log.write(json.dumps(record) + "\n")
            if on_step is not None:
                on_step(step, report)
            if step % config.checkpoint_interval == 0 and step != config.steps:
                save_checkpoint(out_dir / f"ckpt-{step:06d}", model, optimizer, step, config)
    final = save_checkpoint(out_dir / ("final" if last == config.steps else f"ckpt-{last:06d}"), model, optimizer, last, config)
    return PretrainResult(final_checkpoint=final, log_path=log_path, steps=last, seconds=time.perf_counter() - t0)


def read_log(path: Path | str) -> List[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# -- gradient check -----------------------------------------------------------

GRADCHECK_TOLERANCE = 1e-6
# Smallest gradient magnitude at which h=1e-5 central differences in float64
# (noise ~1e-10) resolve a 1e-6 relative error; below it the error is
# effectively judged in absolute terms.
GRADIENT_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    loss: str
    max_rel_error: float
    worst_parameter: str
    checked: int
    passed: bool

    def as_dict(self) -> dict:
        return asdict(self)


def tiny_batch(vocab_size: int = 40, n: int = 4, seed: int = 0, max_length: int = 32) -> Batch:
    """A few random pre-training instances for numerical checks."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary.from_tokens(f"w{i}" for i in range(vocab_size - NUM_SPECIAL))
    instances = []
    for k in range(n):
        src_len, tgt_len = int(rng.integers(4, 8)), int(rng.integers(4, 8))
        src = tuple(int(t) for t in rng.integers(NUM_SPECIAL, vocab_size, src_len))
        tgt = tuple(int(t) for t in rng.integers(NUM_SPECIAL, vocab_size, tgt_len))
        pair = ParallelPair(k, src, tgt, " ".join(vocab.id_to_token[t] for t in src), " ".join(vocab.id_to_token[t] for t in tgt))
        spans = [(SpanProposal(1, 2, "annotation"), (0, 1)), (SpanProposal(src_len - 1, src_len - 1, "annotation"), (tgt_len - 2, tgt_len - 1))]
        # a high corruption rate keeps the MLM term populated in a tiny batch
        cfg = InstanceConfig(max_length=max_length, mlm_probability=0.5)
        instances.append(build_instance(pair, spans, vocab, seed, cfg))
    return collate(instances)


def grad_check(
    loss: str = "total",
    model_config: Optional[ModelConfig] = None,
    n_params: int = 100,
    h: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients with central differences in float64.

    ``loss`` is one of ``clism``, ``cacr``, ``mlm`` or ``total``. Relative
    error per coordinate is ``|a - n| / max(|a|, |n|, GRADIENT_FLOOR)``.
    """
    flags = LossFlags() if loss == "total" else LossFlags.ablate(*[t for t in ("clism", "cacr", "mlm") if t != loss])
    cfg = model_config or ModelConfig(vocab_size=40, layers=2, hidden=16, heads=2, max_length=32, dropout=0.0, init_std=0.1)
    if cfg.dropout != 0.0:
        raise ValueError("gradient check requires dropout 0")
    torch.set_num_threads(1)
    model = Encoder(cfg, seed=seed).double().eval()
    batch = tiny_batch(cfg.vocab_size, seed=seed, max_length=cfg.max_length)

    def value() -> torch.Tensor:
        return total_loss(compute_losses(model, batch, flags), flags).total

    model.zero_grad()
    value().backward()
    coords = []
    for name, p in model.named_parameters():
        if p.grad is not None:
            coords += [(name, p, i) for i in range(p.numel())]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coords), size=min(n_params, len(coords)), replace=False)
    worst, worst_name = 0.0, ""
    with torch.no_grad():
        for k in sorted(int(i) for i in picks):
            name, p, i = coords[k]
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[i])
            orig = float(flat[i])
            flat[i] = orig + h
            f_plus = float(value())
            flat[i] = orig - h
            f_minus = float(value())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRADIENT_FLOOR)
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckReport(loss, worst, worst_name, len(picks), worst < GRADCHECK_TOLERANCE)
