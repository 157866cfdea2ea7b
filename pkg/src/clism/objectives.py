"""Training losses: span extraction from [QUE] slots, the three-view
contrastive consistency term, masked-token prediction, and their sum."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

TERMS = ("clism", "cacr", "mlm")

# Counted warnings (e.g. batches without any corrupted position).
warning_counts: Counter = Counter()


@dataclass
class CacrConfig:
    temperature: float = 20.0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossFlags:
    clism: bool = True
    cacr: bool = True
    mlm: bool = True

    @classmethod
    def ablate(cls, *names: str) -> "LossFlags":
        unknown = set(names) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown objective(s): {sorted(unknown)}")
        return cls(**{t: t not in names for t in TERMS})

    def enabled(self) -> Dict[str, bool]:
        return {t: getattr(self, t) for t in TERMS}


@dataclass
class LossReport:
    l_clism: Optional[float]
    l_cacr: Optional[float]
    l_mlm: Optional[float]
    l_total: float
    enabled: Dict[str, bool]
    total: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_log(self) -> dict:
        return {
            "l_clism": self.l_clism,
            "l_cacr": self.l_cacr,
            "l_mlm": self.l_mlm,
            "l_total": self.l_total,
        }


def clism_loss(start_logits: torch.Tensor, end_logits: torch.Tensor, answer_starts, answer_ends) -> torch.Tensor:
    """Mean over slots of ``-log P(start) - log P(end)``.

    Logits are (S, l) with ``-inf`` at padding; the softmax runs over all
    unpadded positions.
    """
    starts = torch.as_tensor(answer_starts, dtype=torch.long).reshape(-1)
    ends = torch.as_tensor(answer_ends, dtype=torch.long).reshape(-1)
    if start_logits.shape[0] != len(starts) or end_logits.shape[0] != len(ends):
        raise ValueError("one (start, end) gold pair is required per question slot")
    if len(starts) == 0:
        raise ValueError("no question slots")
    slot = torch.arange(len(starts))
    if torch.isinf(start_logits[slot, starts]).any() or torch.isinf(end_logits[slot, ends]).any():
        raise ValueError("gold index at a padded position (corrupt instance)")
    nll_start = -F.log_softmax(start_logits, dim=-1)[slot, starts]
    nll_end = -F.log_softmax(end_logits, dim=-1)[slot, ends]
    return (nll_start + nll_end).mean()


def _unit(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return x / norms


def contrastive_loss(anchors: torch.Tensor, candidates: torch.Tensor, config: CacrConfig = CacrConfig()) -> torch.Tensor:
    """Batch mean of the in-batch contrastive term.

    Row ``i`` of ``anchors`` is scored against every row of ``candidates``
    by cosine similarity divided by the temperature; row ``i`` of
    ``candidates`` is its positive.
    """
    if anchors.shape != candidates.shape or anchors.dim() != 2:
        raise ValueError("anchors and candidates must both be (B, d)")
    sims = _unit(anchors) @ _unit(candidates).T / config.temperature
    target = torch.arange(anchors.shape[0])
    return F.cross_entropy(sims, target)


def contrastive_term(anchor: torch.Tensor, positive_index: int, candidates: torch.Tensor, config: CacrConfig = CacrConfig()) -> torch.Tensor:
    candidates = torch.as_tensor(candidates)
    if candidates.dim() != 2 or candidates.shape[0] == 0:
        raise ValueError("candidates must be a non-empty (B, d) tensor")
    if not 0 <= positive_index < candidates.shape[0]:
        raise IndexError(f"positive index {positive_index} out of range")
    sims = _unit(candidates) @ _unit(anchor.reshape(1, -1)).reshape(-1) / config.temperature
    return -F.log_softmax(sims, dim=0)[positive_index]


def cacr_loss(r_hat_s: torch.Tensor, r_t: torch.Tensor, r_s: torch.Tensor, config: CacrConfig = CacrConfig()) -> torch.Tensor:
    """``L(r_t, r_hat_s) + L(r_s, r_hat_s) + L(r_t, r_s)`` over (B, d) views."""
    return (
        contrastive_loss(r_t, r_hat_s, config)
        + contrastive_loss(r_s, r_hat_s, config)
        + contrastive_loss(r_t, r_s, config)
    )


def mlm_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy over positions whose label is not -1."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    selected = labels != -1
    if not selected.any():
        warning_counts["mlm_no_corrupted_positions"] += 1
        logger.warning("MLM batch without corrupted positions; loss set to 0")
        return logits.sum() * 0.0
    return F.cross_entropy(logits[selected], labels[selected])


def total_loss(terms: Mapping[str, Optional[torch.Tensor | float]], flags: LossFlags) -> LossReport:
    """Unweighted sum of the enabled terms; disabled ones are ignored."""
    enabled = flags.enabled()
    if not any(enabled.values()):
        raise ValueError("no objective enabled")
    values: Dict[str, Optional[float]] = {}
    parts = []
    for name in TERMS:
        if not enabled[name]:
            values[name] = None
            continue
        term = terms.get(name)
        if term is None:
            raise ValueError(f"objective {name!r} is enabled but was not computed")
        parts.append(term)
        values[name] = float(term.detach()) if isinstance(term, torch.Tensor) else float(term)
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return LossReport(
        l_clism=values["clism"],
        l_cacr=values["cacr"],
        l_mlm=values["mlm"],
        l_total=math.fsum(v for v in values.values() if v is not None),
        enabled=enabled,
        total=total if isinstance(total, torch.Tensor) else None,
    )
