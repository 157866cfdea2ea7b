"""Pre-norm transformer encoder with span, MLM and pooling heads.

The span head scores every position ``k`` against the ``[QUE]`` row ``x_q``:
``start_k = x_k . (W_s x_q)`` and ``end_k = x_k . (W_e x_q)``. The MLM head is
tied to the token embedding matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: Optional[int] = None
    max_length: int = 256
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.ffn is None:
            self.ffn = 4 * self.hidden
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if min(self.vocab_size, self.layers, self.hidden, self.heads, self.max_length) <= 0:
            raise ValueError("model dimensions must be positive")

    @classmethod
    def preset(cls, name: str, vocab_size: int) -> "ModelConfig":
        if name == "desk":
            return cls(vocab_size=vocab_size)
        if name == "paper-ref":
            return cls(vocab_size=vocab_size, layers=12, hidden=768, heads=12, max_length=512)
        raise ValueError(f"unknown model preset {name!r}")


def dropout(x: torch.Tensor, p: float, training: bool, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Inverted dropout drawing its mask from an explicit generator."""
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.p = cfg.dropout
        self.ln1 = nn.LayerNorm(cfg.hidden)
        self.qkv = nn.Linear(cfg.hidden, 3 * cfg.hidden)
        self.out = nn.Linear(cfg.hidden, cfg.hidden)
        self.ln2 = nn.LayerNorm(cfg.hidden)
        self.ff1 = nn.Linear(cfg.hidden, cfg.ffn)
        self.ff2 = nn.Linear(cfg.ffn, cfg.hidden)

    def _split_heads(self, t: torch.Tensor) -> torch.Tensor:
        b, l, d = t.shape
        return t.view(b, l, self.heads, d // self.heads).transpose(1, 2)

    def _weights(self, q, k, key_mask):
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)

    def attention(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        """Row-stochastic attention weights (B, heads, l, l); padded keys get 0."""
        q, k, _ = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        return self._weights(self._split_heads(q), self._split_heads(k), key_mask)

    def forward(self, x, key_mask, generator=None):
        b, l, d = x.shape
        q, k, v = (self._split_heads(t) for t in self.qkv(self.ln1(x)).chunk(3, dim=-1))
        att = dropout(self._weights(q, k, key_mask), self.p, self.training, generator)
        ctx = (att @ v).transpose(1, 2).reshape(b, l, d)
        x = x + dropout(self.out(ctx), self.p, self.training, generator)
        h = self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x + dropout(h, self.p, self.training, generator)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.pos_emb = nn.Embedding(cfg.max_length, cfg.hidden)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.hidden)
        self.w_start = nn.Parameter(torch.empty(cfg.hidden, cfg.hidden))
        self.w_end = nn.Parameter(torch.empty(cfg.hidden, cfg.hidden))
        self.mlm_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen) * self.cfg.init_std)

    def reset_span_head(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in (self.w_start, self.w_end):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * self.cfg.init_std)

    def forward(self, input_ids, attention_mask, generator=None):
        return encode(self, input_ids, attention_mask, generator).hidden


@dataclass
class EncoderOutput:
    hidden: torch.Tensor  # (B, l, d)
    attention_mask: torch.Tensor  # (B, l) bool


def _as_batch(input_ids, attention_mask) -> Tuple[torch.Tensor, torch.Tensor]:
    ids = torch.as_tensor(input_ids, dtype=torch.long)
    mask = torch.as_tensor(attention_mask).bool()
    if ids.dim() == 1:
        ids, mask = ids[None], mask[None]
    return ids, mask


def encode(model: Encoder, input_ids, attention_mask, generator: Optional[torch.Generator] = None) -> EncoderOutput:
    ids, mask = _as_batch(input_ids, attention_mask)
    if ids.shape != mask.shape:
        raise ValueError(f"input_ids {tuple(ids.shape)} and attention_mask {tuple(mask.shape)} differ")
    length = ids.shape[1]
    if length > model.cfg.max_length:
        raise ValueError(f"sequence length {length} exceeds model maximum {model.cfg.max_length}")
    if not mask.any(dim=1).all():
        raise ValueError("every sequence needs at least one unpadded position")
    pos = torch.arange(length)
    x = model.tok_emb(ids) + model.pos_emb(pos)[None]
    x = dropout(x, model.cfg.dropout, model.training, generator)
    for block in model.blocks:
        x = block(x, mask, generator)
    return EncoderOutput(hidden=model.ln_f(x), attention_mask=mask)


def span_logits(
    output: EncoderOutput,
    que_positions,
    model: Encoder,
    rows=None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Start/end logits over every position for each question slot.

    ``rows[i]`` is the batch row of slot ``i`` (default: slot i in row i).
    Padded positions are set to ``-inf``.
    """
    hidden, mask = output.hidden, output.attention_mask
    que = torch.as_tensor(que_positions, dtype=torch.long).reshape(-1)
    rows = torch.arange(len(que)) if rows is None else torch.as_tensor(rows, dtype=torch.long).reshape(-1)
    if ((que < 0) | (que >= hidden.shape[1])).any():
        raise IndexError(f"question position out of range for length {hidden.shape[1]}")
    h = hidden[rows]  # (S, l, d)
    x_q = h[torch.arange(len(que)), que]
    s_q = x_q @ model.w_start.T
    e_q = x_q @ model.w_end.T
    start = torch.einsum("sld,sd->sl", h, s_q)
    end = torch.einsum("sld,sd->sl", h, e_q)
    pad = ~mask[rows]
    return start.masked_fill(pad, float("-inf")), end.masked_fill(pad, float("-inf"))


def mlm_logits(output: EncoderOutput, model: Encoder) -> torch.Tensor:
    return output.hidden @ model.tok_emb.weight.T + model.mlm_bias


def pool(output: EncoderOutput, bounds) -> torch.Tensor:
    """Mean of hidden rows ``lo..hi`` (inclusive) per batch row -> (B, d).

    ``bounds`` is one ``(lo, hi)`` pair or one per row.
    """
    hidden = output.hidden
    b, l, _ = hidden.shape
    bounds = torch.as_tensor(bounds, dtype=torch.long).reshape(-1, 2).expand(b, 2)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if (hi < lo).any() or (lo < 0).any() or (hi >= l).any():
        raise ValueError("empty or out-of-range pooling segment")
    pos = torch.arange(l)[None]
    sel = ((pos >= lo[:, None]) & (pos <= hi[:, None]) & output.attention_mask).to(hidden.dtype)
    counts = sel.sum(dim=1, keepdim=True)
    if (counts == 0).any():
        raise ValueError("pooling segment holds only padding")
    return torch.einsum("bl,bld->bd", sel, hidden) / counts


# -- checkpoint format: JSON manifest + little-endian float32 blob ------------

MANIFEST_FORMAT = "clism-checkpoint-v1"


def save_tensors(prefix: Path | str, tensors: Dict[str, torch.Tensor], meta: Optional[dict] = None) -> Tuple[Path, Path]:
    """Write ``<prefix>.json`` and ``<prefix>.bin``. Tensors are stored as float32."""
    prefix = Path(prefix)
    manifest = {"format": MANIFEST_FORMAT, "tensors": {}, "meta": meta or {}}
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        manifest["tensors"][name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob_path, manifest_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path, blob_path


def load_tensors(prefix: Path | str) -> Tuple[Dict[str, torch.Tensor], dict]:
    prefix = Path(prefix)
    if prefix.suffix in (".json", ".bin"):
        prefix = prefix.with_suffix("")
    manifest = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{prefix}: unknown checkpoint format {manifest.get('format')!r}")
    blob = prefix.with_suffix(".bin").read_bytes()
    tensors = {}
    for name, info in manifest["tensors"].items():
        count = int(np.prod(info["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=info["offset"]).reshape(info["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    return tensors, manifest["meta"]


def save_model(prefix: Path | str, model: Encoder, extra: Optional[Dict[str, torch.Tensor]] = None, meta: Optional[dict] = None):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra or {})
    return save_tensors(prefix, tensors, {"model_config": asdict(model.cfg), **(meta or {})})


def load_model(prefix: Path | str) -> Tuple[Encoder, Dict[str, torch.Tensor], dict]:
    """Rebuild the encoder; returns ``(model, other_tensors, meta)``."""
    tensors, meta = load_tensors(prefix)
    model = Encoder(ModelConfig(**meta["model_config"]))
    state = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, rest, meta
