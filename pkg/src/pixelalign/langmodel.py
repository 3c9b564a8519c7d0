"""Autoregressive decoder over a feature prefix, with optional LoRA adapters.

The sequence fed to the transformer is [prefix tokens; text prompt; target
tokens]. Prefix and text-prompt positions attend bidirectionally among
themselves; target positions attend causally (each sees the full prefix and
the targets up to and including itself). The hidden states returned are the
post-final-norm vectors, i.e. exactly what the bias-free vocabulary head
multiplies, so callers can re-derive logits as head(hidden).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import SelfAttentionBlock
from .textcodec import BOS_ID, EOS_ID


@dataclass
class LMConfig:
    vocab_size: int
    width: int = 128
    depth: int = 4
    heads: int = 4
    max_len: int = 24
    max_positions: int = 96
    lora_rank: int = 4
    lora_alpha: float = 8.0
    frozen_base: bool = False

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab must at least hold the special tokens")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("decoder depth must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0 (0 disables adapters)")


@dataclass
class DecodeResult:
    """Greedy decode output: emitted tokens and the hidden state behind each."""

    tokens: list[int]
    hidden: torch.Tensor  # (len(tokens), width), row i produced tokens[i]
    ended_with_eos: bool


class LoRALinear(nn.Module):
    """Linear layer plus a low-rank residual: y = Wx + b + (alpha/r) * B A x.

    A starts small-random and B starts at zero, so a freshly wrapped layer
    computes exactly what the base layer did.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        out_f, in_f = base.weight.shape
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if rank > min(in_f, out_f):
            raise ValueError(f"LoRA rank {rank} exceeds layer dims ({in_f}, {out_f})")
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.randn(rank, in_f) * 0.01)
        self.lora_b = nn.Parameter(torch.zeros(out_f, rank))

    def forward(self, x):
        return self.base(x) + (x @ self.lora_a.t() @ self.lora_b.t()) * self.scaling


def lora_wrap(lm: "DecoderLM", rank: int, alpha: float) -> None:
    """Wraps every attention q/v projection in the decoder with LoRA adapters."""
    if rank < 1:
        raise ValueError("lora_wrap needs rank >= 1")
    for block in lm.blocks:
        if isinstance(block.attn.q_proj, LoRALinear):
            raise ValueError("decoder already carries LoRA adapters")
        block.attn.q_proj = LoRALinear(block.attn.q_proj, rank, alpha)
        block.attn.v_proj = LoRALinear(block.attn.v_proj, rank, alpha)


def freeze_base(lm: "DecoderLM") -> None:
    """Freezes all decoder parameters except LoRA adapter matrices."""
    for name, param in lm.named_parameters():
        if "lora_" not in name:
            param.requires_grad_(False)


def sincos_sequence_init(length: int, width: int) -> torch.Tensor:
    """Classic 1D sine-cosine position code, used to initialize pos_emb."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    omega = 1.0 / (10000.0 ** (torch.arange(0, width, 2, dtype=torch.float64) / width))
    out = torch.zeros(length, width, dtype=torch.float64)
    out[:, 0::2] = torch.sin(pos * omega)
    out[:, 1::2] = torch.cos(pos * omega)
    return out.float()


class DecoderLM(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_emb = nn.Parameter(sincos_sequence_init(cfg.max_positions, cfg.width))
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(cfg.width, cfg.heads) for _ in range(cfg.depth)
        )
        self.ln_f = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.vocab_size, bias=False)
        if cfg.lora_rank > 0:
            lora_wrap(self, cfg.lora_rank, cfg.lora_alpha)
        if cfg.frozen_base:
            freeze_base(self)

    def _prefix_mask(self, pfx: int, total: int, device) -> torch.Tensor:
        """Bool (total, total) mask, True = may attend. Prefix rows are
        bidirectional within the prefix; target rows are causal."""
        idx = torch.arange(total, device=device)
        in_prefix = idx < pfx
        causal = idx[None, :] <= idx[:, None]
        allow = in_prefix[None, :] | (~in_prefix[:, None] & causal)
        # prefix rows must not peek at targets
        allow = allow & ~(in_prefix[:, None] & ~in_prefix[None, :])
        return allow

    def forward_features(
        self,
        prefix: torch.Tensor,
        text_ids: torch.Tensor | None,
        target_ids: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced pass.

        prefix (B, P, C), text_ids (B, T) or None, target_ids (B, n).
        Returns (logits (B, n, V), hidden (B, n, C)) for the target positions.
        """
        if prefix.ndim != 3 or prefix.shape[-1] != self.cfg.width:
            raise ValueError(f"prefix must be (B, P, {self.cfg.width})")
        if target_ids.ndim != 2:
            raise ValueError("target_ids must be (B, n)")
        parts = [prefix]
        pfx = prefix.shape[1]
        if text_ids is not None:
            if text_ids.shape[0] != prefix.shape[0]:
                raise ValueError("batch mismatch between prefix and text_ids")
            parts.append(self.tok_emb(text_ids))
            pfx += text_ids.shape[1]
        parts.append(self.tok_emb(target_ids))
        x = torch.cat(parts, dim=1)
        total = x.shape[1]
        if total > self.cfg.max_positions:
            raise ValueError(
                f"sequence length {total} exceeds max_positions {self.cfg.max_positions}"
            )
        x = x + self.pos_emb[:total]
        mask = self._prefix_mask(pfx, total, x.device)[None, None]
        for block in self.blocks:
            x = block(x, attn_mask=mask)
        hidden = self.ln_f(x[:, pfx:, :])
        logits = self.head(hidden)
        return logits, hidden

    @torch.no_grad()
    def decode_greedy(
        self,
        prefix: torch.Tensor,
        text_ids: torch.Tensor | None = None,
        max_len: int | None = None,
    ) -> DecodeResult:
        """Greedy argmax decoding for a single sample (prefix batch of 1)."""
        if prefix.shape[0] != 1:
            raise ValueError("decode_greedy expects a batch of one")
        limit = max_len if max_len is not None else self.cfg.max_len
        tokens: list[int] = []
        hidden = prefix.new_zeros(0, self.cfg.width)
        ended = False
        inputs = torch.tensor([[BOS_ID]], dtype=torch.long, device=prefix.device)
        for _ in range(limit):
            logits, hidden_all = self.forward_features(prefix, text_ids, inputs)
            nxt = int(logits[0, -1].argmax().item())
            tokens.append(nxt)
            hidden = hidden_all[0]
            if nxt == EOS_ID:
                ended = True
                break
            inputs = torch.cat(
                [inputs, torch.tensor([[nxt]], dtype=torch.long, device=prefix.device)], dim=1
            )
        return DecodeResult(tokens=tokens, hidden=hidden, ended_with_eos=ended)
