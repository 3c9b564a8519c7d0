"""Shared transformer building blocks (pre-norm attention and feed-forward)."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class NumericError(RuntimeError):
    """Raised when a forward pass or loss produces non-finite values."""


class MultiheadAttention(nn.Module):
    """Multi-head attention with separate q/k/v/out projections (q/v are LoRA targets)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, queries, keys_values, attn_mask=None):
        # queries (B, L, C), keys_values (B, S, C); attn_mask bool (B or 1, 1, L, S), True = attend
        b, l, _ = queries.shape
        s = keys_values.shape[1]
        hd = self.dim // self.heads
        q = self.q_proj(queries).view(b, l, self.heads, hd).transpose(1, 2)
        k = self.k_proj(keys_values).view(b, s, self.heads, hd).transpose(1, 2)
        v = self.v_proj(keys_values).view(b, s, self.heads, hd).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        out = out.transpose(1, 2).reshape(b, l, self.dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    """Pre-norm self-attention + feed-forward with residuals."""

    def __init__(self, dim: int, heads: int, ff_hidden: int | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_hidden)

    def forward(self, x, attn_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, attn_mask=attn_mask)
        x = x + self.ff(self.norm2(x))
        return x


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention + feed-forward updating the query-side stream."""

    def __init__(self, dim: int, heads: int, ff_hidden: int | None = None):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_hidden)

    def forward(self, queries, keys_values):
        queries = queries + self.attn(self.norm_q(queries), self.norm_kv(keys_values))
        queries = queries + self.ff(self.norm_ff(queries))
        return queries
