"""Two-way prompt feature extractor.

A small set of learnable query tokens is appended to the prompt embeddings.
Layers alternate direction: on even layers the prompt stream reads from the
image features, on odd layers the image features read from the prompt stream.
Prompt-side layers start with self-attention over the prompt stream so the
query tokens mix with the prompt embeddings; without it the queries would
never see the prompt (the output is the query slice, and image-side layers do
not touch it). The extracted feature is the query-token slice of the final
prompt stream, ready to be used as a language-model prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import CrossAttentionBlock, MultiheadAttention


@dataclass
class ExtractorConfig:
    layers: int = 2
    tokens: int = 32
    width: int = 128
    heads: int = 4

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("extractor needs at least one layer")
        if self.tokens < 1:
            raise ValueError("extractor needs at least one query token")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


class PromptSideBlock(nn.Module):
    """Self-attention over the prompt stream, then a cross-attention read of
    the image features, each pre-norm with residuals."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, heads)
        self.cross = CrossAttentionBlock(dim, heads)

    def forward(self, stream: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        h = self.norm_self(stream)
        stream = stream + self.self_attn(h, h)
        return self.cross(stream, image)


class TwoWayExtractor(nn.Module):
    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.randn(cfg.tokens, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(
            PromptSideBlock(cfg.width, cfg.heads) if i % 2 == 0
            else CrossAttentionBlock(cfg.width, cfg.heads)
            for i in range(cfg.layers)
        )

    def forward(self, image_feats: torch.Tensor, prompt_emb: torch.Tensor) -> torch.Tensor:
        """(B, N, C) image features + (B, k, C) prompt embeddings -> (B, tokens, C)."""
        if image_feats.ndim != 3 or prompt_emb.ndim != 3:
            raise ValueError("expected batched (B, n, C) inputs")
        c = self.cfg.width
        if image_feats.shape[-1] != c or prompt_emb.shape[-1] != c:
            raise ValueError(
                f"width mismatch: extractor is {c}-wide, got image {image_feats.shape[-1]}"
                f" and prompt {prompt_emb.shape[-1]}"
            )
        if image_feats.shape[0] != prompt_emb.shape[0]:
            raise ValueError("batch size mismatch between image features and prompts")
        b = image_feats.shape[0]
        k = prompt_emb.shape[1]
        prompt_stream = torch.cat(
            [prompt_emb, self.queries.unsqueeze(0).expand(b, -1, -1)], dim=1
        )
        image_stream = image_feats
        for i, block in enumerate(self.blocks):
            if i % 2 == 0:
                prompt_stream = block(prompt_stream, image_stream)
            else:
                image_stream = block(image_stream, prompt_stream)
        return prompt_stream[:, k:, :]
