"""Decoder transformer shared by the autoregressive and refiner paths.

Pre-norm blocks with RMSNorm, rotary position embeddings on q/k (absolute
slot indices, so compressed slots shift the positions of everything after
them), SiLU-gated feed-forward, no bias terms anywhere. Attention scores
and weights are accumulated in float64 regardless of parameter dtype;
invisible keys are filled with -inf before the softmax so they carry an
exactly-zero weight.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, Vocabulary

ROPE_BASE = 10000.0


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rms = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * rms * self.weight


def rope_tables(
    max_positions: int,
    head_dim: int,
    dtype: torch.dtype = torch.float64,
    device: Optional[torch.device] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (max_positions, head_dim // 2)."""
    if head_dim % 2 != 0:
        raise ValueError("head_dim must be even for rotary embedding")
    inv_freq = 1.0 / (
        ROPE_BASE ** (torch.arange(0, head_dim, 2, dtype=torch.float64, device=device) / head_dim)
    )
    angles = torch.arange(max_positions, dtype=torch.float64, device=device)[:, None] * inv_freq
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rope(
    x: torch.Tensor, positions: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor
) -> torch.Tensor:
    """Rotate (B, H, T, hd) by the angles of `positions` (B, T) or (T,)."""
    c = cos[positions]  # (..., T, hd/2)
    s = sin[positions]
    if c.dim() == 2:  # shared positions across the batch
        c = c[None, None]
        s = s[None, None]
    else:
        c = c[:, None]
        s = s[:, None]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out


def masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask_bits: torch.Tensor,
    q_positions: torch.Tensor,
    k_positions: torch.Tensor,
    cos: torch.Tensor,
    sin: torch.Tensor,
) -> torch.Tensor:
    """Attention over (B, H, T, hd) tensors under a boolean visibility mask.

    mask_bits is (T_q, T_k) or (B, T_q, T_k), true = visible. Every query
    row must have at least one visible key. Scores/weights run in float64.
    """
    if mask_bits.dim() == 2:
        mask_bits = mask_bits[None]
    if not mask_bits.any(dim=-1).all():
        raise ValueError("attention mask has a query row with no visible keys")

    dtype_in = q.dtype
    q = apply_rope(q.to(torch.float64), q_positions, cos, sin)
    k = apply_rope(k.to(torch.float64), k_positions, cos, sin)
    scores = torch.einsum("bhqd,bhkd->bhqk", q, k) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~mask_bits[:, None], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = torch.einsum("bhqk,bhkd->bhqd", weights, v.to(torch.float64))
    return out.to(dtype_in)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.attn_norm = RMSNorm(d)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.ffn_norm = RMSNorm(d)
        self.w1 = nn.Linear(d, cfg.ffn_hidden, bias=False)
        self.w3 = nn.Linear(d, cfg.ffn_hidden, bias=False)
        self.w2 = nn.Linear(cfg.ffn_hidden, d, bias=False)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        mask_bits: torch.Tensor,
        positions: torch.Tensor,
        cos: torch.Tensor,
        sin: torch.Tensor,
    ) -> torch.Tensor:
        h = self.attn_norm(x)
        q, k, v = self._heads(self.wq(h)), self._heads(self.wk(h)), self._heads(self.wv(h))
        attn = masked_attention(q, k, v, mask_bits, positions, positions, cos, sin)
        b, _, t, _ = attn.shape
        x = x + self.wo(attn.transpose(1, 2).reshape(b, t, -1))
        h = self.ffn_norm(x)
        x = x + self.w2(F.silu(self.w1(h)) * self.w3(h))
        return x


class CodecLM(nn.Module):
    """Token LM over the combined text/speech/reserved id space.

    role "ar": predicts layer-1 codewords plus EOS autoregressively.
    role "nar": predicts codewords of one layer l in 2..L bidirectionally
    from the sum of lower-layer embeddings plus a layer-index embedding.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, role: str = "ar"):
        super().__init__()
        if role not in ("ar", "nar"):
            raise ValueError(f"role must be 'ar' or 'nar', got {role!r}")
        if role == "nar" and vocab.num_layers < 2:
            raise ValueError("refiner role requires num_layers >= 2")
        self.cfg = cfg
        self.vocab = vocab
        self.role = role

        self.embed = nn.Embedding(vocab.total_size, cfg.dim)
        self.norm = RMSNorm(cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_blocks))
        if role == "ar":
            self.head = nn.Linear(cfg.dim, vocab.speech_size + 1, bias=False)
        else:
            # layer-1 codewords live in the main table; layers 2..L get
            # their own embeddings and heads, indexed by [l - 2]
            self.upper_embed = nn.ModuleList(
                nn.Embedding(vocab.speech_size, cfg.dim) for _ in range(vocab.num_layers - 1)
            )
            self.layer_embed = nn.Embedding(vocab.num_layers, cfg.dim)
            self.heads = nn.ModuleList(
                nn.Linear(cfg.dim, vocab.speech_size, bias=False)
                for _ in range(vocab.num_layers - 1)
            )

        cos, sin = rope_tables(cfg.max_positions, cfg.head_dim)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)
        self.apply(self._init)

    @staticmethod
    def _init(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def backbone(
        self, x: torch.Tensor, mask_bits: torch.Tensor, positions: torch.Tensor
    ) -> torch.Tensor:
        cos = self.rope_cos
        sin = self.rope_sin
        for block in self.blocks:
            x = block(x, mask_bits, positions, cos, sin)
        return self.norm(x)

    def forward_ar(
        self, tokens: torch.Tensor, mask_bits: torch.Tensor, positions: torch.Tensor
    ) -> torch.Tensor:
        """(B, T) slot ids -> (B, T, speech_size + 1) logits."""
        if self.role != "ar":
            raise ValueError("forward_ar called on a refiner model")
        if tokens.min() < 0 or tokens.max() >= self.vocab.total_size:
            raise ValueError("token id out of vocabulary range")
        h = self.backbone(self.embed(tokens), mask_bits, positions)
        return self.head(h)

    def speech_embed(self, layer: int, codewords: torch.Tensor) -> torch.Tensor:
        """Embedding of layer-`layer` codewords (1-based layer index)."""
        if layer == 1:
            return self.embed(codewords + self.vocab.speech_base)
        return self.upper_embed[layer - 2](codewords)

    def forward_nar(
        self,
        inputs: torch.Tensor,
        layer: int,
        mask_bits: torch.Tensor,
        positions: torch.Tensor,
    ) -> torch.Tensor:
        """Summed input embeddings (B, T, dim) -> (B, T, speech_size) for `layer`."""
        if self.role != "nar":
            raise ValueError("forward_nar called on an autoregressive model")
        if not 2 <= layer <= self.vocab.num_layers:
            raise ValueError(f"layer must be in [2, {self.vocab.num_layers}], got {layer}")
        x = inputs + self.layer_embed.weight[layer - 1]
        h = self.backbone(x, mask_bits, positions)
        return self.heads[layer - 2](h)


def new_model(cfg: ModelConfig, vocab: Vocabulary, role: str = "ar", seed: int = 0) -> CodecLM:
    """Seeded construction so identical seeds give identical parameters."""
    torch.manual_seed(seed)
    return CodecLM(cfg, vocab, role=role)
