"""Conditional denoising network x_hat0 = f(x_t, guidance, t).

A small bidirectional transformer over the guidance sequence. The noisy
target and its step embedding are added to every position; the output at
the last real (non-padding) position is the predicted clean item.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import DegenerateInputError

DTYPE = torch.float64


def dropout(x, p: float, training: bool, generator=None):
    """Inverted dropout whose mask comes from ``generator`` (reproducible)."""
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def sinusoidal(t, dim: int):
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    emb = torch.cat([torch.sin(t * freqs), torch.cos(t * freqs)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], 1, dtype=DTYPE)], dim=-1)
    return emb


class StepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Linear(dim, dim)

    def forward(self, t):
        return self.proj(sinusoidal(t, self.dim).to(self.proj.weight.dtype))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, p_drop: float):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads, self.head_dim, self.p_drop = heads, dim // heads, p_drop
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, h, mask, generator=None):
        B, L, D = h.shape

        def split(x):
            return x.view(B, L, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = dropout(attn, self.p_drop, self.training, generator)
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.o(out)


class Block(nn.Module):
    """Post-norm transformer block: LN(h + attn(h)), LN(h + ffn(h))."""

    def __init__(self, dim: int, heads: int, p_drop: float):
        super().__init__()
        self.p_drop = p_drop
        self.attn = SelfAttention(dim, heads, p_drop)
        self.ln1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, 4 * dim)
        self.ff2 = nn.Linear(4 * dim, dim)
        self.ln2 = nn.LayerNorm(dim)

    def forward(self, h, mask, generator=None):
        a = self.attn(h, mask, generator)
        h = self.ln1(h + dropout(a, self.p_drop, self.training, generator))
        f = self.ff2(torch.nn.functional.gelu(self.ff1(h)))
        return self.ln2(h + dropout(f, self.p_drop, self.training, generator))


class Denoiser(nn.Module):
    def __init__(self, seq_len: int, dim: int, blocks: int = 2, heads: int = 2,
                 dropout_attn: float = 0.1):
        super().__init__()
        self.seq_len, self.dim = seq_len, dim
        self.pos = nn.Parameter(torch.zeros(seq_len, dim))
        self.step = StepEmbedding(dim)
        self.blocks = nn.ModuleList(Block(dim, heads, dropout_attn) for _ in range(blocks))
        self.out = nn.Linear(dim, dim)

    def forward(self, x_t, guidance, t, mask, generator=None):
        """x_t (B, D), guidance (B, L-1, D), t (B,) steps, mask (B, L-1) bool."""
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if not bool(mask.any(-1).all()):
            raise DegenerateInputError("guidance row with no real items")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1 and x_t.shape[0] > 1:
            t = t.expand(x_t.shape[0])
        cond = x_t + self.step(t)
        h = guidance + self.pos + cond[:, None, :]
        for block in self.blocks:
            h = block(h, mask, generator)
        positions = torch.arange(1, mask.shape[1] + 1)
        last = (mask.long() * positions).argmax(-1)
        return self.out(h[torch.arange(h.shape[0]), last])


def embed_sequence(table, items):
    """Row lookup into an item embedding table (tensor or ``nn.Embedding``)."""
    weight = table.weight if isinstance(table, nn.Embedding) else torch.as_tensor(table)
    items = torch.as_tensor(items, dtype=torch.long)
    if items.numel() and (int(items.min()) < 0 or int(items.max()) >= weight.shape[0]):
        raise IndexError(f"item id outside [0, {weight.shape[0] - 1}]")
    return weight[items]


def denoise(params: Denoiser, x_t, guidance, t, mask, generator=None):
    return params(x_t, guidance, t, mask, generator)


class DiQDiffModel(nn.Module):
    """All trainable tensors: item embeddings, denoiser and code selector."""

    def __init__(self, n_items: int, seq_len: int, dim: int, M: int, blocks: int = 2,
                 heads: int = 2, dropout_attn: float = 0.1, dropout_emb: float = 0.3):
        super().__init__()
        from .svq import CodeSelector

        self.n_items, self.seq_len, self.dim, self.M = n_items, seq_len, dim, M
        self.dropout_emb = dropout_emb
        self.item_emb = nn.Embedding(n_items + 1, dim)
        self.denoiser = Denoiser(seq_len, dim, blocks, heads, dropout_attn)
        self.selector = CodeSelector(seq_len, dim, M)
        self.to(DTYPE)

    @torch.no_grad()
    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for name, p in self.named_parameters():
            if name == "item_emb.weight":
                # unit scale, comparable to the N(0, I) diffusion noise
                p.normal_(0.0, 1.0, generator=gen)
            elif name.endswith(("ln1.weight", "ln2.weight")):
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(0.0, 0.02, generator=gen)
        return self
