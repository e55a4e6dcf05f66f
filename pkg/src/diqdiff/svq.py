"""Semantic vector quantization of sequence embeddings.

A small MLP scores the M codes for a sequence, a Gumbel-Softmax draw picks
one, and the picked code is blended into the sequence as extra guidance.
Codes themselves are not trained by gradient; they track the mean of the
sequences assigned to them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .errors import DimensionError, InvalidTemperatureError
from .seeding import torch_generator

DTYPE = torch.float64


@dataclass
class Codebook:
    codes: torch.Tensor  # (M, L-1, D)
    usage: torch.Tensor  # (M,) int64 assignment counts
    ema_decay: float = 0.9
    # True when sample init had too few sequences and fell back to random
    fallback: bool = False

    def __post_init__(self):
        if self.codes.shape[0] < 2:
            raise ValueError("a codebook needs at least 2 codes")

    @property
    def M(self) -> int:
        return self.codes.shape[0]

    def copy(self) -> "Codebook":
        return Codebook(self.codes.clone(), self.usage.clone(), self.ema_decay, self.fallback)


class CodeSelector(nn.Module):
    """Two-layer MLP from a flattened (L-1, D) sequence to M code logits."""

    def __init__(self, seq_len: int, dim: int, M: int):
        super().__init__()
        self.seq_len, self.dim, self.M = seq_len, dim, M
        self.hidden = nn.Linear(seq_len * dim, 4 * M)
        self.out = nn.Linear(4 * M, M)
        self.act = nn.GELU()

    def forward(self, s):
        if tuple(s.shape[-2:]) != (self.seq_len, self.dim):
            raise DimensionError(
                f"selector expects (..., {self.seq_len}, {self.dim}), got {tuple(s.shape)}")
        return self.out(self.act(self.hidden(s.flatten(-2))))


def select_logits(selector: CodeSelector, s):
    return selector(s)


def sample_gumbel(shape, generator=None, dtype=DTYPE):
    u = torch.rand(shape, generator=generator, dtype=dtype)
    u = u.clamp(min=torch.finfo(dtype).tiny, max=1.0 - torch.finfo(dtype).eps)
    return -torch.log(-torch.log(u))


def gumbel_softmax(o, tau: float = 1.0, seed=None, *, noise=None):
    """Relaxed one-hot sample softmax((o + n) / tau) with standard Gumbel n.

    Pass either ``seed`` (int or ``torch.Generator``) or pre-drawn ``noise``.
    """
    if not tau > 0:
        raise InvalidTemperatureError(f"tau must be > 0, got {tau}")
    if noise is None:
        gen = seed if isinstance(seed, torch.Generator) or seed is None else torch_generator(seed)
        noise = sample_gumbel(o.shape, gen, o.dtype)
    return torch.softmax((o + noise) / tau, dim=-1)


def quantize(g, codebook: Codebook):
    """Hard code selection with a straight-through gradient.

    The forward value is exactly ``codes[argmax g]``; the backward pass sees
    ``sum_m g_m codes[m]``. Ties go to the lowest index.
    """
    codes = codebook.codes.detach()
    index = torch.argmax(g, dim=-1)
    soft = torch.tensordot(g, codes, dims=([-1], [0]))
    s_q = codes[index] + (soft - soft.detach())
    return index, s_q


def combine_guidance(s, s_q, lambda_q: float):
    if s.shape != s_q.shape:
        raise DimensionError(f"shape mismatch {tuple(s.shape)} vs {tuple(s_q.shape)}")
    return lambda_q * s_q + s


@torch.no_grad()
def update_codebook(codebook: Codebook, assignments) -> Codebook:
    """EM-style code refresh: each used code moves to
    ``gamma * old + (1 - gamma) * mean(assigned)``; gamma = 0 is pure replacement.

    ``assignments`` maps code index -> iterable of sequence embeddings (or a
    stacked tensor).
    """
    gamma = codebook.ema_decay
    codes = codebook.codes.clone()
    for m, members in assignments.items():
        members = members if torch.is_tensor(members) else list(members)
        if len(members) == 0:
            continue
        stacked = members if torch.is_tensor(members) else torch.stack(
            [torch.as_tensor(x, dtype=codes.dtype) for x in members])
        if tuple(stacked.shape[1:]) != tuple(codes.shape[1:]):
            raise DimensionError(f"assigned sequence shape {tuple(stacked.shape[1:])}")
        batch_mean = stacked.mean(0)
        if gamma == 0:
            codes[m] = batch_mean
        else:
            codes[m] = gamma * codes[m] + (1.0 - gamma) * batch_mean
        codebook.usage[m] += stacked.shape[0]
    # rebind rather than write in place: the old tensor may be saved for backward
    codebook.codes = codes
    return codebook


def group_assignments(index, s) -> dict[int, torch.Tensor]:
    """Group sequence embeddings by selected code."""
    s = s.detach()
    return {int(m): s[index == m] for m in torch.unique(index)}


def init_codebook(M: int, shape, seed: int, corpus_sample=None, ema_decay: float = 0.9) -> Codebook:
    """Codes drawn from ``corpus_sample`` (M distinct rows) or i.i.d. N(0, 0.02).

    The 0.02 is a variance. A sample smaller than M falls back to random init
    and sets ``fallback``.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    gen = torch_generator(seed)
    fallback = False
    if corpus_sample is not None:
        sample = torch.as_tensor(corpus_sample, dtype=DTYPE) if not torch.is_tensor(
            corpus_sample) else corpus_sample.detach().to(DTYPE)
        if sample.shape[0] >= M:
            pick = torch.randperm(sample.shape[0], generator=gen)[:M].sort().values
            codes = sample[pick].clone()
            return Codebook(codes, torch.zeros(M, dtype=torch.long), ema_decay)
        warnings.warn(f"codebook sample has {sample.shape[0]} < M={M} rows; using random init")
        fallback = True
    codes = torch.randn((M, *shape), generator=gen, dtype=DTYPE) * (0.02 ** 0.5)
    return Codebook(codes, torch.zeros(M, dtype=torch.long), ema_decay, fallback)
