"""Next-item generation by reverse diffusion, and catalog ranking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import PAD, UserSequence, pad_truncate
from .errors import InvalidKError, InvalidStateError
from .schedule import NoiseSchedule, reverse_step
from .seeding import torch_generator
from .svq import combine_guidance, gumbel_softmax, quantize, sample_gumbel

DTYPE = torch.float64

# (x_t, guidance, t, mask) -> x_hat0; replaces the trained network when given
DenoiseFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class GenerationNoise:
    x_T: torch.Tensor  # (D,)
    gumbel: torch.Tensor  # (M,)
    z: torch.Tensor  # (T + 1, D); row t is the noise of step t, rows 0 and 1 are zero


def draw_generation_noise(seed: int, T: int, dim: int, M: int) -> GenerationNoise:
    gen = torch_generator(seed)
    x_T = torch.randn(dim, generator=gen, dtype=DTYPE)
    gumbel = sample_gumbel((M,), gen)
    z = torch.zeros(T + 1, dim, dtype=DTYPE)
    if T > 1:
        z[2:] = torch.randn(T - 1, dim, generator=gen, dtype=DTYPE)
    return GenerationNoise(x_T, gumbel, z)


@dataclass
class GenerationTrace:
    x0: torch.Tensor  # (D,)
    code_index: int
    latents: Optional[list] = None  # [x^T, ..., x^0] when retained


@torch.no_grad()
def generate_batch(state, histories, sched: NoiseSchedule, lambda_q: float,
                   noises: Sequence[GenerationNoise], retain_trace: bool = False,
                   denoiser: Optional[DenoiseFn] = None, tau: Optional[float] = None):
    """Run the reverse chain for a batch of padded histories.

    Returns ``(x0 (B, D), code_index (B,), latents)`` where ``latents`` is a
    list ``[x^T, ..., x^0]`` of (B, D) tensors or None.
    """
    if not state.is_finite():
        raise InvalidStateError("model state contains non-finite values")
    model = state.model
    model.eval()
    tau = state.cfg.tau if tau is None else tau
    histories = torch.as_tensor(np.asarray(histories), dtype=torch.long)
    mask = histories != PAD
    if not bool(mask.any(-1).all()):
        raise ValueError("every history must contain at least one item")

    s = model.item_emb(histories)
    g = gumbel_softmax(model.selector(s), tau, noise=torch.stack([n.gumbel for n in noises]))
    index, s_q = quantize(g, state.codebook)
    guidance = combine_guidance(s, s_q, lambda_q)

    if denoiser is None:
        denoiser = model.denoiser
    x = torch.stack([n.x_T for n in noises])
    z_all = torch.stack([n.z for n in noises], dim=1)  # (T + 1, B, D)
    latents = [x] if retain_trace else None
    B = x.shape[0]
    for t in range(sched.T, 0, -1):
        steps = torch.full((B,), t, dtype=torch.long)
        x_hat0 = denoiser(x, guidance, steps, mask)
        x = reverse_step(x_hat0, x, t, z_all[t], sched)
        if retain_trace:
            latents.append(x)
    return x, index, latents


def generate_next_item(state, sequence: UserSequence, sched: NoiseSchedule, lambda_q: float,
                       seed: int, retain_trace: bool = False,
                       denoiser: Optional[DenoiseFn] = None) -> GenerationTrace:
    if not sequence.history:
        raise ValueError(f"user {sequence.user} has an empty history")
    cfg = state.cfg
    noise = draw_generation_noise(seed, sched.T, cfg.dim, cfg.M)
    hist = pad_truncate(sequence.history, cfg.max_len)[None]
    x0, index, latents = generate_batch(state, hist, sched, lambda_q, [noise], retain_trace,
                                        denoiser)
    return GenerationTrace(
        x0=x0[0], code_index=int(index[0]),
        latents=[lat[0] for lat in latents] if latents is not None else None)


def _weights(table) -> torch.Tensor:
    if isinstance(table, torch.nn.Embedding):
        return table.weight.detach()
    return torch.as_tensor(table, dtype=DTYPE)


def score_items(x0, table) -> np.ndarray:
    """Inner-product score of every catalog item; index 0 (padding) is -inf."""
    W = _weights(table)
    scores = (W @ torch.as_tensor(x0, dtype=W.dtype)).numpy().astype(np.float64)
    scores[PAD] = -np.inf
    return scores


def rank_items(x0, table, K: int, exclude=(), with_scores: bool = False):
    """Top-K items by inner product, best first; ties go to the lower item id."""
    scores = score_items(x0, table)
    n_items = len(scores) - 1
    excluded = {int(i) for i in exclude if 1 <= int(i) <= n_items}
    if K < 1 or K > n_items - len(excluded):
        raise InvalidKError(f"K={K} with {n_items} items and {len(excluded)} excluded")
    if excluded:
        scores[list(excluded)] = -np.inf
    ids = np.arange(len(scores))
    order = np.lexsort((ids[1:], -scores[1:])) + 1
    top = order[:K]
    items = [int(i) for i in top]
    if with_scores:
        return items, [float(scores[i]) for i in top]
    return items


def target_rank(scores: np.ndarray, target: int, exclude=()) -> int:
    """1-based rank of ``target`` under the same ordering as :func:`rank_items`.

    Excluded items never outrank the target; the target itself is never excluded.
    """
    scores = scores.copy()
    drop = [int(i) for i in exclude if int(i) != target]
    if drop:
        scores[drop] = -np.inf
    s_t = scores[target]
    ids = np.arange(len(scores))
    better = (scores > s_t) | ((scores == s_t) & (ids < target))
    better[PAD] = False
    return int(better.sum()) + 1
