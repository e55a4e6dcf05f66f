"""Training objective: x0 reconstruction plus the contrastive dispersion term,
and the composite forward pass that produces both."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .denoiser import dropout
from .errors import BatchTooSmallError, EmptyCorpusError, NumericalFailure, UndefinedCosineError
from .schedule import NoiseSchedule, q_sample
from .seeding import torch_generator
from .svq import Codebook, combine_guidance, gumbel_softmax, quantize, sample_gumbel

_COS_EPS = 1e-12


@dataclass
class LossBreakdown:
    l_r: torch.Tensor
    l_c: torch.Tensor
    total: torch.Tensor
    lambda_c: float

    def as_floats(self) -> dict:
        return {"l_r": float(self.l_r), "l_c": float(self.l_c), "total": float(self.total)}


def reconstruction_loss(targets, predictions):
    """Batch mean of ||target - prediction||^2."""
    targets, predictions = torch.as_tensor(targets), torch.as_tensor(predictions)
    if predictions.shape[0] == 0:
        raise EmptyCorpusError("empty batch")
    if targets.shape != predictions.shape:
        raise ValueError(f"shape mismatch {tuple(targets.shape)} vs {tuple(predictions.shape)}")
    return ((targets - predictions) ** 2).sum(-1).mean()


def cdm_loss(predictions):
    """(1/B) sum_i log sum_{j != i} exp(cos(x_i, x_j)).

    The anchor is left out of its own inner sum.
    """
    x = torch.as_tensor(predictions)
    B = x.shape[0]
    if B < 2:
        raise BatchTooSmallError("contrastive loss needs at least 2 predictions")
    norms = x.norm(dim=-1)
    if bool((norms < _COS_EPS).any()):
        raise UndefinedCosineError("zero-norm prediction")
    unit = x / norms[:, None]
    cos = unit @ unit.T
    eye = torch.eye(B, dtype=torch.bool)
    cos = cos.masked_fill(eye, float("-inf"))
    return torch.logsumexp(cos, dim=-1).mean()


def total_loss(l_r, l_c, lambda_c: float):
    if lambda_c < 0:
        raise ValueError("lambda_c must be >= 0")
    return l_r + lambda_c * l_c


@dataclass
class StepNoise:
    """Random draws consumed by one training step."""

    t: torch.Tensor  # (B,) steps in 1..T
    eps: torch.Tensor  # (B, D)
    gumbel: torch.Tensor  # (B, M)
    dropout_seed: int


def sample_step_noise(batch_size: int, dim: int, M: int, T: int, seed) -> StepNoise:
    gen = torch_generator(seed)
    t = torch.randint(1, T + 1, (batch_size,), generator=gen)
    eps = torch.randn(batch_size, dim, generator=gen, dtype=torch.float64)
    gumbel = sample_gumbel((batch_size, M), gen)
    dropout_seed = int(torch.randint(0, 2**62, (1,), generator=gen))
    return StepNoise(t, eps, gumbel, dropout_seed)


@dataclass
class ForwardResult:
    losses: LossBreakdown
    predictions: torch.Tensor
    s: torch.Tensor  # raw (undropped) sequence embeddings
    code_index: torch.Tensor
    soft_weights: torch.Tensor


def forward_losses(model, codebook: Codebook, batch, sched: NoiseSchedule, noise: StepNoise,
                   lambda_q: float, lambda_c: float, tau: float = 1.0) -> ForwardResult:
    """Composite forward pass for one batch in whatever mode ``model`` is in."""
    gen = torch_generator(noise.dropout_seed)
    histories = torch.as_tensor(batch.histories, dtype=torch.long)
    mask = torch.as_tensor(batch.mask, dtype=torch.bool)
    targets = torch.as_tensor(batch.targets, dtype=torch.long)

    s_raw = model.item_emb(histories)
    s = dropout(s_raw, model.dropout_emb, model.training, gen)
    x_L = model.item_emb(targets)
    x_t = q_sample(x_L, noise.t, noise.eps, sched)

    logits = model.selector(s)
    g = gumbel_softmax(logits, tau, noise=noise.gumbel)
    index, s_q = quantize(g, codebook)
    guidance = combine_guidance(s, s_q, lambda_q)
    x_hat0 = model.denoiser(x_t, guidance, noise.t, mask, gen)

    l_r = reconstruction_loss(x_L, x_hat0)
    l_c = cdm_loss(x_hat0)
    total = total_loss(l_r, l_c, lambda_c)
    for name, value in (("l_r", l_r), ("l_c", l_c), ("total", total)):
        if not torch.isfinite(value):
            raise NumericalFailure(name, float(value.detach()))
    return ForwardResult(LossBreakdown(l_r, l_c, total, lambda_c), x_hat0, s_raw, index, g)


def loss_gradients(model, codebook: Codebook, batch, sched: NoiseSchedule, noise: StepNoise,
                   lambda_q: float, lambda_c: float, tau: float = 1.0):
    """Reverse-mode gradients of the total loss for every trainable tensor.

    Returns ``(grads, forward_result)`` where ``grads`` maps parameter name to
    gradient. The codebook holds no gradient.
    """
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    result = forward_losses(model, codebook, batch, sched, noise, lambda_q, lambda_c, tau)
    grads = torch.autograd.grad(result.losses.total, params, allow_unused=True)
    out = {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}
    return out, result
