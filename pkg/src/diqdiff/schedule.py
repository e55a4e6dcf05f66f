"""Noise schedule tables and the closed-form forward / posterior operations.

All tables are float64 and indexed directly by the diffusion step ``t`` with
slot 0 holding the ``t = 0`` convention (alpha_bar = 1, beta = 0), so the
formulas are total at ``t = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidScheduleError, StepRangeError

DTYPE = torch.float64


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    alpha_bar_prev: torch.Tensor
    one_minus_alpha_bar: torch.Tensor
    posterior_var: torch.Tensor
    # posterior mean coefficients on x0 and x_t
    coef_x0: torch.Tensor
    coef_xt: torch.Tensor

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = torch.as_tensor(betas, dtype=DTYPE).flatten()
        T = betas.numel()
        if T < 1:
            raise InvalidScheduleError("T must be >= 1")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise InvalidScheduleError("every beta must lie in (0, 1)")
        beta = torch.cat([torch.zeros(1, dtype=DTYPE), betas])
        alpha = 1.0 - beta
        alpha_bar = torch.cumprod(alpha, 0)
        # 1 - alpha_bar via the recursion (1-ab_t) = (1-ab_{t-1}) + ab_{t-1} beta_t,
        # which keeps slot 1 equal to beta_1 bit for bit.
        omab = torch.zeros(T + 1, dtype=DTYPE)
        for t in range(1, T + 1):
            omab[t] = omab[t - 1] + alpha_bar[t - 1] * beta[t]
        alpha_bar_prev = torch.cat([torch.ones(1, dtype=DTYPE), alpha_bar[:-1]])
        omab_prev = torch.cat([torch.zeros(1, dtype=DTYPE), omab[:-1]])
        denom = omab.clone()
        denom[0] = 1.0  # slot 0 is never used as a step
        posterior_var = omab_prev / denom * beta
        coef_x0 = alpha_bar_prev.sqrt() * beta / denom
        coef_xt = alpha.sqrt() * omab_prev / denom
        return cls(T, beta, alpha, alpha_bar, alpha_bar_prev, omab,
                   posterior_var, coef_x0, coef_xt)

    def check_step(self, t) -> None:
        t = torch.as_tensor(t)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.T):
            raise StepRangeError(f"step outside 1..{self.T}: {t.tolist()}")


def build_truncated_linear_schedule(T: int = 32, beta_start: float = 0.003125,
                                    beta_end: float = 0.625,
                                    beta_cap: float = 0.999) -> NoiseSchedule:
    """Linear ramp ``beta_start -> beta_end`` over T steps, clamped at ``beta_cap``.

    The defaults are the usual 1e-4 -> 0.02 ramp for 1000 steps rescaled by
    1000 / 32, so that alpha_bar_T is ~1e-6 at T = 32 and x^T is close to
    N(0, I) as the sampler assumes.
    """
    if T < 1:
        raise InvalidScheduleError("T must be >= 1")
    if not 0 < beta_start <= beta_end:
        raise InvalidScheduleError("need 0 < beta_start <= beta_end")
    if not beta_start < beta_cap < 1:
        raise InvalidScheduleError("need beta_start < beta_cap < 1")
    if T == 1:
        betas = torch.tensor([beta_start], dtype=DTYPE)
    else:
        steps = torch.arange(T, dtype=DTYPE)
        betas = beta_start + steps * ((beta_end - beta_start) / (T - 1))
    return NoiseSchedule.from_betas(torch.clamp(betas, max=beta_cap))


def _col(table, t, like):
    """Gather ``table[t]`` and shape it to broadcast against ``like``."""
    v = table[torch.as_tensor(t, dtype=torch.long)]
    if v.dim() == 0:
        return v
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Forward corruption sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` is an int or a (B,) tensor matching the leading dim of ``x0``.
    """
    sched.check_step(t)
    x0 = torch.as_tensor(x0, dtype=DTYPE) if not torch.is_tensor(x0) else x0
    eps = torch.as_tensor(eps, dtype=x0.dtype) if not torch.is_tensor(eps) else eps
    return (_col(sched.alpha_bar.sqrt(), t, x0) * x0
            + _col(sched.one_minus_alpha_bar.sqrt(), t, x0) * eps)


def posterior_mean(x0, xt, t, sched: NoiseSchedule):
    sched.check_step(t)
    x0 = torch.as_tensor(x0, dtype=DTYPE) if not torch.is_tensor(x0) else x0
    xt = torch.as_tensor(xt, dtype=x0.dtype) if not torch.is_tensor(xt) else xt
    return _col(sched.coef_x0, t, x0) * x0 + _col(sched.coef_xt, t, xt) * xt


def reverse_step(x_hat0, xt, t, z, sched: NoiseSchedule):
    """One ancestral step x^t -> x^{t-1} using the predicted clean item."""
    mean = posterior_mean(x_hat0, xt, t, sched)
    z = torch.as_tensor(z, dtype=mean.dtype) if not torch.is_tensor(z) else z
    return mean + _col(sched.posterior_var.sqrt(), t, mean) * z
