"""Optimization loop: per-batch diffusion training with codebook refresh,
periodic evaluation, early stopping and resumable checkpoints."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .config import TrainConfig
from .data import Corpus, make_batches, pad_truncate
from .denoiser import DiQDiffModel
from .losses import LossBreakdown, forward_losses, sample_step_noise
from .schedule import NoiseSchedule, build_truncated_linear_schedule
from .seeding import derive_seed
from .svq import Codebook, group_assignments, init_codebook, update_codebook

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# sub-streams of the root seed
_INIT, _CODEBOOK, _SHUFFLE, _STEP, _EVAL = range(5)


@dataclass
class ModelState:
    cfg: TrainConfig
    model: DiQDiffModel
    codebook: Codebook
    optimizer: torch.optim.Adam
    step_count: int = 0
    # loop bookkeeping needed to resume: epoch, best_score, best_epoch, stale
    progress: dict = field(default_factory=lambda: {
        "epoch": 0, "best_score": None, "best_epoch": None, "stale": 0, "evals": 0})

    @property
    def n_items(self) -> int:
        return self.model.n_items

    def schedule(self) -> NoiseSchedule:
        return schedule_from_config(self.cfg)

    def is_finite(self) -> bool:
        tensors = [p for p in self.model.parameters()] + [self.codebook.codes]
        return all(bool(torch.isfinite(t).all()) for t in tensors)


def schedule_from_config(cfg: TrainConfig) -> NoiseSchedule:
    return build_truncated_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.beta_cap)


def make_optimizer(model, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS,
                            foreach=False)


def init_state(cfg: TrainConfig, item_count: int, corpus: Optional[Corpus] = None) -> ModelState:
    model = DiQDiffModel(item_count, cfg.max_len, cfg.dim, cfg.M, cfg.blocks, cfg.heads,
                         cfg.dropout_attn, cfg.dropout_emb)
    model.reset_parameters(derive_seed(cfg.seed, _INIT))
    sample = None
    if cfg.init == "sample" and corpus is not None and len(corpus):
        with torch.no_grad():
            hist = torch.as_tensor(
                np.stack([pad_truncate(s.history, cfg.max_len) for s in corpus.sequences]))
            sample = model.item_emb(hist)
    codebook = init_codebook(cfg.M, (cfg.max_len, cfg.dim), derive_seed(cfg.seed, _CODEBOOK),
                             sample, cfg.ema_decay)
    return ModelState(cfg, model, codebook, make_optimizer(model, cfg.lr))


def train_step(state: ModelState, batch, sched: NoiseSchedule, seed: int):
    """One pass of the training recipe on ``batch``; mutates and returns ``state``.

    Order: sample (t, eps) per example, corrupt targets, quantize, refresh the
    codebook from the batch assignments, combine guidance, compute losses, one
    Adam step on every trainable tensor. Codes never receive gradient.
    """
    cfg = state.cfg
    if len(batch) < 2:
        raise ValueError("train_step needs a batch of at least 2")
    noise = sample_step_noise(len(batch), cfg.dim, cfg.M, sched.T, seed)
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    result = forward_losses(state.model, state.codebook, batch, sched, noise,
                            cfg.lambda_q, cfg.lambda_c, cfg.tau)
    update_codebook(state.codebook, group_assignments(result.code_index, result.s))
    result.losses.total.backward()
    state.optimizer.step()
    state.step_count += 1
    return state, _detached(result.losses)


def _detached(losses: LossBreakdown) -> LossBreakdown:
    return LossBreakdown(losses.l_r.detach(), losses.l_c.detach(), losses.total.detach(),
                         losses.lambda_c)


@dataclass
class TrainResult:
    state: ModelState  # state after the last epoch run
    best: ModelState  # state at the best evaluation
    log: list = field(default_factory=list)  # one dict per step
    evals: list = field(default_factory=list)  # one dict per evaluation


def train(corpus: Corpus, cfg: TrainConfig, eval_corpus: Optional[Corpus] = None, *,
          resume: Optional[ModelState] = None, resume_best: Optional[ModelState] = None,
          stop_after_epochs: Optional[int] = None,
          on_step: Optional[Callable[[dict], None]] = None,
          on_epoch: Optional[Callable[[TrainResult], None]] = None) -> TrainResult:
    """Train on ``corpus``; evaluate HR@early_stop_k on ``eval_corpus`` (the
    training corpus itself when omitted) every ``eval_every`` epochs.

    ``stop_after_epochs`` interrupts the run after that many epochs of this
    call, leaving a state that ``resume`` continues exactly.
    """
    from .evaluation import evaluate

    eval_corpus = eval_corpus if eval_corpus is not None else corpus
    sched = schedule_from_config(cfg)
    state = resume if resume is not None else init_state(cfg, corpus.item_count, corpus)
    result = TrainResult(state, resume_best if resume_best is not None else state)
    ks = sorted(set(cfg.k_list) | {cfg.early_stop_k})
    prog = state.progress
    ran = 0

    while prog["epoch"] < cfg.max_epochs and prog["stale"] < cfg.patience:
        if stop_after_epochs is not None and ran >= stop_after_epochs:
            break
        epoch = prog["epoch"]
        batches = make_batches(corpus, cfg.batch_size, derive_seed(cfg.seed, _SHUFFLE, epoch))
        for b, batch in enumerate(batches):
            _, losses = train_step(state, batch, sched, derive_seed(cfg.seed, _STEP, epoch, b))
            rec = {"step": state.step_count, "epoch": epoch + 1, **losses.as_floats(),
                   "lr": cfg.lr}
            result.log.append(rec)
            if on_step:
                on_step(rec)
        prog["epoch"] = epoch + 1
        ran += 1

        if prog["epoch"] % cfg.eval_every == 0:
            report = evaluate(state, eval_corpus, ks, seeds=cfg.eval_seeds,
                              seed=derive_seed(cfg.seed, _EVAL), sched=sched,
                              exclude_seen=cfg.exclude_seen)
            score = report.hr[cfg.early_stop_k]
            prog["evals"] += 1
            improved = prog["best_score"] is None or score > prog["best_score"]
            if improved:
                prog.update(best_score=score, best_epoch=prog["epoch"], stale=0)
                result.best = snapshot(state)
            else:
                prog["stale"] += 1
            result.evals.append({"epoch": prog["epoch"], "score": score,
                                 "improved": improved, **report.to_dict()})
            log.info("epoch %d HR@%d=%.4f%s", prog["epoch"], cfg.early_stop_k, score,
                     " *" if improved else "")
        if on_epoch:
            on_epoch(result)

    if prog["best_score"] is None:
        result.best = snapshot(state)
    return result


def snapshot(state: ModelState) -> ModelState:
    return copy.deepcopy(state)
