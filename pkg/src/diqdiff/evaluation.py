"""Ranking metrics, the evaluation harness and model diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import Corpus, pad_truncate
from .errors import EmptyCorpusError, InvalidRankError, ThresholdUndefinedError
from .inference import draw_generation_noise, generate_batch, score_items, target_rank
from .seeding import derive_seed, numpy_rng

# ---------------------------------------------------------------------------
# metrics


def _check(rank, K):
    if K < 1:
        raise ValueError("K must be >= 1")
    if rank is not None and rank < 1:
        raise InvalidRankError(f"rank must be >= 1, got {rank}")


def hit_rate_at_k(rank: Optional[int], K: int) -> float:
    _check(rank, K)
    return 1.0 if rank is not None and rank <= K else 0.0


def ndcg_at_k(rank: Optional[int], K: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    _check(rank, K)
    if rank is None or rank > K:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass
class MetricsReport:
    hr: dict
    ndcg: dict
    n_users: int
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "n_users": self.n_users,
            "fingerprint": self.fingerprint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def generate_for_corpus(state, corpus: Corpus, seed: int, sched=None, lambda_q=None,
                        denoiser=None, chunk: int = 256):
    """Generated x0 for every user, each driven by a per-user seed.

    Returns ``(users, x0 (N, D), code_index (N,))`` in corpus order.
    """
    cfg = state.cfg
    sched = sched or state.schedule()
    lambda_q = cfg.lambda_q if lambda_q is None else lambda_q
    seqs = corpus.sequences
    xs, codes = [], []
    for lo in range(0, len(seqs), chunk):
        part = seqs[lo:lo + chunk]
        hist = np.stack([pad_truncate(s.history, cfg.max_len) for s in part])
        noises = [draw_generation_noise(derive_seed(seed, s.user), sched.T, cfg.dim, cfg.M)
                  for s in part]
        x0, idx, _ = generate_batch(state, hist, sched, lambda_q, noises, denoiser=denoiser)
        xs.append(x0)
        codes.append(idx)
    users = [s.user for s in seqs]
    return users, torch.cat(xs), torch.cat(codes)


def evaluate(state, corpus: Corpus, ks=(5, 10, 20), seeds: int = 1, seed: int = 0, *,
             sched=None, lambda_q=None, exclude_seen: bool = False,
             denoiser=None) -> MetricsReport:
    """Per-user HR@K / NDCG@K over the full catalog, averaged over users and
    over ``seeds`` generation seeds."""
    if len(corpus) == 0:
        raise EmptyCorpusError("nothing to evaluate")
    ks = sorted({int(k) for k in ks})
    table = state.model.item_emb.weight.detach()
    per_user = {}
    for r in range(seeds):
        users, x0, _ = generate_for_corpus(state, corpus, derive_seed(seed, r), sched,
                                           lambda_q, denoiser)
        for seq, x in zip(corpus.sequences, x0):
            scores = score_items(x, table)
            exclude = seq.history if exclude_seen else ()
            per_user.setdefault(seq.user, []).append(target_rank(scores, seq.target, exclude))

    hr = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    # fixed summation order keeps the report independent of corpus order
    for user in sorted(per_user):
        for rank in per_user[user]:
            for k in ks:
                hr[k] += hit_rate_at_k(rank, k)
                ndcg[k] += ndcg_at_k(rank, k)
    n = len(per_user) * seeds
    return MetricsReport(
        hr={k: v / n for k, v in hr.items()},
        ndcg={k: v / n for k, v in ndcg.items()},
        n_users=len(per_user),
        fingerprint=state.cfg.fingerprint(),
    )


def mean_pairwise_cosine(x) -> float:
    x = torch.as_tensor(x)
    unit = x / x.norm(dim=-1, keepdim=True)
    cos = unit @ unit.T
    n = x.shape[0]
    return float((cos.sum() - cos.diagonal().sum()) / (n * (n - 1)))


# ---------------------------------------------------------------------------
# variance analysis of the quantized guidance


@dataclass(frozen=True)
class ScalarDistribution:
    name: str
    params: tuple

    @classmethod
    def parse(cls, text: str) -> "ScalarDistribution":
        """``"lognormal:0,0.5"``, ``"normal:1,1"``, ``"exponential:1"``, ``"uniform:0,2"``."""
        name, _, rest = text.partition(":")
        params = tuple(float(p) for p in rest.split(",") if p.strip())
        dist = cls(name.strip().lower(), params)
        dist.moments()  # validates name and arity
        return dist

    def moments(self) -> tuple[float, float]:
        """Analytic (E[s], E[s^2])."""
        p = self.params
        if self.name == "lognormal" and len(p) == 2:
            mu, sigma = p
            return math.exp(mu + sigma**2 / 2), math.exp(2 * mu + 2 * sigma**2)
        if self.name == "normal" and len(p) == 2:
            mu, sigma = p
            return mu, mu**2 + sigma**2
        if self.name == "exponential" and len(p) == 1:
            scale = p[0]
            return scale, 2 * scale**2
        if self.name == "uniform" and len(p) == 2:
            a, b = p
            return (a + b) / 2, (a * a + a * b + b * b) / 3
        raise ValueError(f"unknown distribution {self.name}{p}")

    def sample(self, rng: np.random.Generator, size):
        p = self.params
        if self.name == "lognormal":
            return rng.lognormal(p[0], p[1], size)
        if self.name == "normal":
            return rng.normal(p[0], p[1], size)
        if self.name == "exponential":
            return rng.exponential(p[0], size)
        return rng.uniform(p[0], p[1], size)

    def __str__(self):
        return f"{self.name}:{','.join(repr(v) for v in self.params)}"


def variance_threshold(lambda_q: float, mean: float, second_moment: float) -> float:
    """Group size above which the quantized guidance is claimed to shrink variance:
    sqrt(l^2 E[s^2] / E[s]^2 + l + 1/4) - (2l - 1) / 2."""
    if mean == 0:
        raise ThresholdUndefinedError("threshold needs E[s] != 0")
    return math.sqrt(lambda_q**2 * second_moment / mean**2 + lambda_q + 0.25) \
        - (2 * lambda_q - 1) / 2


def exact_variance_ratio(lambda_q: float, group_size: int) -> float:
    """V[s~] / V[s] for i.i.d. s, where s~ = s + (l / n) sum of its group (s included)."""
    return 1.0 + (2 * lambda_q + lambda_q**2) / group_size


@dataclass
class VarianceProbe:
    lambda_q: float
    group_size: int
    distribution: str
    mean: float
    second_moment: float
    threshold: float
    var_s: list = field(default_factory=list)  # per trial
    var_s_tilde: list = field(default_factory=list)
    mean_s_tilde: list = field(default_factory=list)

    @property
    def reduced(self) -> list:
        return [vt <= vs for vs, vt in zip(self.var_s, self.var_s_tilde)]

    @property
    def reduction_rate(self) -> float:
        return sum(self.reduced) / len(self.reduced)

    @property
    def threshold_met(self) -> bool:
        return self.group_size >= math.ceil(self.threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(reduction_rate=self.reduction_rate, threshold_met=self.threshold_met,
                 exact_ratio=exact_variance_ratio(self.lambda_q, self.group_size))
        return d


def variance_oracle(lambda_q: float, group_size: int, dist, trials: int = 100,
                    samples_per_trial: int = 10_000, seed: int = 0) -> VarianceProbe:
    """Monte Carlo of s~ = s + (lambda_q / n) sum_{t in S_m} s_t with S_m a group
    of n i.i.d. draws containing s."""
    if group_size < 1 or trials < 1:
        raise ValueError("group_size and trials must be >= 1")
    dist = ScalarDistribution.parse(dist) if isinstance(dist, str) else dist
    m1, m2 = dist.moments()
    probe = VarianceProbe(lambda_q, group_size, str(dist), m1, m2,
                          variance_threshold(lambda_q, m1, m2))
    rng = numpy_rng(seed)
    for _ in range(trials):
        group = dist.sample(rng, (samples_per_trial, group_size))
        s = group[:, 0]
        s_tilde = s + lambda_q * group.mean(axis=1)
        probe.var_s.append(float(s.var(ddof=1)))
        probe.var_s_tilde.append(float(s_tilde.var(ddof=1)))
        probe.mean_s_tilde.append(float(s_tilde.mean()))
    return probe


# ---------------------------------------------------------------------------
# codebook and embedding diagnostics


def _entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum()) if p.size else 0.0


@torch.no_grad()
def codebook_diagnostics(state, corpus: Optional[Corpus] = None, seed: int = 0) -> dict:
    """Usage histogram, pairwise code distances and assignment entropies.

    With a corpus, also reports each code's mean selection entropy: the
    entropy of the softmax over logits, averaged over the sequences whose
    deterministic argmax is that code.
    """
    cb = state.codebook
    flat = cb.codes.reshape(cb.M, -1)
    dist = torch.cdist(flat, flat).numpy()
    iu = np.triu_indices(cb.M, k=1)
    usage = cb.usage.numpy().astype(np.int64)
    total = int(usage.sum())
    report = {
        "M": cb.M,
        "usage": usage.tolist(),
        "usage_entropy": _entropy(usage / total) if total else 0.0,
        "pairwise_distance": dist.tolist(),
        "mean_pairwise_distance": float(dist[iu].mean()),
    }
    if corpus is not None and len(corpus):
        codes, probs = selector_assignments(state, corpus)
        per_code = []
        for m in range(cb.M):
            rows = probs[codes == m]
            per_code.append(float(np.mean([_entropy(r) for r in rows])) if len(rows) else None)
        report["assignment_entropy"] = per_code
        report["assignment_counts"] = np.bincount(codes, minlength=cb.M).tolist()
    return report


@torch.no_grad()
def selector_assignments(state, corpus: Corpus):
    """Deterministic (noise-free) code choice and softmax weights per user."""
    model = state.model
    model.eval()
    hist = torch.as_tensor(
        np.stack([pad_truncate(s.history, state.cfg.max_len) for s in corpus.sequences]))
    logits = model.selector(model.item_emb(hist))
    probs = torch.softmax(logits, -1)
    return torch.argmax(probs, -1).numpy(), probs.numpy()


def cluster_alignment(state, corpus: Corpus, shuffles: int = 20, seed: int = 0) -> dict:
    """NMI between code assignments and the true user clusters of a synthetic
    corpus, against a shuffled-label control."""
    from sklearn.metrics import normalized_mutual_info_score

    if not corpus.labels or "user_cluster" not in corpus.labels:
        raise ValueError("corpus carries no cluster labels")
    codes, _ = selector_assignments(state, corpus)
    truth = np.array([corpus.labels["user_cluster"][s.user] for s in corpus.sequences])
    nmi = normalized_mutual_info_score(truth, codes)
    rng = numpy_rng(seed)
    control = [normalized_mutual_info_score(rng.permutation(truth), codes)
               for _ in range(shuffles)]
    return {"nmi": float(nmi), "control_mean": float(np.mean(control)),
            "control_max": float(np.max(control))}


def export_embeddings(state, corpus: Corpus, path, seed: int = 0) -> Path:
    """One line per user: ``user,f1,...,fD`` for the generated next-item vector."""
    users, x0, _ = generate_for_corpus(state, corpus, seed)
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for user, row in zip(users, x0.tolist()):
            fh.write(",".join([str(user), *(repr(v) for v in row)]) + "\n")
    return path


def read_embeddings(path) -> tuple[list[int], np.ndarray]:
    users, rows = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        head, *vals = line.split(",")
        users.append(int(head))
        rows.append([float(v) for v in vals])
    return users, np.array(rows)
