import math

import numpy as np
import pytest
import torch

from conftest import tiny_cfg, tiny_state
from diqdiff.data import Corpus, SyntheticSpec, UserSequence, leave_one_out_split, synthesize_corpus
from diqdiff.errors import EmptyCorpusError, InvalidRankError, ThresholdUndefinedError
from diqdiff.evaluation import (ScalarDistribution, cluster_alignment, codebook_diagnostics,
                                evaluate, exact_variance_ratio, export_embeddings,
                                hit_rate_at_k, mean_pairwise_cosine, ndcg_at_k, read_embeddings,
                                variance_oracle, variance_threshold)
from diqdiff.training import train

D64 = torch.float64


# metrics

def test_ndcg_examples():
    for K in (1, 5, 20):
        assert ndcg_at_k(1, K) == 1.0
    assert ndcg_at_k(6, 5) == 0.0 and ndcg_at_k(None, 5) == 0.0
    assert ndcg_at_k(2, 5) == pytest.approx(1 / math.log2(3), abs=1e-9)
    assert ndcg_at_k(2, 5) == pytest.approx(0.63093, abs=1e-5)


def test_hit_rate_examples():
    assert hit_rate_at_k(3, 5) == 1.0 and hit_rate_at_k(6, 5) == 0.0
    ranks = [1, 4, 9, 2, 30, 5, 6]
    assert sum(hit_rate_at_k(r, 5) for r in ranks) == len([r for r in ranks if r <= 5])


def test_invalid_rank():
    with pytest.raises(InvalidRankError):
        ndcg_at_k(0, 5)
    with pytest.raises(InvalidRankError):
        hit_rate_at_k(-1, 5)


def test_metric_properties():
    for K in range(1, 30):
        values = [ndcg_at_k(r, K) for r in range(1, K + 2)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert all(0 <= v <= 1 for v in values)
        assert all(ndcg_at_k(r, K) <= hit_rate_at_k(r, K) for r in range(1, 40))


# evaluation harness

def one_hot_state(n_items=12):
    s = tiny_state(0, n_items=n_items, dim=n_items + 1, heads=1, T=6)
    with torch.no_grad():
        s.model.item_emb.weight.copy_(torch.eye(n_items + 1, dtype=D64))
    return s


def test_perfect_oracle_scores_one():
    s = one_hot_state()
    seqs = tuple(UserSequence(u, (1 + u % 5, 1 + u % 12), 1 + u % 12) for u in range(1, 21))
    corpus = Corpus(seqs, 12, s.cfg.max_len)

    def last_item(x, guidance, t, mask):
        return guidance[:, -1]

    rep = evaluate(s, corpus, (1, 5, 10), lambda_q=0.0, denoiser=last_item)
    assert rep.hr == {1: 1.0, 5: 1.0, 10: 1.0} and rep.ndcg == {1: 1.0, 5: 1.0, 10: 1.0}


def test_uniform_scores_give_k_over_n():
    n_items, users = 20, 3000
    s = tiny_state(0, n_items=n_items, T=2)
    with torch.no_grad():
        s.model.item_emb.weight.normal_(0, 1, generator=torch.Generator().manual_seed(1))
    rng = np.random.default_rng(0)
    seqs = tuple(UserSequence(u, (int(rng.integers(1, 21)),), int(rng.integers(1, 21)))
                 for u in range(1, users + 1))
    gen = torch.Generator().manual_seed(5)

    def random_guess(x, guidance, t, mask):
        return torch.randn(x.shape, generator=gen, dtype=D64)

    rep = evaluate(s, Corpus(seqs, n_items, s.cfg.max_len), (1, 5, 10), denoiser=random_guess)
    for K in (1, 5, 10):
        p = K / n_items
        assert abs(rep.hr[K] - p) <= 4 * math.sqrt(p * (1 - p) / users)


def test_evaluate_is_order_invariant_and_rejects_empty():
    s = tiny_state(3, T=4)
    c = leave_one_out_split(synthesize_corpus(SyntheticSpec(users=15, items=10, clusters=2,
                                                            seq_len_range=(3, 4))))
    a = evaluate(s, c, (5,), seed=2)
    b = evaluate(s, c.replace(sequences=c.sequences[::-1]), (5,), seed=2)
    assert a.to_json() == b.to_json()
    with pytest.raises(EmptyCorpusError):
        evaluate(s, c.replace(sequences=()), (5,))


def test_mean_pairwise_cosine():
    x = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=D64)
    pairs = [0.0, 1 / math.sqrt(2), 1 / math.sqrt(2)]
    assert mean_pairwise_cosine(x) == pytest.approx(sum(pairs) / 3, abs=1e-15)


# variance analysis

def test_variance_lambda_zero_is_identity():
    p = variance_oracle(0.0, 4, "lognormal:0,0.5", trials=5, samples_per_trial=1000)
    assert p.var_s == p.var_s_tilde


def test_threshold_formula_example():
    assert variance_threshold(1.0, 1.0, 2.0) == pytest.approx(math.sqrt(3.25) - 0.5, abs=1e-12)
    with pytest.raises(ThresholdUndefinedError):
        variance_threshold(0.5, 0.0, 1.0)
    with pytest.raises(ThresholdUndefinedError):
        variance_oracle(0.5, 2, "normal:0,1", trials=1, samples_per_trial=10)


def test_distribution_moments_match_samples():
    rng = np.random.default_rng(0)
    for text in ("lognormal:0,0.5", "normal:1,2", "exponential:2", "uniform:0,3"):
        d = ScalarDistribution.parse(text)
        x = d.sample(rng, 400_000)
        m1, m2 = d.moments()
        assert x.mean() == pytest.approx(m1, rel=0.01, abs=0.01)
        assert (x * x).mean() == pytest.approx(m2, rel=0.02)


@pytest.mark.parametrize("lam,n", [(0.2, 1), (0.4, 3), (1.0, 2), (1.0, 16)])
def test_variance_ratio_closed_form(lam, n):
    """V[s + (lam/n) sum of a group containing s] / V[s] = 1 + (2 lam + lam^2) / n."""
    p = variance_oracle(lam, n, "lognormal:0,0.5", trials=20, samples_per_trial=20_000, seed=1)
    ratios = np.array(p.var_s_tilde) / np.array(p.var_s)
    assert ratios.mean() == pytest.approx(exact_variance_ratio(lam, n), rel=0.01)


def test_single_member_group_probe_recorded():
    # threshold not met: no reduction is claimed, the probe only records what happened
    p = variance_oracle(1.0, 1, "lognormal:0,0.5", trials=10, samples_per_trial=1000)
    assert not p.threshold_met and len(p.reduced) == 10


# diagnostics

def test_codebook_diagnostics_fresh_and_duplicate():
    s = tiny_state(0)
    rep = codebook_diagnostics(s)
    assert rep["usage"] == [0, 0, 0, 0] and rep["usage_entropy"] == 0.0
    with torch.no_grad():
        s.codebook.codes[1] = s.codebook.codes[0]
    assert codebook_diagnostics(s)["pairwise_distance"][0][1] == 0.0


@pytest.mark.parametrize("seed", [2, 3, 4])
def test_cluster_alignment_beats_shuffled_control(seed):
    c = leave_one_out_split(synthesize_corpus(SyntheticSpec(
        users=96, items=24, clusters=4, seq_len_range=(6, 8), seed=seed)))
    cfg = tiny_cfg(seed=seed, max_len=c.max_len, dim=16, T=8, batch_size=16, max_epochs=30,
                   eval_every=30, lr=3e-3)
    state = train(c, cfg).state
    rep = cluster_alignment(state, c, shuffles=50, seed=0)
    assert rep["nmi"] > rep["control_mean"]


def test_export_embeddings(tmp_path):
    s = tiny_state(1, dim=4, heads=1, T=4)
    c = Corpus(tuple(UserSequence(u, (u, u + 1), u + 2) for u in (1, 2, 3)), 10, s.cfg.max_len)
    path = export_embeddings(s, c, tmp_path / "e.csv", seed=0)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and all(len(line.split(",")) == 5 for line in lines)
    users, x = read_embeddings(path)
    from diqdiff.evaluation import generate_for_corpus
    _, x0, _ = generate_for_corpus(s, c, 0)
    assert users == [1, 2, 3] and np.allclose(x, x0.numpy(), atol=1e-9, rtol=0)
    other = export_embeddings(s, c, tmp_path / "f.csv", seed=1)
    assert other.read_text() != path.read_text()
