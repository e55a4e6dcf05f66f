import numpy as np
import pytest
import torch

from diqdiff.errors import DimensionError, InvalidTemperatureError
from diqdiff.svq import (Codebook, CodeSelector, combine_guidance, group_assignments,
                         gumbel_softmax, init_codebook, quantize, select_logits, update_codebook)

D64 = torch.float64


def make_codebook(M=4, L=3, D=2, gamma=0.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    return Codebook(torch.randn(M, L, D, generator=g, dtype=D64), torch.zeros(M, dtype=torch.long),
                    gamma)


def test_selector_zero_weights_give_zero_logits():
    sel = CodeSelector(3, 2, 4).to(D64)
    for p in sel.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(select_logits(sel, torch.randn(5, 3, 2, dtype=D64)), torch.zeros(5, 4, dtype=D64))


def test_selector_deterministic_and_continuous():
    torch.manual_seed(0)
    sel = CodeSelector(3, 2, 4).to(D64)
    s = torch.randn(3, 2, dtype=D64)
    assert torch.equal(sel(s), sel(s.clone()))
    d = torch.randn(3, 2, dtype=D64)
    with torch.no_grad():
        diffs = [float((sel(s + h * d) - sel(s)).norm()) for h in (1e-3, 1e-4, 1e-5)]
    # first-order: shrinking the step by 10 shrinks the change by ~10
    assert diffs[0] / diffs[1] == pytest.approx(10, rel=0.01)
    assert diffs[1] / diffs[2] == pytest.approx(10, rel=0.01)


def test_selector_shape_mismatch():
    sel = CodeSelector(3, 2, 4).to(D64)
    with pytest.raises(DimensionError):
        sel(torch.zeros(4, 2, dtype=D64))


def test_gumbel_softmax_simplex_and_sharpening():
    o = torch.tensor([0.3, -1.0, 2.0, 0.1], dtype=D64)
    g = gumbel_softmax(o, 1.0, seed=3)
    assert float(g.sum()) == pytest.approx(1.0, abs=1e-12)
    assert float(gumbel_softmax(o, 1e-4, seed=3).max()) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(InvalidTemperatureError):
        gumbel_softmax(o, 0.0, seed=3)


def test_gumbel_equal_logits_uniform():
    M, n = 5, 100_000
    g = gumbel_softmax(torch.zeros(n, M, dtype=D64), 1.0, seed=11)
    freq = np.bincount(g.argmax(-1).numpy(), minlength=M) / n
    assert np.all(np.abs(freq - 1 / M) <= 0.01)


def test_quantize_hard_value_and_tie_break():
    cb = make_codebook()
    idx, s_q = quantize(torch.tensor([[0, 0, 1.0, 0]], dtype=D64), cb)
    assert int(idx[0]) == 2 and torch.equal(s_q[0], cb.codes[2])
    idx, _ = quantize(torch.tensor([[0.5, 0.5, 0, 0]], dtype=D64), cb)
    assert int(idx[0]) == 0


def test_straight_through_matches_soft_path_finite_difference():
    """Backward of the hard code equals the derivative of sum_m g_m codes[m]."""
    cb = make_codebook(M=4, L=2, D=3)
    noise = torch.tensor([0.2, -0.4, 1.1, 0.0], dtype=D64)
    w = torch.randn(2, 3, generator=torch.Generator().manual_seed(5), dtype=D64)
    logits = torch.tensor([0.5, -0.3, 0.8, 0.1], dtype=D64, requires_grad=True)

    def soft_loss(o):
        g = torch.softmax((o + noise) / 0.7, -1)
        return float((torch.tensordot(g, cb.codes, dims=1) * w).sum())

    _, s_q = quantize(gumbel_softmax(logits, 0.7, noise=noise), cb)
    (grad,) = torch.autograd.grad((s_q * w).sum(), logits)
    h = 1e-6
    for m in range(4):
        e = torch.zeros(4, dtype=D64)
        e[m] = h
        fd = (soft_loss(logits.detach() + e) - soft_loss(logits.detach() - e)) / (2 * h)
        assert abs(float(grad[m]) - fd) <= 1e-3 * max(abs(fd), 1e-8)


def test_codes_receive_no_gradient():
    cb = make_codebook()
    cb.codes.requires_grad_(True)
    logits = torch.zeros(1, 4, dtype=D64, requires_grad=True)
    _, s_q = quantize(torch.softmax(logits, -1), cb)
    s_q.sum().backward()
    assert cb.codes.grad is None


def test_combine_guidance(rng):
    s = torch.tensor(rng.normal(size=(3, 2)))
    s_q = torch.tensor(rng.normal(size=(3, 2)))
    assert torch.equal(combine_guidance(s, s_q, 0.0), s)
    assert torch.equal(combine_guidance(s, s, 1.0), 2 * s)
    out = combine_guidance(s, s_q, 0.4).numpy()
    for i in range(3):
        for j in range(2):
            assert out[i, j] == 0.4 * float(s_q[i, j]) + float(s[i, j])
    with pytest.raises(DimensionError):
        combine_guidance(s, s_q[:2], 0.4)


def test_update_replacement_and_empty(rng):
    cb = make_codebook(gamma=0.0)
    before = cb.codes.clone()
    update_codebook(cb, {})
    assert torch.equal(cb.codes, before)
    s = torch.tensor(rng.normal(size=(3, 2)))
    update_codebook(cb, {1: [s]})
    assert torch.equal(cb.codes[1], s)
    a, b = (torch.tensor(rng.normal(size=(3, 2))) for _ in range(2))
    update_codebook(cb, {1: [a, b]})
    assert torch.allclose(cb.codes[1], (a + b) / 2, atol=1e-12, rtol=0)
    assert torch.equal(cb.codes[0], before[0])
    assert cb.usage.tolist() == [0, 3, 0, 0]


def test_update_ema_blend(rng):
    cb = make_codebook(gamma=0.9)
    old = cb.codes[2].clone()
    s = torch.tensor(rng.normal(size=(4, 3, 2)))
    update_codebook(cb, {2: s})
    assert torch.allclose(cb.codes[2], 0.9 * old + 0.1 * s.mean(0), atol=1e-14, rtol=0)


def test_group_assignments_usage_sums(rng):
    cb = make_codebook(gamma=0.5)
    s = torch.tensor(rng.normal(size=(7, 3, 2)))
    idx = torch.tensor([0, 3, 3, 1, 0, 3, 1])
    groups = group_assignments(idx, s)
    assert sorted(groups) == [0, 1, 3]
    assert torch.equal(groups[3], s[[1, 2, 5]])
    update_codebook(cb, groups)
    assert int(cb.usage.sum()) == 7 and bool((cb.usage >= 0).all())


def test_init_from_sample_and_determinism(rng):
    sample = torch.tensor(rng.normal(size=(4, 3, 2)))
    cb = init_codebook(4, (3, 2), seed=1, corpus_sample=sample)
    assert torch.equal(cb.codes, sample) and not cb.fallback
    a = init_codebook(6, (3, 2), seed=9)
    b = init_codebook(6, (3, 2), seed=9)
    assert torch.equal(a.codes, b.codes)


def test_init_small_sample_falls_back():
    with pytest.warns(UserWarning):
        cb = init_codebook(8, (3, 2), seed=1, corpus_sample=torch.zeros(3, 3, 2, dtype=D64))
    assert cb.fallback and cb.M == 8


def test_init_random_variance():
    cb = init_codebook(10, (100, 100), seed=4)
    var = float(cb.codes.var())
    assert cb.codes.numel() == 100_000
    assert abs(var - 0.02) <= 0.05 * 0.02


def test_codebook_needs_two_codes():
    with pytest.raises(ValueError):
        init_codebook(1, (2, 2), seed=0)
