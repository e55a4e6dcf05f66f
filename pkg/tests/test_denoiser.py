import numpy as np
import pytest
import torch

from diqdiff.denoiser import Denoiser, DiQDiffModel, denoise, dropout, embed_sequence, sinusoidal
from diqdiff.errors import DegenerateInputError
from oracles import central_difference, max_relative_error

D64 = torch.float64


def small_denoiser(seed=0, L=4, D=8, blocks=1):
    torch.manual_seed(seed)
    net = Denoiser(L, D, blocks=blocks, heads=2, dropout_attn=0.0).to(D64)
    with torch.no_grad():
        net.pos.normal_(0, 0.5)
    return net.eval()


def inputs(rng, B=3, L=4, D=8):
    x_t = torch.tensor(rng.normal(size=(B, D)))
    guid = torch.tensor(rng.normal(size=(B, L, D)))
    mask = torch.ones(B, L, dtype=torch.bool)
    mask[0, :2] = False
    return x_t, guid, torch.tensor([1, 3, 4])[:B], mask


def test_embed_sequence():
    table = torch.arange(12, dtype=D64).reshape(4, 3)
    out = embed_sequence(table, [0, 0, 3])
    assert torch.equal(out, table[[0, 0, 3]])
    onehot = torch.eye(5, dtype=D64)
    rows = embed_sequence(onehot, [1, 4, 2])
    assert torch.equal(rows.norm(dim=-1), torch.ones(3, dtype=D64))
    with pytest.raises(IndexError):
        embed_sequence(table, [4])


def test_denoise_deterministic_and_shape(rng):
    net = small_denoiser()
    args = inputs(rng)
    a = denoise(net, *args)
    b = denoise(net, *args)
    assert a.shape == (3, 8) and torch.equal(a, b)


def test_all_padding_rejected(rng):
    net = small_denoiser()
    x_t, g, t, mask = inputs(rng)
    mask[1] = False
    with pytest.raises(DegenerateInputError):
        net(x_t, g, t, mask)


def test_padding_positions_do_not_leak(rng):
    net = small_denoiser(blocks=2)
    x_t, g, t, mask = inputs(rng)
    out = net(x_t, g, t, mask)
    g2 = g.clone()
    g2[0, :2] = torch.tensor(rng.normal(size=(2, 8))) * 50
    assert torch.allclose(net(x_t, g2, t, mask), out, atol=1e-12, rtol=0)


def test_step_embedding_changes_output(rng):
    net = small_denoiser()
    x_t, g, _, mask = inputs(rng)
    a = net(x_t, g, torch.tensor([1, 1, 1]), mask)
    b = net(x_t, g, torch.tensor([2, 2, 2]), mask)
    assert not torch.allclose(a, b)


def test_sinusoidal_known_values():
    e = sinusoidal([0, 1], 4)
    assert torch.allclose(e[0], torch.tensor([0, 0, 1, 1], dtype=D64))
    assert torch.allclose(e[1], torch.tensor([np.sin(1), np.sin(0.01), np.cos(1), np.cos(0.01)]))


def test_dropout_reproducible_and_scaled():
    x = torch.ones(100_000, dtype=D64)
    a = dropout(x, 0.3, True, torch.Generator().manual_seed(1))
    b = dropout(x, 0.3, True, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    assert float(a.mean()) == pytest.approx(1.0, abs=0.01)
    assert torch.equal(dropout(x, 0.3, False), x)


def test_denoiser_gradient_matches_finite_differences(rng):
    net = small_denoiser(seed=3)
    x_t, g, t, mask = inputs(rng)

    def f():
        return float((net(x_t, g, t, mask) ** 2).sum())

    out = (net(x_t, g, t, mask) ** 2).sum()
    names, params = zip(*net.named_parameters())
    grads = dict(zip(names, torch.autograd.grad(out, params)))
    assert max_relative_error(grads, central_difference(net, f)) < 1e-3


def test_model_init_is_seeded():
    a = DiQDiffModel(10, 4, 8, 4, blocks=1).reset_parameters(5)
    b = DiQDiffModel(10, 4, 8, 4, blocks=1).reset_parameters(5)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
        assert p.dtype == D64
