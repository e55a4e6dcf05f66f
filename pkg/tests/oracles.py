"""Independent reference computations used by the tests."""

import math

import numpy as np
import torch


def loop_reconstruction(targets, preds):
    targets, preds = np.asarray(targets), np.asarray(preds)
    total = 0.0
    for i in range(len(targets)):
        total += sum((a - b) ** 2 for a, b in zip(targets[i], preds[i]))
    return total / len(targets)


def loop_cdm(preds):
    x = np.asarray(preds)
    B = len(x)
    total = 0.0
    for i in range(B):
        acc = 0.0
        for j in range(B):
            if j != i:
                cos = float(np.dot(x[i], x[j]) / (np.linalg.norm(x[i]) * np.linalg.norm(x[j])))
                acc += math.exp(cos)
        total += math.log(acc)
    return total / B


@torch.no_grad()
def straight_through_surrogate(model, codebook, batch, sched, noise, lambda_q, lambda_c, tau,
                               index0, soft0):
    """Loss of the forward pass with the hard code index and the stop-gradient
    soft term frozen at their values from the reference point.

    At the reference point its value equals the real loss, and its exact
    derivative is what the straight-through estimator is defined to return.
    """
    hist = torch.as_tensor(batch.histories)
    s = model.item_emb(hist)
    x_L = model.item_emb(torch.as_tensor(batch.targets))
    ab = sched.alpha_bar[noise.t][:, None]
    x_t = ab.sqrt() * x_L + (1 - ab).sqrt() * noise.eps
    g = torch.softmax((model.selector(s) + noise.gumbel) / tau, -1)
    soft = torch.einsum("bm,mld->bld", g, codebook.codes)
    s_q = codebook.codes[index0] + soft - soft0
    x_hat = model.denoiser(x_t, lambda_q * s_q + s, noise.t, torch.as_tensor(batch.mask))
    return loop_reconstruction(x_L.numpy(), x_hat.numpy()) + lambda_c * loop_cdm(x_hat.numpy())


def central_difference(model, f, h=1e-4):
    """Central finite-difference gradient of ``f()`` w.r.t. every model parameter."""
    grads = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + h
                up = f()
                flat[k] = orig - h
                down = f()
                flat[k] = orig
                gflat[k] = (up - down) / (2 * h)
            grads[name] = g
    return grads


def max_relative_error(a: dict, b: dict, floor=1e-6):
    worst = 0.0
    for name in a:
        x, y = a[name].reshape(-1), b[name].reshape(-1)
        scale = torch.maximum(torch.maximum(x.abs(), y.abs()), torch.tensor(floor, dtype=x.dtype))
        worst = max(worst, float(((x - y).abs() / scale).max()))
    return worst


def brute_force_rank(scores, target, exclude=()):
    """1-based position of ``target`` in a full sort (score desc, id asc), padding skipped."""
    order = sorted(
        (i for i in range(1, len(scores)) if i == target or i not in set(exclude)),
        key=lambda i: (-scores[i], i))
    return order.index(target) + 1


def brute_force_metrics(rank_list, target, K):
    """HR / NDCG from an explicit ranked list, summing DCG over the top K slots."""
    hr = 1.0 if target in rank_list[:K] else 0.0
    dcg = sum(1.0 / math.log2(pos + 2) for pos, item in enumerate(rank_list[:K]) if item == target)
    return hr, dcg
