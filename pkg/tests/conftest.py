import numpy as np
import pytest
import torch

from diqdiff.config import DEFAULTS
from diqdiff.data import Batch, PAD
from diqdiff.training import init_state

# acceptance lines collected during the run, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def tiny_cfg(**over):
    base = dict(T=4, dim=8, M=4, max_len=4, blocks=1, heads=2, dropout_attn=0.0,
                dropout_emb=0.0, batch_size=4, init="random", ks="1,5", early_stop_k=1)
    base.update(over)
    return DEFAULTS.replace(**base)


def tiny_state(seed=0, n_items=10, **over):
    return init_state(tiny_cfg(seed=seed, **over), n_items)


def random_batch(rng, B=3, L=4, n_items=10, min_len=1):
    hist = np.zeros((B, L), dtype=np.int64)
    for b in range(B):
        n = int(rng.integers(min_len, L + 1))
        hist[b, L - n:] = rng.integers(1, n_items + 1, size=n)
    return Batch(histories=hist, targets=rng.integers(1, n_items + 1, size=B),
                 mask=hist != PAD, users=np.arange(1, B + 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

