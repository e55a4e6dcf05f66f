"""Deterministic seed derivation.

Every random draw in the package comes from a generator seeded by
``derive_seed(root, *keys)`` so that results depend only on the root seed and
the position in the computation (epoch, batch, user, ...), never on call order.
"""

import numpy as np
import torch


def derive_seed(root, *keys):
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def numpy_rng(seed):
    return np.random.default_rng(int(seed))
