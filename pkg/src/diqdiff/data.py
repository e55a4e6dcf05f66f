"""Interaction corpora: ingest, leave-one-out split, padding, synthesis and
the noise / sparsity perturbations used for robustness runs."""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import (
    BatchTooSmallError,
    EmptyCorpusError,
    MalformedRowError,
    SplitTooShortError,
)
from .seeding import derive_seed, numpy_rng

PAD = 0
MIN_INTERACTIONS = 5


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    timestamp: int


@dataclass(frozen=True)
class UserSequence:
    user: int
    history: tuple[int, ...]
    target: Optional[int] = None

    @property
    def is_split(self) -> bool:
        return self.target is not None

    def items(self) -> tuple[int, ...]:
        return self.history if self.target is None else self.history + (self.target,)


@dataclass(frozen=True)
class Corpus:
    sequences: tuple[UserSequence, ...]
    item_count: int
    max_len: int
    # synthetic corpora carry cluster labels; loaded ones carry the raw item ids
    labels: Optional[dict] = field(default=None, compare=False)

    def __len__(self):
        return len(self.sequences)

    @property
    def is_split(self) -> bool:
        return all(s.is_split for s in self.sequences)

    def replace(self, **changes) -> "Corpus":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SyntheticSpec:
    users: int = 256
    items: int = 64
    clusters: int = 8
    seq_len_range: tuple[int, int] = (8, 16)
    noise_rate: float = 0.0
    sparsity_rate: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.seq_len_range
        if self.users < 1 or self.items < 1:
            raise ValueError("users and items must be positive")
        if not 1 <= self.clusters <= self.items:
            raise ValueError(f"clusters must lie in [1, items], got {self.clusters}")
        if not 1 <= lo <= hi:
            raise ValueError(f"bad seq_len_range {self.seq_len_range}")
        for name in ("noise_rate", "sparsity_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {rate}")
        if self.sparsity_rate >= 1.0:
            raise ValueError("sparsity_rate must be < 1")


@dataclass
class Batch:
    histories: np.ndarray  # (B, L-1) int64, left padded
    targets: np.ndarray  # (B,) int64
    mask: np.ndarray  # (B, L-1) bool, True on real items
    users: np.ndarray  # (B,) int64

    def __len__(self):
        return len(self.targets)


# ---------------------------------------------------------------------------
# ingest


def read_interactions(path) -> list[Interaction]:
    rows = []
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split("\t")
            if len(parts) != 3:
                raise MalformedRowError(path, line_no, line.rstrip("\n"))
            try:
                user, item, ts = (int(p) for p in parts)
            except ValueError:
                raise MalformedRowError(path, line_no, line.rstrip("\n")) from None
            rows.append(Interaction(user, item, ts))
    return rows


def _group_by_user(rows) -> dict[int, list[int]]:
    per_user = defaultdict(list)
    for r in rows:
        per_user[r.user].append(r)
    out = {}
    for user, events in per_user.items():
        events.sort(key=lambda r: (r.timestamp, r.item))
        out[user] = [r.item for r in events]
    return out


def filter_min_interactions(corpus: Corpus, minimum: int = MIN_INTERACTIONS) -> Corpus:
    kept = tuple(s for s in corpus.sequences if len(s.items()) >= minimum)
    return corpus.replace(sequences=kept)


def load_corpus(path, max_len: int = 50) -> Corpus:
    """Read a ``user<TAB>item<TAB>timestamp`` file into an unsplit corpus.

    Users with fewer than five interactions are dropped and the surviving
    item ids are re-mapped to the dense range ``1..|I|`` (0 is padding).
    """
    per_user = _group_by_user(read_interactions(path))
    per_user = {u: items for u, items in per_user.items() if len(items) >= MIN_INTERACTIONS}
    if not per_user:
        raise EmptyCorpusError(f"no user in {path} has >= {MIN_INTERACTIONS} interactions")
    raw_items = sorted({i for items in per_user.values() for i in items})
    remap = {raw: new for new, raw in enumerate(raw_items, start=1)}
    sequences = tuple(
        UserSequence(user=u, history=tuple(remap[i] for i in per_user[u]))
        for u in sorted(per_user)
    )
    # raw_item[i] is the original id of dense item i (slot 0 is padding)
    return Corpus(sequences=sequences, item_count=len(raw_items), max_len=max_len,
                  labels={"raw_item": (PAD, *raw_items)})


def save_corpus(corpus: Corpus, path) -> None:
    """Write one ``user<TAB>item<TAB>ordinal`` line per interaction.

    The target of a split sequence is written last, so reading the file back
    and splitting again reproduces the corpus.
    """
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for seq in corpus.sequences:
            for ordinal, item in enumerate(seq.items()):
                fh.write(f"{seq.user}\t{item}\t{ordinal}\n")


def read_corpus(path, item_count: int, max_len: int) -> Corpus:
    """Exact inverse of :func:`save_corpus` (no filtering, no id remapping)."""
    per_user = _group_by_user(read_interactions(path))
    sequences = tuple(UserSequence(user=u, history=tuple(per_user[u])) for u in sorted(per_user))
    return Corpus(sequences=sequences, item_count=item_count, max_len=max_len)


# ---------------------------------------------------------------------------
# splitting and padding


def leave_one_out_split(corpus: Corpus) -> Corpus:
    out = []
    for seq in corpus.sequences:
        items = seq.items()
        if len(items) < 2:
            raise SplitTooShortError(f"user {seq.user} has {len(items)} interaction(s)")
        out.append(UserSequence(seq.user, items[:-1], items[-1]))
    return corpus.replace(sequences=tuple(out))


def holdout_views(corpus: Corpus) -> tuple[Corpus, Corpus, Corpus]:
    """Train / validation / test views of a split corpus.

    test is the corpus itself; validation predicts the last history item from
    the rest; train predicts the one before that. Users whose history is too
    short for a view are left out of it.
    """

    def shift(c):
        seqs = tuple(
            UserSequence(s.user, s.history[:-1], s.history[-1])
            for s in c.sequences
            if len(s.history) >= 2
        )
        return c.replace(sequences=seqs)

    valid = shift(corpus)
    return shift(valid), valid, corpus


def pad_truncate(history, max_len: int) -> np.ndarray:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    recent = list(history)[-max_len:]
    out = np.zeros(max_len, dtype=np.int64)
    if recent:
        out[max_len - len(recent):] = recent
    return out


def strip_padding(padded) -> list[int]:
    return [int(i) for i in padded if i != PAD]


# ---------------------------------------------------------------------------
# synthesis and perturbation


def synthesize_corpus(spec: SyntheticSpec) -> Corpus:
    """Cluster-structured corpus: each user draws from a home cluster of items,
    or uniformly from the whole catalog with probability ``noise_rate``."""
    spec.validate()
    rng = numpy_rng(spec.seed)
    item_cluster = np.empty(spec.items + 1, dtype=np.int64)
    item_cluster[0] = -1
    members = np.array_split(rng.permutation(spec.items) + 1, spec.clusters)
    for c, ids in enumerate(members):
        item_cluster[ids] = c

    lo, hi = spec.seq_len_range
    user_cluster = {}
    sequences = []
    for user in range(1, spec.users + 1):
        home = int(rng.integers(spec.clusters))
        n = int(rng.integers(lo, hi + 1))
        off = rng.random(n) < spec.noise_rate
        in_cluster = rng.choice(members[home], size=n)
        anywhere = rng.integers(1, spec.items + 1, size=n)
        items = np.where(off, anywhere, in_cluster)
        user_cluster[user] = home
        sequences.append(UserSequence(user, tuple(int(i) for i in items)))

    corpus = Corpus(
        sequences=tuple(sequences),
        item_count=spec.items,
        max_len=hi,
        labels={"user_cluster": user_cluster, "item_cluster": item_cluster},
    )
    if spec.sparsity_rate > 0:
        corpus = inject_sparsity(corpus, spec.sparsity_rate, derive_seed(spec.seed, 1))
    return corpus


def inject_noise(corpus: Corpus, rate: float, seed: int) -> Corpus:
    """Replace each history position by a uniform random item with prob ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return corpus
    rng = numpy_rng(seed)
    out = []
    for seq in corpus.sequences:
        hist = np.asarray(seq.history, dtype=np.int64)
        hit = rng.random(len(hist)) < rate
        draws = rng.integers(1, corpus.item_count + 1, size=len(hist))
        hist = np.where(hit, draws, hist)
        out.append(UserSequence(seq.user, tuple(int(i) for i in hist), seq.target))
    return corpus.replace(sequences=tuple(out))


def apply_deletions(history, delete_mask) -> tuple[int, ...]:
    return tuple(int(i) for i, d in zip(history, delete_mask) if not d)


def inject_sparsity(corpus: Corpus, rate: float, seed: int) -> Corpus:
    """Delete each history position with prob ``rate``; users left with an
    empty history are dropped."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return corpus
    rng = numpy_rng(seed)
    out = []
    for seq in corpus.sequences:
        hist = apply_deletions(seq.history, rng.random(len(seq.history)) < rate)
        if hist:
            out.append(UserSequence(seq.user, hist, seq.target))
    return corpus.replace(sequences=tuple(out))


# ---------------------------------------------------------------------------
# batching


def to_batch(sequences, max_len: int) -> Batch:
    histories = np.stack([pad_truncate(s.history, max_len) for s in sequences])
    return Batch(
        histories=histories,
        targets=np.array([s.target for s in sequences], dtype=np.int64),
        mask=histories != PAD,
        users=np.array([s.user for s in sequences], dtype=np.int64),
    )


def make_batches(corpus: Corpus, batch_size: int, seed: int) -> Iterator[Batch]:
    """Shuffled batches; a trailing batch of one is merged into its predecessor."""
    if batch_size < 2:
        raise BatchTooSmallError("batch_size must be >= 2")
    n = len(corpus)
    if n < 2:
        raise BatchTooSmallError(f"corpus has {n} sequence(s); need at least 2")
    if not corpus.is_split:
        raise ValueError("make_batches needs a split corpus")
    order = numpy_rng(seed).permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    for chunk in chunks:
        yield to_batch([corpus.sequences[i] for i in chunk], corpus.max_len)
