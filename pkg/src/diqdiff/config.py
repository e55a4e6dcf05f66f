"""Run configuration with flat dotted keys (``svq.M``, ``loss.lambda_c`` ...).

Config files are flat JSON objects using the dotted keys. Command-line flags
use the last key component (``--lambda-q``) and take precedence over file
values, which take precedence over defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


def _key(section, help_text):
    return field(metadata={"section": section, "help": help_text})


@dataclass
class TrainConfig:
    T: int = _key("diffusion", "number of diffusion steps")
    beta_start: float = _key("diffusion", "first beta of the linear ramp")
    beta_end: float = _key("diffusion", "last beta of the linear ramp")
    beta_cap: float = _key("diffusion", "upper clamp applied to every beta")

    M: int = _key("svq", "codebook size")
    lambda_q: float = _key("svq", "weight of the quantized code in the guidance")
    tau: float = _key("svq", "Gumbel-Softmax temperature")
    ema_decay: float = _key("svq", "code update blend (0 = replace with batch mean)")
    init: str = _key("svq", "codebook init: random | sample")

    blocks: int = _key("model", "transformer blocks in the denoiser")
    heads: int = _key("model", "attention heads")
    dim: int = _key("model", "embedding width D")
    dropout_attn: float = _key("model", "dropout inside the denoiser")
    dropout_emb: float = _key("model", "dropout on item embeddings")

    lambda_c: float = _key("loss", "weight of the contrastive dispersion loss")

    lr: float = _key("train", "Adam learning rate")
    batch_size: int = _key("train", "sequences per batch")
    max_epochs: int = _key("train", "epoch budget")
    eval_every: int = _key("train", "epochs between evaluations")
    patience: int = _key("train", "stagnant evaluations before stopping")
    early_stop_k: int = _key("train", "K of the HR@K early-stopping metric")
    seed: int = _key("train", "global random seed")

    max_len: int = _key("data", "history length L-1 (left padded / truncated)")

    ks: str = _key("eval", "comma-separated cutoffs for HR/NDCG")
    eval_seeds: int = _key("eval", "generation seeds averaged per evaluation")
    exclude_seen: bool = _key("eval", "drop history items from the ranking")

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.init not in ("random", "sample"):
            raise ConfigError(f"svq.init must be random or sample, got {self.init!r}")
        if not 0.0 <= self.lambda_q <= 1.0:
            raise ConfigError("lambda_q must lie in [0, 1]")
        if self.lambda_c < 0:
            raise ConfigError("lambda_c must be >= 0")

    @property
    def k_list(self) -> list[int]:
        return sorted({int(k) for k in str(self.ks).split(",") if k.strip()})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_flat(self) -> dict:
        return {dotted(f.name): getattr(self, f.name) for f in fields(self)}

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_flat(cls, flat: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or DEFAULTS
        by_key = {dotted(f.name): f for f in fields(cls)}
        changes = {}
        for key, value in flat.items():
            f = by_key.get(key)
            if f is None:
                raise ConfigError(f"unknown config key {key!r}")
            changes[f.name] = coerce(f, value)
        return base.replace(**changes)


def dotted(name: str) -> str:
    f = {f.name: f for f in fields(TrainConfig)}[name]
    return f"{f.metadata['section']}.{name}"


def coerce(f, value):
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float,
                                                     "str": str, "bool": bool}[f.type]
    if kind is bool and isinstance(value, str):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{f.name}: not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{f.name}: not an integer: {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: cannot parse {value!r}") from None


DEFAULTS = TrainConfig(
    T=32, beta_start=0.003125, beta_end=0.625, beta_cap=0.999,
    M=8, lambda_q=0.4, tau=1.0, ema_decay=0.9, init="sample",
    blocks=2, heads=2, dim=128, dropout_attn=0.1, dropout_emb=0.3,
    lambda_c=0.4,
    lr=1e-3, batch_size=512, max_epochs=100, eval_every=2, patience=10,
    early_stop_k=20, seed=0,
    max_len=50,
    ks="5,10,20", eval_seeds=1, exclude_seen=False,
)


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ConfigError(f"{path}: expected a flat JSON object")
    return data
