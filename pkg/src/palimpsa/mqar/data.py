"""Key-value recall sequences with a staged length curriculum.

A sample is a pair region followed by query/answer slots: the first
2*num_kv positions hold (key, value) pairs with distinct keys, the rest
holds queried keys at even offsets, each immediately followed by its
answer token. Loss and accuracy are evaluated only at query positions,
where the model must predict the answer that follows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class MqarConfig:
    seq_len: int
    num_kv: int
    key_vocab: int = 128
    value_vocab: int = 128
    seed: int = 0
    batch: int = 1

    def __post_init__(self):
        if self.seq_len < 4 or self.seq_len % 2 != 0:
            raise ConfigError(f"seq_len must be even and >= 4, got {self.seq_len}")
        if self.num_kv < 1:
            raise ConfigError(f"num_kv must be >= 1, got {self.num_kv}")
        if self.num_kv > self.seq_len // 4:
            raise ConfigError(f"num_kv {self.num_kv} exceeds seq_len/4 = {self.seq_len // 4}")
        if self.key_vocab < self.num_kv:
            raise ConfigError(f"key_vocab {self.key_vocab} < num_kv {self.num_kv}")
        if self.value_vocab < 1:
            raise ConfigError("value_vocab must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")

    @property
    def vocab_size(self) -> int:
        return self.key_vocab + self.value_vocab

    @property
    def num_queries(self) -> int:
        return (self.seq_len - 2 * self.num_kv) // 2


@dataclass(frozen=True)
class MqarSample:
    tokens: np.ndarray  # (L,) int64
    query_mask: np.ndarray  # (L,) bool, true where the NEXT token is an answer
    answers: np.ndarray  # (num_queries,) int64, aligned to masked positions


def generate_mqar(cfg: MqarConfig, rng: np.random.Generator | None = None) -> list[MqarSample]:
    """One batch of samples. Deterministic for a given config seed."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    L, n_kv, n_q = cfg.seq_len, cfg.num_kv, cfg.num_queries
    samples = []
    for _ in range(cfg.batch):
        keys = rng.choice(cfg.key_vocab, size=n_kv, replace=False)
        values = cfg.key_vocab + rng.integers(0, cfg.value_vocab, size=n_kv)
        picks = rng.integers(0, n_kv, size=n_q)

        tokens = np.empty(L, dtype=np.int64)
        tokens[0 : 2 * n_kv : 2] = keys
        tokens[1 : 2 * n_kv : 2] = values
        tokens[2 * n_kv :: 2] = keys[picks]
        tokens[2 * n_kv + 1 :: 2] = values[picks]

        query_mask = np.zeros(L, dtype=bool)
        query_mask[2 * n_kv :: 2] = True
        samples.append(MqarSample(tokens=tokens, query_mask=query_mask, answers=values[picks].copy()))
    return samples


def batch_arrays(samples: Sequence[MqarSample]):
    """Stack samples into (tokens, query_mask) arrays of shape (B, L)."""
    tokens = np.stack([s.tokens for s in samples])
    mask = np.stack([s.query_mask for s in samples])
    return tokens, mask


def curriculum_schedule(stages: Sequence, epochs_per_stage: int) -> Iterator[tuple]:
    """Yield (stage, epoch) pairs, each stage repeated epochs_per_stage times."""
    if not stages:
        raise ConfigError("curriculum needs at least one stage")
    if epochs_per_stage < 1:
        raise ConfigError("epochs_per_stage must be >= 1")
    for stage in stages:
        for epoch in range(epochs_per_stage):
            yield stage, epoch
