"""Token workload description for pipeline runs."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Workload:
    """A batch of independent samples, each generating tokens in sequence.

    ctx_len seeds the first token of every sample; later tokens chain on
    the previous token's logits digest. ctx_growth_per_token inflates
    compute cost as the context grows.
    """

    num_samples: int
    tokens_per_sample: int
    ctx_len: int = 128
    seed: int = 0
    ctx_growth_per_token: float = 0.0

    def validate(self) -> None:
        if self.num_samples <= 0:
            raise ValueError("workload needs at least one sample")
        if self.tokens_per_sample <= 0:
            raise ValueError("workload needs at least one token per sample")
        if self.ctx_len <= 0:
            raise ValueError("ctx_len must be positive")
        if self.ctx_growth_per_token < 0:
            raise ValueError("ctx_growth_per_token cannot be negative")

    def compute_scale(self, token_index: int) -> float:
        return 1.0 + self.ctx_growth_per_token * token_index

    @property
    def total_tokens(self) -> int:
        return self.num_samples * self.tokens_per_sample
