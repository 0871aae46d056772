"""Single-threaded reference execution of the digest dataflow.

Walks every sample and token through the sub-modules in index order with no
devices, transport, or timing. Its digests are the ground truth any
pipelined execution must reproduce exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .digest import fold_all, h64, module_out, sample_seed, token_input
from .workload import Workload


@dataclass
class RunDigests:
    """Digest outcome of one run: per-token logits and per-sample folds."""

    logits: Dict[Tuple[int, int], int] = field(default_factory=dict)
    sample_digests: Dict[int, int] = field(default_factory=dict)
    run_digest: int = 0

    def finalize(self, workload: Workload) -> None:
        for s in range(workload.num_samples):
            seed_digest = sample_seed(workload.seed, s, workload.ctx_len)
            per_token = [
                self.logits[(s, t)] for t in range(workload.tokens_per_sample)
            ]
            self.sample_digests[s] = fold_all(seed_digest, per_token)
        self.run_digest = fold_all(
            h64("run", workload.seed),
            [self.sample_digests[s] for s in range(workload.num_samples)],
        )


def run_reference(
    num_modules: int,
    residual_producers: Dict[int, Sequence[int]],
    workload: Workload,
) -> RunDigests:
    """Sequential oracle over the module chain plus residual links."""
    workload.validate()
    result = RunDigests()
    for s in range(workload.num_samples):
        seed_digest = sample_seed(workload.seed, s, workload.ctx_len)
        prev = workload.ctx_len
        for t in range(workload.tokens_per_sample):
            x = token_input(seed_digest, t, prev)
            outs: List[int] = []
            for j in range(num_modules):
                seq_in = x if j == 0 else outs[j - 1]
                res = [outs[i] for i in residual_producers.get(j, [])]
                outs.append(module_out(j, seq_in, res))
            result.logits[(s, t)] = outs[-1]
            prev = outs[-1]
    result.finalize(workload)
    return result
