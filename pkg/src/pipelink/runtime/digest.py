"""Deterministic 64-bit digests standing in for tensor values.

Every activation, residual, and logits value in the simulated pipeline is a
u64 digest derived from what produced it. Two executions that perform the
same module-level dataflow produce identical digests regardless of device
placement, threading, or transport, so digest equality is the correctness
check for the whole runtime.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Sequence, Union

Part = Union[int, str, Sequence[int]]

_U64 = struct.Struct("<Q")


def h64(*parts: Part) -> int:
    """Hash heterogeneous parts into a u64 with a self-delimiting encoding."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool):
            raise TypeError("bool is not a digest part")
        if isinstance(part, int):
            h.update(b"i")
            h.update(_U64.pack(part & 0xFFFFFFFFFFFFFFFF))
        elif isinstance(part, str):
            data = part.encode("utf-8")
            h.update(b"s")
            h.update(struct.pack("<H", len(data)))
            h.update(data)
        else:
            items = list(part)
            h.update(b"l")
            h.update(struct.pack("<H", len(items)))
            for item in items:
                h.update(_U64.pack(item & 0xFFFFFFFFFFFFFFFF))
    return _U64.unpack(h.digest())[0]


def sample_seed(seed: int, sample_id: int, ctx_len: int) -> int:
    return h64("sample", seed, sample_id, ctx_len)


def token_input(seed_digest: int, token_index: int, prev_logits: int) -> int:
    """Digest entering module 0; prev_logits is ctx_len for the first token."""
    return h64("tok", seed_digest, token_index, prev_logits)


def module_out(module: int, seq_in: int, residual_digests: Iterable[int]) -> int:
    """Output digest of one sub-module from its sequential and residual inputs.

    residual_digests must arrive ordered by producer module index so both
    transports hash the same list.
    """
    return h64("mod", module, seq_in, list(residual_digests))


def fold(acc: int, value: int) -> int:
    return h64("fold", acc, value)


def fold_all(start: int, values: Iterable[int]) -> int:
    acc = start
    for v in values:
        acc = fold(acc, v)
    return acc
