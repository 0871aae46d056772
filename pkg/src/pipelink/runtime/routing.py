"""Static routing facts: module traffic table, residual maps, ring order.

Residual values can travel two ways. In direct mode the producer's device
opens a connection to the consumer's device and ships digests as soon as
they exist. In piggyback mode they ride the sequential activation frames as
annotations, relayed hop by hop and inflating each hop's payload until
consumed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from ..graph import SubModuleProfile

MODE_DIRECT = "residual_direct"
MODE_PIGGYBACK = "sequential_piggyback"
MODES = (MODE_DIRECT, MODE_PIGGYBACK)

Span = Optional[Tuple[int, int]]


@dataclass(frozen=True)
class ModuleTable:
    """Per-module compute, memory, and traffic facts the runtime consumes.

    seq_bytes[j] is the size of module j's output heading to module j+1;
    the final entry is the size returned to the ring head after the last
    module. res_bytes holds the non-adjacent links keyed (producer,
    consumer).
    """

    flops: Tuple[int, ...]
    mem_bytes: Tuple[int, ...]
    seq_bytes: Tuple[int, ...]
    res_bytes: Dict[Tuple[int, int], int]

    @property
    def num_modules(self) -> int:
        return len(self.flops)

    @classmethod
    def from_profiles(
        cls, profiles: Sequence[SubModuleProfile], return_bytes: int = 0
    ) -> "ModuleTable":
        n = len(profiles)
        seq = []
        res: Dict[Tuple[int, int], int] = {}
        for j, p in enumerate(profiles):
            seq.append(p.out_to.get(j + 1, 0) if j + 1 < n else return_bytes)
            for consumer, size in sorted(p.out_to.items()):
                if consumer != j + 1:
                    res[(j, consumer)] = size
        return cls(
            flops=tuple(p.flops for p in profiles),
            mem_bytes=tuple(p.mem_bytes for p in profiles),
            seq_bytes=tuple(seq),
            res_bytes=res,
        )

    def residual_pairs(self) -> List[Tuple[int, int]]:
        return sorted(self.res_bytes)


def producers_by_consumer(pairs: Sequence[Tuple[int, int]]) -> Dict[int, List[int]]:
    out: Dict[int, List[int]] = {}
    for producer, consumer in sorted(pairs):
        out.setdefault(consumer, []).append(producer)
    return out


def consumers_by_producer(pairs: Sequence[Tuple[int, int]]) -> Dict[int, List[int]]:
    out: Dict[int, List[int]] = {}
    for producer, consumer in sorted(pairs):
        out.setdefault(producer, []).append(consumer)
    return out


def owner_map(
    device_order: Sequence[int], active: Dict[int, Span], num_modules: int
) -> List[int]:
    """module -> device under one epoch; spans must tile the module range."""
    owner = [-1] * num_modules
    cursor = 0
    for dev in device_order:
        span = active.get(dev)
        if span is None:
            continue
        lo, hi = span
        if lo != cursor or hi < lo:
            raise ValueError(
                f"device {dev} spans [{lo}, {hi}] but modules are covered "
                f"up to {cursor}; active ranges must tile the chain in ring order"
            )
        for j in range(lo, hi + 1):
            owner[j] = dev
        cursor = hi + 1
    if cursor != num_modules:
        raise ValueError(
            f"active ranges cover {cursor} of {num_modules} modules"
        )
    return owner


def ring_successor(device_order: Sequence[int], device: int) -> int:
    pos = list(device_order).index(device)
    return device_order[(pos + 1) % len(device_order)]


@dataclass(frozen=True)
class ResidualRoute:
    """One cross-device residual dependency, seen from its producer device."""

    source_module: int
    target_device: int
    target_module: int
    sim_bytes: int


@dataclass
class TransmissionMap:
    """Everything one device must know to move a token's data onward.

    sequential_target is the ring successor (None on a single-device ring).
    residual_routes lists this device's cross-device residual obligations:
    in direct mode they become dedicated frames, grouped by target device
    and sent in send_order (nearest target first, by link latency); in
    piggyback mode they ride the next activation frame. piggyback_carries
    also includes entries that merely transit this device on their way
    down the ring. Locally satisfied pairs are kept as local_pairs for
    inspection; they involve no traffic. return_route marks the last
    device's obligation to ship logits back to the ring head.
    """

    device_id: int
    sequential_target: Optional[int]
    residual_routes: List[ResidualRoute]
    send_order: List[int]
    piggyback_carries: List[ResidualRoute]
    local_pairs: List[Tuple[int, int]]
    return_route: Optional[Tuple[int, int]]


def build_transmission_maps(
    device_order: Sequence[int],
    active: Dict[int, Span],
    table: ModuleTable,
    latency: Sequence[Sequence[float]],
    mode: str,
) -> Dict[int, TransmissionMap]:
    """Static per-device routing for one placement epoch.

    The runtime derives the same facts on the fly from its epoch tables;
    this is the up-front view used for planning output and checks.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    order = list(device_order)
    owner = owner_map(order, active, table.num_modules)
    leader = order[0]
    last = order[-1]

    routes: Dict[int, List[ResidualRoute]] = {dev: [] for dev in order}
    local: Dict[int, List[Tuple[int, int]]] = {dev: [] for dev in order}
    for (producer, consumer), size in sorted(table.res_bytes.items()):
        src_dev = owner[producer]
        dst_dev = owner[consumer]
        if src_dev == dst_dev:
            local[src_dev].append((producer, consumer))
            continue
        routes[src_dev].append(
            ResidualRoute(
                source_module=producer,
                target_device=dst_dev,
                target_module=consumer,
                sim_bytes=size,
            )
        )

    # Piggybacked entries transit every ring position between producer and
    # consumer devices, so each intermediate device carries them too.
    carries: Dict[int, List[ResidualRoute]] = {dev: [] for dev in order}
    if mode == MODE_PIGGYBACK:
        pos = {dev: p for p, dev in enumerate(order)}
        for dev in order:
            for route in routes[dev]:
                for p in range(pos[dev], pos[route.target_device]):
                    carries[order[p]].append(route)

    maps: Dict[int, TransmissionMap] = {}
    for dev in order:
        targets = sorted(
            {r.target_device for r in routes[dev]},
            key=lambda d: (latency[dev][d], d),
        )
        maps[dev] = TransmissionMap(
            device_id=dev,
            sequential_target=ring_successor(order, dev) if len(order) > 1 else None,
            residual_routes=routes[dev] if mode == MODE_DIRECT else [],
            send_order=targets if mode == MODE_DIRECT else [],
            piggyback_carries=carries[dev],
            local_pairs=local[dev],
            return_route=(last, leader) if dev == last else None,
        )
    return maps


def transmission_maps_for_plan(
    plan,
    profiles: Sequence[SubModuleProfile],
    fleet,
    mode: str,
    return_bytes: int = 0,
) -> Dict[int, TransmissionMap]:
    """Transmission maps for a fresh assignment plan."""
    table = ModuleTable.from_profiles(profiles, return_bytes=return_bytes)
    spans = plan.ranges()
    active = {dev: spans.get(dev) for dev in plan.device_order}
    return build_transmission_maps(
        plan.device_order, active, table, fleet.latency, mode
    )
