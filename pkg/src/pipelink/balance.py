"""Overlap hosting and token-driven load rebalancing.

Each ring device keeps, beyond the sub-modules it actively runs, resident
copies of the nearest modules of its ring neighbours, as many as fit in its
leftover memory budget. A module resident on two devices can change owner
without moving weights, so a rebalance is a pure boundary shift.

Rebalancing is planned from recent per-token busy times: a device far above
the fleet median (or starved of memory) triggers a search over boundary
shifts whose every module lands on a device that already hosts it. The
chosen shift must strictly improve the predicted per-token cost, priced
with speeds re-estimated from the observed busy times.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .assign import (
    DEFAULT_BETA,
    AssignmentPlan,
    CostBreakdown,
    CostModel,
    InfeasibleError,
    evaluate_cost,
)

DEFAULT_THETA = 1.5
DEFAULT_WINDOW_TOKENS = 10

# Weight-movement charges are anchored to one measured pair: releasing eight
# resident full-precision blocks takes 0.03s and reloading them 2.449s. A
# hidden-2048 block weighs 201_342_976 bytes, so the reload rate follows.
RELEASE_SEC_PER_MODULE = 0.03 / 8

DEFAULT_RELOAD_BYTES_PER_SEC = 8 * 201_342_976 / 2.449

ActiveMap = Dict[int, Optional[Tuple[int, int]]]


@dataclass
class OverlapAllocation:
    """Active ranges plus the wider resident (hosted) ranges per device.

    Ranges are inclusive module index pairs; None marks a device that is in
    the ring but currently runs nothing. hosted always contains active.
    """

    device_order: List[int]
    active: ActiveMap
    hosted: ActiveMap

    @property
    def num_modules(self) -> int:
        return sum(
            hi - lo + 1 for r in self.active.values() if r for lo, hi in [r]
        )

    def active_modules(self, device: int) -> List[int]:
        span = self.active.get(device)
        return list(range(span[0], span[1] + 1)) if span else []

    def hosted_modules(self, device: int) -> List[int]:
        span = self.hosted.get(device)
        return list(range(span[0], span[1] + 1)) if span else []

    def owner_of(self, module: int) -> int:
        for dev in self.device_order:
            span = self.active.get(dev)
            if span and span[0] <= module <= span[1]:
                return dev
        raise ValueError(f"module {module} has no active owner")

    def cuts(self) -> List[int]:
        """First active module per ring position; empty slots repeat the next cut."""
        cuts = []
        cursor = 0
        for dev in self.device_order:
            span = self.active.get(dev)
            cuts.append(cursor if span is None else span[0])
            if span is not None:
                cursor = span[1] + 1
        return cuts

    def assignment_matrix(self, num_devices: int, num_modules: int) -> List[List[int]]:
        x = [[0] * num_modules for _ in range(num_devices)]
        for dev in self.device_order:
            span = self.active.get(dev)
            if span:
                for j in range(span[0], span[1] + 1):
                    x[dev][j] = 1
        return x


def _active_bytes(span: Optional[Tuple[int, int]], mem_mod: Sequence[int]) -> int:
    if not span:
        return 0
    return sum(mem_mod[j] for j in range(span[0], span[1] + 1))


def overlap_allocation(
    device_order: Sequence[int],
    active: ActiveMap,
    cost_model: CostModel,
) -> OverlapAllocation:
    """Choose per-device resident extensions into the neighbouring ranges.

    Device choices are independent, so maximising hosted bytes per device
    (ties: wider extension, then the left side) is globally optimal. A
    device may only extend into the active range of its nearest non-empty
    neighbour on each side; ring ends do not wrap, since module indices
    would not stay contiguous across the wrap.
    """
    cm = cost_model
    order = list(device_order)
    hosted: ActiveMap = {}
    spans = [active.get(dev) for dev in order]
    for pos, dev in enumerate(order):
        span = spans[pos]
        if span is None:
            hosted[dev] = None
            continue
        base = _active_bytes(span, cm.mem_mod)
        budget = cm.budget(dev)
        if base > budget:
            raise InfeasibleError(
                f"device {dev} actively holds {base} bytes, over budget "
                f"{budget:.0f}",
                device=dev,
            )
        left_span = next(
            (spans[q] for q in range(pos - 1, -1, -1) if spans[q]), None
        )
        right_span = next(
            (spans[q] for q in range(pos + 1, len(order)) if spans[q]), None
        )
        max_a = span[0] - left_span[0] if left_span else 0
        max_b = right_span[1] - span[1] if right_span else 0
        best = (0, 0)
        best_key = (-1, -1, -1)
        for a in range(max_a + 1):
            ext_left = sum(cm.mem_mod[j] for j in range(span[0] - a, span[0]))
            if base + ext_left > budget:
                break
            for b in range(max_b + 1):
                ext = ext_left + sum(
                    cm.mem_mod[j] for j in range(span[1] + 1, span[1] + 1 + b)
                )
                if base + ext > budget:
                    break
                key = (ext, a + b, a)
                if key > best_key:
                    best_key = key
                    best = (a, b)
        a, b = best
        hosted[dev] = (span[0] - a, span[1] + b)
    return OverlapAllocation(device_order=order, active=dict(active), hosted=hosted)


def solve_overlap(plan: AssignmentPlan, cost_model: CostModel) -> OverlapAllocation:
    """Overlap allocation for a fresh plan: active ranges straight from it."""
    spans = plan.ranges()
    active: ActiveMap = {dev: spans[dev] for dev in plan.device_order}
    return overlap_allocation(plan.device_order, active, cost_model)


def movable_modules(alloc: OverlapAllocation) -> Dict[int, Tuple[int, int]]:
    """Modules resident on exactly two devices, keyed to that device pair."""
    holders: Dict[int, List[int]] = {}
    for dev in alloc.device_order:
        for j in alloc.hosted_modules(dev):
            holders.setdefault(j, []).append(dev)
    return {
        j: (devs[0], devs[1])
        for j, devs in sorted(holders.items())
        if len(devs) == 2
    }


@dataclass
class DeviceSnapshot:
    """Rolling runtime observation of one device."""

    device_id: int
    busy_sec_per_token: List[float]
    mem_total: int
    mem_avail: int
    active_flops: int

    def mean_busy(self) -> float:
        if not self.busy_sec_per_token:
            return 0.0
        return statistics.fmean(self.busy_sec_per_token)


@dataclass
class RebalanceTrigger:
    kind: str  # "compute" or "memory"
    device_id: int
    detail: str


def should_rebalance(
    snapshots: Sequence[DeviceSnapshot],
    theta: float = DEFAULT_THETA,
    beta: float = DEFAULT_BETA,
) -> Optional[RebalanceTrigger]:
    """Fire when one device's busy time dominates the median, or memory runs dry."""
    means = {s.device_id: s.mean_busy() for s in snapshots}
    if means:
        med = statistics.median(means.values())
        worst = max(sorted(means), key=lambda d: means[d])
        if means[worst] > 0 and (med == 0 or means[worst] >= theta * med):
            return RebalanceTrigger(
                kind="compute",
                device_id=worst,
                detail=(
                    f"device {worst} busy {means[worst]:.4f}s/token vs "
                    f"median {med:.4f}s (threshold x{theta})"
                ),
            )
    for s in sorted(snapshots, key=lambda s: s.device_id):
        floor = (1.0 - beta) * s.mem_total
        if s.mem_avail < floor:
            return RebalanceTrigger(
                kind="memory",
                device_id=s.device_id,
                detail=(
                    f"device {s.device_id} has {s.mem_avail} bytes free, "
                    f"below the {floor:.0f} byte floor"
                ),
            )
    return None


@dataclass
class RebalanceDecision:
    moved: List[Tuple[int, int, int]]  # (module, from_device, to_device)
    new_allocation: Optional[OverlapAllocation]
    current_cost: Optional[CostBreakdown]
    predicted_cost: Optional[CostBreakdown]
    est_release_sec: float
    est_reload_sec: float
    reason: str

    @property
    def should_move(self) -> bool:
        return bool(self.moved)


def _implied_speeds(cm: CostModel) -> List[float]:
    speeds = []
    for i in range(cm.num_devices):
        rate = 0.0
        for j in range(cm.num_modules):
            if cm.flops_mod[j] > 0 and cm.exec_time[i][j] > 0:
                rate = cm.flops_mod[j] / cm.exec_time[i][j]
                break
        speeds.append(rate if rate > 0 else 1.0)
    return speeds


def cut_windows(alloc: OverlapAllocation) -> List[Tuple[int, int]]:
    """Inclusive bounds for each interior cut, derived from hosted ranges.

    Cut p is the first module of ring position p. A candidate value is only
    plausible when everything left of it can sit on earlier positions and
    everything from it onward can sit on later ones; hosted ranges bound
    both sides. The per-module ownership check in plan_rebalance remains
    the authority, these windows just keep enumeration small.
    """
    order = alloc.device_order
    hosted = [alloc.hosted.get(dev) for dev in order]
    cuts = alloc.cuts()
    n = alloc.num_modules
    windows: List[Tuple[int, int]] = []
    for p in range(1, len(order)):
        lows = [hosted[q][0] for q in range(p, len(order)) if hosted[q]]
        highs = [hosted[q][1] + 1 for q in range(p) if hosted[q]]
        lo = min(lows) if lows else n
        hi = max(highs) if highs else 0
        lo = min(lo, n)
        hi = max(hi, 0)
        if lo > hi:
            lo = hi = cuts[p]
        windows.append((lo, hi))
    return windows


def _owner_by_cuts(cuts: Sequence[int], order: Sequence[int], n: int) -> List[int]:
    owner = [-1] * n
    bounds = list(cuts) + [n]
    for pos, dev in enumerate(order):
        for j in range(bounds[pos], bounds[pos + 1]):
            owner[j] = dev
    return owner


def plan_rebalance(
    alloc: OverlapAllocation,
    cost_model: CostModel,
    snapshots: Sequence[DeviceSnapshot],
    reload_bytes_per_sec: float = DEFAULT_RELOAD_BYTES_PER_SEC,
) -> RebalanceDecision:
    """Pick the boundary shift with the best predicted per-token cost.

    Only shifts where every module stays on a device already hosting it are
    candidates, and the winner must be strictly better than staying put;
    otherwise the decision reports why nothing moves.
    """
    cm = cost_model
    order = alloc.device_order
    n = cm.num_modules
    by_id = {s.device_id: s for s in snapshots}

    speeds = _implied_speeds(cm)
    for dev in order:
        snap = by_id.get(dev)
        if snap and snap.active_flops > 0 and snap.mean_busy() > 0:
            speeds[dev] = snap.active_flops / snap.mean_busy()
    cm_now = cm.with_speeds(speeds)

    current_x = alloc.assignment_matrix(cm.num_devices, n)
    current = evaluate_cost(current_x, cm_now)

    means = {dev: by_id[dev].mean_busy() if dev in by_id else 0.0 for dev in order}
    bottleneck = max(sorted(order), key=lambda d: means[d])
    pb = order.index(bottleneck)

    windows = cut_windows(alloc)
    cuts_now = alloc.cuts()[1:] if len(order) > 1 else []

    adjacent = [w for p, w in enumerate(windows) if p + 1 in (pb, pb + 1)]
    if all(w[0] == w[1] for w in adjacent):
        return RebalanceDecision(
            moved=[],
            new_allocation=None,
            current_cost=current,
            predicted_cost=None,
            est_release_sec=0.0,
            est_reload_sec=0.0,
            reason=(
                f"no movable module borders bottleneck device {bottleneck}; "
                "its neighbours host no copies to take over"
            ),
        )

    owner_now = _owner_by_cuts([0] + cuts_now, order, n)
    hosted_sets = {
        dev: set(alloc.hosted_modules(dev)) for dev in order
    }

    best_cuts: Optional[Tuple[int, ...]] = None
    best_cost: Optional[CostBreakdown] = None
    for cand in product(*(range(lo, hi + 1) for lo, hi in windows)):
        if list(cand) == cuts_now:
            continue
        seq = [0] + list(cand)
        if any(seq[i] > seq[i + 1] for i in range(len(seq) - 1)):
            continue
        owner = _owner_by_cuts(seq, order, n)
        if any(j not in hosted_sets[owner[j]] for j in range(n)):
            continue
        x = [[0] * n for _ in range(cm.num_devices)]
        for j, dev in enumerate(owner):
            x[dev][j] = 1
        try:
            cost = evaluate_cost(x, cm_now)
        except InfeasibleError:
            continue
        if cost.objective < current.objective and (
            best_cost is None or cost.objective < best_cost.objective
        ):
            best_cost = cost
            best_cuts = cand

    if best_cuts is None:
        return RebalanceDecision(
            moved=[],
            new_allocation=None,
            current_cost=current,
            predicted_cost=None,
            est_release_sec=0.0,
            est_reload_sec=0.0,
            reason="no boundary shift improves the predicted per-token cost",
        )

    seq = [0] + list(best_cuts) + [n]
    new_active: ActiveMap = {}
    for pos, dev in enumerate(order):
        lo, hi = seq[pos], seq[pos + 1] - 1
        new_active[dev] = (lo, hi) if lo <= hi else None
    new_alloc = overlap_allocation(order, new_active, cm)

    owner_new = _owner_by_cuts(seq[:-1], order, n)
    moved = [
        (j, owner_now[j], owner_new[j])
        for j in range(n)
        if owner_now[j] != owner_new[j]
    ]
    released = 0
    reload_bytes = 0
    for dev in order:
        old_set = hosted_sets[dev]
        new_set = set(new_alloc.hosted_modules(dev))
        released += len(old_set - new_set)
        reload_bytes += sum(cm.mem_mod[j] for j in new_set - old_set)
    return RebalanceDecision(
        moved=moved,
        new_allocation=new_alloc,
        current_cost=current,
        predicted_cost=best_cost,
        est_release_sec=released * RELEASE_SEC_PER_MODULE,
        est_reload_sec=reload_bytes / reload_bytes_per_sec,
        reason=(
            f"shift boundaries to {list(best_cuts)}: predicted per-token cost "
            f"{best_cost.objective:.6f}s vs current {current.objective:.6f}s"
        ),
    )


@dataclass
class TransitionSchedule:
    """When each device adopts a new active map, in units of sample ids.

    Ownership changes only at sample boundaries, so one switch sample serves
    every device: samples below it drain under the old map while devices
    adopt the new one the moment they see the first new sample. Switch
    points are therefore equal, trivially non-decreasing along the ring.
    """

    order: List[int]
    switch_sample: Optional[int]
    switch_points: Dict[int, int] = field(default_factory=dict)

    @property
    def is_noop(self) -> bool:
        return self.switch_sample is None


def schedule_transition(
    decision: RebalanceDecision,
    issued_samples: int,
    device_order: Sequence[int],
) -> TransitionSchedule:
    """Place the switch at the first sample no device has started yet.

    issued_samples counts samples already handed to the pipeline; they keep
    their old placement, so no token mixes old and new active sets.
    """
    order = list(device_order)
    if not decision.should_move:
        return TransitionSchedule(order=order, switch_sample=None)
    switch = issued_samples
    return TransitionSchedule(
        order=order,
        switch_sample=switch,
        switch_points={dev: switch for dev in order},
    )


def format_rebalance_line(
    token_seq: int,
    bottleneck: int,
    moved: Sequence[Tuple[int, int, int]],
    est_overhead_sec: float,
) -> str:
    """One-line event record: token count, culprit, moves, overhead."""
    moves = ",".join(f"{j}:{src}->{dst}" for j, src, dst in moved)
    return (
        f"rebalance {token_seq} {bottleneck} moves={moves} "
        f"est_overhead={est_overhead_sec:.3f}"
    )
