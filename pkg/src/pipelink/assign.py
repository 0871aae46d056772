"""Exact device assignment of pipeline sub-modules.

The objective is total compute time plus total transfer time. Compute time
sums each sub-module's flops divided by the rate of its host. Transfer time
charges every ordered device pair with cross traffic one latency plus the
aggregated bytes over that pair's bandwidth, and finally the hop returning
the last sub-module's output to the first device in the ring.

The search enumerates device orderings and contiguous split points with a
branch-and-bound prune on remaining compute, which is exact at this scale;
a guarded brute-force enumerator over the same space (and, behind a flag,
over non-contiguous assignments) serves as the search oracle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .fleet import FleetProfile
from .graph import SubModuleProfile, traffic_matrix

DEFAULT_BETA = 0.8

BRUTE_MAX_DEVICES = 3
BRUTE_MAX_MODULES = 10
BRUTE_MAX_MODULES_FREE = 6

# downscale for branch-and-bound lower bounds so float rounding can never
# push a bound above the true branch minimum and prune a better plan
_BOUND_SLACK = 1.0 - 1e-9


class InfeasibleError(RuntimeError):
    """No assignment satisfies the memory budget; carries diagnostics."""

    def __init__(self, message: str, device: Optional[int] = None):
        super().__init__(message)
        self.device = device


@dataclass
class CostBreakdown:
    t_compute: float
    t_data: float

    @property
    def objective(self) -> float:
        return self.t_compute + self.t_data


@dataclass
class CostModel:
    """Everything evaluate_cost needs, derived from profiles and a fleet.

    exec_time[i][j] is the seconds device i spends running sub-module j.
    module_traffic[j][k] is the bytes sub-module j ships to k (j < k).
    return_bytes is the size of the final output hauled back to the ring
    head after the last sub-module; zero when the caller does not model it.
    """

    exec_time: List[List[float]]
    module_traffic: List[List[int]]
    mem_mod: List[int]
    flops_mod: List[int]
    latency: List[List[float]]
    bandwidth: List[List[float]]
    mem_avail: List[int]
    beta: float = DEFAULT_BETA
    return_bytes: int = 0

    @property
    def num_devices(self) -> int:
        return len(self.exec_time)

    @property
    def num_modules(self) -> int:
        return len(self.mem_mod)

    def budget(self, device: int) -> float:
        return self.beta * self.mem_avail[device]

    @classmethod
    def from_profiles(
        cls,
        profiles: Sequence[SubModuleProfile],
        fleet: FleetProfile,
        beta: float = DEFAULT_BETA,
        return_bytes: int = 0,
    ) -> "CostModel":
        fleet.validate()
        if not 0 < beta <= 1:
            raise ValueError(f"beta must be in (0, 1], got {beta}")
        exec_time = [
            [p.flops / d.flops_per_sec for p in profiles] for d in fleet.devices
        ]
        return cls(
            exec_time=exec_time,
            module_traffic=traffic_matrix(profiles),
            mem_mod=[p.mem_bytes for p in profiles],
            flops_mod=[p.flops for p in profiles],
            latency=[row[:] for row in fleet.latency],
            bandwidth=[row[:] for row in fleet.bandwidth],
            mem_avail=[d.mem_avail_bytes for d in fleet.devices],
            beta=beta,
            return_bytes=return_bytes,
        )

    def with_speeds(self, flops_per_sec: Sequence[float]) -> "CostModel":
        """Same model with exec_time rebuilt from fresh per-device rates."""
        exec_time = [
            [f / rate for f in self.flops_mod] for rate in flops_per_sec
        ]
        return CostModel(
            exec_time=exec_time,
            module_traffic=self.module_traffic,
            mem_mod=self.mem_mod,
            flops_mod=self.flops_mod,
            latency=self.latency,
            bandwidth=self.bandwidth,
            mem_avail=self.mem_avail,
            beta=self.beta,
            return_bytes=self.return_bytes,
        )


def d2d_matrix(x: Sequence[Sequence[int]], module_traffic: Sequence[Sequence[int]]) -> List[List[int]]:
    """Device-to-device bytes: the module traffic pushed through the assignment."""
    m, n = len(x), len(x[0])
    host = _hosts(x)
    out = [[0] * m for _ in range(m)]
    for j in range(n):
        row = module_traffic[j]
        for k in range(j + 1, n):
            if row[k]:
                out[host[j]][host[k]] += row[k]
    return out


def _hosts(x: Sequence[Sequence[int]]) -> List[int]:
    """host[j] = device of sub-module j; validates each column sums to one."""
    m, n = len(x), len(x[0])
    host = [-1] * n
    for j in range(n):
        total = 0
        for i in range(m):
            if x[i][j]:
                total += x[i][j]
                host[j] = i
        if total != 1:
            raise ValueError(f"column {j} of x sums to {total}, expected exactly 1")
    return host


def _check_memory(host: Sequence[int], cm: CostModel) -> None:
    used = [0] * cm.num_devices
    for j, dev in enumerate(host):
        used[dev] += cm.mem_mod[j]
    for i, load in enumerate(used):
        if load > cm.budget(i):
            raise InfeasibleError(
                f"device {i} holds {load} bytes, over its budget "
                f"{cm.budget(i):.0f} (beta {cm.beta} of {cm.mem_avail[i]})",
                device=i,
            )


def evaluate_cost(x: Sequence[Sequence[int]], cost_model: CostModel) -> CostBreakdown:
    """Objective of one assignment matrix; validates columns and memory."""
    cm = cost_model
    host = _hosts(x)
    _check_memory(host, cm)
    t_compute = 0.0
    for j, dev in enumerate(host):
        t_compute += cm.exec_time[dev][j]
    pair_bytes: Dict[Tuple[int, int], int] = {}
    n = cm.num_modules
    for j in range(n):
        row = cm.module_traffic[j]
        for k in range(j + 1, n):
            size = row[k]
            if size and host[j] != host[k]:
                key = (host[j], host[k])
                pair_bytes[key] = pair_bytes.get(key, 0) + size
    t_data = 0.0
    for (a, b), size in sorted(pair_bytes.items()):
        t_data += cm.latency[a][b] + size / cm.bandwidth[a][b]
    if cm.return_bytes > 0 and n > 0:
        a, b = host[n - 1], host[0]
        if a != b:
            t_data += cm.latency[a][b] + cm.return_bytes / cm.bandwidth[a][b]
    return CostBreakdown(t_compute=t_compute, t_data=t_data)


@dataclass
class AssignmentPlan:
    """Assignment matrix plus the ring order of the devices that host work.

    device_order lists only devices holding at least one sub-module; a
    device the optimizer leaves empty takes no place in the ring.
    """

    x: List[List[int]]
    device_order: List[int]
    objective: float
    t_compute: Optional[float] = None
    t_data: Optional[float] = None

    @property
    def num_devices(self) -> int:
        return len(self.x)

    @property
    def num_modules(self) -> int:
        return len(self.x[0]) if self.x else 0

    def hosts(self) -> List[int]:
        return _hosts(self.x)

    def ranges(self) -> Dict[int, Tuple[int, int]]:
        """Per hosting device: (first, last) module index, inclusive."""
        spans: Dict[int, Tuple[int, int]] = {}
        for j, dev in enumerate(self.hosts()):
            if dev in spans:
                spans[dev] = (spans[dev][0], j)
            else:
                spans[dev] = (j, j)
        return spans


def validate_assignment_plan(plan: AssignmentPlan, cost_model: CostModel) -> None:
    """Re-derive every plan invariant; raises on the first violation."""
    host = plan.hosts()
    _check_memory(host, cost_model)
    spans = plan.ranges()
    if sorted(spans) != sorted(plan.device_order):
        raise ValueError(
            f"device_order {plan.device_order} does not match hosting devices "
            f"{sorted(spans)}"
        )
    cursor = 0
    for dev in plan.device_order:
        first, last = spans[dev]
        if first != cursor:
            raise ValueError(
                f"device {dev} starts at module {first}, expected {cursor}; "
                "ranges must be contiguous and follow device_order"
            )
        for j in range(first, last + 1):
            if host[j] != dev:
                raise ValueError(f"module {j} interrupts device {dev}'s range")
        cursor = last + 1
    if cursor != plan.num_modules:
        raise ValueError("ranges do not cover every module")
    cost = evaluate_cost(plan.x, cost_model)
    if cost.objective != plan.objective:
        raise ValueError(
            f"stored objective {plan.objective!r} != recomputed {cost.objective!r}"
        )


def _matrix_for(order: Sequence[int], ends: Sequence[int], m: int, n: int) -> List[List[int]]:
    x = [[0] * n for _ in range(m)]
    start = 0
    for dev, end in zip(order, ends):
        for j in range(start, end):
            x[dev][j] = 1
        start = end
    return x


def _plan_from(order, ends, cm) -> AssignmentPlan:
    m, n = cm.num_devices, cm.num_modules
    x = _matrix_for(order, ends, m, n)
    cost = evaluate_cost(x, cm)
    ring = [
        dev for dev, end, start in zip(order, ends, [0] + list(ends[:-1]))
        if end > start
    ]
    return AssignmentPlan(
        x=x,
        device_order=ring,
        objective=cost.objective,
        t_compute=cost.t_compute,
        t_data=cost.t_data,
    )


def _feasibility_diagnostics(cm: CostModel) -> None:
    total_mem = sum(cm.mem_mod)
    total_budget = sum(cm.budget(i) for i in range(cm.num_devices))
    if total_mem > total_budget:
        raise InfeasibleError(
            f"total module memory {total_mem} exceeds fleet budget "
            f"{total_budget:.0f}; deficit {total_mem - total_budget:.0f} bytes"
        )
    biggest = max(range(cm.num_modules), key=lambda j: cm.mem_mod[j])
    best = max(cm.budget(i) for i in range(cm.num_devices))
    if cm.mem_mod[biggest] > best:
        raise InfeasibleError(
            f"sub-module {biggest} needs {cm.mem_mod[biggest]} bytes but the "
            f"largest device budget is {best:.0f}"
        )


def solve_assignment(cost_model: CostModel, fleet: Optional[FleetProfile] = None) -> AssignmentPlan:
    """Exact minimum-cost contiguous assignment.

    Enumerates device orderings lexicographically and, per ordering, walks
    split points depth-first (a device may receive an empty range). Branches
    whose prefix compute plus a per-module lower bound already exceed the
    incumbent are cut; ties keep the lexicographically smallest
    (device_order, split vector).
    """
    cm = cost_model
    m, n = cm.num_devices, cm.num_modules
    if n == 0:
        raise ValueError("no sub-modules to assign")
    _feasibility_diagnostics(cm)

    mem_prefix = [0] * (n + 1)
    for j in range(n):
        mem_prefix[j + 1] = mem_prefix[j] + cm.mem_mod[j]
    # floor of remaining compute: every unassigned module on its best device
    min_exec_suffix = [0.0] * (n + 1)
    for j in range(n - 1, -1, -1):
        best = min(cm.exec_time[i][j] for i in range(m))
        min_exec_suffix[j] = min_exec_suffix[j + 1] + best
    exec_prefix = [[0.0] * (n + 1) for _ in range(m)]
    for i in range(m):
        row = cm.exec_time[i]
        for j in range(n):
            exec_prefix[i][j + 1] = exec_prefix[i][j] + row[j]

    best_plan: Optional[AssignmentPlan] = None
    best_obj = float("inf")

    for order in itertools.permutations(range(m)):
        budgets = [cm.budget(d) for d in order]
        # suffix capacity: bytes the remaining devices can still absorb
        cap_suffix = [0.0] * (m + 1)
        for p in range(m - 1, -1, -1):
            cap_suffix[p] = cap_suffix[p + 1] + budgets[p]
        ends: List[int] = []

        def walk(pos: int, start: int, prefix_exec: float):
            nonlocal best_plan, best_obj
            if pos == m:
                if start != n:
                    return
                plan = _plan_from(order, ends, cm)
                if plan.objective < best_obj:
                    best_obj = plan.objective
                    best_plan = plan
                return
            if mem_prefix[n] - mem_prefix[start] > cap_suffix[pos]:
                return
            bound = (prefix_exec + min_exec_suffix[start]) * _BOUND_SLACK
            if bound > best_obj:
                return
            dev = order[pos]
            budget = budgets[pos]
            row = exec_prefix[dev]
            for end in range(start, n + 1):
                if mem_prefix[end] - mem_prefix[start] > budget:
                    break
                ends.append(end)
                walk(pos + 1, end, prefix_exec + row[end] - row[start])
                ends.pop()

        walk(0, 0, 0.0)

    if best_plan is None:
        raise InfeasibleError(
            "no contiguous assignment fits the per-device memory budgets "
            "(aggregate capacity is sufficient but no split order works)"
        )
    return best_plan


def baseline_assignment(cost_model: CostModel, fleet: Optional[FleetProfile] = None) -> AssignmentPlan:
    """Even contiguous split: devices in id order, remainder to the earliest."""
    cm = cost_model
    m, n = cm.num_devices, cm.num_modules
    if n < m:
        raise ValueError(
            f"baseline needs at least one module per device (n={n} < m={m})"
        )
    q, r = divmod(n, m)
    ends = []
    cursor = 0
    for i in range(m):
        cursor += q + (1 if i < r else 0)
        ends.append(cursor)
    return _plan_from(list(range(m)), ends, cm)


def brute_force_assignment(
    cost_model: CostModel,
    fleet: Optional[FleetProfile] = None,
    allow_noncontiguous: bool = False,
) -> AssignmentPlan:
    """Exhaustive search oracle, guarded to stay desk-sized.

    Contiguous mode enumerates exactly the solver's space. With
    `allow_noncontiguous`, every column-sum-one matrix is tried (n <= 6),
    which quantifies the gap contiguity leaves on the table; such plans
    skip the contiguity invariant by construction.
    """
    cm = cost_model
    m, n = cm.num_devices, cm.num_modules
    if m > BRUTE_MAX_DEVICES:
        raise ValueError(
            f"brute force refuses m={m} devices (limit {BRUTE_MAX_DEVICES})"
        )
    limit = BRUTE_MAX_MODULES_FREE if allow_noncontiguous else BRUTE_MAX_MODULES
    if n > limit:
        raise ValueError(f"brute force refuses n={n} modules (limit {limit})")
    _feasibility_diagnostics(cm)

    best: Optional[AssignmentPlan] = None
    if allow_noncontiguous:
        for host in itertools.product(range(m), repeat=n):
            x = [[0] * n for _ in range(m)]
            for j, dev in enumerate(host):
                x[dev][j] = 1
            try:
                cost = evaluate_cost(x, cm)
            except InfeasibleError:
                continue
            if best is None or cost.objective < best.objective:
                seen: List[int] = []
                for dev in host:
                    if dev not in seen:
                        seen.append(dev)
                best = AssignmentPlan(
                    x=x,
                    device_order=seen,
                    objective=cost.objective,
                    t_compute=cost.t_compute,
                    t_data=cost.t_data,
                )
    else:
        for order in itertools.permutations(range(m)):
            for cuts in itertools.combinations_with_replacement(range(n + 1), m - 1):
                ends = list(cuts) + [n]
                x = _matrix_for(order, ends, m, n)
                try:
                    cost = evaluate_cost(x, cm)
                except InfeasibleError:
                    continue
                if best is None or cost.objective < best.objective:
                    best = _plan_from(order, ends, cm)
    if best is None:
        raise InfeasibleError(
            "brute force found no assignment satisfying the memory budgets"
        )
    return best


# --- text format ----------------------------------------------------------

def save_plan(plan: AssignmentPlan, path: str) -> None:
    lines = [
        f"plan v1 {plan.num_devices} {plan.num_modules} {plan.objective:.17g}"
    ]
    lines.append("order " + " ".join(str(d) for d in plan.device_order))
    spans = plan.ranges()
    for dev in plan.device_order:
        first, last = spans[dev]
        lines.append(f"assign {dev} {first} {last}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_plan(path: str) -> AssignmentPlan:
    with open(path) as fh:
        raw = fh.read().splitlines()
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty plan file")
    lineno, header = lines[0]
    parts = header.split()
    if len(parts) != 5 or parts[0] != "plan" or parts[1] != "v1":
        raise ValueError(f"{path}:{lineno}: expected 'plan v1 <m> <n> <objective>'")
    m, n = int(parts[2]), int(parts[3])
    objective = float(parts[4])
    order: List[int] = []
    spans: Dict[int, Tuple[int, int]] = {}
    for lineno, ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "order":
            order = [int(p) for p in parts[1:]]
        elif parts[0] == "assign":
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: assign line needs 3 fields")
            dev, first, last = int(parts[1]), int(parts[2]), int(parts[3])
            if dev in spans:
                raise ValueError(f"{path}:{lineno}: duplicate assign for device {dev}")
            spans[dev] = (first, last)
        else:
            raise ValueError(f"{path}:{lineno}: unknown record '{parts[0]}'")
    x = [[0] * n for _ in range(m)]
    covered = 0
    for dev, (first, last) in spans.items():
        if not (0 <= dev < m and 0 <= first <= last < n):
            raise ValueError(f"{path}: assign {dev} {first} {last} out of range")
        for j in range(first, last + 1):
            if x[dev][j]:
                raise ValueError(f"{path}: module {j} assigned twice")
            x[dev][j] = 1
            covered += 1
    if covered != n:
        raise ValueError(f"{path}: plan covers {covered} of {n} modules")
    if sorted(order) != sorted(spans):
        raise ValueError(f"{path}: order line does not match assign lines")
    plan = AssignmentPlan(x=x, device_order=order, objective=objective)
    spans_check = plan.ranges()
    cursor = 0
    for dev in order:
        first, last = spans_check[dev]
        if first != cursor:
            raise ValueError(f"{path}: ranges are not contiguous in ring order")
        cursor = last + 1
    return plan
