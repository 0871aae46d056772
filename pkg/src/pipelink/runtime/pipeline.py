"""Pipeline orchestration over loopback sockets.

Builds one socket worker per ring device, wires the ring, residual mesh,
and control links, then drives tokens from leader-side lanes: each lane
owns one in-flight sample and pumps its tokens sequentially, so the number
of lanes is the number of samples overlapping in the ring.

An optional balancer thread watches per-device busy windows, and when a
device dominates the fleet it broadcasts a boundary shift that takes
effect at a sample id no lane has started yet; older samples drain under
the placement they started with.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from ..assign import DEFAULT_BETA, AssignmentPlan, CostModel
from ..balance import (
    DEFAULT_THETA,
    DEFAULT_WINDOW_TOKENS,
    DeviceSnapshot,
    OverlapAllocation,
    TransitionSchedule,
    plan_rebalance,
    schedule_transition,
    should_rebalance,
    solve_overlap,
)
from ..fleet import FleetProfile
from ..graph import SubModuleProfile
from ..timing import now
from .digest import sample_seed, token_input
from .engine import (
    DEFAULT_RELOAD_BYTES_PER_SEC,
    DeviceEngine,
    EngineConfig,
    build_engines,
)
from .framing import rebalance_message
from .reference import RunDigests
from .routing import MODE_DIRECT, MODES, ModuleTable
from .worker import SocketWorker
from .workload import Workload


@dataclass
class BalancerConfig:
    theta: float = DEFAULT_THETA
    window_tokens: int = DEFAULT_WINDOW_TOKENS
    enable_after_samples: int = 2
    poll_interval: float = 0.02
    max_rebalances: int = 4


@dataclass
class RuntimeConfig:
    time_scale: float = 1.0
    num_threads: int = 1
    residual_mode: str = MODE_DIRECT
    base_port: Optional[int] = None
    beta: float = DEFAULT_BETA
    reload_bytes_per_sec: float = DEFAULT_RELOAD_BYTES_PER_SEC
    residual_wait_timeout: float = 30.0
    token_timeout: float = 120.0
    connect_timeout: float = 10.0
    balancer: Optional[BalancerConfig] = None


@dataclass
class TokenRecord:
    sample: int
    token: int
    lane: int
    start: float
    end: float
    digest: int

    @property
    def wall_latency(self) -> float:
        return self.end - self.start


@dataclass
class RebalanceEvent:
    wall_time: float
    trigger_kind: str
    trigger_device: int
    applied: bool
    reason: str
    moved: List[Tuple[int, int, int]] = field(default_factory=list)
    switch_sample: Optional[int] = None
    est_release_sec: float = 0.0
    est_reload_sec: float = 0.0
    current_objective: Optional[float] = None
    predicted_objective: Optional[float] = None
    token_seq: int = 0


@dataclass
class HopRecord:
    """One frame's measured trip across a shaped link."""

    src: int
    dst: int
    kind: int
    sample: int
    token: int
    sim_bytes: int
    t_send: float
    t_deliver: float

    @property
    def wall_seconds(self) -> float:
        return self.t_deliver - self.t_send


@dataclass
class RunReport:
    device_order: List[int]
    residual_mode: str
    num_threads: int
    time_scale: float
    wall_start: float
    wall_end: float
    tokens: List[TokenRecord]
    rebalances: List[RebalanceEvent]
    logits: Dict[Tuple[int, int], int]
    sample_digests: Dict[int, int]
    run_digest: int
    device_busy_sim: Dict[int, float]
    device_reload_sim: Dict[int, float]
    token_busy: Dict[int, Dict[Tuple[int, int], float]] = field(default_factory=dict)
    hop_log: List[HopRecord] = field(default_factory=list)
    residual_arrivals: Dict[Tuple[int, int, int, int], float] = field(
        default_factory=dict
    )

    @property
    def total_tokens(self) -> int:
        return len(self.tokens)

    @property
    def wall_seconds(self) -> float:
        return self.wall_end - self.wall_start

    @property
    def sim_seconds(self) -> float:
        if self.time_scale > 0:
            return self.wall_seconds / self.time_scale
        return self.wall_seconds

    @property
    def throughput_tokens_per_sim_sec(self) -> float:
        sim = self.sim_seconds
        return self.total_tokens / sim if sim > 0 else float("inf")

    def latencies_sim(
        self,
        sample_min: Optional[int] = None,
        sample_max: Optional[int] = None,
    ) -> List[float]:
        scale = self.time_scale if self.time_scale > 0 else 1.0
        out = []
        for r in self.tokens:
            if sample_min is not None and r.sample < sample_min:
                continue
            if sample_max is not None and r.sample > sample_max:
                continue
            out.append(r.wall_latency / scale)
        return out

    def mean_latency_sim(
        self,
        sample_min: Optional[int] = None,
        sample_max: Optional[int] = None,
    ) -> float:
        vals = self.latencies_sim(sample_min, sample_max)
        if not vals:
            raise ValueError("no tokens in the requested sample range")
        return sum(vals) / len(vals)

    def token_starts(self) -> Dict[Tuple[int, int], float]:
        return {(r.sample, r.token): r.start for r in self.tokens}

    def residual_arrival_offsets(self) -> Dict[Tuple[int, int, int, int], float]:
        """Sim seconds from a token's dispatch until each cross-device
        residual became available on its consumer device. Keyed by
        (sample, token, producer module, consumer module); comparable
        across runs of the same workload."""
        starts = self.token_starts()
        scale = self.time_scale if self.time_scale > 0 else 1.0
        out: Dict[Tuple[int, int, int, int], float] = {}
        for (s, t, p, c), wall in self.residual_arrivals.items():
            start = starts.get((s, t))
            if start is not None:
                out[(s, t, p, c)] = (wall - start) / scale
        return out

    def hop_table(self) -> Dict[Tuple[int, int], Dict[str, float]]:
        """Measured per-link aggregates: frame count, bytes, mean sim time."""
        scale = self.time_scale if self.time_scale > 0 else 1.0
        table: Dict[Tuple[int, int], Dict[str, float]] = {}
        for hop in self.hop_log:
            cell = table.setdefault(
                (hop.src, hop.dst),
                {"frames": 0.0, "sim_bytes": 0.0, "mean_sim_sec": 0.0},
            )
            cell["frames"] += 1
            cell["sim_bytes"] += hop.sim_bytes
            cell["mean_sim_sec"] += hop.wall_seconds / scale
        for cell in table.values():
            if cell["frames"]:
                cell["mean_sim_sec"] /= cell["frames"]
        return table

    def to_dict(self) -> dict:
        return {
            "device_order": self.device_order,
            "residual_mode": self.residual_mode,
            "num_threads": self.num_threads,
            "time_scale": self.time_scale,
            "wall_start": self.wall_start,
            "wall_end": self.wall_end,
            "tokens": [
                {
                    "sample": r.sample,
                    "token": r.token,
                    "lane": r.lane,
                    "start": r.start,
                    "end": r.end,
                    "digest": r.digest,
                }
                for r in self.tokens
            ],
            "rebalances": [
                {
                    "wall_time": e.wall_time,
                    "trigger_kind": e.trigger_kind,
                    "trigger_device": e.trigger_device,
                    "applied": e.applied,
                    "reason": e.reason,
                    "moved": [list(m) for m in e.moved],
                    "switch_sample": e.switch_sample,
                    "est_release_sec": e.est_release_sec,
                    "est_reload_sec": e.est_reload_sec,
                    "current_objective": e.current_objective,
                    "predicted_objective": e.predicted_objective,
                    "token_seq": e.token_seq,
                }
                for e in self.rebalances
            ],
            "logits": {f"{s}:{t}": d for (s, t), d in self.logits.items()},
            "sample_digests": {str(s): d for s, d in self.sample_digests.items()},
            "run_digest": self.run_digest,
            "device_busy_sim": {str(d): v for d, v in self.device_busy_sim.items()},
            "device_reload_sim": {str(d): v for d, v in self.device_reload_sim.items()},
            "token_busy": {
                str(dev): {f"{s}:{t}": v for (s, t), v in per.items()}
                for dev, per in self.token_busy.items()
            },
            "hop_log": [
                {
                    "src": h.src,
                    "dst": h.dst,
                    "kind": h.kind,
                    "sample": h.sample,
                    "token": h.token,
                    "sim_bytes": h.sim_bytes,
                    "t_send": h.t_send,
                    "t_deliver": h.t_deliver,
                }
                for h in self.hop_log
            ],
            "residual_arrivals": {
                f"{s}:{t}:{p}:{c}": wall
                for (s, t, p, c), wall in self.residual_arrivals.items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        tokens = [TokenRecord(**r) for r in data["tokens"]]
        rebalances = [
            RebalanceEvent(
                wall_time=e["wall_time"],
                trigger_kind=e["trigger_kind"],
                trigger_device=e["trigger_device"],
                applied=e["applied"],
                reason=e["reason"],
                moved=[tuple(m) for m in e["moved"]],
                switch_sample=e["switch_sample"],
                est_release_sec=e["est_release_sec"],
                est_reload_sec=e["est_reload_sec"],
                current_objective=e["current_objective"],
                predicted_objective=e["predicted_objective"],
                token_seq=e.get("token_seq", 0),
            )
            for e in data["rebalances"]
        ]
        logits = {
            (int(k.split(":")[0]), int(k.split(":")[1])): v
            for k, v in data["logits"].items()
        }
        return cls(
            device_order=list(data["device_order"]),
            residual_mode=data["residual_mode"],
            num_threads=data["num_threads"],
            time_scale=data["time_scale"],
            wall_start=data["wall_start"],
            wall_end=data["wall_end"],
            tokens=tokens,
            rebalances=rebalances,
            logits=logits,
            sample_digests={int(k): v for k, v in data["sample_digests"].items()},
            run_digest=data["run_digest"],
            device_busy_sim={int(k): v for k, v in data["device_busy_sim"].items()},
            device_reload_sim={
                int(k): v for k, v in data["device_reload_sim"].items()
            },
            token_busy={
                int(dev): {
                    (int(k.split(":")[0]), int(k.split(":")[1])): v
                    for k, v in per.items()
                }
                for dev, per in data.get("token_busy", {}).items()
            },
            hop_log=[HopRecord(**h) for h in data.get("hop_log", [])],
            residual_arrivals={
                tuple(int(part) for part in k.split(":")): wall
                for k, wall in data.get("residual_arrivals", {}).items()
            },
        )


class _RunState:
    """Shared lane bookkeeping: sample allocation gate, waiters, results."""

    def __init__(self):
        self.cond = threading.Condition()
        self.gate_open = True
        self.next_sample = 0
        self.samples_done = 0
        self.waiters: Dict[Tuple[int, int], threading.Event] = {}
        self.results: Dict[Tuple[int, int], int] = {}
        self.records: List[TokenRecord] = []
        self.errors: List[BaseException] = []
        self.error_event = threading.Event()

    def resolve(self, sample: int, token: int, digest: int) -> None:
        with self.cond:
            self.results[(sample, token)] = digest
            ev = self.waiters.pop((sample, token), None)
        if ev is not None:
            ev.set()

    def fail(self, exc: BaseException) -> None:
        with self.cond:
            self.errors.append(exc)
            self.error_event.set()
            waiting = list(self.waiters.values())
            self.waiters.clear()
            self.cond.notify_all()
        for ev in waiting:
            ev.set()


def _lane_loop(
    lane_id: int,
    state: _RunState,
    leader: SocketWorker,
    workload: Workload,
    config: RuntimeConfig,
) -> None:
    while True:
        with state.cond:
            while not state.gate_open and not state.error_event.is_set():
                state.cond.wait(0.1)
            if state.error_event.is_set():
                return
            if state.next_sample >= workload.num_samples:
                return
            sample = state.next_sample
            state.next_sample += 1
        seed_digest = sample_seed(workload.seed, sample, workload.ctx_len)
        prev = workload.ctx_len
        for t in range(workload.tokens_per_sample):
            x = token_input(seed_digest, t, prev)
            ev = threading.Event()
            with state.cond:
                if state.error_event.is_set():
                    return
                state.waiters[(sample, t)] = ev
            t0 = now()
            try:
                leader.submit_token(sample, t, x)
            except Exception as exc:
                state.fail(exc)
                return
            if not ev.wait(config.token_timeout):
                state.fail(
                    TimeoutError(
                        f"token {sample}/{t} did not complete within "
                        f"{config.token_timeout}s"
                    )
                )
                return
            if state.error_event.is_set():
                return
            t1 = now()
            digest = state.results[(sample, t)]
            with state.cond:
                state.records.append(
                    TokenRecord(
                        sample=sample, token=t, lane=lane_id,
                        start=t0, end=t1, digest=digest,
                    )
                )
            prev = digest
        with state.cond:
            state.samples_done += 1


def apply_transition(
    schedule: TransitionSchedule,
    leader: SocketWorker,
    engines: Dict[int, DeviceEngine],
    new_allocation: OverlapAllocation,
    epoch_index: int,
    timeout: float = 10.0,
) -> None:
    """Broadcast a placement switch and wait until every device holds it.

    Sockets stay up throughout; devices charge their release and reload
    times when they first execute under the new epoch. Epoch tables live in
    this process, so application is confirmed by watching their lengths.
    """
    if schedule.is_noop:
        return
    msg = rebalance_message(
        epoch_index,
        schedule.switch_sample,
        schedule.order,
        new_allocation.active,
        new_allocation.hosted,
    )
    for dst in schedule.order:
        leader.send_control(dst, msg)
    deadline = now() + timeout
    while any(len(engines[d].epochs) < epoch_index + 1 for d in schedule.order):
        if now() > deadline:
            raise TimeoutError("rebalance broadcast was not applied by every device")
        time.sleep(0.002)


def _balancer_loop(
    state: _RunState,
    engines: Dict[int, DeviceEngine],
    leader: SocketWorker,
    order: Sequence[int],
    alloc_holder: list,
    cost_model: CostModel,
    fleet: FleetProfile,
    config: RuntimeConfig,
    events: List[RebalanceEvent],
    stop: threading.Event,
    t_zero: float,
) -> None:
    bc = config.balancer
    threshold = {dev: bc.window_tokens for dev in order}
    epoch_count = 1
    applied = 0
    while not stop.wait(bc.poll_interval):
        with state.cond:
            done = state.samples_done
        if done < bc.enable_after_samples:
            continue
        active_devs = [d for d in order if engines[d].active_flops() > 0]
        if any(engines[d].tokens_done < threshold[d] for d in active_devs):
            continue
        snapshots = [
            DeviceSnapshot(
                device_id=d,
                busy_sec_per_token=engines[d].recent_busy(),
                mem_total=fleet.devices[d].mem_total_bytes,
                mem_avail=fleet.devices[d].mem_avail_bytes
                - engines[d].resident_bytes(),
                active_flops=engines[d].active_flops(),
            )
            for d in active_devs
        ]
        trigger = should_rebalance(snapshots, bc.theta, config.beta)
        if trigger is None:
            continue
        decision = plan_rebalance(
            alloc_holder[0], cost_model, snapshots, config.reload_bytes_per_sec
        )
        with state.cond:
            token_seq = len(state.records)
        if decision.should_move and applied < bc.max_rebalances:
            with state.cond:
                state.gate_open = False
                schedule = schedule_transition(decision, state.next_sample, order)
            try:
                apply_transition(
                    schedule, leader, engines, decision.new_allocation, epoch_count
                )
            except Exception as exc:
                state.fail(exc)
                return
            finally:
                with state.cond:
                    state.gate_open = True
                    state.cond.notify_all()
            alloc_holder[0] = decision.new_allocation
            epoch_count += 1
            applied += 1
            events.append(
                RebalanceEvent(
                    wall_time=now() - t_zero,
                    trigger_kind=trigger.kind,
                    trigger_device=trigger.device_id,
                    applied=True,
                    reason=f"{trigger.detail}; {decision.reason}",
                    moved=decision.moved,
                    switch_sample=schedule.switch_sample,
                    est_release_sec=decision.est_release_sec,
                    est_reload_sec=decision.est_reload_sec,
                    current_objective=decision.current_cost.objective,
                    predicted_objective=decision.predicted_cost.objective,
                    token_seq=token_seq,
                )
            )
        else:
            events.append(
                RebalanceEvent(
                    wall_time=now() - t_zero,
                    trigger_kind=trigger.kind,
                    trigger_device=trigger.device_id,
                    applied=False,
                    reason=f"{trigger.detail}; {decision.reason}",
                    moved=[],
                    switch_sample=None,
                    est_release_sec=decision.est_release_sec,
                    est_reload_sec=decision.est_reload_sec,
                    current_objective=(
                        decision.current_cost.objective
                        if decision.current_cost
                        else None
                    ),
                    predicted_objective=(
                        decision.predicted_cost.objective
                        if decision.predicted_cost
                        else None
                    ),
                    token_seq=token_seq,
                )
            )
        for d in order:
            threshold[d] = engines[d].tokens_done + bc.window_tokens


def run_pipeline(
    plan: AssignmentPlan,
    profiles: Sequence[SubModuleProfile],
    fleet: FleetProfile,
    workload: Workload,
    config: RuntimeConfig,
    return_bytes: int = 0,
) -> RunReport:
    """Execute the workload on the planned ring and report what happened."""
    workload.validate()
    fleet.validate()
    if config.num_threads < 1:
        raise ValueError("num_threads must be at least 1")
    if config.residual_mode not in MODES:
        raise ValueError(f"unknown residual mode {config.residual_mode!r}")

    cost_model = CostModel.from_profiles(
        profiles, fleet, beta=config.beta, return_bytes=return_bytes
    )
    table = ModuleTable.from_profiles(profiles, return_bytes=return_bytes)
    alloc = solve_overlap(plan, cost_model)
    order = list(plan.device_order)
    leader_id = order[0]

    window = config.balancer.window_tokens if config.balancer else DEFAULT_WINDOW_TOKENS
    engine_config = EngineConfig(
        time_scale=config.time_scale,
        residual_mode=config.residual_mode,
        ctx_growth_per_token=workload.ctx_growth_per_token,
        reload_bytes_per_sec=config.reload_bytes_per_sec,
        residual_wait_timeout=config.residual_wait_timeout,
        busy_window_tokens=window,
    )
    engines, _ = build_engines(
        device_order=order,
        active=alloc.active,
        hosted=alloc.hosted,
        table=table,
        flops_per_sec={d: fleet.devices[d].flops_per_sec for d in order},
        config=engine_config,
        latency=fleet.latency,
    )

    state = _RunState()
    workers: Dict[int, SocketWorker] = {}
    for dev in order:
        workers[dev] = SocketWorker(
            device_id=dev,
            engine=engines[dev],
            device_order=order,
            bandwidth=fleet.bandwidth,
            latency=fleet.latency,
            time_scale=config.time_scale,
            on_logits=state.resolve if dev == leader_id else None,
            on_error=state.fail,
            connect_timeout=config.connect_timeout,
        )

    base_port = _bind_workers(workers, config.base_port)

    stop_balancer = threading.Event()
    balancer_thread: Optional[threading.Thread] = None
    events: List[RebalanceEvent] = []
    alloc_holder = [alloc]
    lanes: List[threading.Thread] = []
    try:
        for w in workers.values():
            w.start()
        for w in workers.values():
            w.connect_ring(base_port)
        if config.residual_mode == MODE_DIRECT and len(order) > 1:
            for w in workers.values():
                w.connect_residual_mesh(base_port)
        if config.balancer is not None and len(order) > 1:
            workers[leader_id].connect_control(base_port)

        t_zero = now()
        if config.balancer is not None and len(order) > 1:
            balancer_thread = threading.Thread(
                target=_balancer_loop,
                args=(
                    state, engines, workers[leader_id], order, alloc_holder,
                    cost_model, fleet, config, events, stop_balancer, t_zero,
                ),
                name="balancer",
                daemon=True,
            )
            balancer_thread.start()

        lane_count = min(config.num_threads, workload.num_samples)
        for lane_id in range(lane_count):
            t = threading.Thread(
                target=_lane_loop,
                args=(lane_id, state, workers[leader_id], workload, config),
                name=f"lane-{lane_id}",
                daemon=True,
            )
            t.start()
            lanes.append(t)
        for t in lanes:
            t.join()
    finally:
        stop_balancer.set()
        if balancer_thread is not None:
            balancer_thread.join(timeout=10)
        for w in workers.values():
            w.stop()

    if state.errors:
        raise RuntimeError(f"pipeline run failed: {state.errors[0]}") from state.errors[0]

    expected = workload.total_tokens
    if len(state.records) != expected:
        raise RuntimeError(
            f"run produced {len(state.records)} token records, expected {expected}"
        )

    digests = RunDigests(logits=dict(state.results))
    digests.finalize(workload)
    records = sorted(state.records, key=lambda r: (r.sample, r.token))
    arrivals: Dict[Tuple[int, int, int, int], float] = {}
    for d in order:
        arrivals.update(engines[d].residual_arrivals)
    return RunReport(
        device_order=order,
        residual_mode=config.residual_mode,
        num_threads=config.num_threads,
        time_scale=config.time_scale,
        wall_start=min(r.start for r in records),
        wall_end=max(r.end for r in records),
        tokens=records,
        rebalances=events,
        logits=digests.logits,
        sample_digests=digests.sample_digests,
        run_digest=digests.run_digest,
        device_busy_sim={d: engines[d].busy_total_sim for d in order},
        device_reload_sim={d: engines[d].reload_total_sim for d in order},
        token_busy={d: dict(engines[d].token_busy) for d in order},
        hop_log=_collect_hops(workers),
        residual_arrivals=arrivals,
    )


def _collect_hops(workers: Dict[int, SocketWorker]) -> List[HopRecord]:
    """Join sender and receiver shaping logs on frame identity."""
    sends: Dict[Tuple[int, int, tuple], Tuple[float, int]] = {}
    for w in workers.values():
        for dst, key, t0, nbytes in w.sent_frames():
            sends[(w.device_id, dst, key)] = (t0, nbytes)
    hops: List[HopRecord] = []
    for w in workers.values():
        for src, key, t1, nbytes in w.delivered_frames():
            sent = sends.get((src, w.device_id, key))
            if sent is None:
                continue
            hops.append(
                HopRecord(
                    src=src,
                    dst=w.device_id,
                    kind=key[0],
                    sample=key[1],
                    token=key[2],
                    sim_bytes=nbytes,
                    t_send=sent[0],
                    t_deliver=t1,
                )
            )
    hops.sort(key=lambda h: h.t_send)
    return hops


def _bind_workers(workers: Dict[int, SocketWorker], base_port: Optional[int]) -> int:
    """Bind every worker's listeners, probing for a free port block if needed."""
    if base_port is not None:
        bound = []
        try:
            for w in workers.values():
                w.bind(base_port)
                bound.append(w)
        except OSError:
            for w in bound:
                w.unbind()
            raise
        return base_port
    rng = random.Random()
    last_error: Optional[OSError] = None
    for _ in range(32):
        candidate = rng.randrange(20000, 44000)
        bound = []
        try:
            for w in workers.values():
                w.bind(candidate)
                bound.append(w)
            return candidate
        except OSError as exc:
            last_error = exc
            for w in bound:
                w.unbind()
    raise RuntimeError(f"could not find a free port block: {last_error}")
