"""Per-device execution engine, independent of any transport.

A DeviceEngine runs the modules its device owns for one token at a time:
it validates the incoming sequential digest, resolves residual inputs
(locally, from direct-mode deliveries, or from piggybacked annotations),
simulates compute by sleeping scaled durations under a single-accelerator
lock, and emits the outbound frame plus any residual sends.

Ownership can change at sample boundaries: an epoch table maps each sample
to the active and hosted spans in force for it, and the first task a device
runs under a new epoch pays that epoch's weight release and reload charges.

LocalRing drives the same engines sequentially with no sockets or timing,
which is how digest correctness is exercised at scale.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from ..balance import DEFAULT_RELOAD_BYTES_PER_SEC, RELEASE_SEC_PER_MODULE
from ..timing import now, precise_sleep
from .digest import module_out, sample_seed, token_input
from .framing import TOKEN_SOURCE, ResEntry
from .reference import RunDigests
from .routing import (
    MODE_DIRECT,
    MODE_PIGGYBACK,
    MODES,
    ModuleTable,
    Span,
    consumers_by_producer,
    owner_map,
    producers_by_consumer,
)
from .workload import Workload


class EngineError(RuntimeError):
    pass


class ResidualTimeout(EngineError):
    pass


@dataclass
class EngineConfig:
    time_scale: float = 1.0
    residual_mode: str = MODE_DIRECT
    ctx_growth_per_token: float = 0.0
    reload_bytes_per_sec: float = DEFAULT_RELOAD_BYTES_PER_SEC
    residual_wait_timeout: float = 30.0
    busy_window_tokens: int = 10

    def validate(self) -> None:
        if self.residual_mode not in MODES:
            raise ValueError(
                f"residual_mode must be one of {MODES}, got {self.residual_mode!r}"
            )
        if self.time_scale < 0:
            raise ValueError("time_scale cannot be negative")
        if self.reload_bytes_per_sec <= 0:
            raise ValueError("reload_bytes_per_sec must be positive")


@dataclass(frozen=True)
class Epoch:
    index: int
    start_sample: int
    active: Dict[int, Span]
    hosted: Dict[int, Span]
    owner: Tuple[int, ...]


class EpochTable:
    """Sample-indexed placement history shared by one device's threads."""

    def __init__(self, device_order: Sequence[int], num_modules: int):
        self.device_order = list(device_order)
        self.num_modules = num_modules
        self._epochs: List[Epoch] = []
        self._lock = threading.Lock()

    def append(
        self,
        start_sample: int,
        active: Dict[int, Span],
        hosted: Dict[int, Span],
    ) -> Epoch:
        owner = tuple(owner_map(self.device_order, active, self.num_modules))
        for dev in self.device_order:
            a, h = active.get(dev), hosted.get(dev)
            if a is not None:
                if h is None or not (h[0] <= a[0] and a[1] <= h[1]):
                    raise EngineError(
                        f"device {dev} hosted span {h} does not contain "
                        f"active span {a}"
                    )
        with self._lock:
            index = len(self._epochs)
            if self._epochs:
                if start_sample <= self._epochs[-1].start_sample:
                    raise EngineError(
                        f"epoch start sample {start_sample} does not advance "
                        f"past {self._epochs[-1].start_sample}"
                    )
            elif start_sample != 0:
                raise EngineError("first epoch must start at sample 0")
            epoch = Epoch(
                index=index,
                start_sample=start_sample,
                active=dict(active),
                hosted=dict(hosted),
                owner=owner,
            )
            self._epochs.append(epoch)
            return epoch

    def for_sample(self, sample: int) -> Epoch:
        with self._lock:
            chosen = None
            for epoch in self._epochs:
                if epoch.start_sample <= sample:
                    chosen = epoch
                else:
                    break
            if chosen is None:
                raise EngineError(f"no epoch covers sample {sample}")
            return chosen

    def latest(self) -> Epoch:
        with self._lock:
            if not self._epochs:
                raise EngineError("epoch table is empty")
            return self._epochs[-1]

    def get(self, index: int) -> Epoch:
        with self._lock:
            return self._epochs[index]

    def __len__(self) -> int:
        with self._lock:
            return len(self._epochs)


class PendingResiduals:
    """Thread-safe store of direct-mode residual digests awaiting consumers."""

    def __init__(self):
        self._cond = threading.Condition()
        self._store: Dict[Tuple[int, int, int, int], int] = {}

    def put(self, sample: int, token: int, producer: int, consumer: int, digest: int) -> None:
        key = (sample, token, producer, consumer)
        with self._cond:
            self._store[key] = digest
            self._cond.notify_all()

    def take(
        self, sample: int, token: int, producer: int, consumer: int,
        timeout: float, device_id: int,
    ) -> int:
        key = (sample, token, producer, consumer)
        with self._cond:
            ok = self._cond.wait_for(lambda: key in self._store, timeout=timeout)
            if not ok:
                raise ResidualTimeout(
                    f"device {device_id} waited {timeout}s for residual "
                    f"{producer}->{consumer} of sample {sample} token {token}"
                )
            return self._store.pop(key)

    def __len__(self) -> int:
        with self._cond:
            return len(self._store)


@dataclass
class ActivationIn:
    """Transport-neutral activation frame."""

    sample: int
    token: int
    seq_digest: int
    source_module: int
    sim_bytes: int
    entries: List[ResEntry] = field(default_factory=list)


@dataclass
class ResidualOut:
    dst_device: int
    entries: List[ResEntry]
    sim_bytes: int


@dataclass
class EngineOutput:
    forward: ActivationIn
    residual_sends: List[ResidualOut]


def synthetic_execute(
    module_index: int,
    flops: float,
    device_speed: float,
    seq_digest: int,
    res_digests: Sequence[int] = (),
    time_scale: float = 1.0,
    context_multiplier: float = 1.0,
) -> Tuple[int, float]:
    """Stand-in for one module's forward pass.

    Sleeps the module's simulated duration (flops over device speed, scaled)
    and chains the output digest from the inputs, so a run is timed like the
    modelled hardware and checkable bit-for-bit without tensors. Returns
    (output digest, unscaled busy seconds).
    """
    if device_speed <= 0:
        raise ValueError("device_speed must be positive")
    duration = flops / device_speed * context_multiplier
    if time_scale > 0 and duration > 0:
        precise_sleep(duration * time_scale)
    return module_out(module_index, seq_digest, list(res_digests)), duration


class DeviceEngine:
    """Executes one device's share of each token.

    process_activation is designed to be called by a single consumer thread
    per device; residual deliveries may come from any thread.
    """

    def __init__(
        self,
        device_id: int,
        table: ModuleTable,
        flops_per_sec: float,
        epochs: EpochTable,
        config: EngineConfig,
        latency_row: Optional[Sequence[float]] = None,
    ):
        config.validate()
        if flops_per_sec <= 0:
            raise ValueError("flops_per_sec must be positive")
        self.device_id = device_id
        self.table = table
        self.speed = flops_per_sec
        self.epochs = epochs
        self.config = config
        self.latency_row = list(latency_row) if latency_row else []
        self.pending = PendingResiduals()
        self.producers = producers_by_consumer(table.residual_pairs())
        self.consumers = consumers_by_producer(table.residual_pairs())
        self._compute_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._charged_epochs: Set[int] = {0}
        self.busy_recent: deque = deque(maxlen=config.busy_window_tokens)
        self.busy_total_sim = 0.0
        self.reload_total_sim = 0.0
        self.tokens_done = 0
        self.token_busy: Dict[Tuple[int, int], float] = {}
        self.residual_arrivals: Dict[Tuple[int, int, int, int], float] = {}

    # --- stats ------------------------------------------------------------

    def recent_busy(self) -> List[float]:
        with self._stats_lock:
            return list(self.busy_recent)

    def note_residual_arrival(
        self, sample: int, token: int, producer: int, consumer: int
    ) -> None:
        """Timestamp when a residual input became available on this device."""
        with self._stats_lock:
            self.residual_arrivals[(sample, token, producer, consumer)] = now()

    def resident_bytes(self) -> int:
        span = self.epochs.latest().hosted.get(self.device_id)
        if not span:
            return 0
        return sum(self.table.mem_bytes[j] for j in range(span[0], span[1] + 1))

    def active_flops(self) -> int:
        span = self.epochs.latest().active.get(self.device_id)
        if not span:
            return 0
        return sum(self.table.flops[j] for j in range(span[0], span[1] + 1))

    def _note_busy(self, sample: int, token: int, sim_sec: float) -> None:
        with self._stats_lock:
            self.busy_recent.append(sim_sec)
            self.busy_total_sim += sim_sec
            self.tokens_done += 1
            self.token_busy[(sample, token)] = sim_sec

    # --- epoch transitions --------------------------------------------------

    def _span_set(self, span: Span) -> Set[int]:
        return set(range(span[0], span[1] + 1)) if span else set()

    def _charge_epoch_switch(self, epoch: Epoch) -> None:
        """Pay release and reload for a newly entered epoch, under the lock.

        Booked once, at this device's first task of the epoch. Older samples
        may still flow through afterwards using the previous spans; both
        resident sets coexist until they drain, the charge is just up front.
        """
        if epoch.index in self._charged_epochs:
            return
        self._charged_epochs.add(epoch.index)
        prev = self.epochs.get(epoch.index - 1)
        old = self._span_set(prev.hosted.get(self.device_id))
        new = self._span_set(epoch.hosted.get(self.device_id))
        released = len(old - new)
        reload_bytes = sum(self.table.mem_bytes[j] for j in new - old)
        sim = released * RELEASE_SEC_PER_MODULE
        sim += reload_bytes / self.config.reload_bytes_per_sec
        with self._stats_lock:
            # observations made under the old placement no longer describe
            # this device's load
            self.busy_recent.clear()
            if sim > 0:
                self.reload_total_sim += sim
        if sim > 0:
            precise_sleep(sim * self.config.time_scale)

    # --- the heart ----------------------------------------------------------

    def process_activation(self, act: ActivationIn) -> EngineOutput:
        epoch = self.epochs.for_sample(act.sample)
        span = epoch.active.get(self.device_id)
        if span is None:
            return EngineOutput(forward=act, residual_sends=[])
        lo, hi = span
        n = self.table.num_modules
        mode = self.config.residual_mode

        expected = lo - 1 if lo > 0 else TOKEN_SOURCE
        if act.source_module != expected:
            raise EngineError(
                f"device {self.device_id} expected a frame from module "
                f"{expected} but got {act.source_module} "
                f"(sample {act.sample} token {act.token})"
            )

        mine: Dict[Tuple[int, int], int] = {}
        relay: List[ResEntry] = []
        for e in act.entries:
            if lo <= e.consumer <= hi:
                mine[(e.producer, e.consumer)] = e.digest
                self.note_residual_arrival(act.sample, act.token, e.producer, e.consumer)
            else:
                relay.append(e)

        outs: Dict[int, int] = {}
        busy_sim = 0.0
        scale = self.config.time_scale
        ctx_mult = 1.0 + self.config.ctx_growth_per_token * act.token
        with self._compute_lock:
            self._charge_epoch_switch(epoch)
            seq_in = act.seq_digest
            for j in range(lo, hi + 1):
                res_digests: List[int] = []
                for i in self.producers.get(j, []):
                    if i in outs:
                        res_digests.append(outs[i])
                    elif mode == MODE_PIGGYBACK:
                        try:
                            res_digests.append(mine.pop((i, j)))
                        except KeyError:
                            raise EngineError(
                                f"module {j} on device {self.device_id} is "
                                f"missing the piggybacked residual from "
                                f"module {i} (sample {act.sample} token {act.token})"
                            )
                    else:
                        res_digests.append(
                            self.pending.take(
                                act.sample, act.token, i, j,
                                self.config.residual_wait_timeout,
                                self.device_id,
                            )
                        )
                out, duration = synthetic_execute(
                    module_index=j,
                    flops=self.table.flops[j],
                    device_speed=self.speed,
                    seq_digest=seq_in,
                    res_digests=res_digests,
                    time_scale=scale,
                    context_multiplier=ctx_mult,
                )
                busy_sim += duration
                outs[j] = out
                seq_in = out
        if mine:
            raise EngineError(
                f"device {self.device_id} received annotations with no "
                f"consumer among modules {lo}..{hi}: {sorted(mine)}"
            )
        self._note_busy(act.sample, act.token, busy_sim)

        out_entries = list(relay)
        per_dst: Dict[int, List[ResEntry]] = {}
        for i in range(lo, hi + 1):
            for k in self.consumers.get(i, []):
                if epoch.owner[k] == self.device_id:
                    continue
                entry = ResEntry(
                    producer=i,
                    consumer=k,
                    sim_bytes=self.table.res_bytes[(i, k)],
                    digest=outs[i],
                )
                if mode == MODE_PIGGYBACK:
                    out_entries.append(entry)
                else:
                    per_dst.setdefault(epoch.owner[k], []).append(entry)

        residual_sends = []
        if per_dst:
            def link_key(dst: int) -> Tuple[float, int]:
                lat = self.latency_row[dst] if dst < len(self.latency_row) else 0.0
                return (lat, dst)

            for dst in sorted(per_dst, key=link_key):
                entries = per_dst[dst]
                residual_sends.append(
                    ResidualOut(
                        dst_device=dst,
                        entries=entries,
                        sim_bytes=sum(e.sim_bytes for e in entries),
                    )
                )

        carried = sum(e.sim_bytes for e in out_entries)
        forward = ActivationIn(
            sample=act.sample,
            token=act.token,
            seq_digest=outs[hi],
            source_module=hi,
            sim_bytes=self.table.seq_bytes[hi] + carried,
            entries=out_entries,
        )
        return EngineOutput(forward=forward, residual_sends=residual_sends)


class LocalRing:
    """Drives engines through the ring in-process, with no transport.

    Residual sends are delivered to the destination engine before the
    activation moves on, matching the causal order of the socket runtime.
    """

    def __init__(self, device_order: Sequence[int], engines: Dict[int, DeviceEngine]):
        self.device_order = list(device_order)
        self.engines = engines
        if not self.device_order:
            raise ValueError("ring needs at least one device")

    def run_token(self, sample: int, token: int, entry_digest: int) -> int:
        act = ActivationIn(
            sample=sample,
            token=token,
            seq_digest=entry_digest,
            source_module=TOKEN_SOURCE,
            sim_bytes=0,
        )
        for dev in self.device_order:
            out = self.engines[dev].process_activation(act)
            for send in out.residual_sends:
                dst = self.engines[send.dst_device]
                for e in send.entries:
                    dst.pending.put(sample, token, e.producer, e.consumer, e.digest)
                    dst.note_residual_arrival(sample, token, e.producer, e.consumer)
            act = out.forward
        n = next(iter(self.engines.values())).table.num_modules
        if act.source_module != n - 1:
            raise EngineError(
                f"ring pass ended at module {act.source_module}, "
                f"expected {n - 1}; the active spans do not cover the chain"
            )
        return act.seq_digest

    def run(self, workload: Workload) -> RunDigests:
        workload.validate()
        result = RunDigests()
        for s in range(workload.num_samples):
            seed_digest = sample_seed(workload.seed, s, workload.ctx_len)
            prev = workload.ctx_len
            for t in range(workload.tokens_per_sample):
                x = token_input(seed_digest, t, prev)
                logits = self.run_token(s, t, x)
                result.logits[(s, t)] = logits
                prev = logits
        result.finalize(workload)
        return result


def build_engines(
    device_order: Sequence[int],
    active: Dict[int, Span],
    hosted: Dict[int, Span],
    table: ModuleTable,
    flops_per_sec: Dict[int, float],
    config: EngineConfig,
    latency: Optional[Sequence[Sequence[float]]] = None,
) -> Tuple[Dict[int, DeviceEngine], Dict[int, EpochTable]]:
    """One engine per ring device, all sharing a first epoch at sample 0."""
    engines: Dict[int, DeviceEngine] = {}
    epoch_tables: Dict[int, EpochTable] = {}
    for dev in device_order:
        epochs = EpochTable(device_order, table.num_modules)
        epochs.append(0, active, hosted)
        epoch_tables[dev] = epochs
        engines[dev] = DeviceEngine(
            device_id=dev,
            table=table,
            flops_per_sec=flops_per_sec[dev],
            epochs=epochs,
            config=config,
            latency_row=latency[dev] if latency else None,
        )
    return engines, epoch_tables
