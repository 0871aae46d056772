"""Device fleet profiles and the measurement paths that populate them.

Bandwidth is measured by timing a bulk transfer over a real loopback socket
on the receiver side; compute rate is measured by timing a worker running a
test graph. In simulation the link numbers in the fleet config are enforced
by the runtime's traffic shaper, and the measurement path doubles as the
check that the shaper reproduces them.
"""

from __future__ import annotations

import socket
import statistics
import struct
import threading
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .timing import now

DEFAULT_CHUNK_BYTES = 4 * 1024 * 1024
MIN_CHUNK_BYTES = 64 * 1024
MEASURE_TIMEOUT_SEC = 10.0

_LEN = struct.Struct("<Q")
_ELAPSED = struct.Struct("<d")


class MonitorError(RuntimeError):
    """Measurement or fleet-config failure; `kind` says which stage failed."""

    def __init__(self, message: str, kind: str = "error"):
        super().__init__(message)
        self.kind = kind


@dataclass
class DeviceProfile:
    device_id: int
    flops_per_sec: float
    mem_total_bytes: int
    mem_avail_bytes: int


@dataclass
class FleetProfile:
    """Per-device capabilities plus dense pairwise link matrices.

    Device ids are 0..m-1 and double as matrix indices. Diagonals are zero;
    a device talking to itself is local delivery, not a link.
    """

    devices: List[DeviceProfile]
    bandwidth: List[List[float]]
    latency: List[List[float]]

    @property
    def size(self) -> int:
        return len(self.devices)

    def validate(self) -> None:
        m = len(self.devices)
        ids = [d.device_id for d in self.devices]
        if ids != list(range(m)):
            raise MonitorError(f"device ids must be 0..{m - 1}, got {ids}", "config")
        for d in self.devices:
            if d.flops_per_sec <= 0:
                raise MonitorError(
                    f"device {d.device_id}: flops_per_sec must be positive", "config"
                )
            if d.mem_total_bytes <= 0 or d.mem_avail_bytes < 0:
                raise MonitorError(
                    f"device {d.device_id}: memory fields must be positive", "config"
                )
            if d.mem_avail_bytes > d.mem_total_bytes:
                raise MonitorError(
                    f"device {d.device_id}: mem_avail exceeds mem_total", "config"
                )
        for name, mat in (("bandwidth", self.bandwidth), ("latency", self.latency)):
            if len(mat) != m or any(len(row) != m for row in mat):
                raise MonitorError(f"{name} matrix must be {m}x{m}", "config")
            for i in range(m):
                if mat[i][i] != 0:
                    raise MonitorError(
                        f"{name}[{i}][{i}] must be zero (no self link)", "config"
                    )
        for i in range(m):
            for j in range(m):
                if i == j:
                    continue
                if self.bandwidth[i][j] <= 0:
                    raise MonitorError(
                        f"bandwidth[{i}][{j}] must be positive", "config"
                    )
                if self.latency[i][j] < 0:
                    raise MonitorError(
                        f"latency[{i}][{j}] must be non-negative", "config"
                    )


@dataclass
class MeasurementSample:
    bytes_sent: int
    elapsed_sec: float
    direction: Tuple[int, int]

    @property
    def bandwidth_bps(self) -> float:
        if self.elapsed_sec <= 0:
            raise MonitorError("elapsed time is not positive", "measure")
        return self.bytes_sent / self.elapsed_sec


@dataclass
class Endpoint:
    device_id: int
    host: str
    port: int


class ProbeServer:
    """Receiver half of the bandwidth probe.

    Accepts one connection at a time, times the transfer from connection
    establishment to the last byte on the monotonic clock, and replies with
    the elapsed seconds.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(4)
        self.host, self.port = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def endpoint(self, device_id: int = 0) -> Endpoint:
        return Endpoint(device_id, self.host, self.port)

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            t0 = now()
            try:
                conn.settimeout(MEASURE_TIMEOUT_SEC)
                header = _recv_exact(conn, _LEN.size)
                (length,) = _LEN.unpack(header)
                remaining = length
                while remaining:
                    chunk = conn.recv(min(remaining, 1 << 20))
                    if not chunk:
                        raise ConnectionError("sender closed early")
                    remaining -= len(chunk)
                elapsed = now() - t0
                conn.sendall(_ELAPSED.pack(elapsed))
            except OSError:
                pass
            finally:
                conn.close()

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass


def _recv_exact(conn: socket.socket, count: int) -> bytes:
    buf = b""
    while len(buf) < count:
        chunk = conn.recv(count - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-message")
        buf += chunk
    return buf


def measure_bandwidth(
    sender: Endpoint,
    receiver: Endpoint,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
    timeout: float = MEASURE_TIMEOUT_SEC,
) -> MeasurementSample:
    """Send `chunk_bytes` from sender to the receiver probe and time it there.

    Chunks below 64 KiB are refused: connection setup would dominate and the
    derived bandwidth would be meaningless.
    """
    if chunk_bytes < MIN_CHUNK_BYTES:
        raise MonitorError(
            f"chunk_bytes {chunk_bytes} below minimum {MIN_CHUNK_BYTES}", "precondition"
        )
    payload = b"\x5a" * chunk_bytes
    try:
        with socket.create_connection(
            (receiver.host, receiver.port), timeout=timeout
        ) as conn:
            conn.sendall(_LEN.pack(chunk_bytes))
            conn.sendall(payload)
            reply = _recv_exact(conn, _ELAPSED.size)
    except ConnectionRefusedError as exc:
        raise MonitorError(
            f"receiver {receiver.host}:{receiver.port} refused connection: {exc}",
            "refused",
        ) from exc
    except (socket.timeout, TimeoutError) as exc:
        raise MonitorError(
            f"measurement against {receiver.host}:{receiver.port} timed out", "timeout"
        ) from exc
    except OSError as exc:
        raise MonitorError(f"measurement failed: {exc}", "socket") from exc
    (elapsed,) = _ELAPSED.unpack(reply)
    if elapsed <= 0:
        raise MonitorError("receiver reported non-positive elapsed time", "measure")
    return MeasurementSample(
        bytes_sent=chunk_bytes,
        elapsed_sec=elapsed,
        direction=(sender.device_id, receiver.device_id),
    )


def measure_link(
    sender: Endpoint,
    receiver: Endpoint,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
    warmup: int = 3,
    rounds: int = 5,
) -> Tuple[float, List[MeasurementSample]]:
    """Median-of-rounds bandwidth after warmup transfers; returns the samples."""
    for _ in range(warmup):
        measure_bandwidth(sender, receiver, chunk_bytes)
    samples = [measure_bandwidth(sender, receiver, chunk_bytes) for _ in range(rounds)]
    median_bps = statistics.median(s.bandwidth_bps for s in samples)
    return median_bps, samples


def measure_flops(worker, graph) -> float:
    """Time `worker` running `graph` end to end and derive flops/sec.

    The worker contract: `run_graph(graph)` returns wall-clock elapsed
    seconds and `time_scale` maps wall time back to simulated time.
    """
    total_flops = sum(n.flops for n in graph.nodes)
    if total_flops <= 0:
        raise MonitorError("test graph has zero flops; rate undefined", "precondition")
    try:
        elapsed = worker.run_graph(graph)
        scale = getattr(worker, "time_scale", 1.0)
    except Exception as exc:
        raise MonitorError(f"worker unreachable during flops probe: {exc}", "worker") from exc
    if elapsed <= 0:
        raise MonitorError("worker reported non-positive elapsed time", "measure")
    return total_flops / (elapsed / scale)


class SimulatedDevice:
    """Stand-in for a phone-class device: executes graphs by sleeping."""

    def __init__(self, flops_per_sec: float, time_scale: float = 1.0):
        if flops_per_sec <= 0:
            raise MonitorError("flops_per_sec must be positive", "config")
        self.flops_per_sec = flops_per_sec
        self.time_scale = time_scale

    def run_graph(self, graph) -> float:
        from .timing import precise_sleep

        total = sum(n.flops for n in graph.nodes)
        t0 = now()
        precise_sleep((total / self.flops_per_sec) * self.time_scale)
        return now() - t0


def snapshot_runtime(workers: Sequence, base: FleetProfile) -> FleetProfile:
    """Merge the static fleet config with live memory readings from workers.

    Each worker reports resident bytes for the sub-modules it currently
    holds. Unresponsive workers make the snapshot partial, which is an error
    that lists the missing devices.
    """
    resident: Dict[int, int] = {}
    missing: List[int] = []
    for w in workers:
        try:
            resident[w.device_id] = int(w.resident_bytes())
        except Exception:
            missing.append(getattr(w, "device_id", -1))
    for d in base.devices:
        if d.device_id not in resident and d.device_id not in missing:
            missing.append(d.device_id)
    if missing:
        raise MonitorError(
            f"partial snapshot; no memory reading from devices {sorted(missing)}",
            "partial",
        )
    devices = [
        DeviceProfile(
            device_id=d.device_id,
            flops_per_sec=d.flops_per_sec,
            mem_total_bytes=d.mem_total_bytes,
            mem_avail_bytes=max(0, d.mem_avail_bytes - resident[d.device_id]),
        )
        for d in base.devices
    ]
    return FleetProfile(
        devices=devices,
        bandwidth=[row[:] for row in base.bandwidth],
        latency=[row[:] for row in base.latency],
    )


# --- text format ----------------------------------------------------------

def save_fleet(fleet: FleetProfile, path: str) -> None:
    fleet.validate()
    m = fleet.size
    lines = [f"fleet v1 {m}"]
    for d in fleet.devices:
        lines.append(
            f"device {d.device_id} {d.flops_per_sec:.17g} "
            f"{d.mem_total_bytes} {d.mem_avail_bytes}"
        )
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            lines.append(
                f"link {i} {j} {fleet.bandwidth[i][j]:.17g} {fleet.latency[i][j]:.17g}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_fleet(path: str) -> FleetProfile:
    """Parse a fleet config; every ordered pair i != j must carry a link line."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip()]
    if not lines:
        raise MonitorError(f"{path}: empty fleet file", "config")
    lineno, header = lines[0]
    parts = header.split()
    if len(parts) != 3 or parts[0] != "fleet" or parts[1] != "v1":
        raise MonitorError(f"{path}:{lineno}: expected 'fleet v1 <m>'", "config")
    try:
        m = int(parts[2])
    except ValueError:
        raise MonitorError(f"{path}:{lineno}: non-integer device count", "config") from None
    devices: Dict[int, DeviceProfile] = {}
    links: Dict[Tuple[int, int], Tuple[float, float]] = {}
    for lineno, ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "device":
            if len(parts) != 5:
                raise MonitorError(
                    f"{path}:{lineno}: device line needs 4 fields", "config"
                )
            try:
                did = int(parts[1])
                dev = DeviceProfile(did, float(parts[2]), int(parts[3]), int(parts[4]))
            except ValueError:
                raise MonitorError(
                    f"{path}:{lineno}: malformed device field", "config"
                ) from None
            if did in devices:
                raise MonitorError(
                    f"{path}:{lineno}: duplicate device {did}", "config"
                )
            devices[did] = dev
        elif parts[0] == "link":
            if len(parts) != 5:
                raise MonitorError(
                    f"{path}:{lineno}: link line needs 4 fields", "config"
                )
            try:
                i, j = int(parts[1]), int(parts[2])
                bw, lat = float(parts[3]), float(parts[4])
            except ValueError:
                raise MonitorError(
                    f"{path}:{lineno}: malformed link field", "config"
                ) from None
            if bw <= 0:
                raise MonitorError(
                    f"{path}:{lineno}: link {i}->{j} bandwidth must be positive "
                    "(0 is forbidden, list every pair explicitly)",
                    "config",
                )
            links[(i, j)] = (bw, lat)
        else:
            raise MonitorError(
                f"{path}:{lineno}: unknown record '{parts[0]}'", "config"
            )
    if sorted(devices) != list(range(m)):
        raise MonitorError(
            f"{path}: expected devices 0..{m - 1}, got {sorted(devices)}", "config"
        )
    bandwidth = [[0.0] * m for _ in range(m)]
    latency = [[0.0] * m for _ in range(m)]
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            if (i, j) not in links:
                raise MonitorError(
                    f"{path}: missing link line for pair {i}->{j}", "config"
                )
            bandwidth[i][j], latency[i][j] = links[(i, j)]
    fleet = FleetProfile(
        devices=[devices[i] for i in range(m)], bandwidth=bandwidth, latency=latency
    )
    fleet.validate()
    return fleet
