"""Traffic shaping for loopback links standing in for slow networks.

A link's bandwidth is modelled at the sender: one thread per connection
serializes frames, sleeping each frame's simulated size over the link rate
before the real bytes hit the socket. Propagation delay is modelled at the
receiver: frames are read eagerly but handed to the device only after the
link's latency has elapsed since arrival. Back-to-back frames therefore
space out by transmission time while their delays overlap, matching how a
real link behaves.
"""

from __future__ import annotations

import socket
import threading
from queue import SimpleQueue
from typing import Callable, Hashable, List, Optional, Tuple

from ..timing import now, precise_sleep, sleep_until
from .framing import LinkClosed, Message, read_message

_STOP = object()


def traffic_shape(sim_bytes: int, bandwidth_bps: float, latency_sec: float) -> float:
    """Modelled delivery offset for one frame: propagation plus transmission.

    The runtime realizes this in two halves (bandwidth at the sender,
    latency at the receiver); their sum must match this number, which is
    also the floor every measured hop is checked against.
    """
    transmit = sim_bytes / bandwidth_bps if bandwidth_bps > 0 else 0.0
    return latency_sec + transmit


def frame_key(msg: Message) -> Tuple[int, int, int, int, int]:
    """Identity of one transmission; unique per link per run."""
    return (
        int(msg.msg_type),
        msg.sample_id,
        msg.token_index,
        msg.source_module,
        msg.target_module,
    )


class ShapedSender:
    """Owns one outbound connection; frames queue and transmit in order."""

    def __init__(
        self,
        sock: socket.socket,
        bandwidth_bps: float,
        time_scale: float,
        name: str = "",
    ):
        self.sock = sock
        self.bandwidth = bandwidth_bps
        self.time_scale = time_scale
        self.error: Optional[BaseException] = None
        # (key, transmit-start wall time, sim bytes); appended only by the
        # sender thread, read only after close
        self.log: List[Tuple[Hashable, float, int]] = []
        self._queue: SimpleQueue = SimpleQueue()
        self._closing = False
        self._thread = threading.Thread(
            target=self._loop, name=f"shaped-sender-{name}", daemon=True
        )
        self._thread.start()

    def send(self, data: bytes, sim_bytes: int, key: Optional[Hashable] = None) -> None:
        if self.error is not None:
            raise ConnectionError(f"link is down: {self.error}") from self.error
        self._queue.put((data, sim_bytes, key))

    def _loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is _STOP:
                return
            data, sim_bytes, key = item
            if key is not None:
                self.log.append((key, now(), sim_bytes))
            try:
                if sim_bytes > 0 and self.bandwidth > 0 and self.time_scale > 0:
                    precise_sleep(sim_bytes / self.bandwidth * self.time_scale)
                self.sock.sendall(data)
            except OSError as exc:
                if not self._closing:
                    self.error = exc
                return

    def close(self) -> None:
        self._closing = True
        self._queue.put(_STOP)
        self._thread.join(timeout=5)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class DelayedDelivery:
    """Reads one inbound connection and delivers frames after the link delay.

    Reading and delivering run on separate threads so a frame's delay
    overlaps the next frame's transmission instead of stacking onto it.
    """

    def __init__(
        self,
        sock: socket.socket,
        latency_sec: float,
        time_scale: float,
        deliver: Callable[[Message], None],
        on_error: Optional[Callable[[BaseException], None]] = None,
        name: str = "",
        src_id: int = -1,
    ):
        self.sock = sock
        self.delay = latency_sec * time_scale
        self.deliver = deliver
        self.on_error = on_error
        self.src_id = src_id
        # (key, delivery wall time, sim bytes); appended only by the release
        # thread, read only after close
        self.log: List[Tuple[Hashable, float, int]] = []
        self._queue: SimpleQueue = SimpleQueue()
        self._closing = False
        self._reader = threading.Thread(
            target=self._read_loop, name=f"link-reader-{name}", daemon=True
        )
        self._releaser = threading.Thread(
            target=self._release_loop, name=f"link-release-{name}", daemon=True
        )
        self._reader.start()
        self._releaser.start()

    def _read_loop(self) -> None:
        try:
            while True:
                msg = read_message(self.sock)
                self._queue.put((now() + self.delay, msg))
        except LinkClosed:
            # an orderly close between frames; either side may tear down first
            pass
        except (ConnectionError, OSError) as exc:
            if not self._closing and self.on_error is not None:
                self.on_error(exc)
        finally:
            self._queue.put(_STOP)

    def _release_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is _STOP:
                return
            release_at, msg = item
            sleep_until(release_at)
            self.log.append((frame_key(msg), now(), msg.sim_bytes))
            self.deliver(msg)

    def close(self) -> None:
        self._closing = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._reader.join(timeout=5)
        self._releaser.join(timeout=5)
