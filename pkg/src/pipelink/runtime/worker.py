"""Socket-facing device worker.

Each worker owns two listeners on loopback: a data port for the ring
activation flow and an auxiliary port for direct residual traffic and
control frames. Outbound connections each get a shaped sender; inbound
connections identify themselves with a hello frame and then deliver
through the link's propagation delay into the worker's inbox. A single
dispatch thread drains the inbox, drives the device engine, and forwards
frames along the ring, so per-device execution order matches arrival
order.
"""

from __future__ import annotations

import socket
import threading
from dataclasses import dataclass
from queue import SimpleQueue
from typing import Callable, Dict, List, Optional, Sequence

from .engine import ActivationIn, DeviceEngine
from .framing import (
    CtrlKind,
    Message,
    MsgType,
    NO_MODULE,
    TOKEN_SOURCE,
    encode_message,
    hello_message,
    parse_rebalance,
    read_message,
)
from .shaping import DelayedDelivery, ShapedSender, frame_key

HOST = "127.0.0.1"
AUX_PORT_OFFSET = 1000


def data_port(base: int, device_id: int) -> int:
    return base + device_id


def aux_port(base: int, device_id: int) -> int:
    return base + AUX_PORT_OFFSET + device_id


class WorkerError(RuntimeError):
    pass


@dataclass
class Link:
    dst: int
    sock: socket.socket
    sender: ShapedSender


class SocketWorker:
    def __init__(
        self,
        device_id: int,
        engine: DeviceEngine,
        device_order: Sequence[int],
        bandwidth: Sequence[Sequence[float]],
        latency: Sequence[Sequence[float]],
        time_scale: float,
        on_logits: Optional[Callable[[int, int, int], None]] = None,
        on_error: Optional[Callable[[BaseException], None]] = None,
        connect_timeout: float = 10.0,
    ):
        self.device_id = device_id
        self.engine = engine
        self.device_order = list(device_order)
        self.bandwidth = bandwidth
        self.latency = latency
        self.time_scale = time_scale
        self.on_logits = on_logits
        self.on_error = on_error
        self.connect_timeout = connect_timeout
        self.is_leader = self.device_order[0] == device_id
        self.is_last = self.device_order[-1] == device_id
        self.error: Optional[BaseException] = None

        self._inbox: SimpleQueue = SimpleQueue()
        self._data_listener: Optional[socket.socket] = None
        self._aux_listener: Optional[socket.socket] = None
        self._ring_link: Optional[Link] = None
        self._residual_links: Dict[int, Link] = {}
        self._control_links: Dict[int, Link] = {}
        self._deliveries: List[DelayedDelivery] = []
        self._threads: List[threading.Thread] = []
        self._stopping = False

    # --- sockets ------------------------------------------------------------

    def bind(self, base_port: int) -> None:
        self._data_listener = self._listen(data_port(base_port, self.device_id))
        try:
            self._aux_listener = self._listen(aux_port(base_port, self.device_id))
        except OSError:
            self._data_listener.close()
            self._data_listener = None
            raise

    def _listen(self, port: int) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((HOST, port))
        sock.listen(16)
        # closing a listener does not wake a thread blocked in accept(), so
        # accept in short slices and poll the stop flag between them
        sock.settimeout(0.25)
        return sock

    def unbind(self) -> None:
        for listener in (self._data_listener, self._aux_listener):
            if listener is not None:
                listener.close()
        self._data_listener = None
        self._aux_listener = None

    def start(self) -> None:
        if self._data_listener is None or self._aux_listener is None:
            raise WorkerError("worker must bind before starting")
        for listener, tag in (
            (self._data_listener, "data"),
            (self._aux_listener, "aux"),
        ):
            t = threading.Thread(
                target=self._accept_loop,
                args=(listener,),
                name=f"accept-{tag}-{self.device_id}",
                daemon=True,
            )
            t.start()
            self._threads.append(t)
        t = threading.Thread(
            target=self._dispatch_loop,
            name=f"dispatch-{self.device_id}",
            daemon=True,
        )
        t.start()
        self._threads.append(t)

    def _accept_loop(self, listener: socket.socket) -> None:
        while True:
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                if self._stopping:
                    return
                continue
            except OSError:
                return
            try:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.settimeout(self.connect_timeout)
                hello = read_message(sock)
                if (
                    hello.msg_type != MsgType.CONTROL
                    or hello.source_module != int(CtrlKind.HELLO)
                ):
                    raise WorkerError("inbound connection did not say hello")
                src = hello.sample_id
                sock.settimeout(None)
            except (OSError, WorkerError, ConnectionError) as exc:
                sock.close()
                if not self._stopping:
                    self._fail(exc)
                continue
            delivery = DelayedDelivery(
                sock,
                latency_sec=self.latency[src][self.device_id],
                time_scale=self.time_scale,
                deliver=self._deliver_inbound,
                on_error=self._link_error,
                name=f"{src}->{self.device_id}",
                src_id=src,
            )
            self._deliveries.append(delivery)

    def _dial(self, dst: int, port: int) -> Link:
        sock = socket.create_connection((HOST, port), timeout=self.connect_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        sender = ShapedSender(
            sock,
            bandwidth_bps=self.bandwidth[self.device_id][dst],
            time_scale=self.time_scale,
            name=f"{self.device_id}->{dst}",
        )
        sender.send(encode_message(hello_message(self.device_id)), 0)
        return Link(dst=dst, sock=sock, sender=sender)

    def connect_ring(self, base_port: int) -> None:
        if len(self.device_order) == 1:
            return
        pos = self.device_order.index(self.device_id)
        succ = self.device_order[(pos + 1) % len(self.device_order)]
        self._ring_link = self._dial(succ, data_port(base_port, succ))

    def connect_residual_mesh(self, base_port: int) -> None:
        for dst in self.device_order:
            if dst != self.device_id:
                self._residual_links[dst] = self._dial(dst, aux_port(base_port, dst))

    def connect_control(self, base_port: int) -> None:
        for dst in self.device_order:
            self._control_links[dst] = self._dial(dst, aux_port(base_port, dst))

    # --- frame handling -------------------------------------------------------

    def submit_token(self, sample: int, token: int, digest: int) -> None:
        """Leader-side entry point: a new token's input joins the ring here."""
        self._inbox.put(
            Message(
                msg_type=MsgType.ACTIVATION,
                sample_id=sample,
                token_index=token,
                source_module=TOKEN_SOURCE,
                target_module=0,
                digest=digest,
                sim_bytes=0,
            )
        )

    def send_control(self, dst: int, msg: Message) -> None:
        link = self._control_links.get(dst)
        if link is None:
            raise WorkerError(f"no control link from {self.device_id} to {dst}")
        link.sender.send(encode_message(msg), 0, key=frame_key(msg))

    def _deliver_inbound(self, msg: Message) -> None:
        # Residuals go straight to the engine's store from the link thread.
        # The dispatch thread blocks inside process_activation while waiting
        # for them, so routing residuals through the inbox would deadlock.
        if msg.msg_type == MsgType.RESIDUAL:
            for e in msg.entries:
                self.engine.pending.put(
                    msg.sample_id, msg.token_index, e.producer, e.consumer, e.digest
                )
                self.engine.note_residual_arrival(
                    msg.sample_id, msg.token_index, e.producer, e.consumer
                )
        else:
            self._inbox.put(msg)

    def _dispatch_loop(self) -> None:
        try:
            while True:
                msg = self._inbox.get()
                if msg is None or not self._handle(msg):
                    return
        except BaseException as exc:  # propagate to the orchestrator
            self._fail(exc)

    def _handle(self, msg: Message) -> bool:
        if msg.msg_type == MsgType.CONTROL:
            kind = msg.source_module
            if kind == int(CtrlKind.SHUTDOWN):
                return False
            if kind == int(CtrlKind.REBALANCE):
                _, switch_sample, _, active, hosted = parse_rebalance(msg)
                self.engine.epochs.append(switch_sample, active, hosted)
                return True
            raise WorkerError(f"unexpected control kind {kind}")
        if msg.msg_type == MsgType.ACTIVATION:
            out = self.engine.process_activation(
                ActivationIn(
                    sample=msg.sample_id,
                    token=msg.token_index,
                    seq_digest=msg.digest,
                    source_module=msg.source_module,
                    sim_bytes=msg.sim_bytes,
                    entries=msg.entries,
                )
            )
            for send in out.residual_sends:
                link = self._residual_links.get(send.dst_device)
                if link is None:
                    raise WorkerError(
                        f"device {self.device_id} has no residual link to "
                        f"{send.dst_device}"
                    )
                frame = Message(
                    msg_type=MsgType.RESIDUAL,
                    sample_id=msg.sample_id,
                    token_index=msg.token_index,
                    source_module=send.entries[0].producer,
                    target_module=send.entries[0].consumer,
                    digest=0,
                    entries=send.entries,
                    sim_bytes=send.sim_bytes,
                )
                link.sender.send(
                    encode_message(frame), frame.wire_payload_len, key=frame_key(frame)
                )
            self._forward(out.forward)
            return True
        if msg.msg_type == MsgType.LOGITS:
            if not self.is_leader:
                raise WorkerError(
                    f"logits frame reached non-leader device {self.device_id}"
                )
            last = self.engine.table.num_modules - 1
            if msg.source_module != last:
                raise WorkerError(
                    f"token {msg.sample_id}/{msg.token_index} completed at "
                    f"module {msg.source_module}, expected {last}"
                )
            if self.on_logits is not None:
                self.on_logits(msg.sample_id, msg.token_index, msg.digest)
            return True
        raise WorkerError(f"unhandled message type {msg.msg_type}")

    def _forward(self, act: ActivationIn) -> None:
        mtype = MsgType.LOGITS if self.is_last else MsgType.ACTIVATION
        if mtype == MsgType.LOGITS:
            target = NO_MODULE
        elif act.source_module == TOKEN_SOURCE:
            target = 0
        else:
            target = act.source_module + 1
        frame = Message(
            msg_type=mtype,
            sample_id=act.sample,
            token_index=act.token,
            source_module=act.source_module,
            target_module=target,
            digest=act.seq_digest,
            entries=act.entries,
            sim_bytes=act.sim_bytes,
        )
        if self._ring_link is None:
            self._inbox.put(frame)
        else:
            self._ring_link.sender.send(
                encode_message(frame), frame.wire_payload_len, key=frame_key(frame)
            )

    # --- hop accounting ---------------------------------------------------------

    def sent_frames(self) -> List[tuple]:
        """(dst_device, frame key, transmit-start wall, sim bytes) per send."""
        out = []
        links = [self._ring_link] if self._ring_link else []
        links += list(self._residual_links.values())
        links += list(self._control_links.values())
        for link in links:
            for key, t0, nbytes in link.sender.log:
                out.append((link.dst, key, t0, nbytes))
        return out

    def delivered_frames(self) -> List[tuple]:
        """(src_device, frame key, delivery wall, sim bytes) per arrival."""
        out = []
        for delivery in self._deliveries:
            for key, t1, nbytes in delivery.log:
                out.append((delivery.src_id, key, t1, nbytes))
        return out

    # --- failure and shutdown -------------------------------------------------

    def _link_error(self, exc: BaseException) -> None:
        if not self._stopping:
            self._fail(exc)

    def _fail(self, exc: BaseException) -> None:
        if self.error is None:
            self.error = exc
        if self.on_error is not None:
            self.on_error(exc)

    def stop(self) -> None:
        self._stopping = True
        self._inbox.put(None)
        for link in (
            [self._ring_link]
            + list(self._residual_links.values())
            + list(self._control_links.values())
        ):
            if link is not None:
                link.sender.close()
        self.unbind()
        for delivery in self._deliveries:
            delivery.close()
        for t in self._threads:
            t.join(timeout=5)
