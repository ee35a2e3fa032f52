"""Protocol envelopes, their wire codec, and the buses that carry them.

Wire frame layout (all lengths and dims unsigned 32-bit big-endian, floats
64-bit little-endian)::

    u32 len(rest) | u32 len(header) | header (UTF-8 JSON, sorted keys) |
    per tensor: u32 len(name) | name (UTF-8) | u32 rank | rank x u32 dim | float64 data

Tensor names carry their payload kind as a prefix, e.g. ``context/v``.
"""
from __future__ import annotations

import heapq
import itertools
import json
import logging
import queue
import socket
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

Endpoint = Tuple[str, int, int]  # (role, net_id, worker_id)

COORDINATOR: Endpoint = ("coordinator", 0, 0)

MSG_TYPES = ("control", "context_batch", "slice_grad", "weight_report", "global_weights")
_MSG_RANK = {m: i for i, m in enumerate(MSG_TYPES)}

# payload kinds each message type may carry; "raw" is never allowed anywhere
ALLOWED_KINDS = {
    "control": frozenset(),
    "context_batch": frozenset({"context"}),
    "slice_grad": frozenset({"grad"}),
    "weight_report": frozenset({"weight"}),
    "global_weights": frozenset({"weight"}),
}
RAW_KINDS = frozenset({"raw", "raw_window"})

WIRE_VERSION = 1


def worker_endpoint(net_id: int, worker_id: int) -> Endpoint:
    return ("worker", net_id, worker_id)


def aggregator_endpoint(net_id: int) -> Endpoint:
    return ("aggregator", net_id, 0)


class TransportError(RuntimeError):
    pass


class FrameError(TransportError):
    pass


class PrivacyViolation(TransportError):
    pass


@dataclass
class Envelope:
    msg_type: str
    epoch: int
    batch: int
    phase: int
    sender: Endpoint
    receiver: Endpoint
    payload: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.msg_type not in _MSG_RANK:
            raise ValueError(f"unknown msg_type {self.msg_type!r}")
        self.sender = tuple(self.sender)
        self.receiver = tuple(self.receiver)

    @property
    def party(self) -> Tuple[int, int]:
        """The worker-side (net, worker) of the exchange, used for ordering."""
        for ep in (self.sender, self.receiver):
            if ep[0] == "worker":
                return ep[1], ep[2]
        for ep in (self.sender, self.receiver):
            if ep[0] == "aggregator":
                return ep[1], 0
        return 0, 0

    @property
    def ordering_key(self) -> Tuple[int, int, int, int, int, int]:
        net, worker = self.party
        return (self.epoch, self.batch, self.phase, _MSG_RANK[self.msg_type], net, worker)

    def kinds(self) -> List[str]:
        return [name.split("/", 1)[0] for name in self.payload]

    def copy(self) -> "Envelope":
        return Envelope(self.msg_type, self.epoch, self.batch, self.phase, self.sender,
                        self.receiver, {k: np.array(v, dtype=np.float64, copy=True)
                                        for k, v in self.payload.items()},
                        json.loads(json.dumps(self.meta)))


def audit_payload(env: Envelope) -> Optional[str]:
    """``None`` when the payload is admissible, else a violation description."""
    allowed = ALLOWED_KINDS[env.msg_type]
    for name in env.payload:
        kind = name.split("/", 1)[0] if "/" in name else ""
        if kind in RAW_KINDS or kind not in allowed:
            return (f"{env.msg_type} from {env.sender} carries disallowed payload "
                    f"{name!r} (kind {kind or 'untagged'!r})")
    if env.msg_type == "context_batch":
        for name, arr in env.payload.items():
            if np.ndim(arr) != 2:
                return f"context_batch from {env.sender}: {name} has shape {np.shape(arr)}, expected [s, N_e]"
    return None


# ------------------------------------------------------------------ codec

def _header(env: Envelope) -> bytes:
    h = {
        "v": WIRE_VERSION,
        "msg_type": env.msg_type,
        "epoch": env.epoch,
        "batch": env.batch,
        "phase": env.phase,
        "sender": list(env.sender),
        "receiver": list(env.receiver),
        "meta": env.meta,
        "n_tensors": len(env.payload),
    }
    return json.dumps(h, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_frame(env: Envelope) -> bytes:
    header = _header(env)
    parts = [struct.pack(">I", len(header)), header]
    for name, arr in env.payload.items():
        a = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        nb = name.encode("utf-8")
        parts.append(struct.pack(">I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack(">I", a.ndim))
        parts.append(struct.pack(f">{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return struct.pack(">I", len(body)) + body


def decode_frame(frame: bytes) -> Envelope:
    if len(frame) < 8:
        raise FrameError("frame truncated")
    (n,) = struct.unpack_from(">I", frame, 0)
    if len(frame) != n + 4:
        raise FrameError(f"frame length {len(frame) - 4} does not match prefix {n}")
    return _decode_body(memoryview(frame)[4:])


def _decode_body(body) -> Envelope:
    try:
        (hlen,) = struct.unpack_from(">I", body, 0)
        h = json.loads(bytes(body[4:4 + hlen]).decode("utf-8"))
        if h.get("v") != WIRE_VERSION:
            raise FrameError(f"unsupported wire version {h.get('v')}")
        pos = 4 + hlen
        payload = {}
        for _ in range(h["n_tensors"]):
            (nlen,) = struct.unpack_from(">I", body, pos)
            pos += 4
            name = bytes(body[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from(">I", body, pos)
            pos += 4
            dims = struct.unpack_from(f">{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(body):
                raise FrameError("tensor block truncated")
            payload[name] = np.frombuffer(bytes(body[pos:end]), dtype="<f8").astype(np.float64).reshape(dims)
            pos = end
        if pos != len(body):
            raise FrameError("trailing bytes after tensor block")
        return Envelope(h["msg_type"], h["epoch"], h["batch"], h["phase"], tuple(h["sender"]),
                        tuple(h["receiver"]), payload, h["meta"])
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"cannot decode frame: {exc}") from exc


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise FrameError("stream closed mid-frame")
            raise EOFError("stream closed")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> Envelope:
    prefix = _recv_exact(sock, 4)
    (n,) = struct.unpack(">I", prefix)
    return decode_frame(prefix + _recv_exact(sock, n))


def write_frame(sock: socket.socket, env: Envelope) -> None:
    sock.sendall(encode_frame(env))


# ------------------------------------------------------------------ buses

class Bus:
    """In-process message bus.

    ``deterministic=True`` keeps one global heap ordered by ``ordering_key``;
    a single scheduler drains it with ``next_delivery``. Otherwise each
    endpoint owns a FIFO queue and consumers block in ``recv``. Payloads are
    always copied, so no array is shared between sender and receiver.
    """

    def __init__(self, deterministic: bool = True, strict_audit: bool = True):
        self.deterministic = deterministic
        self.strict_audit = strict_audit
        self._lock = threading.Lock()
        self._seq = itertools.count()
        self._heap: List[tuple] = []
        self._queues: Dict[Endpoint, "queue.Queue[Envelope]"] = {}
        self.counts: Counter = Counter()
        self.batch_counts: Dict[Tuple[int, int], Counter] = {}
        self.payload_kinds: Counter = Counter()  # tensor kinds seen, for the raw-input audit
        self.violations: List[str] = []
        self.delivered_keys: List[tuple] = []

    def register(self, endpoint: Endpoint) -> None:
        with self._lock:
            self._queues.setdefault(tuple(endpoint), queue.Queue())

    def registered(self, endpoint: Endpoint) -> bool:
        return tuple(endpoint) in self._queues

    def _admit(self, env: Envelope) -> Envelope:
        if not self.registered(env.receiver):
            raise TransportError(f"unregistered endpoint {env.receiver}")
        problem = audit_payload(env)
        with self._lock:
            if problem:
                self.violations.append(problem)
            self.counts[env.msg_type] += 1
            self.batch_counts.setdefault((env.epoch, env.batch), Counter())[env.msg_type] += 1
            self.payload_kinds.update(env.kinds())
        if problem and self.strict_audit:
            raise PrivacyViolation(problem)
        return env.copy()

    def send(self, env: Envelope) -> None:
        env = self._admit(env)
        if self.deterministic:
            with self._lock:
                heapq.heappush(self._heap, (env.ordering_key, next(self._seq), env))
        else:
            self._queues[env.receiver].put(env)

    def next_delivery(self) -> Optional[Envelope]:
        with self._lock:
            if not self._heap:
                return None
            key, _, env = heapq.heappop(self._heap)
            self.delivered_keys.append(key)
            return env

    def recv(self, endpoint: Endpoint, timeout: Optional[float] = None) -> Envelope:
        endpoint = tuple(endpoint)
        if not self.registered(endpoint):
            raise TransportError(f"unregistered endpoint {endpoint}")
        if self.deterministic:
            with self._lock:
                mine = [item for item in self._heap if item[2].receiver == endpoint]
                if not mine:
                    raise TransportError(f"no message pending for {endpoint}")
                item = min(mine, key=lambda it: it[:2])
                self._heap.remove(item)
                heapq.heapify(self._heap)
                self.delivered_keys.append(item[0])
                return item[2]
        try:
            return self._queues[endpoint].get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no message for {endpoint} within {timeout}s") from None

    def pending(self) -> int:
        return len(self._heap) if self.deterministic else sum(q.qsize() for q in self._queues.values())

    def close(self) -> None:
        pass


class StreamBus(Bus):
    """Threaded bus whose every delivery crosses a byte stream as a wire frame.

    Each endpoint owns a socket pair; a writer thread per endpoint drains an
    outbound queue so ``send`` never blocks on a full socket buffer.
    """

    def __init__(self, strict_audit: bool = True):
        super().__init__(deterministic=False, strict_audit=strict_audit)
        self._socks: Dict[Endpoint, Tuple[socket.socket, socket.socket]] = {}
        self._outbox: Dict[Endpoint, "queue.Queue[Optional[bytes]]"] = {}

    def register(self, endpoint: Endpoint) -> None:
        endpoint = tuple(endpoint)
        super().register(endpoint)
        if endpoint not in self._socks:
            a, b = socket.socketpair()
            self._socks[endpoint] = (a, b)
            box: "queue.Queue[Optional[bytes]]" = queue.Queue()
            self._outbox[endpoint] = box
            threading.Thread(target=self._writer, args=(a, box), daemon=True).start()

    @staticmethod
    def _writer(sock: socket.socket, box: "queue.Queue[Optional[bytes]]") -> None:
        while True:
            frame = box.get()
            if frame is None:
                return
            try:
                sock.sendall(frame)
            except OSError:
                return

    def send(self, env: Envelope) -> None:
        env = self._admit(env)
        self._outbox[env.receiver].put(encode_frame(env))

    def recv(self, endpoint: Endpoint, timeout: Optional[float] = None) -> Envelope:
        _, reader = self._socks[tuple(endpoint)]
        reader.settimeout(timeout)
        try:
            return read_frame(reader)
        except socket.timeout:
            raise TimeoutError(f"no message for {endpoint} within {timeout}s") from None

    def pending(self) -> int:
        return 0

    def close(self) -> None:
        for box in self._outbox.values():
            box.put(None)
        for a, b in self._socks.values():
            a.close()
            b.close()
        self._socks.clear()


class HubBus(Bus):
    """Threaded bus that also routes to endpoints living in other processes.

    Remote peers connect over TCP, announce their endpoint with a ``control``
    frame whose meta holds ``{"register": [role, net, worker]}``, and then
    exchange frames. Frames from peers are re-injected through ``send`` so they
    pass the same audit and accounting as local traffic.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, strict_audit: bool = True):
        super().__init__(deterministic=False, strict_audit=strict_audit)
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()[:2]
        self._remote: Dict[Endpoint, Tuple[socket.socket, threading.Lock]] = {}
        self._joined = threading.Condition()
        self.errors: List[BaseException] = []

    def wait_for(self, endpoints: List[Endpoint], timeout: Optional[float] = None) -> None:
        """Accept peers until every endpoint in ``endpoints`` has registered."""
        wanted = {tuple(e) for e in endpoints}
        self._server.settimeout(timeout)
        while not wanted.issubset(self._remote):
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                raise TimeoutError(f"peers missing: {sorted(wanted - set(self._remote))}") from None
            hello = read_frame(conn)
            ep = tuple(hello.meta.get("register", ()))
            if hello.msg_type != "control" or len(ep) != 3:
                conn.close()
                raise TransportError("peer did not register")
            self._remote[ep] = (conn, threading.Lock())
            super().register(ep)
            threading.Thread(target=self._pump, args=(conn,), daemon=True).start()

    def _pump(self, conn: socket.socket) -> None:
        try:
            while True:
                self.send(read_frame(conn))
        except EOFError:
            return
        except BaseException as exc:  # surfaced to the orchestrator
            self.errors.append(exc)

    def send(self, env: Envelope) -> None:
        if env.receiver in self._remote:
            env = self._admit(env)
            conn, lock = self._remote[env.receiver]
            with lock:
                write_frame(conn, env)
        else:
            super().send(env)

    def close(self) -> None:
        for conn, _ in self._remote.values():
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._server.close()


class RemoteLink:
    """A peer process's view of the hub: one endpoint, one TCP connection."""

    def __init__(self, address: Tuple[str, int], endpoint: Endpoint, timeout: float = 30.0):
        self.endpoint = tuple(endpoint)
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.settimeout(None)
        write_frame(self.sock, Envelope("control", -1, -1, 0, self.endpoint, COORDINATOR,
                                        meta={"register": list(self.endpoint)}))

    def send(self, env: Envelope) -> None:
        problem = audit_payload(env)
        if problem:
            raise PrivacyViolation(problem)
        write_frame(self.sock, env)

    def recv(self, timeout: Optional[float] = None) -> Envelope:
        self.sock.settimeout(timeout)
        return read_frame(self.sock)

    def close(self) -> None:
        self.sock.close()


def parse_address(text: str) -> Tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host, int(port)
