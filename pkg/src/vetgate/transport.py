"""Coordinator/agent message fabric.

Wire format (TCP): every message is one length-prefixed, versioned frame

    +----------------+---------+----------------------+
    | length: u32 BE | version | body: UTF-8 JSON     |
    +----------------+---------+----------------------+

where length covers the version byte plus the body, version is currently
1, and the body is ``{"type": <str>, "body": <object>}``. Frames above 64
MiB are rejected.

Three fabrics implement the same coordinator-side interface: a TCP
transport for real multi-process runs, an in-process local transport for
single-host runs and tests, and the simulator's event-clock transport
(vetgate.sim). All of them deliver one request to every node's agent and
gather replies until a deadline; agents that miss it surface as timeouts,
never as exceptions.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass
from typing import Callable

__all__ = [
    "FRAME_VERSION",
    "MAX_FRAME_BYTES",
    "FrameError",
    "CoordinatorFailure",
    "encode_frame",
    "decode_frame",
    "send_message",
    "recv_message",
    "Arrival",
    "Transport",
    "LocalTransport",
    "TcpTransport",
    "AgentServer",
]

logger = logging.getLogger(__name__)

FRAME_VERSION = 1
MAX_FRAME_BYTES = 64 * 1024 * 1024
_HEADER = struct.Struct(">IB")

AgentFn = Callable[[str, dict], dict]


class FrameError(Exception):
    """A wire frame that cannot be decoded."""


class CoordinatorFailure(Exception):
    """The coordinating process cannot operate its fabric at all."""


def encode_frame(msg_type: str, body: object) -> bytes:
    payload = json.dumps({"type": msg_type, "body": body},
                         separators=(",", ":"), sort_keys=True).encode("utf-8")
    if len(payload) + 1 > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {len(payload)} bytes exceeds limit")
    return _HEADER.pack(len(payload) + 1, FRAME_VERSION) + payload


def decode_frame(data: bytes) -> tuple[str, object]:
    if len(data) < _HEADER.size:
        raise FrameError("frame shorter than header")
    length, version = _HEADER.unpack_from(data)
    if version != FRAME_VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"declared frame length {length} exceeds limit")
    body = data[_HEADER.size : _HEADER.size + length - 1]
    if len(body) != length - 1:
        raise FrameError("truncated frame")
    try:
        message = json.loads(body.decode("utf-8"))
        return message["type"], message["body"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FrameError(f"bad frame body: {exc}") from exc


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise FrameError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_message(sock: socket.socket, msg_type: str, body: object) -> None:
    sock.sendall(encode_frame(msg_type, body))


def recv_message(sock: socket.socket) -> tuple[str, object]:
    header = _recv_exact(sock, _HEADER.size)
    length, version = _HEADER.unpack(header)
    if version != FRAME_VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if length > MAX_FRAME_BYTES or length < 1:
        raise FrameError(f"bad frame length {length}")
    return decode_frame(header + _recv_exact(sock, length - 1))


@dataclass(frozen=True)
class Arrival:
    """One agent's reply as observed by the coordinator."""

    node: str
    status: str  # "reported" | "timeout" | "unreachable"
    payload: dict | None = None
    arrival_s: float = 0.0


class Transport(ABC):
    """Coordinator-side fabric: fan a request out, gather replies.

    ``agent_fn`` is the coordinator's local agent implementation; fabrics
    whose agents live in other processes (TCP) ignore it.
    """

    @abstractmethod
    def run_protocol(
        self,
        nodes: tuple[str, ...],
        request: dict,
        deadline_s: float,
        agent_fn: AgentFn,
    ) -> list[Arrival]: ...


class LocalTransport(Transport):
    """Run every node's agent in-process, one thread per node."""

    def run_protocol(self, nodes, request, deadline_s, agent_fn):
        start = time.monotonic()
        arrivals: list[Arrival] = []
        with ThreadPoolExecutor(max_workers=max(1, len(nodes))) as pool:
            futures = {
                node: pool.submit(agent_fn, node, request) for node in nodes
            }
            for node in nodes:
                remaining = deadline_s - (time.monotonic() - start)
                try:
                    payload = futures[node].result(timeout=max(0.0, remaining))
                    arrivals.append(Arrival(node, "reported", payload,
                                            time.monotonic() - start))
                except (FutureTimeout, TimeoutError):
                    futures[node].cancel()
                    arrivals.append(Arrival(node, "timeout", None, deadline_s))
                except Exception as exc:  # agent bug: count the node unreachable
                    logger.warning("agent for %s raised: %s", node, exc)
                    arrivals.append(Arrival(node, "unreachable", None,
                                            time.monotonic() - start))
        return arrivals


class AgentServer(socketserver.ThreadingTCPServer):
    """Per-node agent endpoint answering vet-request frames over TCP."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, node: str, agent_fn: AgentFn, host: str = "127.0.0.1",
                 port: int = 0):
        self.node = node
        self.agent_fn = agent_fn
        super().__init__((host, port), _AgentHandler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


class _AgentHandler(socketserver.BaseRequestHandler):
    server: AgentServer

    def handle(self) -> None:
        try:
            msg_type, body = recv_message(self.request)
        except FrameError as exc:
            logger.warning("agent %s: bad frame: %s", self.server.node, exc)
            return
        if msg_type != "vet-request" or not isinstance(body, dict):
            send_message(self.request, "error",
                         {"error": f"unexpected message {msg_type!r}"})
            return
        try:
            reply = self.server.agent_fn(self.server.node, body)
            send_message(self.request, "vet-reply", reply)
        except Exception as exc:
            logger.exception("agent %s failed", self.server.node)
            send_message(self.request, "error", {"error": str(exc)})


class TcpTransport(Transport):
    """Coordinator fabric speaking the framed protocol to remote agents."""

    def __init__(self, addresses: dict[str, tuple[str, int]],
                 connect_timeout_s: float = 5.0):
        if not addresses:
            raise CoordinatorFailure("no agent endpoints configured")
        self._addresses = dict(addresses)
        self._connect_timeout_s = connect_timeout_s

    def _exchange(self, node: str, request: dict, deadline_s: float) -> Arrival:
        address = self._addresses.get(node)
        start = time.monotonic()
        if address is None:
            return Arrival(node, "unreachable", None, 0.0)
        try:
            with socket.create_connection(
                address, timeout=min(self._connect_timeout_s, deadline_s)
            ) as sock:
                sock.settimeout(deadline_s)
                send_message(sock, "vet-request", request)
                msg_type, body = recv_message(sock)
        except (OSError, FrameError) as exc:
            logger.warning("node %s unreachable: %s", node, exc)
            return Arrival(node, "unreachable", None, time.monotonic() - start)
        if msg_type != "vet-reply" or not isinstance(body, dict):
            return Arrival(node, "unreachable", None, time.monotonic() - start)
        return Arrival(node, "reported", body, time.monotonic() - start)

    def run_protocol(self, nodes, request, deadline_s, agent_fn=None):
        start = time.monotonic()
        arrivals: list[Arrival] = []
        with ThreadPoolExecutor(max_workers=max(1, len(nodes))) as pool:
            futures = {
                node: pool.submit(self._exchange, node, request, deadline_s)
                for node in nodes
            }
            for node in nodes:
                remaining = deadline_s - (time.monotonic() - start)
                try:
                    arrivals.append(futures[node].result(timeout=max(0.0, remaining)))
                except (FutureTimeout, TimeoutError):
                    arrivals.append(Arrival(node, "timeout", None, deadline_s))
        return arrivals
