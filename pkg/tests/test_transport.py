"""Wire framing and TCP transport tests."""

from __future__ import annotations

import socket

import pytest

from vetgate.assets import fixtures_dir
from vetgate.executor import (
    AgentStatus,
    Decision,
    JobContext,
    VerdictPolicy,
    make_agent,
    run_vetting,
)
from vetgate.probe import FixtureProbe, load_fixture_dir
from vetgate.protocol import parse_protocol
from vetgate.transport import (
    FRAME_VERSION,
    AgentServer,
    FrameError,
    TcpTransport,
    decode_frame,
    encode_frame,
)

BUNDLED = load_fixture_dir(fixtures_dir())

PROTOCOL = parse_protocol(
    "name: gate\nevals:\n- {name: Check GPU, type: GPUEval, max_temp: 30}\n"
)


def test_frame_round_trip():
    frame = encode_frame("vet-request", {"a": 1, "b": [1, 2]})
    msg_type, body = decode_frame(frame)
    assert msg_type == "vet-request"
    assert body == {"a": 1, "b": [1, 2]}


def test_frame_header_layout():
    frame = encode_frame("x", {})
    length = int.from_bytes(frame[:4], "big")
    assert frame[4] == FRAME_VERSION
    assert len(frame) == 4 + length


def test_frame_rejects_bad_version():
    frame = bytearray(encode_frame("x", {}))
    frame[4] = 99
    with pytest.raises(FrameError):
        decode_frame(bytes(frame))


def test_frame_rejects_truncation():
    frame = encode_frame("x", {"k": "v"})
    with pytest.raises(FrameError):
        decode_frame(frame[:-3])


def test_frame_rejects_non_json_body():
    header = encode_frame("x", {})[:5]
    bogus = (int.to_bytes(8, 4, "big") + bytes([FRAME_VERSION]) + b"not-json")
    with pytest.raises(FrameError):
        decode_frame(bogus)


def test_tcp_round_trip_full_vetting():
    nodes = ("t1", "t2", "t3")
    probe = FixtureProbe({n: BUNDLED["healthy"] for n in nodes})
    servers = [AgentServer(node, make_agent(probe)) for node in nodes]
    threads = [s.serve_in_background() for s in servers]
    try:
        addresses = {s.node: s.address for s in servers}
        ctx = JobContext(job_id="tcp", nodes=nodes)
        verdict, reports = run_vetting(
            PROTOCOL, ctx, TcpTransport(addresses), probe, 20.0)
        assert verdict.decision is Decision.CONTINUE
        assert all(r.agent_status is AgentStatus.REPORTED for r in reports)
    finally:
        for server in servers:
            server.shutdown()
            server.server_close()


def test_tcp_unreachable_node_counts_unhealthy():
    nodes = ("t1", "t2")
    probe = FixtureProbe({n: BUNDLED["healthy"] for n in nodes})
    server = AgentServer("t1", make_agent(probe))
    server.serve_in_background()
    try:
        # t2 points at a port nothing listens on.
        with socket.socket() as probe_sock:
            probe_sock.bind(("127.0.0.1", 0))
            dead_port = probe_sock.getsockname()[1]
        addresses = {"t1": server.address, "t2": ("127.0.0.1", dead_port)}
        ctx = JobContext(job_id="tcp", nodes=nodes)
        verdict, reports = run_vetting(
            PROTOCOL, ctx, TcpTransport(addresses), probe, 10.0)
        statuses = {r.node: r.agent_status for r in reports}
        assert statuses["t1"] is AgentStatus.REPORTED
        assert statuses["t2"] is AgentStatus.UNREACHABLE
        assert verdict.decision is Decision.ABORT
    finally:
        server.shutdown()
        server.server_close()


def test_tcp_missing_address_is_unreachable():
    nodes = ("t1",)
    probe = FixtureProbe({"t1": BUNDLED["healthy"]})
    transport = TcpTransport({"other": ("127.0.0.1", 1)})
    arrivals = transport.run_protocol(nodes, {"protocol": "name: x\nevals: []\n"},
                                      5.0, None)
    assert arrivals[0].status == "unreachable"


def test_tcp_transport_requires_endpoints():
    from vetgate.transport import CoordinatorFailure

    with pytest.raises(CoordinatorFailure):
        TcpTransport({})
