"""Deterministic simulated cluster for end-to-end testing without hardware.

A profile document declares the node inventory (fixture-backed), the link
topology, fault injections, and a seed::

    name: hot-gpu-64
    seed: 1234
    nodes:
      - {hosts: "nid[001-064]", fixture: healthy, gpus: 4}
    links:
      topology: ring        # or full-mesh
      bandwidth_gbps: 100.0
    faults:
      - {kind: HotGpu, node: nid017, gpu: 3, temperature: 45.0}

Simulated time advances through an event clock rather than sleeping, so a
two-minute vetting deadline plays out in milliseconds of real time and a
transcript is a pure function of (profile, protocol, policy, seed).
"""

from __future__ import annotations

import dataclasses
import json
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml

from .assets import fixtures_dir as bundled_fixtures_dir
from .collector import CollectorService, ReportEnvelope
from .evaluations import BandwidthSettings, CollectiveComm
from .executor import (
    JobContext,
    Verdict,
    VerdictPolicy,
    exit_code,
    run_vetting,
)
from .hostlist import expand_hostlist
from .probe import FieldSpec, FixtureProbe, MetricField, NodeFixture, load_fixture_dir
from .protocol import VettingProtocol
from .rules import RulesConfig, DEFAULT_CATALOG
from .transport import Arrival, Transport

__all__ = [
    "FaultKind",
    "FaultSpec",
    "ClusterProfile",
    "ProfileError",
    "UnknownFixture",
    "InvalidFault",
    "EventClock",
    "SimComm",
    "SimTransport",
    "Transcript",
    "load_profile",
    "make_probe",
    "make_comm",
    "make_transport",
    "run_scenario",
]


class ProfileError(ValueError):
    """A cluster profile document that cannot be interpreted."""


class UnknownFixture(ProfileError):
    pass


class InvalidFault(ProfileError):
    pass


class FaultKind(Enum):
    HOT_GPU = "HotGpu"
    DIRTY_GPU_MEMORY = "DirtyGpuMemory"
    DEGRADED_LINK = "DegradedLink"
    AGENT_HANG = "AgentHang"
    KERNEL_LAUNCH_FAIL = "KernelLaunchFail"


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    node: str | None = None
    link: tuple[str, str] | None = None
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ClusterProfile:
    name: str
    nodes: tuple[tuple[str, str, int], ...]  # (node id, fixture name, gpus)
    topology: str  # "ring" | "full-mesh"
    link_bandwidth_gbps: float
    faults: tuple[FaultSpec, ...]
    seed: int
    fixtures: dict[str, NodeFixture]  # resolved fixture catalog

    def node_ids(self) -> tuple[str, ...]:
        return tuple(n for n, _, _ in self.nodes)


def _parse_fault(raw: dict, node_ids: set[str], index: int) -> FaultSpec:
    if not isinstance(raw, dict) or "kind" not in raw:
        raise InvalidFault(f"faults[{index}] needs a 'kind'")
    try:
        kind = FaultKind(raw["kind"])
    except ValueError as exc:
        raise InvalidFault(f"faults[{index}]: unknown kind {raw['kind']!r}") from exc

    params = {k: v for k, v in raw.items() if k not in ("kind", "node", "link")}
    node = raw.get("node")
    link = raw.get("link")

    if kind is FaultKind.DEGRADED_LINK:
        if (not isinstance(link, list) or len(link) != 2
                or not all(isinstance(n, str) for n in link)):
            raise InvalidFault(f"faults[{index}]: DegradedLink needs link: [a, b]")
        if not set(link) <= node_ids:
            raise InvalidFault(f"faults[{index}]: link endpoints {link} not in profile")
        bandwidth = params.get("bandwidth_gbps")
        if not isinstance(bandwidth, (int, float)) or bandwidth <= 0:
            raise InvalidFault(f"faults[{index}]: bandwidth_gbps must be positive")
        return FaultSpec(kind=kind, link=(link[0], link[1]), params=params)

    if not isinstance(node, str) or node not in node_ids:
        raise InvalidFault(f"faults[{index}]: target node {node!r} not in profile")
    if kind is FaultKind.HOT_GPU:
        temperature = params.get("temperature", 45.0)
        if not isinstance(temperature, (int, float)) or temperature < 0:
            raise InvalidFault(f"faults[{index}]: temperature must be >= 0")
    if kind is FaultKind.DIRTY_GPU_MEMORY:
        used = params.get("used_fraction", 0.9)
        if not isinstance(used, (int, float)) or not 0 <= used <= 1:
            raise InvalidFault(f"faults[{index}]: used_fraction must be in [0, 1]")
    if kind is FaultKind.AGENT_HANG:
        delay = params.get("delay_s")
        if delay is not None and (not isinstance(delay, (int, float)) or delay < 0):
            raise InvalidFault(f"faults[{index}]: delay_s must be >= 0")
    return FaultSpec(kind=kind, node=node, params=params)


def load_profile(
    path: str | Path,
    fixtures: dict[str, NodeFixture] | None = None,
    fixtures_dir: str | Path | None = None,
) -> ClusterProfile:
    """Parse and validate a profile; fixture references resolve eagerly.

    Fixtures come from, in order: the explicit mapping, the explicit
    directory, then the bundled fixture set.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ProfileError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ProfileError(f"{path}: profile must be a mapping")

    if fixtures is None:
        fixtures = load_fixture_dir(fixtures_dir or bundled_fixtures_dir())

    entries = data.get("nodes") or []
    if not entries:
        raise ProfileError(f"{path}: profile declares no nodes")
    nodes: list[tuple[str, str, int]] = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ProfileError(f"{path}: nodes[{i}] must be a mapping")
        fixture_name = entry.get("fixture")
        if fixture_name not in fixtures:
            raise UnknownFixture(f"{path}: nodes[{i}]: fixture {fixture_name!r} unknown")
        hosts = entry.get("hosts") or entry.get("id")
        if not isinstance(hosts, str):
            raise ProfileError(f"{path}: nodes[{i}] needs 'hosts' or 'id'")
        gpus = entry.get("gpus", fixtures[fixture_name].gpus)
        if not isinstance(gpus, int) or gpus < 0:
            raise ProfileError(f"{path}: nodes[{i}]: gpus must be non-negative")
        for node_id in expand_hostlist(hosts):
            nodes.append((node_id, fixture_name, gpus))

    ids = [n for n, _, _ in nodes]
    if len(set(ids)) != len(ids):
        raise ProfileError(f"{path}: node ids must be unique")

    links = data.get("links") or {}
    topology = links.get("topology", "ring")
    if topology not in ("ring", "full-mesh"):
        raise ProfileError(f"{path}: topology must be ring or full-mesh")
    bandwidth = links.get("bandwidth_gbps", 100.0)
    if not isinstance(bandwidth, (int, float)) or bandwidth <= 0:
        raise ProfileError(f"{path}: link bandwidth must be positive")

    faults = tuple(
        _parse_fault(raw, set(ids), i)
        for i, raw in enumerate(data.get("faults") or [])
    )
    return ClusterProfile(
        name=data.get("name", path.stem),
        nodes=tuple(nodes),
        topology=topology,
        link_bandwidth_gbps=float(bandwidth),
        faults=faults,
        seed=int(data.get("seed", 0)),
        fixtures=fixtures,
    )


def _apply_node_faults(fixture: NodeFixture, node: str,
                       faults: tuple[FaultSpec, ...]) -> NodeFixture:
    overrides = dict(fixture.gpu_overrides)
    launch_ok = dict(fixture.kernel_launch_ok)
    for fault in faults:
        if fault.node != node:
            continue
        gpu = int(fault.params.get("gpu", 0))
        if fault.kind is FaultKind.HOT_GPU:
            overrides[(MetricField.GpuTemperature, gpu)] = FieldSpec(
                kind="constant", value=float(fault.params.get("temperature", 45.0)))
        elif fault.kind is FaultKind.DIRTY_GPU_MEMORY:
            overrides[(MetricField.GpuMemoryUsedFraction, gpu)] = FieldSpec(
                kind="constant", value=float(fault.params.get("used_fraction", 0.9)))
        elif fault.kind is FaultKind.KERNEL_LAUNCH_FAIL:
            launch_ok[gpu] = False
    return dataclasses.replace(fixture, gpu_overrides=overrides,
                               kernel_launch_ok=launch_ok)


def make_probe(profile: ClusterProfile) -> FixtureProbe:
    """Fixture probe for the profile's inventory with faults applied."""
    node_fixtures: dict[str, NodeFixture] = {}
    for node, fixture_name, gpus in profile.nodes:
        fixture = dataclasses.replace(profile.fixtures[fixture_name], gpus=gpus)
        node_fixtures[node] = _apply_node_faults(fixture, node, profile.faults)
    return FixtureProbe(node_fixtures, seed=profile.seed)


class SimComm(CollectiveComm):
    """Per-link bandwidth view of the simulated fabric."""

    def __init__(self, profile: ClusterProfile):
        self._default = profile.link_bandwidth_gbps
        self._topology = profile.topology
        self._order = profile.node_ids()
        self._overrides: dict[frozenset[str], float] = {}
        for fault in profile.faults:
            if fault.kind is FaultKind.DEGRADED_LINK and fault.link:
                self._overrides[frozenset(fault.link)] = float(
                    fault.params["bandwidth_gbps"])
        self._loopback = {
            node: profile.fixtures[fixture_name].loopback_bandwidth_gbps
            for node, fixture_name, _ in profile.nodes
        }

    def link_bandwidth_gbps(self, a: str, b: str) -> float:
        if self._topology == "ring":
            index = {n: i for i, n in enumerate(self._order)}
            distance = abs(index[a] - index[b])
            if min(distance, len(self._order) - distance) != 1:
                # Non-adjacent exchange traverses intermediate hops: paced
                # by the slowest hop along the shorter arc.
                return min(self._hop_bandwidths(index[a], index[b]))
        return self._overrides.get(frozenset((a, b)), self._default)

    def _hop_bandwidths(self, i: int, j: int) -> list[float]:
        n = len(self._order)
        if i == j:
            return [self._default]
        forward = (j - i) % n
        backward = (i - j) % n
        step, count = (1, forward) if forward <= backward else (-1, backward)
        bandwidths = []
        at = i
        for _ in range(count):
            nxt = (at + step) % n
            pair = frozenset((self._order[at], self._order[nxt]))
            bandwidths.append(self._overrides.get(pair, self._default))
            at = nxt
        return bandwidths

    def loopback_bandwidth_gbps(self, node: str) -> float:
        return self._loopback.get(node, 160.0)


class EventClock:
    """Simulated seconds; advances by event, never by sleeping."""

    def __init__(self, start_s: float = 0.0):
        self._now = start_s

    @property
    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t > self._now:
            self._now = t


class SimTransport(Transport):
    """Event-clock fabric: arrivals are computed, ordering is seeded."""

    REQUEST_BYTES = 4096.0

    def __init__(self, profile: ClusterProfile, clock: EventClock | None = None,
                 base_hop_latency_s: float = 0.001):
        self._profile = profile
        self._comm = SimComm(profile)
        self.clock = clock or EventClock()
        self._base_latency = base_hop_latency_s
        self._hang: dict[str, float | None] = {}
        for fault in profile.faults:
            if fault.kind is FaultKind.AGENT_HANG and fault.node:
                self._hang[fault.node] = fault.params.get("delay_s")

    def _hop_latency_s(self, coordinator: str, node: str) -> float:
        if node == coordinator:
            return 0.0
        bandwidth = self._comm.link_bandwidth_gbps(coordinator, node)
        return self._base_latency + self.REQUEST_BYTES / (bandwidth * 1e9)

    def run_protocol(self, nodes, request, deadline_s, agent_fn):
        start_s = self.clock.now
        coordinator = min(nodes)
        pending: list[tuple[float, str, dict | None]] = []
        for node in nodes:
            hop = self._hop_latency_s(coordinator, node)
            agent_start = start_s + hop
            reply = agent_fn(node, {**request, "agent_start_s": agent_start})
            agent_elapsed = max(0.0, reply.get("finished", agent_start)
                                - reply.get("started", agent_start))
            arrival = hop + agent_elapsed + hop
            if node in self._hang:
                delay = self._hang[node]
                if delay is None:
                    arrival = float("inf")
                else:
                    arrival += delay
            pending.append((arrival, node, reply))

        arrivals: list[Arrival] = []
        last_arrival = 0.0
        for arrival, node, reply in sorted(pending, key=lambda p: (p[0], p[1])):
            if arrival > deadline_s:
                arrivals.append(Arrival(node, "timeout", None, deadline_s))
            else:
                arrivals.append(Arrival(node, "reported", reply, arrival))
                last_arrival = max(last_arrival, arrival)
        self.clock.advance_to(start_s + min(deadline_s, max(last_arrival, 0.0)))
        return arrivals


def make_comm(profile: ClusterProfile) -> SimComm:
    return SimComm(profile)


def make_transport(profile: ClusterProfile,
                   clock: EventClock | None = None) -> SimTransport:
    return SimTransport(profile, clock)


# --- scenarios ------------------------------------------------------------------

@dataclass(frozen=True)
class Transcript:
    profile: str
    seed: int
    protocol: str
    rounds: tuple[dict, ...]
    fleet: tuple[dict, ...]
    rules: dict[str, dict]
    drain_list: tuple[str, ...]
    effects: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "seed": self.seed,
            "protocol": self.protocol,
            "rounds": list(self.rounds),
            "fleet": list(self.fleet),
            "rules": self.rules,
            "drain_list": list(self.drain_list),
            "effects": list(self.effects),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def run_scenario(
    profile: ClusterProfile,
    protocol: VettingProtocol,
    *,
    flexible: bool = False,
    min_nodes: int | None = None,
    policy: VerdictPolicy = VerdictPolicy(),
    rounds: int = 1,
    round_interval_s: float = 3600.0,
    available: frozenset[str] | None = None,
    bandwidth: BandwidthSettings = BandwidthSettings(),
    data_dir: str | Path | None = None,
) -> Transcript:
    """Run vetting rounds end to end: executor, collector, rules.

    Deterministic for a given (profile, protocol, policy, seed); the
    transcript serializes stably for golden-file comparison. Eval
    requirements default to satisfied so scenarios exercise faults, not
    manifests; pass ``available`` to override.
    """
    if available is None:
        available = frozenset(
            r for spec in protocol.evals for r in spec.requirements)

    probe = make_probe(profile)
    comm = SimComm(profile)
    clock = EventClock()
    ctx = JobContext(
        job_id=f"sim-{profile.name}",
        nodes=profile.node_ids(),
        flexible=flexible,
        min_nodes=(min_nodes if flexible and min_nodes else 0),
    )

    def execute(service: CollectorService) -> Transcript:
        round_records: list[dict] = []
        final_time = 0.0
        for round_index in range(rounds):
            round_start = round_index * round_interval_s
            clock.advance_to(round_start)
            transport = SimTransport(profile, clock)
            verdict, reports = run_vetting(
                protocol, ctx, transport, probe, policy.deadline_s,
                policy=policy, comm=comm, available=available,
                bandwidth=bandwidth,
            )
            submitted_at = clock.now
            envelope = ReportEnvelope(
                job_context=ctx, verdict=verdict, reports=tuple(reports),
                submitted_at=submitted_at, submitter="simulator",
            )
            service.ingest(envelope)
            round_records.append({
                "round": round_index,
                "started_at": round_start,
                "submitted_at": submitted_at,
                "verdict": verdict.to_dict(),
                "exit_code": exit_code(verdict.decision),
                "reports": [r.to_dict() for r in reports],
            })
            final_time = submitted_at

        fleet = tuple(
            s.to_dict() for s in service.query_fleet(now=final_time)
        )
        rules_state = {
            node: record.to_dict()
            for node, record in sorted(service.engine.records().items())
        }
        return Transcript(
            profile=profile.name,
            seed=profile.seed,
            protocol=protocol.name,
            rounds=tuple(round_records),
            fleet=fleet,
            rules=rules_state,
            drain_list=tuple(sorted(service.engine.drain_list())),
            effects=tuple(effect.to_dict() for effect in service.effects_log),
        )

    if data_dir is not None:
        return execute(CollectorService(data_dir, DEFAULT_CATALOG, RulesConfig()))
    with tempfile.TemporaryDirectory(prefix="vetgate-sim-") as tmp:
        return execute(CollectorService(tmp, DEFAULT_CATALOG, RulesConfig()))
