"""Built-in node evaluations: GPU health, collective bandwidth, kernel
launch, host memory, and clock skew.

Every evaluation compares measured values against the thresholds declared
in the protocol and returns an EvalResult. Evaluations are read-only
diagnostics: they never mutate probe or cluster state. Probe or
requirement problems yield status UNKNOWN, never an exception, because an
unreachable telemetry daemon does not prove a node unhealthy.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .probe import Probe, ProbeError
from .protocol import EvalSpec

__all__ = [
    "EvalStatus",
    "ThresholdViolation",
    "EvalResult",
    "RequirementCheck",
    "BandwidthSettings",
    "CollectiveComm",
    "CommTimeout",
    "check_requirements",
    "load_manifest",
    "run_gpu_eval",
    "run_kernel_eval",
    "run_host_memory_eval",
    "run_clock_skew_eval",
    "run_bandwidth_eval",
    "run_eval",
]


class EvalStatus(Enum):
    PASS = "pass"
    FAIL = "fail"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class ThresholdViolation:
    param: str
    threshold: float | int | str
    measured: float | int | str

    def describe(self) -> str:
        return f"{self.param}: tolerated {self.threshold}, measured {self.measured}"


@dataclass(frozen=True)
class EvalResult:
    eval_name: str
    status: EvalStatus
    measured: dict[str, float] = field(default_factory=dict)
    violations: tuple[ThresholdViolation, ...] = ()
    duration_ms: float = 0.0
    detail: str = ""

    def __post_init__(self) -> None:
        if (self.status is EvalStatus.FAIL) != bool(self.violations):
            raise ValueError("FAIL status and threshold violations must coincide")

    def to_dict(self) -> dict:
        return {
            "eval_name": self.eval_name,
            "status": self.status.value,
            "measured": dict(self.measured),
            "violations": [
                [v.param, v.threshold, v.measured] for v in self.violations
            ],
            "duration_ms": self.duration_ms,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalResult":
        return cls(
            eval_name=data["eval_name"],
            status=EvalStatus(data["status"]),
            measured=dict(data.get("measured", {})),
            violations=tuple(
                ThresholdViolation(*entry) for entry in data.get("violations", [])
            ),
            duration_ms=data.get("duration_ms", 0.0),
            detail=data.get("detail", ""),
        )


@dataclass(frozen=True)
class RequirementCheck:
    requirement: str
    satisfied: bool
    detail: str


def load_manifest(path: str | Path) -> frozenset[str]:
    """Availability manifest: one requirement identifier per line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return frozenset(
        line.strip() for line in lines if line.strip() and not line.startswith("#")
    )


def check_requirements(spec: EvalSpec, available: frozenset[str]) -> list[RequirementCheck]:
    """Resolve an eval's requirements against the availability manifest.

    Check-only: nothing is installed, an unsatisfied requirement is a
    value rather than an error.
    """
    checks = []
    for requirement in spec.requirements:
        satisfied = requirement in available
        detail = "present in manifest" if satisfied else "not in manifest"
        checks.append(RequirementCheck(requirement, satisfied, detail))
    return checks


def _unknown(spec: EvalSpec, detail: str, duration_ms: float = 0.0) -> EvalResult:
    return EvalResult(eval_name=spec.name, status=EvalStatus.UNKNOWN,
                      detail=detail, duration_ms=duration_ms)


def _finish(spec: EvalSpec, measured: dict[str, float],
            violations: list[ThresholdViolation], duration_ms: float) -> EvalResult:
    status = EvalStatus.FAIL if violations else EvalStatus.PASS
    return EvalResult(eval_name=spec.name, status=status, measured=measured,
                      violations=tuple(violations), duration_ms=duration_ms)


def run_gpu_eval(spec: EvalSpec, node: str, probe: Probe) -> EvalResult:
    """Snapshot check: any GPU hotter or dirtier than tolerated fails.

    Omitted thresholds are not checked; a spec with no thresholds passes
    vacuously while still reporting the measured maxima.
    """
    try:
        snap = probe.snapshot(node)
    except ProbeError as exc:
        return _unknown(spec, f"probe error: {exc}")
    if not snap.gpu_temperatures_c:
        return _unknown(spec, "no GPUs", snap.latency_ms)

    max_temp_seen = max(snap.gpu_temperatures_c)
    max_mem_seen = max(snap.gpu_memory_used)
    measured = {"max_gpu_temperature": max_temp_seen,
                "max_gpu_memory_used": max_mem_seen}

    violations: list[ThresholdViolation] = []
    max_temp = spec.param_value("max_temp")
    if max_temp is not None and max_temp_seen > float(max_temp):
        violations.append(ThresholdViolation("max_temp", max_temp, max_temp_seen))
    max_mem = spec.param_value("max_used_memory")
    if max_mem is not None and max_mem_seen > float(max_mem):
        violations.append(ThresholdViolation("max_used_memory", max_mem, max_mem_seen))
    return _finish(spec, measured, violations, snap.latency_ms)


def run_kernel_eval(spec: EvalSpec, node: str, probe: Probe) -> EvalResult:
    """Launch a trivial compute task on every GPU of the node."""
    timeout_s = spec.timeout_s()
    try:
        gpus = probe.node_gpus(node)
    except ProbeError as exc:
        return _unknown(spec, f"probe error: {exc}")
    if not gpus:
        return _unknown(spec, "no GPUs")

    measured: dict[str, float] = {}
    violations: list[ThresholdViolation] = []
    duration = 0.0
    for gpu in gpus:
        try:
            launch = probe.launch_check(gpu)
        except ProbeError as exc:
            return _unknown(spec, f"probe error: {exc}", duration)
        duration += launch.latency_ms
        measured[f"gpu{gpu.index}_launch_latency_ms"] = launch.latency_ms
        if not launch.ok:
            violations.append(ThresholdViolation("kernel_launch", "ok", str(gpu)))
        elif launch.latency_ms > timeout_s * 1000.0:
            violations.append(
                ThresholdViolation("timeout", timeout_s, launch.latency_ms / 1000.0))
    return _finish(spec, measured, violations, duration)


def run_host_memory_eval(spec: EvalSpec, node: str, probe: Probe) -> EvalResult:
    try:
        snap = probe.snapshot(node)
    except ProbeError as exc:
        return _unknown(spec, f"probe error: {exc}")
    measured = {"free_host_memory": snap.free_host_memory}
    violations: list[ThresholdViolation] = []
    min_free = spec.param_value("min_free_memory")
    if min_free is not None and snap.free_host_memory < float(min_free):
        violations.append(
            ThresholdViolation("min_free_memory", min_free, snap.free_host_memory))
    return _finish(spec, measured, violations, snap.latency_ms)


def run_clock_skew_eval(spec: EvalSpec, node: str, probe: Probe) -> EvalResult:
    try:
        snap = probe.snapshot(node)
    except ProbeError as exc:
        return _unknown(spec, f"probe error: {exc}")
    skew = abs(snap.clock_skew_s)
    measured = {"clock_skew_s": skew}
    violations: list[ThresholdViolation] = []
    max_skew = spec.param_value("max_skew")
    if max_skew is not None and skew > float(max_skew):
        violations.append(ThresholdViolation("max_skew", max_skew, skew))
    return _finish(spec, measured, violations, snap.latency_ms)


# --- collective bandwidth -----------------------------------------------------

@dataclass(frozen=True)
class BandwidthSettings:
    """Ring exchange shape; the defaults mirror common collective-test
    conventions and can be overridden from configuration."""

    payload_bytes: int = 128 * 1024 * 1024
    warmup_iters: int = 5
    measured_iters: int = 10


class CommTimeout(Exception):
    """The collective transport did not answer in time."""


class CollectiveComm(ABC):
    """Link-level view of the fabric used for the bandwidth evaluation."""

    @abstractmethod
    def link_bandwidth_gbps(self, a: str, b: str) -> float: ...

    @abstractmethod
    def loopback_bandwidth_gbps(self, node: str) -> float: ...


def _bus_factor(n: int) -> float:
    # Ring all-reduce moves 2(n-1)/n payloads per link; bus bandwidth
    # divides that back out so the number is comparable to link speed.
    return 2.0 * (n - 1) / n if n > 1 else 1.0


def run_bandwidth_eval(
    spec: EvalSpec,
    node_set: list[str] | tuple[str, ...],
    probe: Probe,
    comm: CollectiveComm,
    settings: BandwidthSettings = BandwidthSettings(),
) -> dict[str, EvalResult]:
    """Ring all-reduce style payload exchange over the collective fabric.

    A single node measures its intra-node loopback path. With two or more
    nodes, each node's reported bus bandwidth is the minimum over its two
    ring hops, which localizes a degraded link to the nodes adjacent to
    it. The completion time, shared by all participants, is paced by the
    slowest hop of the whole ring.
    """
    order = list(node_set)
    if not order:
        raise ValueError("node_set must be non-empty")
    threshold = float(spec.param_value("min_bandwidth") or 0.0)
    timeout_s = spec.timeout_s()
    iters = settings.warmup_iters + settings.measured_iters
    payload_gb = settings.payload_bytes / 1e9

    try:
        if len(order) == 1:
            node = order[0]
            bus = comm.loopback_bandwidth_gbps(node)
            per_node = {node: bus}
            iter_time_s = payload_gb / bus if bus > 0 else math.inf
        else:
            hops = [
                (order[i], order[(i + 1) % len(order)]) for i in range(len(order))
            ]
            hop_bw = {frozenset(h): comm.link_bandwidth_gbps(*h) for h in hops}
            per_node = {}
            for i, node in enumerate(order):
                left = frozenset((order[i - 1], node))
                right = frozenset((node, order[(i + 1) % len(order)]))
                per_node[node] = min(hop_bw[left], hop_bw[right])
            ring_min = min(hop_bw.values())
            iter_time_s = (
                _bus_factor(len(order)) * payload_gb / ring_min
                if ring_min > 0 else math.inf
            )
    except CommTimeout as exc:
        return {node: _unknown(spec, f"transport timeout: {exc}") for node in order}
    except ProbeError as exc:
        return {node: _unknown(spec, f"probe error: {exc}") for node in order}

    duration_ms = iters * iter_time_s * 1000.0
    if iter_time_s * iters > timeout_s:
        return {
            node: _unknown(spec, f"exchange exceeded {timeout_s:g}s eval timeout")
            for node in order
        }

    results: dict[str, EvalResult] = {}
    factor = _bus_factor(len(order))
    for node in order:
        bus = per_node[node]
        measured = {
            "bus_bandwidth_gbps": bus,
            "alg_bandwidth_gbps": bus / factor,
            "payload_mib": settings.payload_bytes / (1024 * 1024),
            "iterations": float(settings.measured_iters),
        }
        violations: list[ThresholdViolation] = []
        if bus < threshold:
            violations.append(ThresholdViolation("min_bandwidth", threshold, bus))
        results[node] = _finish(spec, measured, violations, duration_ms)
    return results


_RUNNERS = {
    "GPUEval": run_gpu_eval,
    "CUDAEval": run_kernel_eval,
    "HostMemoryEval": run_host_memory_eval,
    "ClockSkewEval": run_clock_skew_eval,
}


def run_eval(
    spec: EvalSpec,
    node: str,
    probe: Probe,
    *,
    node_set: tuple[str, ...] | None = None,
    comm: CollectiveComm | None = None,
    available: frozenset[str] = frozenset(),
    bandwidth: BandwidthSettings = BandwidthSettings(),
) -> EvalResult:
    """Run one protocol eval on one node, gating on its requirements."""
    unsatisfied = [c for c in check_requirements(spec, available) if not c.satisfied]
    if unsatisfied:
        missing = ", ".join(f"{c.requirement} ({c.detail})" for c in unsatisfied)
        return _unknown(spec, f"unsatisfied requirements: {missing}")

    if spec.kind == "NCCLEval":
        if comm is None:
            return _unknown(spec, "collective transport unavailable")
        order = node_set or (node,)
        return run_bandwidth_eval(spec, order, probe, comm, bandwidth)[node]

    runner = _RUNNERS.get(spec.kind)
    if runner is None:
        return _unknown(spec, f"no runner for kind {spec.kind}")
    return runner(spec, node, probe)
