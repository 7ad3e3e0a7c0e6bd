"""Telemetry access layer for per-GPU and per-node health data.

Two providers implement the same interface: FixtureProbe serves
deterministic values from declarative per-node fixture files (the form
the whole test suite runs against), and RealProbe shells out to
``nvidia-smi`` on a best-effort basis. Callers must treat
ProviderUnavailable as "evaluation outcome unknown", never as a crash.

Fixture files declare, per metric field, a constant, a linear ramp, or a
seeded noise band, with optional per-GPU overrides::

    name: hot-gpu-node
    gpus: 4
    fields:
      GpuTemperature:
        constant: 25.0
        gpu_overrides:
          3: {constant: 45.0}
      SmActivity: {noise: {mean: 0.6, amplitude: 0.1}}
      MemoryBandwidthUtilization: {ramp: {start: 0.1, end: 0.4}}
    kernel_launch_ok: true
    loopback_bandwidth_gbps: 160.0

Field names in fixtures must match the MetricField spellings exactly.
"""

from __future__ import annotations

import hashlib
import math
import shutil
import socket
import subprocess
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml

__all__ = [
    "MetricField",
    "GpuId",
    "MetricSample",
    "GpuGroup",
    "TaskId",
    "AllocationInfo",
    "NodeSnapshot",
    "KernelLaunch",
    "Probe",
    "FixtureProbe",
    "NullProbe",
    "RealProbe",
    "NodeFixture",
    "ProbeError",
    "ProviderUnavailable",
    "FieldUnsupported",
    "UnknownNode",
    "UnknownTask",
    "FixtureError",
    "create_group",
    "default_allocation",
    "load_fixture",
    "load_fixture_dir",
]

MIN_SAMPLE_INTERVAL_MS = 10


class ProbeError(Exception):
    """Base class for telemetry provider errors."""


class ProviderUnavailable(ProbeError):
    pass


class FieldUnsupported(ProbeError):
    pass


class UnknownNode(ProbeError):
    pass


class UnknownTask(ProbeError):
    pass


class FixtureError(ValueError):
    """A fixture document that cannot be interpreted."""


class MetricField(Enum):
    GraphicsEngineActivity = "GraphicsEngineActivity"
    SmActivity = "SmActivity"
    SmOccupancy = "SmOccupancy"
    TensorActivity = "TensorActivity"
    Fp64Activity = "Fp64Activity"
    Fp32Activity = "Fp32Activity"
    Fp16Activity = "Fp16Activity"
    MemoryBandwidthUtilization = "MemoryBandwidthUtilization"
    PcieTxBandwidth = "PcieTxBandwidth"
    PcieRxBandwidth = "PcieRxBandwidth"
    NvlinkTxBandwidth = "NvlinkTxBandwidth"
    NvlinkRxBandwidth = "NvlinkRxBandwidth"
    GpuTemperature = "GpuTemperature"
    GpuMemoryUsedFraction = "GpuMemoryUsedFraction"
    GpuUtilization = "GpuUtilization"

    @property
    def value_range(self) -> tuple[float, float]:
        """Inclusive (min, max) of legal values in the field's unit."""
        if self in _FRACTION_FIELDS:
            return (0.0, 1.0)
        return (0.0, math.inf)  # bandwidths in GB/s, temperature in °C


_FRACTION_FIELDS = frozenset(
    {
        MetricField.GraphicsEngineActivity,
        MetricField.SmActivity,
        MetricField.SmOccupancy,
        MetricField.TensorActivity,
        MetricField.Fp64Activity,
        MetricField.Fp32Activity,
        MetricField.Fp16Activity,
        MetricField.MemoryBandwidthUtilization,
        MetricField.GpuMemoryUsedFraction,
        MetricField.GpuUtilization,
    }
)


@dataclass(frozen=True, order=True)
class GpuId:
    node: str
    index: int

    def __str__(self) -> str:
        return f"{self.node}:gpu{self.index}"

    @classmethod
    def parse(cls, text: str) -> "GpuId":
        node, _, suffix = text.rpartition(":gpu")
        if not node or not suffix.isdigit():
            raise ValueError(f"bad gpu id {text!r}")
        return cls(node, int(suffix))


@dataclass(frozen=True)
class MetricSample:
    field: MetricField
    gpu: GpuId
    timestamp_ms: int
    value: float


@dataclass(frozen=True)
class TaskId:
    node: str
    rank: int

    def __str__(self) -> str:
        return f"{self.node}:rank{self.rank}"


@dataclass(frozen=True)
class GpuGroup:
    owner: str
    gpus: frozenset[GpuId]

    def __post_init__(self) -> None:
        if not self.gpus:
            raise ValueError("GPU group may not be empty")

    def sorted_gpus(self) -> tuple[GpuId, ...]:
        return tuple(sorted(self.gpus))


@dataclass(frozen=True)
class AllocationInfo:
    """Scheduler-provided shape of a workload allocation."""

    nodes: tuple[str, ...]
    tasks_per_node: int
    gpus_per_task: int
    task_gpu_map: dict[TaskId, frozenset[GpuId]]

    def __post_init__(self) -> None:
        if self.tasks_per_node < 1 or self.gpus_per_task < 1:
            raise ValueError("tasks_per_node and gpus_per_task must be positive")
        expected = {
            TaskId(node, rank)
            for node in self.nodes
            for rank in range(self.tasks_per_node)
        }
        if set(self.task_gpu_map) != expected:
            raise ValueError("task_gpu_map must cover every task exactly once")
        node_set = set(self.nodes)
        seen: set[GpuId] = set()
        for task, gpus in self.task_gpu_map.items():
            for gpu in gpus:
                if gpu.node not in node_set:
                    raise ValueError(f"gpu {gpu} outside allocation nodes")
                if gpu in seen:
                    # Sharing one GPU between tasks is rejected outright.
                    raise ValueError(f"gpu {gpu} mapped to more than one task")
                seen.add(gpu)


def default_allocation(
    nodes: tuple[str, ...] | list[str], tasks_per_node: int, gpus_per_task: int
) -> AllocationInfo:
    """Contiguous task-to-GPU assignment, the common scheduler layout."""
    task_gpu_map: dict[TaskId, frozenset[GpuId]] = {}
    for node in nodes:
        for rank in range(tasks_per_node):
            base = rank * gpus_per_task
            task_gpu_map[TaskId(node, rank)] = frozenset(
                GpuId(node, base + j) for j in range(gpus_per_task)
            )
    return AllocationInfo(tuple(nodes), tasks_per_node, gpus_per_task, task_gpu_map)


def create_group(allocation: AllocationInfo, task: TaskId) -> GpuGroup:
    """The GPU group holding exactly one task's GPUs."""
    gpus = allocation.task_gpu_map.get(task)
    if gpus is None:
        raise UnknownTask(f"task {task} not in allocation")
    return GpuGroup(owner=str(task), gpus=gpus)


@dataclass(frozen=True)
class NodeSnapshot:
    """Single-timestamp health basics for one node."""

    node: str
    gpu_temperatures_c: tuple[float, ...]
    gpu_memory_used: tuple[float, ...]
    free_host_memory: float
    clock_skew_s: float = 0.0
    latency_ms: float = 0.0


@dataclass(frozen=True)
class KernelLaunch:
    gpu: GpuId
    ok: bool
    latency_ms: float


class Probe(ABC):
    """Read-only telemetry provider; shareable after construction."""

    @abstractmethod
    def nodes(self) -> tuple[str, ...]: ...

    @abstractmethod
    def gpu_count(self, node: str) -> int: ...

    @abstractmethod
    def sample(
        self,
        group: GpuGroup,
        fields: frozenset[MetricField] | set[MetricField],
        interval_ms: int,
        duration_ms: int,
    ) -> list[MetricSample]: ...

    @abstractmethod
    def snapshot(self, node: str) -> NodeSnapshot: ...

    @abstractmethod
    def launch_check(self, gpu: GpuId) -> KernelLaunch: ...

    def node_gpus(self, node: str) -> tuple[GpuId, ...]:
        return tuple(GpuId(node, i) for i in range(self.gpu_count(node)))

    @staticmethod
    def _check_sampling_args(interval_ms: int, duration_ms: int) -> None:
        if interval_ms < MIN_SAMPLE_INTERVAL_MS:
            raise ValueError(
                f"sampling interval must be >= {MIN_SAMPLE_INTERVAL_MS} ms")
        if duration_ms < interval_ms:
            raise ValueError("duration must be >= interval")


# --- fixture provider -------------------------------------------------------

@dataclass(frozen=True)
class FieldSpec:
    """Value generator for one metric field: constant, ramp, or noise."""

    kind: str  # "constant" | "ramp" | "noise"
    value: float = 0.0
    start: float = 0.0
    end: float = 0.0
    mean: float = 0.0
    amplitude: float = 0.0

    def at(self, t_ms: int, duration_ms: int, noise: float) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "ramp":
            frac = t_ms / duration_ms if duration_ms else 0.0
            return self.start + (self.end - self.start) * frac
        return self.mean + self.amplitude * noise  # noise in [-1, 1]


@dataclass(frozen=True)
class NodeFixture:
    """Declarative telemetry profile for one simulated node."""

    name: str
    gpus: int = 4
    fields: dict[MetricField, FieldSpec] = field(default_factory=dict)
    gpu_overrides: dict[tuple[MetricField, int], FieldSpec] = field(default_factory=dict)
    kernel_launch_ok: dict[int, bool] = field(default_factory=dict)
    kernel_launch_latency_ms: float = 5.0
    loopback_bandwidth_gbps: float = 160.0
    free_host_memory: float = 1.0
    clock_skew_s: float = 0.0
    snapshot_latency_ms: float = 50.0

    def spec_for(self, fld: MetricField, gpu_index: int) -> FieldSpec | None:
        override = self.gpu_overrides.get((fld, gpu_index))
        if override is not None:
            return override
        return self.fields.get(fld)

    def launch_ok(self, gpu_index: int) -> bool:
        return self.kernel_launch_ok.get(gpu_index, True)


def _parse_field_spec(raw: object, context: str) -> FieldSpec:
    if not isinstance(raw, dict):
        raise FixtureError(f"{context}: field spec must be a mapping")
    kinds = [k for k in ("constant", "ramp", "noise") if k in raw]
    if len(kinds) != 1:
        raise FixtureError(f"{context}: exactly one of constant/ramp/noise required")
    kind = kinds[0]
    body = raw[kind]
    if kind == "constant":
        if not isinstance(body, (int, float)) or isinstance(body, bool):
            raise FixtureError(f"{context}: constant must be a number")
        return FieldSpec(kind="constant", value=float(body))
    if not isinstance(body, dict):
        raise FixtureError(f"{context}: {kind} spec must be a mapping")
    if kind == "ramp":
        try:
            return FieldSpec(kind="ramp", start=float(body["start"]), end=float(body["end"]))
        except (KeyError, TypeError) as exc:
            raise FixtureError(f"{context}: ramp needs numeric start/end") from exc
    try:
        return FieldSpec(kind="noise", mean=float(body["mean"]),
                         amplitude=float(body["amplitude"]))
    except (KeyError, TypeError) as exc:
        raise FixtureError(f"{context}: noise needs numeric mean/amplitude") from exc


def load_fixture(path: str | Path) -> NodeFixture:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise FixtureError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise FixtureError(f"{path}: fixture must be a mapping")

    name = data.get("name", path.stem)
    gpus = data.get("gpus", 4)
    if not isinstance(gpus, int) or gpus < 0:
        raise FixtureError(f"{path}: gpus must be a non-negative integer")

    fields: dict[MetricField, FieldSpec] = {}
    overrides: dict[tuple[MetricField, int], FieldSpec] = {}
    for fname, raw in (data.get("fields") or {}).items():
        try:
            fld = MetricField[fname]
        except KeyError as exc:
            raise FixtureError(f"{path}: unknown metric field {fname!r}") from exc
        if isinstance(raw, dict) and "gpu_overrides" in raw:
            raw = dict(raw)
            for idx, sub in (raw.pop("gpu_overrides") or {}).items():
                if not isinstance(idx, int):
                    raise FixtureError(f"{path}: gpu_overrides keys must be GPU indexes")
                overrides[(fld, idx)] = _parse_field_spec(sub, f"{path}:{fname}[{idx}]")
        fields[fld] = _parse_field_spec(raw, f"{path}:{fname}")

    launch_ok_raw = data.get("kernel_launch_ok", True)
    launch_ok: dict[int, bool] = {}
    if isinstance(launch_ok_raw, bool):
        if not launch_ok_raw:
            launch_ok = {i: False for i in range(gpus)}
    elif isinstance(launch_ok_raw, dict):
        launch_ok = {int(k): bool(v) for k, v in launch_ok_raw.items()}
    else:
        raise FixtureError(f"{path}: kernel_launch_ok must be a bool or index mapping")

    fixture = NodeFixture(
        name=name,
        gpus=gpus,
        fields=fields,
        gpu_overrides=overrides,
        kernel_launch_ok=launch_ok,
        kernel_launch_latency_ms=float(data.get("kernel_launch_latency_ms", 5.0)),
        loopback_bandwidth_gbps=float(data.get("loopback_bandwidth_gbps", 160.0)),
        free_host_memory=float(data.get("free_host_memory", 1.0)),
        clock_skew_s=float(data.get("clock_skew_s", 0.0)),
        snapshot_latency_ms=float(data.get("snapshot_latency_ms", 50.0)),
    )
    _validate_fixture_ranges(fixture, path)
    return fixture


def _validate_fixture_ranges(fixture: NodeFixture, path: Path) -> None:
    def check(fld: MetricField, spec: FieldSpec, where: str) -> None:
        lo, hi = fld.value_range
        candidates = {
            "constant": (spec.value,),
            "ramp": (spec.start, spec.end),
            "noise": (spec.mean - spec.amplitude, spec.mean + spec.amplitude),
        }[spec.kind]
        # Noise bands may graze the range edge; they are clamped when
        # sampled, but the mean itself must be legal.
        values = (spec.mean,) if spec.kind == "noise" else candidates
        for value in values:
            if not (lo <= value <= hi):
                raise FixtureError(
                    f"{path}: {where} value {value} outside [{lo}, {hi}]")

    for fld, spec in fixture.fields.items():
        check(fld, spec, fld.name)
    for (fld, idx), spec in fixture.gpu_overrides.items():
        if idx >= fixture.gpus:
            raise FixtureError(f"{path}: override index {idx} >= gpus {fixture.gpus}")
        check(fld, spec, f"{fld.name}[{idx}]")
    if not (0.0 <= fixture.free_host_memory <= 1.0):
        raise FixtureError(f"{path}: free_host_memory must be a fraction")


def load_fixture_dir(directory: str | Path) -> dict[str, NodeFixture]:
    """All fixtures in a directory, keyed by fixture name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FixtureError(f"fixture directory {directory} does not exist")
    fixtures: dict[str, NodeFixture] = {}
    for path in sorted(directory.glob("*.yaml")):
        fixture = load_fixture(path)
        if fixture.name in fixtures:
            raise FixtureError(f"duplicate fixture name {fixture.name!r}")
        fixtures[fixture.name] = fixture
    return fixtures


def _noise_unit(seed: int, node: str, gpu_index: int, field_name: str, k: int) -> float:
    """Deterministic value in [-1, 1], stable across processes."""
    payload = f"{seed}|{node}|{gpu_index}|{field_name}|{k}".encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "big") / float(2**64 - 1) * 2.0 - 1.0


class FixtureProbe(Probe):
    """Deterministic provider: a pure function of (fixtures, seed, request)."""

    def __init__(self, node_fixtures: dict[str, NodeFixture], seed: int = 0):
        self._fixtures = dict(node_fixtures)
        self._seed = seed

    def nodes(self) -> tuple[str, ...]:
        return tuple(sorted(self._fixtures))

    def fixture(self, node: str) -> NodeFixture:
        fixture = self._fixtures.get(node)
        if fixture is None:
            raise UnknownNode(f"node {node!r} not in inventory")
        return fixture

    def gpu_count(self, node: str) -> int:
        return self.fixture(node).gpus

    def sample(self, group, fields, interval_ms, duration_ms):
        self._check_sampling_args(interval_ms, duration_ms)
        count = duration_ms // interval_ms
        samples: list[MetricSample] = []
        for gpu in group.sorted_gpus():
            fixture = self.fixture(gpu.node)
            if gpu.index >= fixture.gpus:
                raise UnknownNode(f"gpu {gpu} not present on {gpu.node}")
            for fld in sorted(fields, key=lambda f: f.name):
                spec = fixture.spec_for(fld, gpu.index)
                if spec is None:
                    raise FieldUnsupported(
                        f"fixture {fixture.name!r} does not provide {fld.name}")
                lo, hi = fld.value_range
                for k in range(count):
                    t = k * interval_ms
                    noise = _noise_unit(self._seed, gpu.node, gpu.index, fld.name, k)
                    value = min(max(spec.at(t, duration_ms, noise), lo), hi)
                    samples.append(MetricSample(fld, gpu, t, value))
        return samples

    def snapshot(self, node: str) -> NodeSnapshot:
        fixture = self.fixture(node)
        temps = []
        mem = []
        for idx in range(fixture.gpus):
            tspec = fixture.spec_for(MetricField.GpuTemperature, idx)
            mspec = fixture.spec_for(MetricField.GpuMemoryUsedFraction, idx)
            tnoise = _noise_unit(self._seed, node, idx, "GpuTemperature", 0)
            mnoise = _noise_unit(self._seed, node, idx, "GpuMemoryUsedFraction", 0)
            temps.append(tspec.at(0, 0, tnoise) if tspec else 25.0)
            mem.append(min(max(mspec.at(0, 0, mnoise), 0.0), 1.0) if mspec else 0.0)
        return NodeSnapshot(
            node=node,
            gpu_temperatures_c=tuple(temps),
            gpu_memory_used=tuple(mem),
            free_host_memory=fixture.free_host_memory,
            clock_skew_s=fixture.clock_skew_s,
            latency_ms=fixture.snapshot_latency_ms,
        )

    def launch_check(self, gpu: GpuId) -> KernelLaunch:
        fixture = self.fixture(gpu.node)
        if gpu.index >= fixture.gpus:
            raise UnknownNode(f"gpu {gpu} not present on {gpu.node}")
        return KernelLaunch(gpu=gpu, ok=fixture.launch_ok(gpu.index),
                            latency_ms=fixture.kernel_launch_latency_ms)


class NullProbe(Probe):
    """Provider stand-in when no telemetry source exists.

    Every operation raises ProviderUnavailable, which evaluations map to
    UNKNOWN outcomes rather than crashes.
    """

    def nodes(self) -> tuple[str, ...]:
        return ()

    def gpu_count(self, node: str) -> int:
        raise ProviderUnavailable("no telemetry provider configured")

    def sample(self, group, fields, interval_ms, duration_ms):
        self._check_sampling_args(interval_ms, duration_ms)
        raise ProviderUnavailable("no telemetry provider configured")

    def snapshot(self, node: str) -> NodeSnapshot:
        raise ProviderUnavailable("no telemetry provider configured")

    def launch_check(self, gpu: GpuId) -> KernelLaunch:
        raise ProviderUnavailable("no telemetry provider configured")


# --- best-effort real provider ----------------------------------------------

class RealProbe(Probe):
    """Local-node provider backed by nvidia-smi; best effort only.

    Raises ProviderUnavailable from the constructor when no usable
    nvidia-smi is present, so callers can fall back to fixtures or report
    evaluations as unknown.
    """

    _QUERY = "temperature.gpu,memory.used,memory.total,utilization.gpu"

    def __init__(self, hostname: str | None = None):
        self._smi = shutil.which("nvidia-smi")
        if self._smi is None:
            raise ProviderUnavailable("nvidia-smi not found on PATH")
        self._node = hostname or socket.gethostname()
        self._rows = self._query()

    def _query(self) -> list[tuple[float, float, float, float]]:
        try:
            out = subprocess.run(
                [self._smi, f"--query-gpu={self._QUERY}",
                 "--format=csv,noheader,nounits"],
                capture_output=True, text=True, timeout=15, check=True,
            ).stdout
        except (subprocess.SubprocessError, OSError) as exc:
            raise ProviderUnavailable(f"nvidia-smi failed: {exc}") from exc
        rows = []
        for line in out.strip().splitlines():
            parts = [p.strip() for p in line.split(",")]
            rows.append(tuple(float(p) for p in parts[:4]))
        if not rows:
            raise ProviderUnavailable("nvidia-smi reported no GPUs")
        return rows

    def nodes(self) -> tuple[str, ...]:
        return (self._node,)

    def gpu_count(self, node: str) -> int:
        if node != self._node:
            raise UnknownNode(f"real provider only serves {self._node!r}")
        return len(self._rows)

    _SAMPLE_FIELDS = frozenset(
        {MetricField.GpuTemperature, MetricField.GpuMemoryUsedFraction,
         MetricField.GpuUtilization}
    )

    def sample(self, group, fields, interval_ms, duration_ms):
        self._check_sampling_args(interval_ms, duration_ms)
        unsupported = set(fields) - self._SAMPLE_FIELDS
        if unsupported:
            names = ", ".join(sorted(f.name for f in unsupported))
            raise FieldUnsupported(f"real provider cannot sample: {names}")
        samples: list[MetricSample] = []
        count = duration_ms // interval_ms
        start = time.monotonic()
        for k in range(count):
            target = start + (k * interval_ms) / 1000.0
            delay = target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            rows = self._query()
            t = int((time.monotonic() - start) * 1000)
            for gpu in group.sorted_gpus():
                temp, used, total, util = rows[gpu.index]
                by_field = {
                    MetricField.GpuTemperature: temp,
                    MetricField.GpuMemoryUsedFraction: used / total if total else 0.0,
                    MetricField.GpuUtilization: util / 100.0,
                }
                for fld in sorted(fields, key=lambda f: f.name):
                    samples.append(MetricSample(fld, gpu, t, by_field[fld]))
        return samples

    def snapshot(self, node: str) -> NodeSnapshot:
        if node != self._node:
            raise UnknownNode(f"real provider only serves {self._node!r}")
        started = time.monotonic()
        rows = self._query()
        latency = (time.monotonic() - started) * 1000.0
        return NodeSnapshot(
            node=node,
            gpu_temperatures_c=tuple(r[0] for r in rows),
            gpu_memory_used=tuple(r[1] / r[2] if r[2] else 0.0 for r in rows),
            free_host_memory=_free_host_memory_fraction(),
            latency_ms=latency,
        )

    def launch_check(self, gpu: GpuId) -> KernelLaunch:
        # A responding nvidia-smi is the strongest signal available without
        # bundling a CUDA runtime.
        started = time.monotonic()
        ok = True
        try:
            self._query()
        except ProviderUnavailable:
            ok = False
        return KernelLaunch(gpu=gpu, ok=ok,
                            latency_ms=(time.monotonic() - started) * 1000.0)


def _free_host_memory_fraction() -> float:
    try:
        fields = {}
        with open("/proc/meminfo", encoding="ascii") as handle:
            for line in handle:
                key, _, rest = line.partition(":")
                fields[key] = int(rest.split()[0])
        return fields["MemAvailable"] / fields["MemTotal"]
    except (OSError, KeyError, ValueError, IndexError):
        return 1.0
