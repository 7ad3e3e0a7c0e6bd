"""Fixture provider and allocation/group tests."""

from __future__ import annotations

import random

import pytest

from vetgate.assets import fixtures_dir
from vetgate.probe import (
    FieldSpec,
    FieldUnsupported,
    FixtureError,
    FixtureProbe,
    GpuGroup,
    GpuId,
    MetricField,
    NodeFixture,
    TaskId,
    UnknownNode,
    UnknownTask,
    create_group,
    default_allocation,
    load_fixture,
    load_fixture_dir,
)


@pytest.fixture(scope="module")
def bundled():
    return load_fixture_dir(fixtures_dir())


def probe_for(bundled, mapping, seed=0):
    return FixtureProbe({node: bundled[f] for node, f in mapping.items()}, seed=seed)


def group_of(node, *indexes):
    return GpuGroup(owner="t", gpus=frozenset(GpuId(node, i) for i in indexes))


# --- allocation and groups ---------------------------------------------------

def test_create_group_single_gpu_tasks():
    nodes = tuple(f"node{i}" for i in range(4))
    alloc = default_allocation(nodes, tasks_per_node=4, gpus_per_task=1)
    group = create_group(alloc, TaskId("node0", 2))
    assert group.gpus == frozenset({GpuId("node0", 2)})


def test_create_group_all_local_gpus():
    alloc = default_allocation(("n0",), tasks_per_node=1, gpus_per_task=4)
    group = create_group(alloc, TaskId("n0", 0))
    assert group.gpus == frozenset(GpuId("n0", i) for i in range(4))


def test_create_group_unknown_task():
    alloc = default_allocation(("n0",), 1, 1)
    with pytest.raises(UnknownTask):
        create_group(alloc, TaskId("n9", 0))


def test_allocation_rejects_overlapping_gpus():
    from vetgate.probe import AllocationInfo

    gpu = frozenset({GpuId("n0", 0)})
    with pytest.raises(ValueError):
        AllocationInfo(("n0",), 2, 1, {TaskId("n0", 0): gpu, TaskId("n0", 1): gpu})


def test_empty_group_rejected():
    with pytest.raises(ValueError):
        GpuGroup(owner="x", gpus=frozenset())


def test_gpu_id_round_trip():
    gpu = GpuId("nid001", 3)
    assert GpuId.parse(str(gpu)) == gpu


# --- sampling ----------------------------------------------------------------

def test_idle_fixture_sampling(bundled):
    probe = probe_for(bundled, {"n0": "idle-node"})
    samples = probe.sample(group_of("n0", 1), {MetricField.SmActivity}, 100, 1000)
    assert len(samples) == 10
    assert all(s.value == 0.0 for s in samples)
    stamps = [s.timestamp_ms for s in samples]
    assert stamps == sorted(stamps) and len(set(stamps)) == 10


def test_hot_gpu_fixture_sampling(bundled):
    probe = probe_for(bundled, {"n0": "hot-gpu-node"})
    samples = probe.sample(group_of("n0", 3), {MetricField.GpuTemperature}, 50, 500)
    assert [s.value for s in samples] == [45.0] * 10


def test_missing_field_unsupported(bundled, tmp_path):
    doc = "name: no-nvlink\ngpus: 2\nfields:\n  SmActivity: {constant: 0.5}\n"
    path = tmp_path / "no-nvlink.yaml"
    path.write_text(doc)
    probe = FixtureProbe({"n0": load_fixture(path)})
    with pytest.raises(FieldUnsupported):
        probe.sample(group_of("n0", 0), {MetricField.NvlinkTxBandwidth}, 10, 100)


def test_sampling_preconditions(bundled):
    probe = probe_for(bundled, {"n0": "healthy"})
    with pytest.raises(ValueError):
        probe.sample(group_of("n0", 0), {MetricField.SmActivity}, 5, 100)
    with pytest.raises(ValueError):
        probe.sample(group_of("n0", 0), {MetricField.SmActivity}, 100, 50)


def test_sampling_deterministic_across_instances(bundled):
    a = probe_for(bundled, {"n0": "healthy"}, seed=7)
    b = probe_for(bundled, {"n0": "healthy"}, seed=7)
    fields = {MetricField.SmActivity, MetricField.NvlinkTxBandwidth}
    assert a.sample(group_of("n0", 0, 1), fields, 20, 400) == b.sample(
        group_of("n0", 0, 1), fields, 20, 400
    )


def test_sampling_seed_changes_noise(bundled):
    a = probe_for(bundled, {"n0": "healthy"}, seed=1)
    b = probe_for(bundled, {"n0": "healthy"}, seed=2)
    sa = a.sample(group_of("n0", 0), {MetricField.SmActivity}, 20, 400)
    sb = b.sample(group_of("n0", 0), {MetricField.SmActivity}, 20, 400)
    assert sa != sb


def test_samples_respect_field_ranges(bundled):
    rng = random.Random(13)
    probe = probe_for(bundled, {"n0": "healthy", "n1": "busy-wait"}, seed=3)
    for _ in range(25):
        node = rng.choice(["n0", "n1"])
        fields = set(rng.sample(sorted(MetricField, key=lambda f: f.name), 3))
        fields = {f for f in fields if probe.fixture(node).fields.get(f)}
        if not fields:
            continue
        for sample in probe.sample(group_of(node, 0, 1, 2, 3), fields, 10, 200):
            lo, hi = sample.field.value_range
            assert lo <= sample.value <= hi


def test_group_isolation(bundled):
    probe = probe_for(bundled, {"n0": "healthy", "n1": "healthy"})
    group = group_of("n0", 0, 2)
    for sample in probe.sample(group, {MetricField.SmActivity}, 10, 100):
        assert sample.gpu in group.gpus


def test_ramp_is_linear(bundled):
    probe = probe_for(bundled, {"n0": "healthy"})
    samples = probe.sample(
        group_of("n0", 0), {MetricField.MemoryBandwidthUtilization}, 100, 1000)
    values = [s.value for s in samples]
    assert values[0] == pytest.approx(0.30)
    assert values[-1] == pytest.approx(0.30 + (0.40 - 0.30) * 900 / 1000)
    deltas = {round(b - a, 12) for a, b in zip(values, values[1:])}
    assert len(deltas) == 1


# --- snapshots ----------------------------------------------------------------

def test_healthy_snapshot(bundled):
    probe = probe_for(bundled, {"n0": "healthy"})
    snap = probe.snapshot("n0")
    assert snap.gpu_temperatures_c == (25.0, 25.0, 25.0, 25.0)
    assert snap.gpu_memory_used == (0.05, 0.05, 0.05, 0.05)
    assert snap.latency_ms == 50.0


def test_hot_gpu_snapshot(bundled):
    probe = probe_for(bundled, {"n0": "hot-gpu-node"})
    snap = probe.snapshot("n0")
    assert sorted(snap.gpu_temperatures_c) == [25.0, 25.0, 25.0, 45.0]
    assert snap.gpu_temperatures_c[3] == 45.0


def test_unknown_node_snapshot(bundled):
    probe = probe_for(bundled, {"n0": "healthy"})
    with pytest.raises(UnknownNode):
        probe.snapshot("nope")


def test_launch_check_flag(tmp_path):
    doc = (
        "name: bad-kernel\ngpus: 2\n"
        "fields: {GpuTemperature: {constant: 25.0}}\n"
        "kernel_launch_ok: {1: false}\n"
    )
    path = tmp_path / "bad-kernel.yaml"
    path.write_text(doc)
    probe = FixtureProbe({"n0": load_fixture(path)})
    assert probe.launch_check(GpuId("n0", 0)).ok
    assert not probe.launch_check(GpuId("n0", 1)).ok


# --- fixture parsing ----------------------------------------------------------

def test_bundled_fixtures_load(bundled):
    assert {"healthy", "idle-node", "hot-gpu-node", "busy-wait"} <= set(bundled)
    for fixture in bundled.values():
        assert fixture.gpus == 4


def test_fixture_rejects_unknown_field(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("name: bad\nfields:\n  Bogus: {constant: 1.0}\n")
    with pytest.raises(FixtureError):
        load_fixture(path)


def test_fixture_rejects_out_of_range_constant(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("name: bad\nfields:\n  SmActivity: {constant: 1.5}\n")
    with pytest.raises(FixtureError):
        load_fixture(path)


def test_fixture_rejects_override_beyond_gpus(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(
        "name: bad\ngpus: 2\nfields:\n"
        "  GpuTemperature:\n    constant: 25.0\n"
        "    gpu_overrides:\n      5: {constant: 30.0}\n"
    )
    with pytest.raises(FixtureError):
        load_fixture(path)


def test_field_spec_forms():
    assert FieldSpec(kind="constant", value=2.0).at(0, 100, 0.0) == 2.0
    ramp = FieldSpec(kind="ramp", start=0.0, end=1.0)
    assert ramp.at(50, 100, 0.0) == pytest.approx(0.5)
    noise = FieldSpec(kind="noise", mean=0.5, amplitude=0.1)
    assert noise.at(0, 100, 1.0) == pytest.approx(0.6)
    assert noise.at(0, 100, -1.0) == pytest.approx(0.4)
