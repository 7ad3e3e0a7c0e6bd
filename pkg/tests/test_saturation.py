"""Saturation scorer tests: components, properties, export, figures."""

from __future__ import annotations

import random

import pytest

from vetgate.assets import fixtures_dir
from vetgate.probe import (
    FixtureProbe,
    GpuGroup,
    GpuId,
    MetricField,
    load_fixture_dir,
)
from vetgate.saturation import (
    DEFAULT_FIELDS,
    MetricSeries,
    MissingField,
    SaturationScore,
    ScoreWeights,
    collect,
    export_series,
    read_series_csv,
    read_series_json,
    render_figures,
    score,
)

from oracles import oracle_weighted_score

BUNDLED = load_fixture_dir(fixtures_dir())


def make_group(node, count):
    return GpuGroup(owner="t", gpus=frozenset(GpuId(node, i) for i in range(count)))


def constant_series(field, value, gpus=1, samples=5, node="n0"):
    out = []
    for i in range(gpus):
        out.append(
            MetricSeries(
                gpu=GpuId(node, i),
                field=field,
                samples=tuple((k * 100, value) for k in range(samples)),
            )
        )
    return out


def component_series(sm=0.0, tensor=0.0, membw=0.0, tx=0.0, rx=0.0, gpus=1):
    return (
        constant_series(MetricField.SmActivity, sm, gpus)
        + constant_series(MetricField.TensorActivity, tensor, gpus)
        + constant_series(MetricField.MemoryBandwidthUtilization, membw, gpus)
        + constant_series(MetricField.NvlinkTxBandwidth, tx, gpus)
        + constant_series(MetricField.NvlinkRxBandwidth, rx, gpus)
    )


# --- collection -----------------------------------------------------------------

def test_collect_series_count_16_gpus():
    nodes = {f"n{i}": BUNDLED["healthy"] for i in range(4)}
    probe = FixtureProbe(nodes)
    gpus = frozenset(GpuId(n, i) for n in nodes for i in range(4))
    series = collect(GpuGroup(owner="job", gpus=gpus), probe, 100, 500)
    assert len(series) == len(DEFAULT_FIELDS) * 16


def test_collect_single_field():
    probe = FixtureProbe({"n0": BUNDLED["healthy"]})
    series = collect(make_group("n0", 1), probe, 100, 500)
    assert {s.field for s in series} == set(DEFAULT_FIELDS)
    only = [s for s in series if s.field is MetricField.SmActivity]
    assert len(only) == 1 and len(only[0].samples) == 5


def test_collect_duration_shorter_than_interval_rejected():
    probe = FixtureProbe({"n0": BUNDLED["healthy"]})
    with pytest.raises(ValueError):
        collect(make_group("n0", 1), probe, 100, 50)


# --- scoring --------------------------------------------------------------------

def test_all_zero_series_scores_zero():
    result = score(component_series())
    assert (result.compute, result.memory, result.network, result.overall) == (
        0.0, 0.0, 0.0, 0.0)


def test_fully_saturated_scores_one():
    rng = random.Random(3)
    for _ in range(10):
        w = [rng.random() + 0.05 for _ in range(3)]
        total = sum(w)
        weights = ScoreWeights(*(x / total for x in w))
        series = component_series(sm=1.0, tensor=1.0, membw=1.0,
                                  tx=100.0, rx=100.0)
        result = score(series, weights, link_peak_gbps=100.0)
        assert result.overall == pytest.approx(1.0)


def test_busy_wait_separation_oracle():
    # Hand-computed: 0.5*max(0.05, 0) + 0.3*0.02 + 0.2*0 = 0.031.
    series = component_series(sm=0.05, tensor=0.0, membw=0.02)
    result = score(series)
    assert result.overall == pytest.approx(0.031, abs=1e-9)
    assert result.overall == pytest.approx(
        oracle_weighted_score(0.05, 0.02, 0.0, (0.5, 0.3, 0.2)), abs=1e-12)


def test_busy_wait_fixture_scores_low_despite_full_utilization():
    probe = FixtureProbe({"n0": BUNDLED["busy-wait"]})
    series = collect(make_group("n0", 4), probe, 100, 1000)
    util = [s for s in series if s.field is MetricField.GpuUtilization]
    assert all(v == 1.0 for s in util for _, v in s.samples)
    result = score(series)
    assert result.overall == pytest.approx(0.031, abs=1e-9)
    assert result.overall < 0.05


def test_compute_uses_pointwise_max():
    series = component_series(sm=0.2, tensor=0.8)
    assert score(series).compute == pytest.approx(0.8)


def test_network_clamps_at_link_peak():
    series = component_series(tx=300.0, rx=300.0)
    result = score(series, link_peak_gbps=100.0)
    assert result.network == 1.0


def test_weight_degeneracy_exact():
    series = component_series(sm=0.37, tensor=0.11, membw=0.9, tx=5.0, rx=5.0)
    result = score(series, ScoreWeights(1.0, 0.0, 0.0))
    assert result.overall == result.compute


def test_missing_component_with_positive_weight_raises():
    series = constant_series(MetricField.SmActivity, 0.5)
    with pytest.raises(MissingField):
        score(series)  # memory weight 0.3 but no MemoryBandwidthUtilization


def test_missing_component_with_zero_weight_is_fine():
    series = constant_series(MetricField.SmActivity, 0.5)
    result = score(series, ScoreWeights(1.0, 0.0, 0.0))
    assert result.overall == pytest.approx(0.5)


def test_score_bounded_on_random_fixtures():
    rng = random.Random(17)
    for _ in range(100):
        series = component_series(
            sm=rng.random(), tensor=rng.random(), membw=rng.random(),
            tx=rng.uniform(0, 400), rx=rng.uniform(0, 400),
            gpus=rng.randrange(1, 5),
        )
        result = score(series)
        for value in (result.compute, result.memory, result.network, result.overall):
            assert 0.0 <= value <= 1.0


def test_component_monotonicity_under_perturbation():
    rng = random.Random(23)
    for _ in range(100):
        base_vals = dict(
            sm=rng.random() * 0.8, tensor=rng.random() * 0.8,
            membw=rng.random() * 0.8, tx=rng.uniform(0, 80), rx=rng.uniform(0, 80),
        )
        before = score(component_series(**base_vals))
        bumped = dict(base_vals)
        key = rng.choice(sorted(bumped))
        limit = 1.0 if key in ("sm", "tensor", "membw") else 400.0
        bumped[key] = min(limit, bumped[key] + rng.uniform(0.01, 0.2) * limit)
        after = score(component_series(**bumped))
        assert after.compute >= before.compute - 1e-12
        assert after.memory >= before.memory - 1e-12
        assert after.network >= before.network - 1e-12
        assert after.overall >= before.overall - 1e-12


def test_weights_validation():
    with pytest.raises(ValueError):
        ScoreWeights(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ScoreWeights(-0.5, 1.0, 0.5)
    assert ScoreWeights.parse("0.5,0.3,0.2") == ScoreWeights()


def test_score_invariant_weighted_sum():
    with pytest.raises(ValueError):
        SaturationScore(compute=1.0, memory=0.0, network=0.0, overall=0.9,
                        weights=ScoreWeights(), window=(0, 1))


def test_empty_series_rejected():
    with pytest.raises(ValueError):
        score([])


# --- export ---------------------------------------------------------------------

def test_export_csv(tmp_path):
    series = constant_series(MetricField.SmActivity, 0.5, gpus=2)
    paths = export_series(series, "csv", tmp_path)
    assert [p.name for p in paths] == ["SmActivity.csv"]
    text = paths[0].read_text()
    assert text.splitlines()[0] == "timestamp,gpu,value"
    assert read_series_csv(paths[0]) == series


def test_export_two_fields_two_files(tmp_path):
    series = constant_series(MetricField.SmActivity, 0.5) + constant_series(
        MetricField.TensorActivity, 0.2)
    paths = export_series(series, "csv", tmp_path)
    assert sorted(p.name for p in paths) == ["SmActivity.csv", "TensorActivity.csv"]


def test_export_empty_is_noop(tmp_path):
    assert export_series([], "csv", tmp_path) == []


def test_export_json_round_trip(tmp_path):
    probe = FixtureProbe({"n0": BUNDLED["healthy"]}, seed=5)
    series = collect(make_group("n0", 2), probe, 50, 500)
    paths = export_series(series, "json", tmp_path)
    recovered = []
    for path in paths:
        recovered.extend(read_series_json(path))
    key = lambda s: (s.gpu, s.field.name)
    assert sorted(recovered, key=key) == sorted(series, key=key)


def test_export_rejects_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        export_series(constant_series(MetricField.SmActivity, 0.1), "xml", tmp_path)


def test_render_figures(tmp_path):
    probe = FixtureProbe({"n0": BUNDLED["healthy"]})
    series = collect(make_group("n0", 2), probe, 100, 500)
    result = score(series)
    paths = render_figures(series, result, tmp_path)
    names = {p.name for p in paths}
    assert "saturation_components.png" in names
    assert "SmActivity.png" in names
    for path in paths:
        assert path.stat().st_size > 0
