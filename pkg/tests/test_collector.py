"""Collector tests: store durability, idempotence, queries, HTTP wire."""

from __future__ import annotations

import json

import pytest

from vetgate.collector import (
    AGENT_TIMEOUT_EVAL,
    CollectorClient,
    CollectorConfig,
    CollectorHttpServer,
    CollectorService,
    ReportEnvelope,
    ReportStore,
    SchemaMismatch,
    StorageFailure,
    StoredReportKey,
    derive_events,
)
from vetgate.evaluations import EvalResult, EvalStatus, ThresholdViolation
from vetgate.executor import (
    AgentStatus,
    JobContext,
    NodeReport,
    VerdictPolicy,
    decide_verdict,
)

H = 3600.0


def make_reports(nodes, bad=(), unresponsive=()):
    reports = []
    for node in nodes:
        if node in unresponsive:
            reports.append(NodeReport(node, (), 0.0, 1.0, AgentStatus.TIMED_OUT))
            continue
        if node in bad:
            result = EvalResult(
                eval_name="Check GPU", status=EvalStatus.FAIL,
                measured={"max_gpu_temperature": 45.0},
                violations=(ThresholdViolation("max_temp", 30, 45.0),))
        else:
            result = EvalResult(eval_name="Check GPU", status=EvalStatus.PASS,
                                measured={"max_gpu_temperature": 25.0})
        reports.append(NodeReport(node, (result,), 0.0, 1.0, AgentStatus.REPORTED))
    return reports


def make_envelope(job="job-1", nodes=("n1", "n2"), bad=(), unresponsive=(),
                  submitted_at=1000.0, flexible=True, min_nodes=1):
    ctx = JobContext(job_id=job, nodes=tuple(nodes), flexible=flexible,
                     min_nodes=min_nodes)
    reports = make_reports(nodes, bad, unresponsive)
    verdict = decide_verdict(reports, ctx,
                             VerdictPolicy(max_exclusion_fraction=1.0))
    return ReportEnvelope(job_context=ctx, verdict=verdict,
                          reports=tuple(reports), submitted_at=submitted_at,
                          submitter="tester")


# --- store --------------------------------------------------------------------

def test_first_ingest_gets_sequence_one(tmp_path):
    service = CollectorService(tmp_path)
    key = service.ingest(make_envelope())
    assert key == StoredReportKey("job-1", 1)


def test_resubmission_is_idempotent(tmp_path):
    service = CollectorService(tmp_path)
    envelope = make_envelope()
    first = service.ingest(envelope)
    again = service.ingest(envelope)
    assert first == again
    assert len(service.store.envelopes()) == 1


def test_sequences_increase_per_job(tmp_path):
    service = CollectorService(tmp_path)
    k1 = service.ingest(make_envelope(submitted_at=1000.0))
    k2 = service.ingest(make_envelope(submitted_at=2000.0))
    k3 = service.ingest(make_envelope(job="job-2", submitted_at=1500.0))
    assert (k1.sequence, k2.sequence) == (1, 2)
    assert k3 == StoredReportKey("job-2", 1)


def test_envelope_rejects_nodes_outside_job():
    ctx = JobContext(job_id="j", nodes=("n1",))
    reports = make_reports(["n1"])
    verdict = decide_verdict(reports, ctx, VerdictPolicy())
    stray = make_reports(["n2"])[0]
    with pytest.raises(SchemaMismatch):
        ReportEnvelope(job_context=ctx, verdict=verdict,
                       reports=(reports[0], stray), submitted_at=1.0)


def test_envelope_rejects_unknown_schema_version():
    envelope = make_envelope()
    data = envelope.to_dict()
    data["schema_version"] = "999"
    with pytest.raises(SchemaMismatch):
        ReportEnvelope.from_dict(data)


def test_envelope_round_trip():
    envelope = make_envelope(bad=("n2",))
    assert ReportEnvelope.from_dict(envelope.to_dict()) == envelope


def test_durability_across_restart(tmp_path):
    service = CollectorService(tmp_path)
    key = service.ingest(make_envelope(bad=("n2",)))
    del service  # simulate process death after the acknowledged ingest

    reborn = CollectorService(tmp_path)
    envelopes = reborn.store.envelopes()
    assert len(envelopes) == 1
    assert envelopes[0][0] == key
    history = reborn.query_node_history("n2")
    assert history == [(1000.0, "Check GPU", "fail")]
    # Idempotence also survives the restart.
    assert reborn.ingest(make_envelope(bad=("n2",))) == key


def test_corrupt_store_raises_storage_failure(tmp_path):
    path = tmp_path / "reports.jsonl"
    path.write_text("not json\n")
    with pytest.raises(StorageFailure):
        ReportStore(path)


def test_prune_retention(tmp_path):
    service = CollectorService(tmp_path)
    service.ingest(make_envelope(submitted_at=1000.0))
    service.ingest(make_envelope(submitted_at=9000.0))
    assert service.store.prune(5000.0) == 1
    remaining = service.store.envelopes()
    assert len(remaining) == 1
    assert remaining[0][1]["submitted_at"] == 9000.0


# --- queries ------------------------------------------------------------------

def test_history_empty_store(tmp_path):
    assert CollectorService(tmp_path).query_node_history("n1") == []


def test_history_three_failures(tmp_path):
    service = CollectorService(tmp_path)
    for i in range(3):
        service.ingest(make_envelope(submitted_at=1000.0 + i * H, bad=("n2",)))
    history = service.query_node_history("n2")
    assert [status for _, _, status in history] == ["fail", "fail", "fail"]
    stamps = [ts for ts, _, _ in history]
    assert stamps == sorted(stamps)


def test_history_window_excludes(tmp_path):
    service = CollectorService(tmp_path)
    service.ingest(make_envelope(submitted_at=1000.0))
    assert service.query_node_history("n1", window=(2000.0, 3000.0)) == []


def test_history_matches_raw_recount(tmp_path):
    service = CollectorService(tmp_path)
    for i in range(4):
        service.ingest(make_envelope(submitted_at=1000.0 + i,
                                     bad=("n2",) if i % 2 else ()))
    # Independent recount straight from the log file.
    raw_rows = []
    for line in (tmp_path / "reports.jsonl").read_text().splitlines():
        record = json.loads(line)
        envelope = record["envelope"]
        for report in envelope["reports"]:
            if report["node"] != "n2":
                continue
            for result in report["results"]:
                raw_rows.append((envelope["submitted_at"], result["eval_name"],
                                 result["status"]))
    raw_rows.sort(key=lambda r: r[0])
    assert service.query_node_history("n2") == raw_rows


def test_fleet_empty_filter_on_fresh_store(tmp_path):
    assert CollectorService(tmp_path).query_fleet(state="drained") == []


def test_fleet_failure_filter_matches_recount(tmp_path):
    service = CollectorService(tmp_path)
    service.ingest(make_envelope(submitted_at=1000.0, bad=("n2",)))
    service.ingest(make_envelope(submitted_at=2000.0))
    rows = service.query_fleet(min_failures=1, now=3000.0)
    assert [s.node for s in rows] == ["n2"]
    assert rows[0].failures_24h == 1


def test_fleet_reports_rules_state_after_drain(tmp_path):
    service = CollectorService(tmp_path)
    for i in range(3):
        service.ingest(make_envelope(submitted_at=1000.0 + i * H, bad=("n2",)))
    drained = service.query_fleet(state="drained", now=1000.0 + 3 * H)
    assert [s.node for s in drained] == ["n2"]
    assert service.engine.drain_list() == frozenset({"n2"})


def test_fleet_last_health(tmp_path):
    service = CollectorService(tmp_path)
    service.ingest(make_envelope(submitted_at=1000.0, bad=("n2",)))
    by_node = {s.node: s for s in service.query_fleet(now=2000.0)}
    assert by_node["n2"].last_health == "unhealthy"
    assert by_node["n1"].last_health == "healthy"


def test_release_persists_across_restart(tmp_path):
    service = CollectorService(tmp_path)
    for i in range(3):
        service.ingest(make_envelope(submitted_at=1000.0 + i * H, bad=("n2",)))
    assert service.engine.drain_list() == frozenset({"n2"})
    service.release("n2", timestamp=1000.0 + 4 * H)
    assert service.engine.drain_list() == frozenset()

    reborn = CollectorService(tmp_path)
    assert reborn.engine.drain_list() == frozenset()


def test_derive_events():
    envelope = make_envelope(nodes=("n1", "n2", "n3"), bad=("n2",),
                             unresponsive=("n3",), min_nodes=1)
    events = derive_events(envelope)
    kinds = {(e.node, e.kind, e.eval_name) for e in events}
    assert ("n1", "success", None) in kinds
    assert ("n2", "failure", "Check GPU") in kinds
    assert ("n3", "failure", AGENT_TIMEOUT_EVAL) in kinds


# --- HTTP ---------------------------------------------------------------------

@pytest.fixture()
def http_server(tmp_path):
    service = CollectorService(tmp_path)
    server = CollectorHttpServer(service, token="sekrit")
    server.serve_in_background()
    yield server
    server.shutdown()
    server.server_close()


def test_http_ingest_and_queries(http_server):
    client = CollectorClient(http_server.url, token="sekrit")
    key = client.submit(make_envelope(bad=("n2",)))
    assert key == StoredReportKey("job-1", 1)
    assert client.submit(make_envelope(bad=("n2",))) == key

    history = client.node_history("n2")
    assert history == [[1000.0, "Check GPU", "fail"]]
    fleet = client.fleet()
    assert {entry["node"] for entry in fleet} == {"n1", "n2"}


def test_http_rejects_bad_token(http_server):
    client = CollectorClient(http_server.url, token="wrong")
    with pytest.raises(StorageFailure) as err:
        client.submit(make_envelope())
    assert "401" in str(err.value)


def test_http_rejects_schema_mismatch(http_server):
    client = CollectorClient(http_server.url, token="sekrit")
    bad = make_envelope().to_dict()
    bad["schema_version"] = "999"
    with pytest.raises(StorageFailure) as err:
        client._request("/v1/reports", bad)
    assert "400" in str(err.value)


def test_http_unknown_path(http_server):
    client = CollectorClient(http_server.url, token="sekrit")
    with pytest.raises(StorageFailure) as err:
        client._request("/v1/bogus")
    assert "404" in str(err.value)


def test_collector_config(tmp_path):
    config_path = tmp_path / "collector.yaml"
    token_path = tmp_path / "token"
    token_path.write_text("tok-123\n")
    config_path.write_text(
        f"listen_host: 127.0.0.1\nlisten_port: 0\n"
        f"data_dir: {tmp_path / 'data'}\ntoken_file: {token_path}\n"
    )
    config = CollectorConfig.load(config_path)
    assert config.resolve_token() == "tok-123"
    server = CollectorHttpServer.from_config(config)
    try:
        client = CollectorClient(server.url, token="tok-123")
        server.serve_in_background()
        assert client.fleet() == []
    finally:
        server.shutdown()
        server.server_close()
