"""Opt-in central collection of vetting reports.

The store is a single-writer append-only JSON-lines log plus an in-memory
index rebuilt on open; an ingest is acknowledged only after the record is
flushed and fsynced, so an acknowledged envelope survives a crash.
Byte-identical resubmissions (same job id and content hash) are idempotent
and return the original key.

HTTP wire (all endpoints require ``Authorization: Bearer <token>``):

    POST /v1/reports                          body: envelope JSON
        -> 200 {"job_id": ..., "sequence": ...}
    GET  /v1/nodes/{id}/history?from=&to=
        -> 200 {"node": ..., "history": [[timestamp, eval_name, status], ...]}
    GET  /v1/fleet?state=&min_failures=
        -> 200 {"fleet": [{node, last_health, failures_24h, rules_state,
                           last_seen}, ...]}

Incoming reports also feed the rules engine: every failed eval becomes a
failure event, a fully passing report a success event, and an
unresponsive agent a failure event named "agent-timeout".
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import yaml

from .executor import JobContext, NodeHealth, NodeReport, Verdict
from .evaluations import EvalStatus
from .rules import (
    DEFAULT_CATALOG,
    ActionEffect,
    HealthEvent,
    OutOfOrderEvent,
    Rule,
    RulesConfig,
    RulesEngine,
    export_drain_list,
)

__all__ = [
    "SCHEMA_VERSION",
    "SchemaMismatch",
    "StorageFailure",
    "ReportEnvelope",
    "StoredReportKey",
    "ReportStore",
    "NodeSummary",
    "CollectorService",
    "CollectorConfig",
    "CollectorHttpServer",
    "CollectorClient",
    "derive_events",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
AGENT_TIMEOUT_EVAL = "agent-timeout"


class SchemaMismatch(ValueError):
    """An envelope that violates the documented schema."""


class StorageFailure(RuntimeError):
    """The backing store cannot be read or written."""


@dataclass(frozen=True)
class StoredReportKey:
    job_id: str
    sequence: int

    def to_dict(self) -> dict:
        return {"job_id": self.job_id, "sequence": self.sequence}


@dataclass(frozen=True)
class ReportEnvelope:
    job_context: JobContext
    verdict: Verdict
    reports: tuple[NodeReport, ...]
    submitted_at: float
    submitter: str = "anonymous"
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise SchemaMismatch(
                f"unrecognized schema version {self.schema_version!r}")
        allowed = set(self.job_context.nodes)
        outside = [r.node for r in self.reports if r.node not in allowed]
        if outside:
            raise SchemaMismatch(f"reports for nodes outside the job: {outside}")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "submitted_at": self.submitted_at,
            "submitter": self.submitter,
            "job_context": self.job_context.to_dict(),
            "verdict": self.verdict.to_dict(),
            "reports": [r.to_dict() for r in self.reports],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReportEnvelope":
        try:
            return cls(
                schema_version=data.get("schema_version", ""),
                submitted_at=float(data["submitted_at"]),
                submitter=data.get("submitter", "anonymous"),
                job_context=JobContext.from_dict(data["job_context"]),
                verdict=Verdict.from_dict(data["verdict"]),
                reports=tuple(NodeReport.from_dict(r)
                              for r in data.get("reports", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaMismatch):
                raise
            raise SchemaMismatch(f"malformed envelope: {exc}") from exc


def content_hash(envelope_dict: dict) -> str:
    canonical = json.dumps(envelope_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ReportStore:
    """Append-only envelope log with a rebuilt-on-open index."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._by_hash: dict[tuple[str, str], StoredReportKey] = {}
        self._next_sequence: dict[str, int] = {}
        self._entries: list[tuple[StoredReportKey, dict]] = []
        self._replay()

    def _replay(self) -> None:
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            return
        try:
            with self.path.open(encoding="utf-8") as handle:
                for line_no, line in enumerate(handle, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    key = StoredReportKey(record["job_id"], record["sequence"])
                    envelope = record["envelope"]
                    self._index(key, record["hash"], envelope)
        except (OSError, ValueError, KeyError) as exc:
            raise StorageFailure(f"cannot replay {self.path}: {exc}") from exc

    def _index(self, key: StoredReportKey, digest: str, envelope: dict) -> None:
        self._by_hash[(key.job_id, digest)] = key
        self._next_sequence[key.job_id] = max(
            self._next_sequence.get(key.job_id, 0), key.sequence)
        self._entries.append((key, envelope))

    def append(self, envelope: ReportEnvelope) -> tuple[StoredReportKey, bool]:
        """Durably persist; returns (key, newly_stored)."""
        data = envelope.to_dict()
        digest = content_hash(data)
        with self._lock:
            existing = self._by_hash.get((envelope.job_context.job_id, digest))
            if existing is not None:
                return existing, False
            sequence = self._next_sequence.get(envelope.job_context.job_id, 0) + 1
            key = StoredReportKey(envelope.job_context.job_id, sequence)
            record = {"job_id": key.job_id, "sequence": key.sequence,
                      "hash": digest, "envelope": data}
            try:
                with self.path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record, sort_keys=True) + "\n")
                    handle.flush()
                    os.fsync(handle.fileno())
            except OSError as exc:
                raise StorageFailure(f"cannot append to {self.path}: {exc}") from exc
            self._index(key, digest, data)
            return key, True

    def envelopes(self) -> list[tuple[StoredReportKey, dict]]:
        with self._lock:
            return list(self._entries)

    def prune(self, older_than: float) -> int:
        """Drop envelopes submitted before the cutoff; returns the count.

        This rewrite is the single exception to the append-only contract
        and only runs when retention is explicitly configured.
        """
        with self._lock:
            keep = [(k, e) for k, e in self._entries
                    if e.get("submitted_at", 0.0) >= older_than]
            dropped = len(self._entries) - len(keep)
            if not dropped:
                return 0
            tmp = self.path.with_suffix(".tmp")
            try:
                with tmp.open("w", encoding="utf-8") as handle:
                    for key, envelope in keep:
                        record = {"job_id": key.job_id, "sequence": key.sequence,
                                  "hash": content_hash(envelope),
                                  "envelope": envelope}
                        handle.write(json.dumps(record, sort_keys=True) + "\n")
                    handle.flush()
                    os.fsync(handle.fileno())
                os.replace(tmp, self.path)
            except OSError as exc:
                raise StorageFailure(f"cannot prune {self.path}: {exc}") from exc
            self._entries = []
            self._by_hash = {}
            self._next_sequence = {}
            for key, envelope in keep:
                self._index(key, content_hash(envelope), envelope)
            return dropped


def derive_events(envelope: ReportEnvelope) -> list[HealthEvent]:
    """Translate one envelope into rules-engine health events."""
    events: list[HealthEvent] = []
    ts = envelope.submitted_at
    for report in envelope.reports:
        if report.agent_status.value != "reported":
            events.append(HealthEvent(node=report.node, timestamp=ts,
                                      kind="failure", eval_name=AGENT_TIMEOUT_EVAL))
            continue
        failures = [r for r in report.results if r.status is EvalStatus.FAIL]
        unknowns = [r for r in report.results if r.status is EvalStatus.UNKNOWN]
        for result in failures:
            events.append(HealthEvent(node=report.node, timestamp=ts,
                                      kind="failure", eval_name=result.eval_name))
        if not failures and not unknowns:
            events.append(HealthEvent(node=report.node, timestamp=ts,
                                      kind="success"))
    return events


@dataclass(frozen=True)
class NodeSummary:
    node: str
    last_health: str
    failures_24h: int
    rules_state: str
    last_seen: float

    def to_dict(self) -> dict:
        return {"node": self.node, "last_health": self.last_health,
                "failures_24h": self.failures_24h,
                "rules_state": self.rules_state, "last_seen": self.last_seen}


class CollectorService:
    """Ingest, query, and automated-handling glue over one data directory."""

    def __init__(
        self,
        data_dir: str | Path,
        catalog: tuple[Rule, ...] = DEFAULT_CATALOG,
        rules_config: RulesConfig = RulesConfig(),
        drain_list_path: str | Path | None = None,
        ticket_webhook=None,  # callable(dict) -> None
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.store = ReportStore(self.data_dir / "reports.jsonl")
        self.operator_log = self.data_dir / "operator-events.jsonl"
        self._catalog = catalog
        self._rules_config = rules_config
        self._drain_list_path = Path(drain_list_path) if drain_list_path else None
        self._ticket_webhook = ticket_webhook
        self._lock = threading.Lock()
        self.engine = RulesEngine(catalog, rules_config)
        # Effects emitted by live ingests/releases (not by log replays).
        self.effects_log: list[ActionEffect] = []
        self._rebuild_engine()

    # -- rules maintenance

    def all_events(self) -> list[HealthEvent]:
        events: list[HealthEvent] = []
        for _, raw in self.store.envelopes():
            events.extend(derive_events(ReportEnvelope.from_dict(raw)))
        if self.operator_log.exists():
            for line in self.operator_log.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    events.append(HealthEvent.from_dict(json.loads(line)))
        events.sort(key=lambda e: e.timestamp)
        return events

    def _rebuild_engine(self) -> None:
        self.engine = RulesEngine(self._catalog, self._rules_config)
        for event in self.all_events():
            self.engine.observe(event)

    def _feed(self, events: list[HealthEvent]) -> list[ActionEffect]:
        effects: list[ActionEffect] = []
        try:
            for event in events:
                effects.extend(self.engine.observe(event))
        except OutOfOrderEvent:
            # A stale envelope arrived late: rebuild from the full log.
            logger.info("stale events; rebuilding rules state from the log")
            self._rebuild_engine()
            effects = []
        self.effects_log.extend(effects)
        self._after_effects(effects)
        return effects

    def _after_effects(self, effects: list[ActionEffect]) -> None:
        if self._drain_list_path is not None and any(
            e.effect == "drain-list-update" for e in effects
        ):
            export_drain_list(self.engine, self._drain_list_path)
        if self._ticket_webhook is not None:
            for effect in effects:
                if effect.effect == "ticket":
                    try:
                        self._ticket_webhook(effect.to_dict())
                    except Exception as exc:
                        logger.warning("ticket webhook failed: %s", exc)

    # -- operations

    def ingest(self, envelope: ReportEnvelope) -> StoredReportKey:
        with self._lock:
            key, new = self.store.append(envelope)
            if new:
                self._feed(derive_events(envelope))
            return key

    def release(self, node: str, timestamp: float | None = None) -> None:
        """Operator command: take a drained/ticketed node off the list."""
        event = HealthEvent(node=node, timestamp=timestamp or time.time(),
                            kind="release")
        with self._lock:
            with self.operator_log.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
                handle.flush()
                os.fsync(handle.fileno())
            self._feed([event])

    def query_node_history(
        self, node: str, window: tuple[float, float] | None = None
    ) -> list[tuple[float, str, str]]:
        lo, hi = window if window else (float("-inf"), float("inf"))
        rows: list[tuple[float, int, str, str]] = []
        for key, raw in self.store.envelopes():
            ts = raw.get("submitted_at", 0.0)
            if not lo <= ts <= hi:
                continue
            for report in raw.get("reports", []):
                if report.get("node") != node:
                    continue
                for result in report.get("results", []):
                    rows.append((ts, key.sequence, result["eval_name"],
                                 result["status"]))
        rows.sort(key=lambda r: (r[0], r[1]))
        return [(ts, eval_name, status) for ts, _, eval_name, status in rows]

    def query_fleet(
        self,
        state: str | None = None,
        min_failures: int | None = None,
        now: float | None = None,
    ) -> list[NodeSummary]:
        now = time.time() if now is None else now
        last_seen: dict[str, float] = {}
        last_health: dict[str, tuple[float, int, str]] = {}
        failures: dict[str, int] = {}
        for key, raw in self.store.envelopes():
            ts = raw.get("submitted_at", 0.0)
            for node, assessment in raw.get("verdict", {}).get(
                "per_node", {}
            ).items():
                last_seen[node] = max(last_seen.get(node, 0.0), ts)
                order = (ts, key.sequence, assessment.get("health", "unknown"))
                if node not in last_health or order[:2] >= last_health[node][:2]:
                    last_health[node] = order
            for report in raw.get("reports", []):
                if ts <= now - 24 * 3600.0:
                    continue
                node = report.get("node")
                for result in report.get("results", []):
                    if result.get("status") == "fail":
                        failures[node] = failures.get(node, 0) + 1

        nodes = set(last_seen) | set(self.engine.records())
        summaries = []
        for node in sorted(nodes):
            summary = NodeSummary(
                node=node,
                last_health=last_health.get(node, (0, 0, "unknown"))[2],
                failures_24h=failures.get(node, 0),
                rules_state=self.engine.record(node).state.value,
                last_seen=last_seen.get(node, 0.0),
            )
            if state is not None and summary.rules_state != state:
                continue
            if min_failures is not None and summary.failures_24h < min_failures:
                continue
            summaries.append(summary)
        return summaries


# --- HTTP layer ----------------------------------------------------------------

@dataclass(frozen=True)
class CollectorConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8097
    data_dir: str = "collector-data"
    token_file: str | None = None
    token: str | None = None
    retention_days: float | None = None
    drain_list_path: str | None = None
    ticket_webhook_url: str | None = None

    @classmethod
    def load(cls, path: str | Path) -> "CollectorConfig":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls(
            listen_host=data.get("listen_host", "127.0.0.1"),
            listen_port=int(data.get("listen_port", 8097)),
            data_dir=data.get("data_dir", "collector-data"),
            token_file=data.get("token_file"),
            token=data.get("token"),
            retention_days=data.get("retention_days"),
            drain_list_path=data.get("drain_list_path"),
            ticket_webhook_url=data.get("ticket_webhook_url"),
        )

    def resolve_token(self) -> str | None:
        if self.token:
            return self.token
        if self.token_file:
            return Path(self.token_file).read_text(encoding="utf-8").strip()
        return None


def _post_webhook(url: str):
    def post(payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        request = urllib.request.Request(
            url, data=body, headers={"Content-Type": "application/json"})
        urllib.request.urlopen(request, timeout=10).close()

    return post


class CollectorHttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, service: CollectorService, host: str = "127.0.0.1",
                 port: int = 0, token: str | None = None):
        self.service = service
        self.token = token
        super().__init__((host, port), _CollectorHandler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    @classmethod
    def from_config(cls, config: CollectorConfig) -> "CollectorHttpServer":
        webhook = (_post_webhook(config.ticket_webhook_url)
                   if config.ticket_webhook_url else None)
        service = CollectorService(
            config.data_dir,
            drain_list_path=config.drain_list_path,
            ticket_webhook=webhook,
        )
        if config.retention_days:
            service.store.prune(time.time() - config.retention_days * 86400.0)
        return cls(service, config.listen_host, config.listen_port,
                   config.resolve_token())


class _CollectorHandler(BaseHTTPRequestHandler):
    server: CollectorHttpServer

    def log_message(self, fmt, *args):  # route through logging, not stderr
        logger.debug("http: " + fmt, *args)

    def _reply(self, code: int, payload: dict) -> None:
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _authorized(self) -> bool:
        token = self.server.token
        if token is None:
            return True
        header = self.headers.get("Authorization", "")
        return header == f"Bearer {token}"

    def do_POST(self) -> None:
        if not self._authorized():
            self._reply(401, {"error": "unauthorized"})
            return
        if urlparse(self.path).path != "/v1/reports":
            self._reply(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            envelope = ReportEnvelope.from_dict(
                json.loads(self.rfile.read(length).decode("utf-8")))
        except (ValueError, SchemaMismatch) as exc:
            self._reply(400, {"error": str(exc)})
            return
        try:
            key = self.server.service.ingest(envelope)
        except StorageFailure as exc:
            self._reply(500, {"error": str(exc)})
            return
        self._reply(200, key.to_dict())

    def do_GET(self) -> None:
        if not self._authorized():
            self._reply(401, {"error": "unauthorized"})
            return
        parsed = urlparse(self.path)
        query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
        parts = parsed.path.strip("/").split("/")
        try:
            if len(parts) == 4 and parts[:2] == ["v1", "nodes"] \
                    and parts[3] == "history":
                window = None
                if "from" in query or "to" in query:
                    window = (float(query.get("from", "-inf")),
                              float(query.get("to", "inf")))
                history = self.server.service.query_node_history(parts[2], window)
                self._reply(200, {"node": parts[2],
                                  "history": [list(row) for row in history]})
            elif parts == ["v1", "fleet"]:
                summaries = self.server.service.query_fleet(
                    state=query.get("state"),
                    min_failures=int(query["min_failures"])
                    if "min_failures" in query else None,
                    now=float(query["now"]) if "now" in query else None,
                )
                self._reply(200, {"fleet": [s.to_dict() for s in summaries]})
            else:
                self._reply(404, {"error": "not found"})
        except StorageFailure as exc:
            self._reply(500, {"error": str(exc)})
        except ValueError as exc:
            self._reply(400, {"error": str(exc)})


class CollectorClient:
    """Thin submission/query client for the HTTP endpoints."""

    def __init__(self, url: str, token: str | None = None, timeout_s: float = 10.0):
        self.url = url.rstrip("/")
        self.token = token
        self.timeout_s = timeout_s

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def _request(self, path: str, payload: dict | None = None) -> dict:
        data = json.dumps(payload).encode("utf-8") if payload is not None else None
        request = urllib.request.Request(self.url + path, data=data,
                                         headers=self._headers())
        try:
            with urllib.request.urlopen(request, timeout=self.timeout_s) as reply:
                return json.loads(reply.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")
            raise StorageFailure(f"collector returned {exc.code}: {detail}") from exc
        except OSError as exc:
            raise StorageFailure(f"collector unreachable: {exc}") from exc

    def submit(self, envelope: ReportEnvelope) -> StoredReportKey:
        reply = self._request("/v1/reports", envelope.to_dict())
        return StoredReportKey(reply["job_id"], reply["sequence"])

    def node_history(self, node: str) -> list:
        return self._request(f"/v1/nodes/{node}/history")["history"]

    def fleet(self, state: str | None = None) -> list:
        suffix = f"?state={state}" if state else ""
        return self._request(f"/v1/fleet{suffix}")["fleet"]
