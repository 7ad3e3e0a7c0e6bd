"""Protocol execution across an allocation and the early-abort verdict.

The coordinator (lexicographically first node of the allocation) fans the
protocol out to one agent per node over a transport, gathers NodeReports
until the deadline, and renders the verdict:

* every node healthy                       -> Continue (exit 0)
* any unhealthy node and the job is strict -> Abort (exit 4)
* unhealthy nodes, flexible allocation     -> ContinueExcluding (exit 3),
  unless too few healthy nodes remain or the unhealthy fraction exceeds
  the policy bound, which abort instead.

Nodes that miss the deadline are TimedOut and count unhealthy; results
arriving after the deadline never alter the verdict.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .evaluations import (
    BandwidthSettings,
    CollectiveComm,
    EvalResult,
    EvalStatus,
    run_eval,
)
from .hostlist import MalformedHostlist, compress_hostlist, expand_hostlist
from .probe import Probe
from .protocol import VettingProtocol, parse_protocol, serialize_protocol
from .transport import Arrival, CoordinatorFailure, Transport

__all__ = [
    "AgentStatus",
    "NodeHealth",
    "Decision",
    "NodeReport",
    "NodeAssessment",
    "JobContext",
    "VerdictPolicy",
    "Verdict",
    "MissingEnvironment",
    "EXIT_CONTINUE",
    "EXIT_USAGE",
    "EXIT_EXCLUDE",
    "EXIT_ABORT",
    "exit_code",
    "discover_context",
    "make_agent",
    "decide_verdict",
    "run_vetting",
    "emit_exclusion",
]

logger = logging.getLogger(__name__)

EXIT_CONTINUE = 0
EXIT_USAGE = 2
EXIT_EXCLUDE = 3
EXIT_ABORT = 4

_NODELIST_VARS = ("SLURM_JOB_NODELIST", "SLURM_NODELIST")
_JOBID_VARS = ("SLURM_JOB_ID", "SLURM_JOBID")


class MissingEnvironment(RuntimeError):
    """Allocation context variables are absent from the environment."""


class AgentStatus(Enum):
    REPORTED = "reported"
    TIMED_OUT = "timed-out"
    UNREACHABLE = "unreachable"


class NodeHealth(Enum):
    HEALTHY = "healthy"
    UNHEALTHY = "unhealthy"
    UNRESPONSIVE = "unresponsive"


class Decision(Enum):
    CONTINUE = "continue"
    ABORT = "abort"
    CONTINUE_EXCLUDING = "continue-excluding"


def exit_code(decision: Decision) -> int:
    return {
        Decision.CONTINUE: EXIT_CONTINUE,
        Decision.CONTINUE_EXCLUDING: EXIT_EXCLUDE,
        Decision.ABORT: EXIT_ABORT,
    }[decision]


@dataclass(frozen=True)
class NodeReport:
    node: str
    results: tuple[EvalResult, ...]
    started: float
    finished: float
    agent_status: AgentStatus

    def __post_init__(self) -> None:
        if self.agent_status is not AgentStatus.REPORTED and self.results:
            raise ValueError("timed-out/unreachable reports carry no results")

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "results": [r.to_dict() for r in self.results],
            "started": self.started,
            "finished": self.finished,
            "agent_status": self.agent_status.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NodeReport":
        return cls(
            node=data["node"],
            results=tuple(EvalResult.from_dict(r) for r in data.get("results", [])),
            started=data.get("started", 0.0),
            finished=data.get("finished", 0.0),
            agent_status=AgentStatus(data["agent_status"]),
        )


@dataclass(frozen=True)
class JobContext:
    job_id: str
    nodes: tuple[str, ...]
    tasks_per_node: int = 1
    gpus_per_task: int = 1
    flexible: bool = False
    min_nodes: int = 0  # 0 means "full allocation size"

    def __post_init__(self) -> None:
        if not self.nodes:
            raise ValueError("allocation must contain at least one node")
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("allocation node ids must be unique")
        if self.min_nodes == 0:
            object.__setattr__(self, "min_nodes", len(self.nodes))
        if not 1 <= self.min_nodes <= len(self.nodes):
            raise ValueError("min_nodes must be within [1, allocation size]")
        if not self.flexible and self.min_nodes != len(self.nodes):
            raise ValueError("a strict allocation requires min_nodes == node count")

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "nodes": list(self.nodes),
            "tasks_per_node": self.tasks_per_node,
            "gpus_per_task": self.gpus_per_task,
            "flexible": self.flexible,
            "min_nodes": self.min_nodes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "JobContext":
        return cls(
            job_id=data["job_id"],
            nodes=tuple(data["nodes"]),
            tasks_per_node=data.get("tasks_per_node", 1),
            gpus_per_task=data.get("gpus_per_task", 1),
            flexible=data.get("flexible", False),
            min_nodes=data.get("min_nodes", 0),
        )


@dataclass(frozen=True)
class VerdictPolicy:
    max_exclusion_fraction: float = 0.1
    treat_unknown_as: str = "fail-if-strict"  # "fail" | "pass" | "fail-if-strict"
    deadline_s: float = 120.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.max_exclusion_fraction <= 1.0:
            raise ValueError("max_exclusion_fraction must be in [0, 1]")
        if self.treat_unknown_as not in ("fail", "pass", "fail-if-strict"):
            raise ValueError(f"bad treat_unknown_as {self.treat_unknown_as!r}")
        if self.deadline_s <= 0:
            raise ValueError("deadline must be positive")


@dataclass(frozen=True)
class NodeAssessment:
    health: NodeHealth
    reasons: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"health": self.health.value, "reasons": list(self.reasons)}

    @classmethod
    def from_dict(cls, data: dict) -> "NodeAssessment":
        return cls(NodeHealth(data["health"]), tuple(data.get("reasons", ())))


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    reasons: tuple[str, ...]
    excluded: frozenset[str]
    per_node: dict[str, NodeAssessment]
    protocol_name: str
    job: JobContext

    def __post_init__(self) -> None:
        non_healthy = {
            n for n, a in self.per_node.items() if a.health is not NodeHealth.HEALTHY
        }
        if self.decision is Decision.ABORT and not self.reasons:
            raise ValueError("an abort verdict must carry at least one reason")
        if self.decision is Decision.CONTINUE_EXCLUDING:
            if not self.excluded:
                raise ValueError("exclusion set may not be empty")
            if len(self.excluded) >= len(self.job.nodes):
                raise ValueError("exclusion set must be smaller than the allocation")
            if self.excluded != non_healthy:
                raise ValueError("exclusion set must equal the non-healthy nodes")
        elif self.excluded:
            raise ValueError("only continue-excluding verdicts exclude nodes")

    def to_dict(self) -> dict:
        return {
            "decision": self.decision.value,
            "reasons": list(self.reasons),
            "excluded": sorted(self.excluded),
            "per_node": {n: a.to_dict() for n, a in sorted(self.per_node.items())},
            "protocol_name": self.protocol_name,
            "job": self.job.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Verdict":
        return cls(
            decision=Decision(data["decision"]),
            reasons=tuple(data.get("reasons", ())),
            excluded=frozenset(data.get("excluded", ())),
            per_node={
                n: NodeAssessment.from_dict(a)
                for n, a in data.get("per_node", {}).items()
            },
            protocol_name=data.get("protocol_name", ""),
            job=JobContext.from_dict(data["job"]),
        )


def discover_context(
    environ: dict[str, str],
    *,
    flexible: bool = False,
    min_nodes: int | None = None,
    nodelist_var: str | None = None,
    jobid_var: str | None = None,
) -> JobContext:
    """Build the JobContext from scheduler environment variables.

    Variable names default to the common scheduler conventions and can be
    overridden via VETGATE_NODELIST_VAR / VETGATE_JOBID_VAR or arguments.
    """

    def lookup(explicit: str | None, override_var: str, defaults: tuple[str, ...],
               what: str) -> str:
        names = [explicit] if explicit else []
        env_override = environ.get(override_var)
        if not explicit and env_override:
            names = [env_override]
        if not names:
            names = list(defaults)
        for name in names:
            value = environ.get(name)
            if value:
                return value
        raise MissingEnvironment(
            f"no {what} variable set (looked at {', '.join(names)})")

    raw_nodes = lookup(nodelist_var, "VETGATE_NODELIST_VAR", _NODELIST_VARS,
                       "node-list")
    job_id = lookup(jobid_var, "VETGATE_JOBID_VAR", _JOBID_VARS, "job-id")
    nodes = expand_hostlist(raw_nodes)
    if len(set(nodes)) != len(nodes):
        raise MalformedHostlist(f"duplicate node ids in {raw_nodes!r}")

    def int_env(name: str, default: int) -> int:
        raw = environ.get(name, "")
        try:
            return int(raw.split("(")[0]) if raw else default
        except ValueError:
            return default

    return JobContext(
        job_id=job_id,
        nodes=tuple(nodes),
        tasks_per_node=int_env("SLURM_NTASKS_PER_NODE", 1),
        gpus_per_task=int_env("SLURM_GPUS_PER_TASK", 1),
        flexible=flexible,
        min_nodes=min_nodes if flexible and min_nodes else 0,
    )


# --- agent side ---------------------------------------------------------------

def make_agent(
    probe: Probe,
    *,
    comm: CollectiveComm | None = None,
    available: frozenset[str] = frozenset(),
    bandwidth: BandwidthSettings = BandwidthSettings(),
):
    """Bind the per-node agent loop to its local probe and fabric.

    The returned callable fits the transport contract: it takes (node,
    request dict) and returns a NodeReport dict. Evaluations run
    sequentially in protocol order so a bandwidth exchange cannot perturb
    a temperature reading taken by a later eval on the same node.
    """

    def agent(node: str, request: dict) -> dict:
        protocol = parse_protocol(request["protocol"])
        node_set = tuple(request.get("nodes") or (node,))
        started = float(request.get("agent_start_s", time.time()))
        results = []
        for spec in protocol.evals:
            results.append(
                run_eval(spec, node, probe, node_set=node_set, comm=comm,
                         available=available, bandwidth=bandwidth)
            )
        elapsed_ms = sum(r.duration_ms for r in results)
        report = NodeReport(
            node=node,
            results=tuple(results),
            started=started,
            finished=started + elapsed_ms / 1000.0,
            agent_status=AgentStatus.REPORTED,
        )
        return report.to_dict()

    return agent


# --- verdict ------------------------------------------------------------------

def classify_node(
    report: NodeReport, ctx: JobContext, policy: VerdictPolicy
) -> NodeAssessment:
    """Independent per-node health classification."""
    if report.agent_status is not AgentStatus.REPORTED:
        return NodeAssessment(
            NodeHealth.UNRESPONSIVE,
            (f"agent {report.agent_status.value}",),
        )
    unknown_counts = policy.treat_unknown_as == "fail" or (
        policy.treat_unknown_as == "fail-if-strict" and not ctx.flexible
    )
    reasons: list[str] = []
    for result in report.results:
        if result.status is EvalStatus.FAIL:
            for violation in result.violations:
                reasons.append(f"{result.eval_name}: {violation.describe()}")
        elif result.status is EvalStatus.UNKNOWN and unknown_counts:
            reasons.append(f"{result.eval_name}: unknown ({result.detail})")
    if reasons:
        return NodeAssessment(NodeHealth.UNHEALTHY, tuple(reasons))
    return NodeAssessment(NodeHealth.HEALTHY)


def decide_verdict(
    reports: list[NodeReport],
    ctx: JobContext,
    policy: VerdictPolicy,
    protocol_name: str = "",
) -> Verdict:
    """Render the early-abort decision from per-node reports.

    Each node is classified independently; then three guards decide
    between aborting and excluding: the allocation must be flexible, at
    least min_nodes healthy nodes must remain, and the unhealthy fraction
    must not exceed the policy bound.
    """
    by_node = {r.node: r for r in reports}
    if set(by_node) != set(ctx.nodes) or len(reports) != len(ctx.nodes):
        raise ValueError("exactly one report per allocation node required")

    per_node = {
        node: classify_node(by_node[node], ctx, policy) for node in ctx.nodes
    }
    non_healthy = frozenset(
        n for n, a in per_node.items() if a.health is not NodeHealth.HEALTHY
    )
    node_reasons = tuple(
        f"{node}: {reason}"
        for node in sorted(non_healthy)
        for reason in per_node[node].reasons
    )

    def verdict(decision: Decision, reasons: tuple[str, ...],
                excluded: frozenset[str] = frozenset()) -> Verdict:
        return Verdict(decision=decision, reasons=reasons, excluded=excluded,
                       per_node=per_node, protocol_name=protocol_name, job=ctx)

    if not non_healthy:
        return verdict(Decision.CONTINUE, ())
    if not ctx.flexible:
        return verdict(Decision.ABORT, node_reasons
                       or ("unhealthy nodes in a strict allocation",))
    healthy_count = len(ctx.nodes) - len(non_healthy)
    if healthy_count < ctx.min_nodes:
        return verdict(
            Decision.ABORT,
            node_reasons + (
                f"only {healthy_count} healthy nodes, {ctx.min_nodes} required",),
        )
    fraction = len(non_healthy) / len(ctx.nodes)
    if fraction > policy.max_exclusion_fraction:
        return verdict(
            Decision.ABORT,
            node_reasons + (
                f"unhealthy fraction {fraction:.3f} exceeds "
                f"{policy.max_exclusion_fraction:.3f}",),
        )
    return verdict(Decision.CONTINUE_EXCLUDING, node_reasons, non_healthy)


def run_vetting(
    protocol: VettingProtocol,
    ctx: JobContext,
    transport: Transport,
    probe: Probe,
    deadline_s: float | None = None,
    *,
    policy: VerdictPolicy = VerdictPolicy(),
    comm: CollectiveComm | None = None,
    available: frozenset[str] = frozenset(),
    bandwidth: BandwidthSettings = BandwidthSettings(),
) -> tuple[Verdict, list[NodeReport]]:
    """Execute the protocol on every allocation node and decide.

    The coordinator is the lexicographically first node; when the fabric
    itself fails the verdict is an abort rather than a re-election,
    because vetting is short-lived and a re-run is cheaper.
    """
    if deadline_s is None:
        deadline_s = policy.deadline_s
    if deadline_s <= 0:
        raise ValueError("deadline must be positive")

    coordinator = min(ctx.nodes)
    logger.info("vetting %d nodes, coordinator %s, deadline %.0fs",
                len(ctx.nodes), coordinator, deadline_s)
    request = {
        "protocol": serialize_protocol(protocol),
        "nodes": list(ctx.nodes),
        "job_id": ctx.job_id,
        "deadline_s": deadline_s,
    }
    agent_fn = make_agent(probe, comm=comm, available=available,
                          bandwidth=bandwidth)
    try:
        arrivals = transport.run_protocol(ctx.nodes, request, deadline_s, agent_fn)
    except CoordinatorFailure as exc:
        logger.error("coordinator failure: %s", exc)
        per_node = {
            node: NodeAssessment(NodeHealth.UNRESPONSIVE, ("coordinator failure",))
            for node in ctx.nodes
        }
        verdict = Verdict(
            decision=Decision.ABORT,
            reasons=(f"coordinator {coordinator} failure: {exc}",),
            excluded=frozenset(),
            per_node=per_node,
            protocol_name=protocol.name,
            job=ctx,
        )
        return verdict, []

    reports: list[NodeReport] = []
    by_node: dict[str, Arrival] = {a.node: a for a in arrivals}
    for node in ctx.nodes:
        arrival = by_node.get(node)
        if arrival is None or arrival.status == "timeout" or (
            arrival.status == "reported" and arrival.arrival_s > deadline_s
        ):
            reports.append(NodeReport(node, (), 0.0, deadline_s,
                                      AgentStatus.TIMED_OUT))
        elif arrival.status == "unreachable" or arrival.payload is None:
            reports.append(NodeReport(node, (), 0.0, arrival.arrival_s,
                                      AgentStatus.UNREACHABLE))
        else:
            reports.append(NodeReport.from_dict(arrival.payload))

    verdict = decide_verdict(reports, ctx, policy, protocol_name=protocol.name)
    return verdict, reports


def emit_exclusion(verdict: Verdict, exclude_file: str | Path | None = None) -> str:
    """Write the compressed exclusion hostlist; returns the text."""
    if verdict.decision is not Decision.CONTINUE_EXCLUDING:
        raise ValueError("only continue-excluding verdicts emit exclusions")
    text = compress_hostlist(sorted(verdict.excluded))
    if exclude_file is not None:
        Path(exclude_file).write_text(text + "\n", encoding="utf-8")
    return text
