"""Automated node handling: health state machine plus a rules catalog.

Nodes move forward through Active -> Suspect -> Drained -> Ticketed as
failures accumulate, and return to Active only through recovery (a clean
success while Suspect, or an operator release followed by a passing
re-vet). Rules are evaluated most-severe first (descending priority); the
first rule whose trigger fires *and* whose action is applicable in the
node's current state wins:

    MarkSuspect      applicable while Active
    Drain            applicable while Active or Suspect
    AttemptRecovery  applicable while Drained, attempts remaining
    OpenTicket       applicable while Drained, attempts exhausted

Recovery steps are recorded as effects, never executed here; draining
likewise emits a drain-list update that schedulers consume as a
compressed hostlist file.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import yaml

from .hostlist import compress_hostlist

__all__ = [
    "NodeState",
    "RuleAction",
    "RuleTrigger",
    "Rule",
    "RulesConfig",
    "HealthEvent",
    "NodeHealthRecord",
    "ActionEffect",
    "OutOfOrderEvent",
    "CatalogError",
    "DEFAULT_CATALOG",
    "parse_duration",
    "load_catalog",
    "apply_event",
    "replay",
    "RulesEngine",
    "export_drain_list",
]

# Bounded failure ring per node; pruning by window happens first, this is
# a hard cap against pathological logs.
_MAX_FAILURE_EVENTS = 4096


class OutOfOrderEvent(ValueError):
    """An event stream whose timestamps go backwards."""


class CatalogError(ValueError):
    """A rules catalog that cannot be interpreted."""


class NodeState(Enum):
    ACTIVE = "active"
    SUSPECT = "suspect"
    DRAINED = "drained"
    TICKETED = "ticketed"

    @property
    def escalation_index(self) -> int:
        return _STATE_ORDER.index(self)


_STATE_ORDER = (NodeState.ACTIVE, NodeState.SUSPECT, NodeState.DRAINED,
                NodeState.TICKETED)


class RuleAction(Enum):
    MARK_SUSPECT = "MarkSuspect"
    DRAIN = "Drain"
    ATTEMPT_RECOVERY = "AttemptRecovery"
    OPEN_TICKET = "OpenTicket"


# Side-effect kind carried by each action's effect record.
_EFFECT_KINDS = {
    RuleAction.MARK_SUSPECT.value: "state-change",
    RuleAction.DRAIN.value: "drain-list-update",
    RuleAction.ATTEMPT_RECOVERY.value: "recovery-command",
    RuleAction.OPEN_TICKET.value: "ticket",
    "Release": "drain-list-update",
}


@dataclass(frozen=True)
class RuleTrigger:
    failure_count: int
    window_s: float
    eval_name: str | None = None

    def __post_init__(self) -> None:
        if self.failure_count < 1:
            raise CatalogError("trigger failure_count must be >= 1")
        if self.window_s <= 0:
            raise CatalogError("trigger window must be positive")

    def fires(self, record: "NodeHealthRecord", now: float) -> bool:
        count = 0
        for ts, eval_name in record.failure_events:
            if ts <= now - self.window_s:
                continue
            if self.eval_name is not None and eval_name != self.eval_name:
                continue
            count += 1
        return count >= self.failure_count


@dataclass(frozen=True)
class Rule:
    name: str
    trigger: RuleTrigger
    action: RuleAction
    priority: int


@dataclass(frozen=True)
class RulesConfig:
    max_recovery_attempts: int = 2
    recovery_window_s: float = 6 * 3600.0
    recovery_command: str | None = None  # template, {node} substituted


DEFAULT_CATALOG: tuple[Rule, ...] = (
    Rule("suspect-on-repeat-failures",
         RuleTrigger(failure_count=2, window_s=6 * 3600.0),
         RuleAction.MARK_SUSPECT, priority=10),
    Rule("drain-on-sustained-failures",
         RuleTrigger(failure_count=3, window_s=24 * 3600.0),
         RuleAction.DRAIN, priority=20),
    Rule("recover-drained-node",
         RuleTrigger(failure_count=1, window_s=24 * 3600.0),
         RuleAction.ATTEMPT_RECOVERY, priority=30),
    Rule("ticket-when-recovery-exhausted",
         RuleTrigger(failure_count=1, window_s=24 * 3600.0),
         RuleAction.OPEN_TICKET, priority=40),
)


@dataclass(frozen=True)
class HealthEvent:
    node: str
    timestamp: float
    kind: str  # "failure" | "success" | "release"
    eval_name: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("failure", "success", "release"):
            raise ValueError(f"bad event kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"node": self.node, "timestamp": self.timestamp,
                "kind": self.kind, "eval_name": self.eval_name}

    @classmethod
    def from_dict(cls, data: dict) -> "HealthEvent":
        return cls(node=data["node"], timestamp=data["timestamp"],
                   kind=data["kind"], eval_name=data.get("eval_name"))


@dataclass(frozen=True)
class NodeHealthRecord:
    node: str
    state: NodeState = NodeState.ACTIVE
    failure_events: tuple[tuple[float, str | None], ...] = ()
    last_transition: float = 0.0
    recovery_attempts: int = 0

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "state": self.state.value,
            "failure_events": [[ts, name] for ts, name in self.failure_events],
            "last_transition": self.last_transition,
            "recovery_attempts": self.recovery_attempts,
        }


@dataclass(frozen=True)
class ActionEffect:
    node: str
    action: str  # RuleAction value or "Release"
    resulting_state: NodeState
    effect: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = _EFFECT_KINDS.get(self.action)
        if expected is None or self.effect != expected:
            raise ValueError(
                f"action {self.action!r} must emit {expected!r}, got {self.effect!r}")

    def to_dict(self) -> dict:
        return {"node": self.node, "action": self.action,
                "resulting_state": self.resulting_state.value,
                "effect": self.effect, "payload": dict(self.payload)}


def validate_catalog(catalog: tuple[Rule, ...] | list[Rule]) -> tuple[Rule, ...]:
    rules = tuple(catalog)
    priorities = [rule.priority for rule in rules]
    if len(set(priorities)) != len(priorities):
        raise CatalogError("rule priorities must be unique")
    return rules


def _applicable(rule: Rule, record: NodeHealthRecord, config: RulesConfig) -> bool:
    if rule.action is RuleAction.MARK_SUSPECT:
        return record.state is NodeState.ACTIVE
    if rule.action is RuleAction.DRAIN:
        return record.state in (NodeState.ACTIVE, NodeState.SUSPECT)
    if rule.action is RuleAction.ATTEMPT_RECOVERY:
        return (record.state is NodeState.DRAINED
                and record.recovery_attempts < config.max_recovery_attempts)
    return (record.state is NodeState.DRAINED
            and record.recovery_attempts >= config.max_recovery_attempts)


def _apply_action(
    rule: Rule, record: NodeHealthRecord, now: float, config: RulesConfig
) -> tuple[NodeHealthRecord, ActionEffect]:
    node = record.node
    if rule.action is RuleAction.MARK_SUSPECT:
        updated = replace(record, state=NodeState.SUSPECT, last_transition=now)
        effect = ActionEffect(node, rule.action.value, NodeState.SUSPECT,
                              "state-change", {"rule": rule.name})
    elif rule.action is RuleAction.DRAIN:
        updated = replace(record, state=NodeState.DRAINED, last_transition=now)
        effect = ActionEffect(node, rule.action.value, NodeState.DRAINED,
                              "drain-list-update",
                              {"rule": rule.name, "added": node})
    elif rule.action is RuleAction.ATTEMPT_RECOVERY:
        attempt = record.recovery_attempts + 1
        updated = replace(record, recovery_attempts=attempt, last_transition=now)
        payload = {"rule": rule.name, "attempt": attempt,
                   "max_attempts": config.max_recovery_attempts}
        if config.recovery_command:
            payload["command"] = config.recovery_command.format(node=node)
        effect = ActionEffect(node, rule.action.value, NodeState.DRAINED,
                              "recovery-command", payload)
    else:
        updated = replace(record, state=NodeState.TICKETED, last_transition=now)
        recent = [name or "?" for _, name in record.failure_events[-5:]]
        effect = ActionEffect(node, rule.action.value, NodeState.TICKETED,
                              "ticket",
                              {"rule": rule.name, "opened_at": now,
                               "recent_failures": recent,
                               "recovery_attempts": record.recovery_attempts})
    return updated, effect


def apply_event(
    record: NodeHealthRecord,
    event: HealthEvent,
    catalog: tuple[Rule, ...] | list[Rule] = DEFAULT_CATALOG,
    config: RulesConfig = RulesConfig(),
) -> tuple[NodeHealthRecord, list[ActionEffect]]:
    """Fold one event into a node record, applying the first matching rule."""
    if event.node != record.node:
        raise ValueError("event/record node mismatch")
    rules = validate_catalog(catalog)
    now = event.timestamp

    if event.kind == "success":
        if record.state is NodeState.SUSPECT:
            clean = not any(
                ts > now - config.recovery_window_s
                for ts, _ in record.failure_events
            )
            if clean:
                return (
                    replace(record, state=NodeState.ACTIVE, recovery_attempts=0,
                            last_transition=now),
                    [],
                )
        return record, []

    if event.kind == "release":
        if record.state in (NodeState.DRAINED, NodeState.TICKETED):
            updated = replace(record, state=NodeState.SUSPECT, last_transition=now)
            effect = ActionEffect(record.node, "Release", NodeState.SUSPECT,
                                  "drain-list-update", {"removed": record.node})
            return updated, [effect]
        return record, []

    # Failure: append to the bounded ring, prune outside the widest window.
    widest = max(rule.trigger.window_s for rule in rules) if rules else 0.0
    events = [
        (ts, name) for ts, name in record.failure_events if ts > now - widest
    ]
    events.append((now, event.eval_name))
    record = replace(record,
                     failure_events=tuple(events[-_MAX_FAILURE_EVENTS:]))

    for rule in sorted(rules, key=lambda r: -r.priority):
        if _applicable(rule, record, config) and rule.trigger.fires(record, now):
            updated, effect = _apply_action(rule, record, now, config)
            return updated, [effect]
    return record, []


class RulesEngine:
    """Incrementally maintained node records over an event stream."""

    def __init__(self, catalog: tuple[Rule, ...] | list[Rule] = DEFAULT_CATALOG,
                 config: RulesConfig = RulesConfig()):
        self.catalog = validate_catalog(catalog)
        self.config = config
        self._records: dict[str, NodeHealthRecord] = {}
        self._last_seen: dict[str, float] = {}

    def record(self, node: str) -> NodeHealthRecord:
        return self._records.get(node, NodeHealthRecord(node=node))

    def records(self) -> dict[str, NodeHealthRecord]:
        return dict(self._records)

    def observe(self, event: HealthEvent) -> list[ActionEffect]:
        last = self._last_seen.get(event.node)
        if last is not None and event.timestamp < last:
            raise OutOfOrderEvent(
                f"event for {event.node} at {event.timestamp} after {last}")
        self._last_seen[event.node] = event.timestamp
        updated, effects = apply_event(self.record(event.node), event,
                                       self.catalog, self.config)
        self._records[event.node] = updated
        return effects

    def drain_list(self) -> frozenset[str]:
        return frozenset(
            node for node, record in self._records.items()
            if record.state in (NodeState.DRAINED, NodeState.TICKETED)
        )


def replay(
    events: list[HealthEvent],
    catalog: tuple[Rule, ...] | list[Rule] = DEFAULT_CATALOG,
    config: RulesConfig = RulesConfig(),
) -> dict[str, NodeHealthRecord]:
    """Deterministic reconstruction of all records from a full event log."""
    previous = None
    records: dict[str, NodeHealthRecord] = {}
    for event in events:
        if previous is not None and event.timestamp < previous:
            raise OutOfOrderEvent(
                f"timestamp {event.timestamp} after {previous}")
        previous = event.timestamp
        record = records.get(event.node, NodeHealthRecord(node=event.node))
        records[event.node], _ = apply_event(record, event, catalog, config)
    return records


def export_drain_list(engine: RulesEngine, path: str | Path) -> str:
    """Write the drain list as a compressed hostlist for the scheduler."""
    text = compress_hostlist(sorted(engine.drain_list()))
    Path(path).write_text(text + "\n", encoding="utf-8")
    return text


# --- catalog files -------------------------------------------------------------

_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([smhd]?)\s*$")
_DURATION_UNITS = {"": 1.0, "s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}


def parse_duration(raw: str | int | float) -> float:
    """Duration strings like "6h", "30m", "45s", "2d", or plain seconds."""
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    match = _DURATION_RE.match(str(raw))
    if not match:
        raise CatalogError(f"bad duration {raw!r}")
    value, unit = match.groups()
    return float(value) * _DURATION_UNITS[unit]


def load_catalog(path: str | Path) -> tuple[tuple[Rule, ...], RulesConfig]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise CatalogError(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or "rules" not in data:
        raise CatalogError(f"{path}: catalog needs a top-level 'rules' list")

    rules: list[Rule] = []
    for i, entry in enumerate(data["rules"] or []):
        if not isinstance(entry, dict):
            raise CatalogError(f"{path}: rules[{i}] must be a mapping")
        try:
            trigger_raw = entry["trigger"]
            trigger = RuleTrigger(
                failure_count=int(trigger_raw["count"]),
                window_s=parse_duration(trigger_raw["window"]),
                eval_name=trigger_raw.get("eval"),
            )
            action = RuleAction(entry["action"])
            rules.append(Rule(name=entry["name"], trigger=trigger, action=action,
                              priority=int(entry["priority"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise CatalogError(f"{path}: rules[{i}]: {exc}") from exc

    config_raw = data.get("config") or {}
    config = RulesConfig(
        max_recovery_attempts=int(config_raw.get("max_recovery_attempts", 2)),
        recovery_window_s=parse_duration(config_raw.get("recovery_window", "6h")),
        recovery_command=config_raw.get("recovery_command"),
    )
    return validate_catalog(rules), config
