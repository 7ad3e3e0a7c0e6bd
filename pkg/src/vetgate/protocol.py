"""Vetting protocol documents: parsing, validation, serialization.

A protocol is a YAML document declaring which evaluations to run on each
allocated node and the tolerated outcome thresholds:

    name: "ML Training Node Vetting"
    evals:
    - name: "Check GPU"
      type: GPUEval
      max_temp: 30
      max_used_memory: 0.2
    - name: "NCCLBandwidth"
      type: NCCLEval
      min_bandwidth: 90.0
      requirements:
        - torch

``type`` may also be a dotted module path; only the final segment is
resolved, case-insensitively, against the static registry. Parameter
units are fixed per parameter (temperatures in celsius, memory and
activity thresholds as fractions, bandwidths in GB/s, timeouts in
seconds) and are not user-overridable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import yaml

__all__ = [
    "Unit",
    "TypedValue",
    "ParamSchema",
    "EvaluationKind",
    "EvalSpec",
    "VettingProtocol",
    "ProtocolError",
    "ProtocolSyntaxError",
    "UnknownEvaluationKind",
    "ParamError",
    "DuplicateEvalName",
    "UnsupportedVersion",
    "parse_protocol",
    "serialize_protocol",
    "registry_describe",
    "registered_kinds",
]

SCHEMA_VERSION = "1"

# Keys of an eval block that are not evaluation parameters.
_RESERVED_EVAL_KEYS = ("name", "type", "requirements")


class ProtocolError(ValueError):
    """Base class for protocol document rejections."""


class ProtocolSyntaxError(ProtocolError):
    """Malformed document; carries line/column when available."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class UnknownEvaluationKind(ProtocolError):
    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"unknown evaluation kind {kind!r}")


class ParamError(ProtocolError):
    def __init__(self, eval_name: str, param: str, message: str):
        self.eval_name = eval_name
        self.param = param
        super().__init__(f"eval {eval_name!r}, parameter {param!r}: {message}")


class DuplicateEvalName(ProtocolError):
    def __init__(self, name: str):
        super().__init__(f"duplicate eval name {name!r}")


class UnsupportedVersion(ProtocolError):
    def __init__(self, version: str):
        super().__init__(f"unsupported protocol version {version!r}")


class Unit(str, Enum):
    CELSIUS = "celsius"
    FRACTION = "fraction"
    GBPS = "GBps"
    SECONDS = "seconds"
    COUNT = "count"
    NONE = "none"


@dataclass(frozen=True)
class TypedValue:
    """A parameter value tagged with its fixed unit."""

    value: float | int | str
    unit: Unit


@dataclass(frozen=True)
class ParamSchema:
    """Declared shape of one evaluation parameter."""

    name: str
    unit: Unit
    mandatory: bool
    minimum: float
    maximum: float
    min_exclusive: bool = False

    def check_range(self, value: float) -> str | None:
        """Return a complaint string when the value is out of range."""
        if not math.isfinite(value):
            return "must be finite"
        if self.min_exclusive:
            if value <= self.minimum:
                return f"must be > {self.minimum}"
        elif value < self.minimum:
            return f"must be >= {self.minimum}"
        if value > self.maximum:
            return f"must be <= {self.maximum}"
        return None


@dataclass(frozen=True)
class EvaluationKind:
    """A registered evaluation type and its parameter schema."""

    name: str
    params: tuple[ParamSchema, ...]
    description: str
    collective: bool = False

    def param(self, name: str) -> ParamSchema | None:
        for schema in self.params:
            if schema.name == name:
                return schema
        return None


# Every kind accepts an optional per-eval timeout (seconds, default 60).
_TIMEOUT = ParamSchema("timeout", Unit.SECONDS, mandatory=False, minimum=0.0,
                       maximum=math.inf, min_exclusive=True)

_REGISTRY: dict[str, EvaluationKind] = {
    kind.name.lower(): kind
    for kind in (
        EvaluationKind(
            name="GPUEval",
            params=(
                ParamSchema("max_temp", Unit.CELSIUS, mandatory=False,
                            minimum=0.0, maximum=150.0),
                ParamSchema("max_used_memory", Unit.FRACTION, mandatory=False,
                            minimum=0.0, maximum=1.0),
                _TIMEOUT,
            ),
            description="Per-GPU temperature and used-memory snapshot check.",
        ),
        EvaluationKind(
            name="NCCLEval",
            params=(
                ParamSchema("min_bandwidth", Unit.GBPS, mandatory=True,
                            minimum=0.0, maximum=math.inf, min_exclusive=True),
                _TIMEOUT,
            ),
            description="Ring all-reduce style collective bandwidth check.",
            collective=True,
        ),
        EvaluationKind(
            name="CUDAEval",
            params=(_TIMEOUT,),
            description="Trivial kernel launch on every GPU.",
        ),
        EvaluationKind(
            name="HostMemoryEval",
            params=(
                ParamSchema("min_free_memory", Unit.FRACTION, mandatory=False,
                            minimum=0.0, maximum=1.0),
                _TIMEOUT,
            ),
            description="Free host memory fraction check.",
        ),
        EvaluationKind(
            name="ClockSkewEval",
            params=(
                ParamSchema("max_skew", Unit.SECONDS, mandatory=False,
                            minimum=0.0, maximum=math.inf),
                _TIMEOUT,
            ),
            description="Node clock offset against the allocation reference.",
        ),
    )
}


def registered_kinds() -> tuple[str, ...]:
    return tuple(kind.name for kind in _REGISTRY.values())


def resolve_kind(type_value: str) -> EvaluationKind:
    """Resolve a document ``type:`` value against the registry.

    Dotted module paths are reduced to their final segment and matched
    case-insensitively, so declarations written for other runtimes keep
    working.
    """
    leaf = type_value.rsplit(".", 1)[-1].strip()
    kind = _REGISTRY.get(leaf.lower())
    if kind is None:
        raise UnknownEvaluationKind(type_value)
    return kind


def registry_describe(kind: str) -> EvaluationKind:
    """Parameter schema of a registered kind; raises UnknownEvaluationKind."""
    return resolve_kind(kind)


@dataclass(frozen=True)
class EvalSpec:
    name: str
    kind: str  # canonical registry name, e.g. "GPUEval"
    params: dict[str, TypedValue] = field(default_factory=dict)
    requirements: tuple[str, ...] = ()

    def param_value(self, name: str) -> float | int | str | None:
        tv = self.params.get(name)
        return None if tv is None else tv.value

    def timeout_s(self, default: float = 60.0) -> float:
        value = self.param_value("timeout")
        return float(value) if value is not None else default


@dataclass(frozen=True)
class VettingProtocol:
    name: str
    evals: tuple[EvalSpec, ...]
    version: str = SCHEMA_VERSION


def _reject(condition: bool, exc: ProtocolError) -> None:
    if condition:
        raise exc


def _parse_eval(entry: object, index: int) -> EvalSpec:
    if not isinstance(entry, dict):
        raise ProtocolSyntaxError(f"evals[{index}] must be a mapping")
    name = entry.get("name")
    if not isinstance(name, str) or not name:
        raise ProtocolSyntaxError(f"evals[{index}] needs a non-empty string 'name'")
    type_value = entry.get("type")
    if not isinstance(type_value, str) or not type_value:
        raise ProtocolSyntaxError(f"eval {name!r} needs a string 'type'")
    kind = resolve_kind(type_value)

    requirements = entry.get("requirements", [])
    if requirements is None:
        requirements = []
    if not isinstance(requirements, list) or not all(
        isinstance(r, str) and r for r in requirements
    ):
        raise ProtocolSyntaxError(f"eval {name!r}: requirements must be a list of strings")

    params: dict[str, TypedValue] = {}
    for key, raw in entry.items():
        if key in _RESERVED_EVAL_KEYS:
            continue
        schema = kind.param(key)
        if schema is None:
            raise ParamError(name, key, f"not a parameter of {kind.name}")
        if schema.unit is Unit.NONE:
            if not isinstance(raw, str):
                raise ParamError(name, key, "must be a string")
            params[key] = TypedValue(raw, schema.unit)
            continue
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ParamError(name, key, f"must be a number ({schema.unit.value})")
        complaint = schema.check_range(float(raw))
        if complaint is not None:
            raise ParamError(name, key, f"{complaint} ({schema.unit.value})")
        params[key] = TypedValue(raw, schema.unit)

    for schema in kind.params:
        if schema.mandatory and schema.name not in params:
            raise ParamError(name, schema.name, "mandatory parameter missing")

    return EvalSpec(name=name, kind=kind.name, params=params,
                    requirements=tuple(requirements))


def parse_protocol(document: str) -> VettingProtocol:
    """Parse and validate a protocol document.

    Rejection is total: any invariant violation raises exactly one typed
    ProtocolError subclass and never yields a partial protocol.
    """
    try:
        data = yaml.safe_load(document)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ProtocolSyntaxError(
            str(exc.problem or "malformed document"),
            line=None if mark is None else mark.line + 1,
            column=None if mark is None else mark.column + 1,
        ) from exc
    except yaml.YAMLError as exc:
        raise ProtocolSyntaxError(str(exc)) from exc

    if not isinstance(data, dict):
        raise ProtocolSyntaxError("top level must be a mapping")
    name = data.get("name")
    _reject(not isinstance(name, str) or not name,
            ProtocolSyntaxError("'name' must be a non-empty string"))

    version = data.get("version", SCHEMA_VERSION)
    if isinstance(version, (int, float)):
        version = str(version)
    _reject(not isinstance(version, str), ProtocolSyntaxError("'version' must be a string"))
    _reject(version != SCHEMA_VERSION, UnsupportedVersion(version))

    raw_evals = data.get("evals")
    _reject(raw_evals is None, ProtocolSyntaxError("'evals' is required"))
    _reject(not isinstance(raw_evals, list), ProtocolSyntaxError("'evals' must be a list"))

    unknown = set(data) - {"name", "evals", "version"}
    _reject(bool(unknown), ProtocolSyntaxError(f"unknown top-level keys: {sorted(unknown)}"))

    evals = tuple(_parse_eval(entry, i) for i, entry in enumerate(raw_evals))
    seen: set[str] = set()
    for spec in evals:
        if spec.name in seen:
            raise DuplicateEvalName(spec.name)
        seen.add(spec.name)

    return VettingProtocol(name=name, evals=evals, version=version)


def serialize_protocol(protocol: VettingProtocol) -> str:
    """Emit the canonical document for a protocol.

    Key order is fixed (name, evals; within an eval: name, type, params
    alphabetically, requirements) so serialization is deterministic and
    ``parse_protocol(serialize_protocol(p)) == p``.
    """
    doc: dict[str, object] = {"name": protocol.name}
    if protocol.version != SCHEMA_VERSION:
        doc["version"] = protocol.version
    evals: list[dict[str, object]] = []
    for spec in protocol.evals:
        block: dict[str, object] = {"name": spec.name, "type": spec.kind}
        for key in sorted(spec.params):
            block[key] = spec.params[key].value
        if spec.requirements:
            block["requirements"] = list(spec.requirements)
        evals.append(block)
    doc["evals"] = evals
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True,
                          default_flow_style=None, width=100)
