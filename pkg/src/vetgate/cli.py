"""Command-line entry points: vetgate, vetgate-collector, vetgate-rules.

Exit codes form a stable contract job scripts can branch on without
parsing output: 0 continue/ok, 2 usage or configuration error, 3 continue
excluding nodes, 4 abort. With --json the machine-readable document is
the only thing on standard output; human prose moves to standard error.
"""

from __future__ import annotations

import argparse
import getpass
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .collector import (
    CollectorClient,
    CollectorConfig,
    CollectorHttpServer,
    CollectorService,
    ReportEnvelope,
    StorageFailure,
)
from .config import CliConfig, ConfigError, load_config
from .evaluations import load_manifest
from .executor import (
    EXIT_ABORT,
    EXIT_CONTINUE,
    EXIT_EXCLUDE,
    EXIT_USAGE,
    Decision,
    MissingEnvironment,
    VerdictPolicy,
    discover_context,
    emit_exclusion,
    exit_code,
    run_vetting,
)
from .hostlist import MalformedHostlist
from .probe import (
    FixtureProbe,
    GpuGroup,
    GpuId,
    MetricField,
    NullProbe,
    ProviderUnavailable,
    RealProbe,
    load_fixture_dir,
)
from .protocol import ProtocolError, parse_protocol, serialize_protocol
from .rules import replay as rules_replay
from .saturation import (
    ScoreWeights,
    collect,
    export_series,
    render_figures,
    score,
)
from .sim import ProfileError, SimComm, SimTransport, load_profile, make_probe, run_scenario
from .transport import LocalTransport, TcpTransport

logger = logging.getLogger(__name__)


class _UsageError(Exception):
    """Invalid invocation or configuration; maps to exit code 2."""


def _human(args, message: str) -> None:
    stream = sys.stderr if args.json else sys.stdout
    print(message, file=stream)


def _emit_json(document: dict) -> None:
    print(json.dumps(document, sort_keys=True, indent=2))


def _load_cli_config(args) -> CliConfig:
    try:
        return load_config(dict(os.environ), getattr(args, "config", None))
    except ConfigError as exc:
        raise _UsageError(str(exc)) from exc


def _read_protocol(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _UsageError(f"cannot read protocol: {exc}") from exc
    try:
        return parse_protocol(text)
    except ProtocolError as exc:
        raise _UsageError(f"invalid protocol: {exc}") from exc


# --- vetgate validate -----------------------------------------------------------

def cmd_validate(args) -> int:
    try:
        protocol = _read_protocol(args.protocol)
    except _UsageError as exc:
        if args.json:
            _emit_json({"valid": False, "error": str(exc)})
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    normalized = serialize_protocol(protocol)
    if args.json:
        _emit_json({
            "valid": True,
            "name": protocol.name,
            "evals": [
                {"name": s.name, "kind": s.kind,
                 "params": {k: v.value for k, v in sorted(s.params.items())},
                 "requirements": list(s.requirements)}
                for s in protocol.evals
            ],
            "normalized": normalized,
        })
    else:
        print(normalized, end="")
    _human(args, f"protocol {protocol.name!r}: {len(protocol.evals)} evals, valid")
    return EXIT_CONTINUE


# --- vetgate run ----------------------------------------------------------------

def _build_runtime(args, config: CliConfig, ctx_nodes: tuple[str, ...]):
    """Pick probe/transport/comm for the run subcommand."""
    if args.profile:
        try:
            profile = load_profile(args.profile)
        except (ProfileError, OSError) as exc:
            raise _UsageError(f"cannot load profile: {exc}") from exc
        missing = set(ctx_nodes) - set(profile.node_ids())
        if missing:
            raise _UsageError(
                f"allocation nodes missing from profile: {sorted(missing)}")
        return make_probe(profile), SimTransport(profile), SimComm(profile)

    if args.agent_endpoints:
        addresses = {}
        try:
            for line in Path(args.agent_endpoints).read_text().splitlines():
                if not line.strip():
                    continue
                node, _, addr = line.partition(" ")
                host, _, port = addr.strip().rpartition(":")
                addresses[node.strip()] = (host, int(port))
        except (OSError, ValueError) as exc:
            raise _UsageError(f"bad agent endpoints file: {exc}") from exc
        return NullProbe(), TcpTransport(addresses), None

    fixtures_dir = args.fixtures or config.fixtures_dir
    if fixtures_dir:
        fixtures = load_fixture_dir(fixtures_dir)
        unmatched = [n for n in ctx_nodes if n not in fixtures]
        if unmatched:
            raise _UsageError(
                f"no fixture named after nodes {unmatched}; use --profile "
                "to map fixtures onto an allocation")
        probe = FixtureProbe({n: fixtures[n] for n in ctx_nodes})
        return probe, LocalTransport(), None

    try:
        probe = RealProbe()
    except ProviderUnavailable as exc:
        logger.warning("real telemetry provider unavailable: %s", exc)
        probe = NullProbe()
    return probe, LocalTransport(), None


def cmd_run(args) -> int:
    config = _load_cli_config(args)
    flexible = args.flexible or config.flexible
    min_nodes = args.min_nodes or config.min_nodes
    policy = VerdictPolicy(
        max_exclusion_fraction=(
            args.max_exclusion_fraction
            if args.max_exclusion_fraction is not None
            else config.max_exclusion_fraction),
        treat_unknown_as=args.treat_unknown_as or config.treat_unknown_as,
        deadline_s=args.deadline or config.deadline_s,
    )

    ctx = discover_context(
        dict(os.environ),
        flexible=flexible,
        min_nodes=min_nodes,
        nodelist_var=args.nodelist_var or config.nodelist_var,
        jobid_var=args.jobid_var or config.jobid_var,
    )
    threshold = (args.min_scale_warning if args.min_scale_warning is not None
                 else config.min_scale_warning)
    if len(ctx.nodes) < threshold:
        print(f"note: vetting {len(ctx.nodes)} nodes; overhead amortizes "
              f"best on large allocations (>= {threshold} nodes)",
              file=sys.stderr)

    protocol = _read_protocol(args.protocol)
    manifest_path = args.manifest or config.manifest
    if manifest_path:
        try:
            available = load_manifest(manifest_path)
        except OSError as exc:
            raise _UsageError(f"cannot read manifest: {exc}") from exc
    elif args.profile:
        # The simulated backend vouches for eval requirements unless an
        # explicit manifest says otherwise.
        available = frozenset(
            r for spec in protocol.evals for r in spec.requirements)
    else:
        available = frozenset()

    probe, transport, comm = _build_runtime(args, config, ctx.nodes)
    verdict, reports = run_vetting(
        protocol, ctx, transport, probe, policy.deadline_s,
        policy=policy, comm=comm, available=available)

    exclusion_text = None
    if verdict.decision is Decision.CONTINUE_EXCLUDING:
        exclusion_text = emit_exclusion(verdict, args.exclude_file)

    submitted_key = None
    if args.opt_in_collection:
        url = args.report_url or config.report_url
        if not url:
            raise _UsageError("--opt-in-collection requires a report URL")
        envelope = ReportEnvelope(
            job_context=ctx, verdict=verdict, reports=tuple(reports),
            submitted_at=time.time(), submitter=_submitter())
        try:
            key = CollectorClient(
                url, args.report_token or config.report_token).submit(envelope)
            submitted_key = key.to_dict()
        except StorageFailure as exc:
            print(f"warning: report submission failed: {exc}", file=sys.stderr)

    if args.json:
        _emit_json({
            "verdict": verdict.to_dict(),
            "exit_code": exit_code(verdict.decision),
            "exclusion": exclusion_text,
            "reports": [r.to_dict() for r in reports],
            "submitted": submitted_key,
        })
    else:
        counts = {"healthy": 0, "unhealthy": 0, "unresponsive": 0}
        for assessment in verdict.per_node.values():
            counts[assessment.health.value] += 1
        print(f"{len(verdict.per_node)} nodes: "
              f"{counts['healthy']} healthy, {counts['unhealthy']} unhealthy, "
              f"{counts['unresponsive']} unresponsive", file=sys.stderr)
        for node in sorted(verdict.per_node):
            assessment = verdict.per_node[node]
            if assessment.health.value == "healthy":
                continue
            line = f"{node}: {assessment.health.value}"
            if assessment.reasons:
                line += " (" + "; ".join(assessment.reasons) + ")"
            print(line, file=sys.stderr)
        if exclusion_text is not None:
            print(exclusion_text)
    _human(args, f"verdict: {verdict.decision.value}")
    return exit_code(verdict.decision)


def _submitter() -> str:
    try:
        return getpass.getuser()
    except (KeyError, OSError):
        return "anonymous"


# --- vetgate score ---------------------------------------------------------------

def cmd_score(args) -> int:
    config = _load_cli_config(args)
    fixtures_dir = args.fixtures or config.fixtures_dir
    if not fixtures_dir:
        raise _UsageError("a fixtures directory is required (--fixtures)")
    try:
        fixtures = load_fixture_dir(fixtures_dir)
    except (OSError, ValueError) as exc:
        raise _UsageError(f"cannot load fixtures: {exc}") from exc
    if not fixtures:
        raise _UsageError(f"no fixtures found under {fixtures_dir}")

    name = args.fixture
    if name is None:
        if len(fixtures) > 1:
            raise _UsageError(
                f"multiple fixtures available ({', '.join(sorted(fixtures))}); "
                "pick one with --fixture")
        name = next(iter(fixtures))
    if name not in fixtures:
        raise _UsageError(f"no fixture named {name!r} under {fixtures_dir}")

    fixture = fixtures[name]
    gpus = args.gpus or fixture.gpus
    try:
        weights = ScoreWeights.parse(args.weights)
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc

    extra = []
    for field_name in (args.fields.split(",") if args.fields else []):
        try:
            extra.append(MetricField[field_name.strip()])
        except KeyError as exc:
            raise _UsageError(f"unknown metric field {field_name!r}") from exc

    probe = FixtureProbe({name: fixture}, seed=args.seed)
    group = GpuGroup(owner="score", gpus=frozenset(
        GpuId(name, i) for i in range(gpus)))
    try:
        series = collect(group, probe, args.interval, args.duration,
                         extra_fields=tuple(extra))
        result = score(series, weights, link_peak_gbps=args.link_peak
                       if args.link_peak is not None else config.link_peak_gbps)
    except (ValueError, ProviderUnavailable) as exc:
        raise _UsageError(str(exc)) from exc

    written: list[Path] = []
    if args.out:
        written.extend(export_series(series, args.format, args.out))
        if args.plots:
            written.extend(render_figures(series, result, args.out))

    if args.json:
        _emit_json({
            "fixture": name,
            "gpus": gpus,
            "score": result.to_dict(),
            "files": [str(p) for p in written],
        })
    else:
        print(f"overall {result.overall:.3f}")
        print(f"  compute {result.compute:.3f} (weight {weights.compute:g})")
        print(f"  memory  {result.memory:.3f} (weight {weights.memory:g})")
        print(f"  network {result.network:.3f} (weight {weights.network:g})")
        for path in written:
            print(f"wrote {path}", file=sys.stderr)
    return EXIT_CONTINUE


# --- vetgate sim -----------------------------------------------------------------

def cmd_sim(args) -> int:
    try:
        profile = load_profile(args.profile)
    except (ProfileError, OSError) as exc:
        raise _UsageError(f"cannot load profile: {exc}") from exc
    protocol = _read_protocol(args.protocol)
    policy = VerdictPolicy(
        max_exclusion_fraction=args.max_exclusion_fraction
        if args.max_exclusion_fraction is not None else 0.1,
        deadline_s=args.deadline or 120.0,
    )
    transcript = run_scenario(
        profile, protocol,
        flexible=args.flexible,
        min_nodes=args.min_nodes,
        policy=policy,
        rounds=args.repeat,
        round_interval_s=args.round_interval,
    )
    if args.json:
        sys.stdout.write(transcript.to_json())
    else:
        for entry in transcript.rounds:
            verdict = entry["verdict"]
            line = (f"round {entry['round']}: {verdict['decision']}"
                    f" (exit {entry['exit_code']})")
            if verdict["excluded"]:
                line += f" excluding {','.join(verdict['excluded'])}"
            print(line)
        if transcript.drain_list:
            print(f"drain list: {','.join(transcript.drain_list)}")
        print(f"rule effects: {len(transcript.effects)}")
    return EXIT_CONTINUE


# --- argument parsers --------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--json", action="store_true",
                        help="emit a machine-readable document on stdout")
    parser.add_argument("--config", help="config file path (or VETGATE_CONFIG)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vetgate",
        description="Node vetting, early abort, and GPU saturation scoring.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    validate = sub.add_parser("validate", help="parse and validate a protocol file")
    validate.add_argument("protocol", help="protocol YAML file")
    _add_common(validate)
    validate.set_defaults(func=cmd_validate)

    run = sub.add_parser("run", help="vet the allocated nodes before a job")
    run.add_argument("--protocol", required=True, help="protocol YAML file")
    run.add_argument("--flexible", action="store_true",
                     help="allocation tolerates shrinkage (enables exclusion)")
    run.add_argument("--min-nodes", type=int, default=None,
                     help="minimum healthy nodes a flexible job needs")
    run.add_argument("--deadline", type=float, default=None,
                     help="vetting deadline in seconds (default 120)")
    run.add_argument("--exclude-file", default=None,
                     help="write the exclusion hostlist here")
    run.add_argument("--report-url", default=None,
                     help="collector base URL for opt-in submission")
    run.add_argument("--report-token", default=None,
                     help="bearer token for the collector")
    run.add_argument("--opt-in-collection", action="store_true",
                     help="submit the outcome to the central collector")
    run.add_argument("--manifest", default=None,
                     help="requirement availability manifest (or VETGATE_MANIFEST)")
    run.add_argument("--fixtures", default=None,
                     help="fixture directory (or VETGATE_FIXTURES)")
    run.add_argument("--profile", default=None,
                     help="cluster profile: run against the simulated backend")
    run.add_argument("--agent-endpoints", default=None,
                     help="file of 'node host:port' lines for TCP agents")
    run.add_argument("--max-exclusion-fraction", type=float, default=None,
                     help="abort when more than this fraction is unhealthy")
    run.add_argument("--treat-unknown-as", default=None,
                     choices=["fail", "pass", "fail-if-strict"],
                     help="verdict weight of UNKNOWN eval outcomes")
    run.add_argument("--min-scale-warning", type=int, default=None,
                     help="note when vetting fewer nodes than this")
    run.add_argument("--nodelist-var", default=None,
                     help="environment variable holding the node list")
    run.add_argument("--jobid-var", default=None,
                     help="environment variable holding the job id")
    _add_common(run)
    run.set_defaults(func=cmd_run)

    score_p = sub.add_parser("score", help="GPU saturation score from telemetry")
    score_p.add_argument("--fixtures", default=None,
                         help="fixture directory (or VETGATE_FIXTURES)")
    score_p.add_argument("--fixture", default=None,
                         help="fixture name when the directory has several")
    score_p.add_argument("--gpus", type=int, default=None,
                         help="number of GPUs to sample (default: fixture's)")
    score_p.add_argument("--interval", type=int, default=100,
                         help="sampling interval in ms (default 100)")
    score_p.add_argument("--duration", type=int, default=1000,
                         help="sampling duration in ms (default 1000)")
    score_p.add_argument("--weights", default="0.5,0.3,0.2",
                         help="compute,memory,network weights (sum 1)")
    score_p.add_argument("--link-peak", type=float, default=None,
                         help="per-link peak bandwidth in GB/s (default 100)")
    score_p.add_argument("--format", default="csv", choices=["csv", "json"],
                         help="series export format")
    score_p.add_argument("--out", default=None,
                         help="directory for series files and figures")
    score_p.add_argument("--plots", dest="plots", action="store_true",
                         default=True, help="render figures (default)")
    score_p.add_argument("--no-plots", dest="plots", action="store_false",
                         help="skip figure rendering")
    score_p.add_argument("--fields", default=None,
                         help="comma-separated extra metric fields")
    score_p.add_argument("--seed", type=int, default=0,
                         help="fixture noise seed")
    _add_common(score_p)
    score_p.set_defaults(func=cmd_score)

    sim = sub.add_parser("sim", help="run a simulated cluster scenario")
    sim.add_argument("--profile", required=True, help="cluster profile YAML")
    sim.add_argument("--protocol", required=True, help="protocol YAML file")
    sim.add_argument("--repeat", type=int, default=1,
                     help="number of vetting rounds (default 1)")
    sim.add_argument("--round-interval", type=float, default=3600.0,
                     help="simulated seconds between rounds (default 3600)")
    sim.add_argument("--flexible", action="store_true",
                     help="treat the allocation as flexible")
    sim.add_argument("--min-nodes", type=int, default=None,
                     help="minimum healthy nodes for a flexible run")
    sim.add_argument("--deadline", type=float, default=None,
                     help="simulated vetting deadline in seconds")
    sim.add_argument("--max-exclusion-fraction", type=float, default=None,
                     help="abort when more than this fraction is unhealthy")
    _add_common(sim)
    sim.set_defaults(func=cmd_sim)

    return parser


def _dispatch(parser: argparse.ArgumentParser, argv: list[str] | None) -> int:
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingEnvironment, MalformedHostlist, ConfigError,
            ProtocolError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv: list[str] | None = None) -> int:
    return _dispatch(build_parser(), argv)


# --- vetgate-collector --------------------------------------------------------------

def build_collector_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vetgate-collector",
        description="Central report collection service.")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="serve the HTTP collection API")
    serve.add_argument("--config", required=True, help="collector config YAML")
    serve.set_defaults(func=_cmd_collector_serve)
    return parser


def _cmd_collector_serve(args) -> int:
    try:
        config = CollectorConfig.load(args.config)
        server = CollectorHttpServer.from_config(config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    host, port = server.address
    print(f"collector listening on http://{host}:{port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def collector_main(argv: list[str] | None = None) -> int:
    return _dispatch(build_collector_parser(), argv)


# --- vetgate-rules --------------------------------------------------------------------

def build_rules_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vetgate-rules",
        description="Operator console for the automated node-handling state.")
    parser.add_argument("--data-dir", default="collector-data",
                        help="collector data directory")
    parser.add_argument("--json", action="store_true",
                        help="emit machine-readable output")
    sub = parser.add_subparsers(dest="command", required=True)

    status = sub.add_parser("status", help="show node states and the drain list")
    status.set_defaults(func=_cmd_rules_status)

    release = sub.add_parser("release", help="take a node off the drain list")
    release.add_argument("node", help="node id to release")
    release.set_defaults(func=_cmd_rules_release)

    replay_p = sub.add_parser("replay",
                              help="rebuild node states from the full event log")
    replay_p.set_defaults(func=_cmd_rules_replay)
    return parser


def _open_service(args) -> CollectorService:
    return CollectorService(args.data_dir)


def _print_states(args, records: dict) -> None:
    if args.json:
        _emit_json({node: record.to_dict()
                    for node, record in sorted(records.items())})
        return
    if not records:
        print("no node records")
        return
    for node in sorted(records):
        record = records[node]
        print(f"{node}: {record.state.value} "
              f"(failures tracked {len(record.failure_events)}, "
              f"recovery attempts {record.recovery_attempts})")


def _cmd_rules_status(args) -> int:
    service = _open_service(args)
    _print_states(args, service.engine.records())
    drain = ",".join(sorted(service.engine.drain_list())) or "-"
    print(f"drain list: {drain}", file=sys.stderr if args.json else sys.stdout)
    return 0


def _cmd_rules_release(args) -> int:
    service = _open_service(args)
    service.release(args.node)
    state = service.engine.record(args.node).state.value
    if args.json:
        _emit_json({"node": args.node, "state": state})
    else:
        print(f"{args.node}: {state}")
    return 0


def _cmd_rules_replay(args) -> int:
    service = _open_service(args)
    records = rules_replay(service.all_events())
    _print_states(args, records)
    return 0


def rules_main(argv: list[str] | None = None) -> int:
    return _dispatch(build_rules_parser(), argv)


if __name__ == "__main__":
    sys.exit(main())
