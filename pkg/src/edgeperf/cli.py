"""Command-line entry point: ``python -m edgeperf <command>``.

Option values come from, in decreasing precedence: command-line flags, the JSON
file given with ``--config`` (keys are option names, e.g. ``"num_slots": 50``),
environment variables (``EDGEPERF_AGGREGATOR_URL``, ``EDGEPERF_TOKEN``), then
built-in defaults.  Exit status is 0 on success, 1 when an operation failed
and 2 for usage errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .core import (
    AccessTechnology,
    Direction,
    Method,
    Metric,
    MetricKind,
    SegmentId,
    TraceDescriptor,
    ValidationError,
    encode_record,
)

log = logging.getLogger("edgeperf")

ENV_AGGREGATOR = "EDGEPERF_AGGREGATOR_URL"
ENV_TOKEN = "EDGEPERF_TOKEN"
DEFAULT_PROBE_PORT = 5201
DEFAULT_AGGREGATOR_PORT = 8080
ACTIVE_METRICS = ("tcp_bandwidth", "udp_capacity", "tcp_latency", "udp_latency")


class UsageError(Exception):
    pass


def host_port(text: str, default_port: int = DEFAULT_PROBE_PORT) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad address {text!r}, expected host:port") from None


def key_values(text: str) -> dict[str, str]:
    """``'{"a": 1}'`` or ``a=1,b=2``."""
    text = text.strip()
    if text.startswith("{"):
        try:
            value = json.loads(text)
        except json.JSONDecodeError as exc:
            raise argparse.ArgumentTypeError(f"invalid JSON: {exc.msg}") from None
        if not isinstance(value, dict):
            raise argparse.ArgumentTypeError("expected a JSON object")
        return value
    out = {}
    for part in filter(None, text.split(",")):
        k, sep, v = part.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {part!r}")
        out[k.strip()] = v.strip()
    return out


def float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# -- parser ----------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", help="JSON file of option values (flags take precedence)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    return p


def _aggregator_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--aggregator", metavar="URL", default=os.environ.get(ENV_AGGREGATOR),
                   help=f"aggregator base URL (env {ENV_AGGREGATOR})")
    p.add_argument("--token", default=os.environ.get(ENV_TOKEN), help=f"bearer token (env {ENV_TOKEN})")


def _descriptor_args(p: argparse.ArgumentParser, filtering: bool = False) -> None:
    if filtering:
        p.add_argument("--method", choices=[m.value for m in Method])
        p.add_argument("--metric", help="metric kind, or self_metric:LABEL")
    p.add_argument("--segment", choices=[s.value for s in SegmentId],
                   default=None if filtering else SegmentId.ACCESS_MEC.value)
    p.add_argument("--direction", choices=[x.value for x in Direction],
                   default=None if filtering else Direction.DOWNSTREAM.value)
    p.add_argument("--access-technology", choices=[a.value for a in AccessTechnology],
                   default=None if filtering else AccessTechnology.WIFI.value)
    p.add_argument("--cross-traffic", dest="cross_traffic_mbps", type=float,
                   default=None if filtering else 0.0, metavar="MBPS")
    p.add_argument("--num-clients", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgeperf",
        description="Edge network KPI measurement, aggregation, trace replay and federation simulation.",
    )
    parser.add_argument("--version", action="version", version=f"edgeperf {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    common = _common()

    def add(name: str, help_: str, **kw) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help_, description=help_, parents=[common], **kw)

    p = add("probe", "run one active measurement against a responder")
    p.add_argument("--peer", type=host_port, help="responder host:port")
    p.add_argument("--metric", choices=ACTIVE_METRICS, default="tcp_bandwidth")
    p.add_argument("--role", choices=("client", "observer"), default="client", help="local endpoint role")
    _descriptor_args(p)
    p.add_argument("--num-packets", type=int, default=1024)
    p.add_argument("--packet-size", type=int, default=1420)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--num-pairs", type=int, default=25)
    p.add_argument("--pair-gap", type=float, default=0.01, metavar="SECONDS")
    p.add_argument("--num-probes", type=int, default=25)
    p.add_argument("--payload-size", type=int, default=1)
    p.add_argument("--timeout", type=float, default=2.0, metavar="SECONDS", help="UDP probe timeout")
    p.add_argument("--output", metavar="FILE", help="write records as NDJSON here (default stdout)")
    _aggregator_args(p)

    for name, role in (("observe", "observer"), ("remote", "remote server")):
        p = add(name, f"run the {role} responder")
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=DEFAULT_PROBE_PORT)

    p = add("analyze", "analyse a pcap capture into passive throughput and latency")
    p.add_argument("pcap", nargs="?", help="classic pcap file")
    p.add_argument("--filter", dest="filter_expr", metavar="EXPR",
                   help="e.g. 'host 10.0.0.1 and port 8080' (clauses joined by 'and')")
    p.add_argument("--bin-width", type=float, default=0.5, metavar="SECONDS")
    _descriptor_args(p)
    p.add_argument("--run-id")
    p.add_argument("--dump-csv", metavar="FILE", help="write bins and latency samples as CSV")
    p.add_argument("--output", metavar="FILE", help="write records as NDJSON")
    _aggregator_args(p)

    p = add("aggregate", "run the aggregator REST service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_AGGREGATOR_PORT)
    p.add_argument("--db", default="edgeperf.sqlite3", help="SQLite store path")
    p.add_argument("--token", default=os.environ.get(ENV_TOKEN), help=f"require this bearer token (env {ENV_TOKEN})")

    p = add("export", "export matching runs as a trace repository")
    p.add_argument("--dest", help="destination directory")
    p.add_argument("--db", help="read a store file directly instead of the REST service")
    _descriptor_args(p, filtering=True)
    p.add_argument("--start-us", type=int)
    p.add_argument("--end-us", type=int)
    p.add_argument("--run-id")
    _aggregator_args(p)

    p = add("replay", "print a seeded trace's values over a time sweep as CSV")
    p.add_argument("--repo", help="trace repository (default: bundled synthetic traces)")
    _descriptor_args(p, filtering=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--circular", action="store_true")
    p.add_argument("--start", type=float, default=0.0)
    p.add_argument("--stop", type=float, default=None, help="default: trace duration")
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--output", metavar="FILE")

    p = add("simulate", "run the two-operator migration study and write quantile CSV")
    p.add_argument("--repo", help="trace repository (default: bundled bimodal RTT pool)")
    p.add_argument("--gammas", type=float_list, default=[0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5])
    p.add_argument("--num-clients", type=int, default=100)
    p.add_argument("--mean-period", type=float, default=10.0)
    p.add_argument("--num-slots", type=int, default=200)
    p.add_argument("--replications", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quantiles", type=float_list, default=[0.5, 0.75, 0.95])
    p.add_argument("--seconds-per-slot", type=float, default=1.0)
    p.add_argument("--op1-query", type=key_values, help="trace query for operator 1 (k=v,... or JSON)")
    p.add_argument("--op2-query", type=key_values, help="trace query for operator 2")
    p.add_argument("--paired", action=argparse.BooleanOptionalAction, default=None,
                   help="select both traces of a client with one seed")
    p.add_argument("--output", metavar="FILE", help="CSV destination (default stdout)")

    p = add("fixtures", "generate deterministic synthetic fixtures")
    p.add_argument("kind", nargs="?", choices=("synthetic-pcap", "synthetic-traces", "bimodal-rtt-pool"))
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--dest", help="destination directory")

    p = add("run-profile", "run a named or file-based experiment profile")
    p.add_argument("profile", nargs="?", help="bundled profile name (default, full) or JSON file")
    p.add_argument("--observer", type=host_port, help="observer responder host:port")
    p.add_argument("--remote", type=host_port, help="remote server responder host:port")
    p.add_argument("--access-technology", choices=[a.value for a in AccessTechnology], default="wifi")
    p.add_argument("--cross-traffic", dest="cross_traffic_mbps", type=float, default=0.0)
    p.add_argument("--dry-run", action="store_true", help="print the expanded plan and exit")
    _aggregator_args(p)

    return parser


# -- config files ----------------------------------------------------------

def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def apply_config(parser: argparse.ArgumentParser, command: str, path: str) -> None:
    sub = _subparser(parser, command)
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        sub.error(f"cannot read config {path}: {exc.strerror}")
    except json.JSONDecodeError as exc:
        sub.error(f"config {path} is not valid JSON ({exc.msg})")
    if not isinstance(doc, dict):
        sub.error(f"config {path} must hold a JSON object")
    known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "verbose")}
    values: dict[str, Any] = {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest == "cross_traffic":
            dest = "cross_traffic_mbps"
        action = known.get(dest)
        if action is None:
            sub.error(f"unknown option {key!r} in config {path}")
        if isinstance(value, str) and action.type is not None:
            try:
                value = action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                sub.error(f"config {key}: {exc}")
        elif isinstance(value, list) and action.type is float_list:
            value = [float(v) for v in value]
        elif isinstance(value, list) and action.type is host_port:
            value = (str(value[0]), int(value[1]))
        if action.choices is not None and value not in action.choices:
            sub.error(f"config {key}: {value!r} is not one of {list(action.choices)}")
        values[dest] = value
    sub.set_defaults(**values)


# -- helpers ---------------------------------------------------------------

def _descriptor(args, method: Method, kind: MetricKind) -> TraceDescriptor:
    return TraceDescriptor(
        method,
        Metric(kind),
        SegmentId(args.segment),
        Direction(args.direction),
        AccessTechnology(args.access_technology),
        args.cross_traffic_mbps,
        args.num_clients,
    )


def _filter_params(args) -> dict[str, str]:
    params = {}
    for key in ("method", "metric", "segment", "direction", "access_technology", "cross_traffic_mbps",
                "num_clients", "start_us", "end_us", "run_id"):
        value = getattr(args, key, None)
        if value is not None:
            params[key] = str(value)
    return params


def _descriptor_query(args) -> dict[str, Any]:
    params = _filter_params(args)
    for key in ("start_us", "end_us", "run_id"):
        params.pop(key, None)
    return params


def _client(args, submitter: str):
    if not args.aggregator:
        return None
    from .aggregator.client import AggregatorClient

    return AggregatorClient(args.aggregator, args.token, submitter=submitter)


def _open_out(path: str | None):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


# -- commands --------------------------------------------------------------

def cmd_probe(args) -> int:
    from .probes.client import (
        BandwidthProbeConfig,
        CapacityProbeConfig,
        LatencyProbeConfig,
        PlanItem,
        ProbeSession,
        run_active_suite,
    )

    _require(args, "peer")
    metric = MetricKind(args.metric)
    transport = "udp" if metric in (MetricKind.UDP_CAPACITY, MetricKind.UDP_LATENCY) else "tcp"
    try:
        session = ProbeSession(args.role, args.peer, transport, args.segment, args.access_technology,
                               args.cross_traffic_mbps)
        if metric is MetricKind.TCP_BANDWIDTH:
            cfg = BandwidthProbeConfig(args.num_packets, args.packet_size, args.repetitions)
        elif metric is MetricKind.UDP_CAPACITY:
            cfg = CapacityProbeConfig(args.num_pairs, args.packet_size, args.pair_gap, args.timeout)
        else:
            cfg = LatencyProbeConfig(args.num_probes, args.payload_size, args.timeout)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = run_active_suite([PlanItem(session, cfg, Direction(args.direction))],
                              _client(args, args.role), submitter=args.role)
    out, close = _open_out(args.output)
    try:
        for r in result.records:
            out.write(encode_record(r) + "\n")
    finally:
        if close:
            out.close()
    for _, err in result.errors:
        print(f"error: {err}", file=sys.stderr)
    if result.records:
        headline = [r for r in result.records if r.attrs.get("estimate") != "pair"]
        values = sorted(r.value for r in headline)
        unit = result.records[0].unit
        print(f"{args.metric} {args.direction}: {len(headline)} value(s), median "
              f"{values[len(values) // 2]:.3f} {unit}", file=sys.stderr)
    return 1 if result.errors else 0


def cmd_responder(args) -> int:
    from .probes.responder import Responder

    role = "observer" if args.command == "observe" else "remote_server"
    r = Responder(args.host, args.port, role)
    print(f"{role} listening on {r.address[0]}:{r.address[1]} (tcp+udp)", flush=True)
    r.serve_forever()
    return 0


def cmd_analyze(args) -> int:
    from .passive.analysis import analyze_capture
    from .passive.flows import FilterSyntaxError, parse_filter
    from .passive.pcap import PcapFormatError

    _require(args, "pcap")
    try:
        parse_filter(args.filter_expr)
    except FilterSyntaxError as exc:
        raise UsageError(f"--filter: {exc}") from None
    try:
        data = Path(args.pcap).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {args.pcap}: {exc.strerror}", file=sys.stderr)
        return 1
    desc = _descriptor(args, Method.PASSIVE, MetricKind.PASSIVE_THROUGHPUT)
    try:
        res = analyze_capture(data, args.filter_expr, desc, args.bin_width, args.run_id, _client(args, "observer"))
    except PcapFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            for r in res.records:
                fh.write(encode_record(r) + "\n")
    if args.dump_csv:
        with open(args.dump_csv, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "flow", "side", "timestamp_us", "value", "bytes"])
            for r in res.records:
                w.writerow([r.descriptor.metric.kind.value, r.attrs.get("flow"), r.attrs.get("side"),
                            r.timestamp_us, repr(r.value), r.attrs.get("bytes", "")])
    thr = res.by_metric(MetricKind.PASSIVE_THROUGHPUT)
    lat = res.by_metric(MetricKind.PASSIVE_LATENCY)
    print(f"{len(res.flows)} flow(s), {len(thr)} throughput bin(s), {len(lat)} latency sample(s); "
          f"{res.skipped} packet(s) skipped, {res.truncated} truncated", file=sys.stderr)
    for w_ in res.warnings:
        print(f"warning: {w_}", file=sys.stderr)
    for e in res.errors:
        print(f"error: {e}", file=sys.stderr)
    return 1 if res.errors else 0


def cmd_aggregate(args) -> int:
    from .aggregator.server import serve

    serve(args.db, args.host, args.port, args.token)
    return 0


def cmd_export(args) -> int:
    from .aggregator.store import MeasurementStore, QueryFilter

    _require(args, "dest")
    try:
        flt = QueryFilter.from_params(_filter_params(args))
    except ValidationError as exc:
        raise UsageError(str(exc)) from None
    if args.db:
        if not Path(args.db).is_file():
            print(f"error: no store at {args.db}", file=sys.stderr)
            return 1
        with MeasurementStore(args.db) as store:
            written = store.export_traces(flt, args.dest)
    else:
        client = _client(args, "export")
        if client is None:
            raise UsageError(f"need --db or --aggregator (or {ENV_AGGREGATOR})")
        written = client.export_traces(flt, args.dest)
    print(f"{len(written)} trace file(s) written to {args.dest}", file=sys.stderr)
    return 0


def cmd_replay(args) -> int:
    from .fixtures import bundled_path
    from .traces import TraceRepository, open_trace, sweep

    repo = TraceRepository.open(args.repo or bundled_path("synthetic-traces"))
    trace = open_trace(repo, _descriptor_query(args), args.seed, args.circular)
    stop = args.stop if args.stop is not None else trace.duration
    if args.step <= 0:
        raise UsageError("--step must be positive")
    out, close = _open_out(args.output)
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["t", "bandwidth_mbps", "rtt_ms"])
        for t, bw, rtt in sweep(trace, args.start, stop, args.step):
            w.writerow([repr(t), "" if bw is None else repr(bw), "" if rtt is None else repr(rtt)])
    finally:
        if close:
            out.close()
    print(f"trace {', '.join(trace.sources)} (duration {trace.duration:g} s)", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    from .federation import SimulationConfig, run_study, write_csv
    from .fixtures import BIMODAL_STUDY, bundled_path
    from .traces import TraceRepository

    bundled = args.repo is None
    repo = TraceRepository.open(bundled_path("bimodal-rtt-pool") if bundled else args.repo)
    defaults = BIMODAL_STUDY if bundled else {"trace_query_op1": {}, "trace_query_op2": {}, "paired_traces": False}
    try:
        cfg = SimulationConfig(
            num_clients=args.num_clients,
            mean_period=args.mean_period,
            num_slots=args.num_slots,
            num_replications=args.replications,
            seed=args.seed,
            trace_query_op1=args.op1_query if args.op1_query is not None else defaults["trace_query_op1"],
            trace_query_op2=args.op2_query if args.op2_query is not None else defaults["trace_query_op2"],
            quantiles=tuple(args.quantiles),
            seconds_per_slot=args.seconds_per_slot,
            paired_traces=args.paired if args.paired is not None else defaults["paired_traces"],
        )
        if not args.gammas or not all(0 <= g <= 1 for g in args.gammas):
            raise ValueError("--gammas needs values in [0, 1]")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    results = run_study(cfg, args.gammas, repo)
    out, close = _open_out(args.output)
    try:
        write_csv(results, out)
    finally:
        if close:
            out.close()
    return 0


def cmd_fixtures(args) -> int:
    from .fixtures import generate_fixtures

    _require(args, "kind", "dest")
    written = generate_fixtures(args.kind, args.seed, args.dest)
    print(f"{len(written)} file(s) written to {args.dest}", file=sys.stderr)
    return 0


def cmd_run_profile(args) -> int:
    from .probes.client import run_active_suite
    from .profiles import ProfileError, expand, expected_records, load_profile

    _require(args, "profile")
    try:
        profile = load_profile(args.profile)
        endpoints = {k: v for k, v in (("observer", args.observer), ("remote", args.remote)) if v}
        if args.dry_run:
            endpoints = {"observer": ("observer", 0), "remote": ("remote", 0), **endpoints}
        plan = expand(profile, endpoints, args.access_technology, args.cross_traffic_mbps)
    except ProfileError as exc:
        raise UsageError(str(exc)) from None
    if args.dry_run:
        for i, item in enumerate(plan):
            print(f"{i:3d}  {item.describe()}  {item.config}")
        print(f"{len(plan)} item(s), {expected_records(plan)} record(s) expected; nothing submitted")
        return 0
    result = run_active_suite(plan, _client(args, "client"))
    print(f"{len(result.records)} record(s) from {len(plan)} item(s); "
          f"{len(result.batch_ids)} batch(es) submitted; {len(result.errors)} error(s)")
    for idx, err in result.errors:
        where = plan[idx].describe() if idx >= 0 else "aggregator"
        print(f"  error [{where}]: {err}", file=sys.stderr)
    return 1 if result.errors else 0


COMMANDS = {
    "probe": cmd_probe,
    "observe": cmd_responder,
    "remote": cmd_responder,
    "analyze": cmd_analyze,
    "aggregate": cmd_aggregate,
    "export": cmd_export,
    "replay": cmd_replay,
    "simulate": cmd_simulate,
    "fixtures": cmd_fixtures,
    "run-profile": cmd_run_profile,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        apply_config(parser, args.command, args.config)
        args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _subparser(parser, args.command).print_usage(sys.stderr)
        print(f"edgeperf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001 - reported as an operation failure
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
