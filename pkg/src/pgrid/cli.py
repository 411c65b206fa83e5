"""``pgrid`` command line: sim, node, admin and lookup.

Every flag can also come from ``--config FILE``, a JSON object with one
section per command (``{"sim": {"seed": 7}, "node": {...}}``); flags given on
the command line win.  The seed falls back to ``PGRID_SEED``.
Exit codes: 0 success, 1 internal error, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from .model import Endpoint, ModelError

EXIT_OK, EXIT_ERROR, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    """Bad input from the operator; maps to exit code 2."""


def _fail(msg: str) -> UsageError:
    return UsageError(msg)


# -- configuration ---------------------------------------------------------------------------


def load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise _fail(f"{path}: no such file") from None
    except (OSError, ValueError) as exc:
        raise _fail(f"{path}: {exc}") from None
    schema = json.loads(resources.files("pgrid.data").joinpath("cli-config.schema.json").read_text())
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(map(str, e.absolute_path)) or "(root)"
        raise _fail(f"{path}: {where}: {e.message}")
    return doc


def merged(args: argparse.Namespace, section: str, keys) -> dict[str, Any]:
    """Flag value if given, else the config file's section value, else None."""
    cfg = load_config(args.config)
    sect = cfg.get(section, {})
    out = {k: getattr(args, k, None) if getattr(args, k, None) is not None else sect.get(k) for k in keys}
    if "seed" in keys and out["seed"] is None:
        out["seed"] = cfg.get("seed")
        if out["seed"] is None and os.environ.get("PGRID_SEED"):
            try:
                out["seed"] = int(os.environ["PGRID_SEED"])
            except ValueError:
                raise _fail(f"PGRID_SEED must be an integer, got {os.environ['PGRID_SEED']!r}") from None
    for k, v in sect.items():
        out.setdefault(k, v)
    return out


def endpoint(text: str | None, what: str) -> Endpoint:
    if not text:
        raise _fail(f"{what} is required")
    try:
        return Endpoint.parse(text)
    except ModelError as exc:
        raise _fail(f"{what}: {exc}") from None


# -- sim -------------------------------------------------------------------------------------


def _resolve_scenario(ref: str):
    from .sim import bundled, load_scenario

    if not Path(ref).exists() and resources.files("pgrid.data").joinpath(f"{ref}.json").is_file():
        return bundled(ref)
    return load_scenario(ref)


def cmd_sim(args) -> int:
    from dataclasses import replace

    from .sim import InvalidScenario, run

    opts = merged(args, "sim", ("scenario", "seed", "metrics", "trace", "series", "baseline"))
    if not opts["scenario"]:
        raise _fail("--scenario is required")
    try:
        sc = _resolve_scenario(opts["scenario"])
    except InvalidScenario as exc:
        raise _fail("invalid scenario:\n  " + "\n  ".join(exc.diagnostics)) from None
    if opts["seed"] is not None:
        sc = sc.with_seed(opts["seed"])
    if opts["baseline"] is not None:
        sc = replace(sc, baseline=opts["baseline"] == "on")
    result = run(sc, trace=bool(opts["trace"]))
    text = result.metrics.to_json()
    if opts["metrics"]:
        Path(opts["metrics"]).write_text(text)
    else:
        sys.stdout.write(text)
    if opts["trace"]:
        Path(opts["trace"]).write_text("".join(line + "\n" for line in result.trace))
    if opts["series"]:
        Path(opts["series"]).write_text(result.metrics.stddev_csv())
    return EXIT_OK


# -- admin -----------------------------------------------------------------------------------


def read_topology(path: str, hop_threshold: int | None):
    """Accept either a full scenario file or just its ``topology`` object (plus optional ``hop_threshold``)."""
    from .sim import InvalidScenario, parse_scenario

    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise _fail(f"{path}: no such file") from None
    except (OSError, ValueError) as exc:
        raise _fail(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise _fail(f"{path}: expected a JSON object")
    if "topology" not in doc:
        doc = dict(doc)
        threshold = doc.pop("hop_threshold", 3)
        doc = {"seed": 0, "horizon": 1, "hop_threshold": threshold, "topology": doc}
    try:
        sc = parse_scenario(doc)
    except InvalidScenario as exc:
        raise _fail("invalid topology:\n  " + "\n  ".join(exc.diagnostics)) from None
    return sc.topology, hop_threshold if hop_threshold is not None else sc.hop_threshold


def cmd_admin(args) -> int:
    from .udp import AdminServer, BindFailed, emit, setup_logging

    opts = merged(args, "admin", ("topology", "hop_threshold", "listen"))
    if not opts["topology"]:
        raise _fail("--topology is required")
    topology, threshold = read_topology(opts["topology"], opts["hop_threshold"])
    if threshold < 1:
        raise _fail("--hop-threshold must be >= 1")
    listen = endpoint(opts["listen"] or "127.0.0.1:7400", "--listen")
    setup_logging()
    try:
        server = AdminServer(listen, topology, threshold)
    except BindFailed as exc:
        print(f"pgrid admin: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for domain, members in server.assignment_table():
        print(f"{domain}\t{' '.join(members)}")
    sys.stdout.flush()
    emit("admin_ready", listen=str(listen), domains=len(server.assignment_table()))
    _stop_on_signal(server.stop)
    try:
        server.serve()
    finally:
        server.close()
    return EXIT_OK


# -- node ------------------------------------------------------------------------------------


def cmd_node(args) -> int:
    from .balancer import CommandExecutor, NoopExecutor
    from .node import NodeConfig
    from .udp import BindFailed, FileProbe, JoinFailed, NodeDaemon, PsutilProbe, emit, setup_logging

    opts = merged(args, "node", ("listen", "admin", "services", "seed", "migrate_hook", "score", "probe", "node_config"))
    listen = endpoint(opts["listen"], "--listen")
    admin = endpoint(opts["admin"], "--admin")
    services = opts["services"] or []
    if isinstance(services, str):
        services = [s.strip() for s in services.split(",") if s.strip()]
    try:
        config = NodeConfig.from_dict(opts["node_config"])
    except (TypeError, ValueError) as exc:
        raise _fail(f"node_config: {exc}") from None
    probe = None
    if opts["probe"] == "psutil":
        probe = PsutilProbe()
    elif opts["probe"]:
        probe = FileProbe(opts["probe"])
    executor = CommandExecutor(opts["migrate_hook"]) if opts["migrate_hook"] else NoopExecutor()
    score = float(opts["score"]) if opts["score"] is not None else 1.0
    setup_logging()
    daemon = NodeDaemon(listen, admin, services, seed=opts["seed"] or 0, config=config,
                        probe=probe, executor=executor, score=score)
    try:
        daemon.start()
    except (BindFailed, JoinFailed) as exc:
        emit("startup_failed", node=str(listen), error=str(exc))
        print(f"pgrid node: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _stop_on_signal(daemon.stop)
    daemon.run()
    return EXIT_OK


# -- lookup ----------------------------------------------------------------------------------


def cmd_lookup(args) -> int:
    from .udp import format_result, lookup

    opts = merged(args, "lookup", ("via", "timeout"))
    via = endpoint(opts["via"], "--via")
    result = lookup(via, args.service, timeout=float(opts["timeout"] or 15.0))
    if result is None:
        print(f"pgrid lookup: no answer from {via}", file=sys.stderr)
        return EXIT_ERROR
    print(format_result(result))
    return EXIT_OK


# -- plumbing --------------------------------------------------------------------------------


def _stop_on_signal(stop):
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgrid", description="Domain-partitioned grid: simulator and UDP daemons.")
    p.add_argument("--config", help="JSON file with per-command defaults")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sim", help="run a scenario in the discrete-event simulator")
    s.add_argument("--scenario", help="scenario file, or the name of a bundled scenario")
    s.add_argument("--seed", type=int)
    s.add_argument("--metrics", help="write the metrics JSON here (default stdout)")
    s.add_argument("--trace", help="write the full event trace here")
    s.add_argument("--series", help="write the cpu stddev series as CSV here")
    s.add_argument("--baseline", choices=["on", "off"], help="count the flooding baseline for each lookup")
    s.set_defaults(func=cmd_sim)

    n = sub.add_parser("node", help="run one node over UDP")
    n.add_argument("--listen", help="addr:base_port; four ports from base_port are bound")
    n.add_argument("--admin", help="admin addr:port")
    n.add_argument("--services", help="comma-separated services this node offers")
    n.add_argument("--seed", type=int)
    n.add_argument("--migrate-hook", dest="migrate_hook", help="command run to migrate a task")
    n.add_argument("--score", type=float, help="capacity score used in leader election")
    n.add_argument("--probe", help="'psutil' or a JSON load file (default: always idle)")
    n.set_defaults(func=cmd_node)

    a = sub.add_parser("admin", help="run the bootstrap admin")
    a.add_argument("--topology", help="topology or scenario JSON")
    a.add_argument("--hop-threshold", dest="hop_threshold", type=int)
    a.add_argument("--listen", help="addr:port (default 127.0.0.1:7400)")
    a.set_defaults(func=cmd_admin)

    q = sub.add_parser("lookup", help="resolve a service through a running node")
    q.add_argument("--via", help="node addr:base_port")
    q.add_argument("--timeout", type=float)
    q.add_argument("service")
    q.set_defaults(func=cmd_lookup)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pgrid {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001
        print(f"pgrid {args.command}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
