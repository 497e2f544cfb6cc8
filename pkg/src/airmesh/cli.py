"""Command line: run scenarios, serve the gateway over HTTP, verify reports.

Exit codes: 0 pass, 1 fail, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading

from .harness import ScenarioError, emit_report, load_scenario, run, verify
from .harness.report import render, verify_files
from .harness.workload import Transport, thresholds_path

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError("expected HOST:PORT")
    return host or "127.0.0.1", int(port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airmesh", description="Airline reservation microservices testbed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a workload scenario and write a report")
    p.add_argument("--scenario", required=True, help="scenario file, or a bundled name: baseline, peak, cache, faulted")
    p.add_argument("--transport", choices=[t.value for t in Transport], help="override the scenario transport")
    p.add_argument("--seed", type=_seed, help="override the scenario seed")
    p.add_argument("--clock", choices=("virtual", "real"), help="override the scenario clock")
    p.add_argument("--duration", type=float, help="override duration_s")
    p.add_argument("--out", required=True, help="report path (.json, .csv or .txt)")
    p.add_argument("--format", choices=("json", "csv", "text"))
    p.add_argument("--thresholds", help="verify the report after the run; a file or a bundled name")

    s = sub.add_parser("serve", help="start gateway and services over loopback HTTP")
    s.add_argument("--listen", type=_addr, default=("127.0.0.1", 8080), help="HOST:PORT (default 127.0.0.1:8080)")
    s.add_argument("--seed", type=_seed, default=0)

    v = sub.add_parser("verify", help="check a report against thresholds")
    v.add_argument("--report", required=True)
    v.add_argument("--thresholds", required=True, help="thresholds file or a bundled name")
    return parser


def cmd_run(args) -> int:
    try:
        spec = load_scenario(args.scenario)
        if args.transport:
            spec.transport = Transport(args.transport)
        if args.seed is not None:
            spec.seed = args.seed
        if args.clock:
            spec.clock = args.clock
        if args.duration is not None:
            spec.duration_s = args.duration
            spec.ramp_s = min(spec.ramp_s, args.duration)
        spec.validate()
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    thresholds = None
    if args.thresholds:
        try:
            thresholds = json.loads(thresholds_path(args.thresholds).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            print(f"cannot read thresholds: {exc}", file=sys.stderr)
            return EXIT_USAGE
    report = run(spec)
    emit_report(report, args.out, args.format)
    sys.stdout.write(render(report, "text"))
    if thresholds is not None:
        return _print_verdicts(verify(report, thresholds))
    return EXIT_OK


def _print_verdicts(verdicts) -> int:
    for v in verdicts:
        print(v.line())
    ok = all(v.passed for v in verdicts)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(args) -> int:
    try:
        verdicts = verify_files(args.report, thresholds_path(args.thresholds))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read inputs: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return _print_verdicts(verdicts)


def cmd_serve(args) -> int:
    from .gateway import GatewayServer
    from .services import AirSystem, SystemConfig
    from .services.consumers import EVENT_TOPICS

    system = AirSystem(SystemConfig(seed=args.seed))
    stop = threading.Event()

    def consume():
        while not stop.is_set():
            moved = sum(system.projector.poll_once(t, timeout=0.05) for t in EVENT_TOPICS)
            moved += system.notifier.drain()
            if not moved:
                stop.wait(0.01)

    threading.Thread(target=consume, daemon=True).start()
    server = GatewayServer(system.gateway, *args.listen)
    host, port = server.address
    print(f"gateway listening on http://{host}:{port}/v1/", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        server.httpd.server_close()
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return {"run": cmd_run, "verify": cmd_verify, "serve": cmd_serve}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
