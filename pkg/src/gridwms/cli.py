"""The wms command-line interface.

Every subcommand maps to exactly one gateway command; the CLI does
framing and file I/O, nothing else.  Exit codes: 0 success, 1 user error
(gateway rejected the request or bad usage), 2 transport error.
"""

from __future__ import annotations

import argparse
import os
import socket
import sys
import threading
from pathlib import Path

from .client import GatewayClient, GatewayError, TransportError
from .errors import WmsError
from .framing import STDERR, STDIN, STDOUT, FrameDecoder, encode_frame
from .jdl import validate_dag, validate_job

EXIT_OK = 0
EXIT_USER = 1
EXIT_TRANSPORT = 2

ATTACH_TIMEOUT = 30.0


def _client(args) -> GatewayClient:
    return GatewayClient.from_addr(args.gateway, user=args.user)


def cmd_submit(args) -> int:
    jdl_path = Path(args.jdl_file)
    jdl_text = jdl_path.read_text("utf-8")
    jd = validate_job(jdl_text)
    with _client(args) as client:
        body = client.call("submit", jdl=jdl_text)
        job_id = body["job"]
        # sandbox paths resolve relative to the JDL file's directory
        for name in jd.input_sandbox:
            client.upload_file(job_id, name, jdl_path.parent / name)
    print(job_id)
    return EXIT_OK


def cmd_submit_dag(args) -> int:
    jdl_path = Path(args.jdl_file)
    jdl_text = jdl_path.read_text("utf-8")
    dag = validate_dag(jdl_text)
    with _client(args) as client:
        body = client.call("submit-dag", jdl=jdl_text)
        job_id = body["job"]
        for node, jd in dag.nodes.items():
            for name in jd.input_sandbox:
                client.upload_file(job_id, f"{node.lower()}/{name}", jdl_path.parent / name)
    print(job_id)
    return EXIT_OK


def cmd_status(args) -> int:
    with _client(args) as client:
        body = client.call("status", job=args.job, verbose=bool(args.verbose))
    print(f"{body['job']} {body['state']} attempt={body['attempt']}", end="")
    if body.get("destination"):
        print(f" destination={body['destination']}", end="")
    if body.get("exitCode") is not None:
        print(f" exit={body['exitCode']}", end="")
    print()
    for name, value in sorted((body.get("userTags") or {}).items()):
        print(f"  tag {name}={value}")
    if args.verbose:
        for ev in body.get("events", []):
            print(f"  {ev['ts']} {ev['src']}/{ev['sseq']} {ev['kind']} {ev['payload']}")
    return EXIT_OK


def cmd_query(args) -> int:
    predicates = []
    if args.owner:
        predicates.append({"field": "owner", "values": args.owner})
    if args.state:
        predicates.append({"field": "state", "values": args.state})
    if args.dest:
        predicates.append({"field": "destination", "values": args.dest})
    tags: dict[str, list[str]] = {}
    for spec in args.tag or []:
        name, sep, value = spec.partition("=")
        if not sep:
            print(f"bad --tag {spec!r}, expected name=value", file=sys.stderr)
            return EXIT_USER
        tags.setdefault(name, []).append(value)
    for name, values in tags.items():
        predicates.append({"field": f"tag:{name}", "values": values})
    if not predicates:
        print("query needs at least one of --tag/--state/--dest/--owner", file=sys.stderr)
        return EXIT_USER
    with _client(args) as client:
        body = client.call("query", predicates=predicates)
    for job in body["jobs"]:
        print(job)
    return EXIT_OK


def cmd_cancel(args) -> int:
    with _client(args) as client:
        client.call("cancel", job=args.job)
    return EXIT_OK


def cmd_resubmit(args) -> int:
    with _client(args) as client:
        client.call("resubmit", job=args.job, from_state=args.from_state)
    return EXIT_OK


def cmd_output(args) -> int:
    dest = Path(args.dir)
    with _client(args) as client:
        files = client.call("output-list", job=args.job)["files"]
        for name in files:
            client.download_file(args.job, name, dest / name)
            print(name)
    return EXIT_OK


def cmd_chkpt_get(args) -> int:
    with _client(args) as client:
        body = client.call("get-state", job=args.job, seq=args.seq)
    for var, value in body["pairs"]:
        print(f"{var}={value}")
    return EXIT_OK


def cmd_resources(args) -> int:
    with _client(args) as client:
        body = client.call("resources")
    for res in body["resources"]:
        print(f"{res['id']} {res['type']} {res['ad']}")
    return EXIT_OK


def cmd_balance(args) -> int:
    with _client(args) as client:
        body = client.call("account-balance", account=args.account)
    print(body["balance"])
    return EXIT_OK


def cmd_attach(args) -> int:
    with _client(args) as client:
        body = client.call("status", job=args.job)
    jd = validate_job(body["jdl"])
    if jd.job_type != "Interactive" or not jd.listener:
        print(f"job {args.job} is not an interactive job with a listener", file=sys.stderr)
        return EXIT_USER
    host, port = jd.listener
    return attach_listener(host, port, timeout=args.timeout)


def attach_listener(
    host: str,
    port: int,
    timeout: float = ATTACH_TIMEOUT,
    stdin=None,
    stdout=None,
    stderr=None,
) -> int:
    """Bind the listener, wait for the wrapper to connect back, then
    bridge the terminal to the stream frames until the job detaches."""
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    stderr = stderr if stderr is not None else sys.stderr.buffer
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        server.bind((host, port))
        server.listen(1)
        server.settimeout(timeout)
        try:
            conn, _addr = server.accept()
        except socket.timeout:
            print(f"no connection from the job within {timeout:.0f}s", file=sys.stderr)
            return EXIT_USER
    finally:
        server.close()

    def pump_stdin() -> None:
        while True:
            chunk = stdin.read1(65536) if hasattr(stdin, "read1") else stdin.read(65536)
            try:
                conn.sendall(encode_frame(STDIN, chunk or b""))
            except OSError:
                return
            if not chunk:
                return

    feeder = threading.Thread(target=pump_stdin, daemon=True)
    feeder.start()
    decoder = FrameDecoder()
    open_streams = {STDOUT, STDERR}
    while open_streams:
        try:
            data = conn.recv(65536)
        except OSError:
            break
        if not data:
            break
        for stream_id, payload in decoder.feed(data):
            if stream_id == STDOUT:
                if payload:
                    stdout.write(payload)
                    stdout.flush()
                else:
                    open_streams.discard(STDOUT)
            elif stream_id == STDERR:
                if payload:
                    stderr.write(payload)
                    stderr.flush()
                else:
                    open_streams.discard(STDERR)
    try:
        conn.close()
    except OSError:
        pass
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wms", description="workload management client")
    parser.add_argument("--gateway", default=os.environ.get("WMS_GATEWAY"), help="host:port")
    parser.add_argument("--user", default=None, help="asserted identity (default: $USER)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("submit", help="submit a job described by a JDL file")
    p.add_argument("jdl_file")
    p.set_defaults(fn=cmd_submit)

    p = sub.add_parser("submit-dag", help="submit a DAG of jobs")
    p.add_argument("jdl_file")
    p.set_defaults(fn=cmd_submit_dag)

    p = sub.add_parser("status", help="show a job's derived state")
    p.add_argument("job")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("query", help="query jobs by tags and standard fields")
    p.add_argument("--tag", action="append", metavar="NAME=VALUE")
    p.add_argument("--state", action="append")
    p.add_argument("--dest", action="append")
    p.add_argument("--owner", action="append")
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("cancel", help="cancel a job")
    p.add_argument("job")
    p.set_defaults(fn=cmd_cancel)

    p = sub.add_parser("resubmit", help="explicitly resubmit a job")
    p.add_argument("job")
    p.add_argument("--from-state", type=int, default=None, metavar="SEQ")
    p.set_defaults(fn=cmd_resubmit)

    p = sub.add_parser("output", help="download the output sandbox")
    p.add_argument("job")
    p.add_argument("dir")
    p.set_defaults(fn=cmd_output)

    p = sub.add_parser("chkpt-get", help="print a saved checkpoint state")
    p.add_argument("job")
    p.add_argument("--seq", type=int, default=None)
    p.set_defaults(fn=cmd_chkpt_get)

    p = sub.add_parser("resources", help="list known resources")
    p.set_defaults(fn=cmd_resources)

    p = sub.add_parser("balance", help="print an account balance")
    p.add_argument("account")
    p.set_defaults(fn=cmd_balance)

    p = sub.add_parser("attach", help="attach to an interactive job's streams")
    p.add_argument("job")
    p.add_argument("--timeout", type=float, default=ATTACH_TIMEOUT)
    p.set_defaults(fn=cmd_attach)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.user is None:
        args.user = os.environ.get("WMS_USER") or os.environ.get("USER", "anonymous")
    try:
        return args.fn(args)
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except GatewayError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        for violation in exc.body.get("violations", []):
            print(f"  {violation}", file=sys.stderr)
        return EXIT_USER
    except (WmsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    raise SystemExit(main())
