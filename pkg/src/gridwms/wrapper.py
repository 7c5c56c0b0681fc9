"""The job wrapper: creates the execution environment on the worker.

Run as `python -m gridwms.wrapper plan.json` inside a fresh scratch
directory.  The wrapper imports the input sandbox, materializes the
checkpoint restore file, exports the job environment, runs the user
executable with the requested stdio routing (bridging the standard
streams over a socket for interactive jobs), collects the output sandbox,
and reports the outcome in wrapper.result:

    {"exit": <code>, "cpu_seconds": <float>}         normal completion
    {"error": "...", ...}                            setup failure or
                                                     signal death

Exit code 125 is reserved for setup failures so the executor can tell
them apart from user exit codes (which it reads from wrapper.result).
"""

from __future__ import annotations

import json
import os
import shutil
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path

from .framing import STDERR, STDIN, STDOUT, FrameDecoder, encode_frame
from .submission import WrapperPlan

SETUP_FAILED = 125
CHECKPOINT_FILE = "wms_checkpoint_in"
CONNECT_RETRY_SECONDS = 0.25
CONNECT_TIMEOUT = 30.0


def _fail(scratch: Path, message: str) -> int:
    _write_result(scratch, {"error": message})
    sys.stderr.write(f"wrapper: {message}\n")
    return SETUP_FAILED


def _write_result(scratch: Path, obj: dict) -> None:
    tmp = scratch / ".wrapper.result.tmp"
    tmp.write_text(json.dumps(obj, sort_keys=True))
    os.replace(tmp, scratch / "wrapper.result")


def _import_sandbox(plan: WrapperPlan, scratch: Path) -> str | None:
    for item in plan.inputs:
        name, source = item.get("name"), item.get("source")
        if not name or not source:
            return f"bad input manifest entry: {item!r}"
        if Path(name).is_absolute() or ".." in Path(name).parts:
            return f"input name escapes scratch: {name}"
        dest = scratch / name
        dest.parent.mkdir(parents=True, exist_ok=True)
        try:
            shutil.copyfile(source, dest)
        except OSError as exc:
            return f"input sandbox copy failed for {name}: {exc}"
    return None


def _export_sandbox(plan: WrapperPlan, scratch: Path) -> str | None:
    if not plan.outputs:
        return None
    out_dir = Path(plan.output_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in plan.outputs:
            if Path(name).is_absolute() or ".." in Path(name).parts:
                return f"output name escapes scratch: {name}"
            src = scratch / name
            if not src.exists():
                continue  # a job may legitimately not produce every file
            dest = out_dir / name
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dest)
    except OSError as exc:
        return f"output sandbox copy failed: {exc}"
    return None


def _resolve_command(plan: WrapperPlan, scratch: Path) -> list[str] | str:
    argv = list(plan.command)
    exe = argv[0]
    if "/" in exe:
        if not Path(exe).is_absolute():
            exe = str(scratch / exe)
    else:
        local = scratch / exe
        if local.exists():
            local.chmod(local.stat().st_mode | 0o755)
            exe = str(local)
        else:
            found = shutil.which(exe)
            if found is None:
                return f"executable not found: {plan.command[0]}"
            exe = found
    if not Path(exe).exists():
        return f"executable not found: {exe}"
    argv[0] = exe
    return argv


def _connect_listener(host: str, port: int) -> socket.socket | None:
    deadline = time.monotonic() + CONNECT_TIMEOUT
    while time.monotonic() < deadline:
        try:
            return socket.create_connection((host, port), timeout=5.0)
        except OSError:
            time.sleep(CONNECT_RETRY_SECONDS)
    return None


def _run_interactive(argv: list[str], env: dict, sock: socket.socket) -> int:
    proc = subprocess.Popen(
        argv,
        env=env,
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
    )

    send_lock = threading.Lock()

    def ship(stream_id: int, fh) -> None:
        while True:
            chunk = fh.read1(65536) if hasattr(fh, "read1") else fh.read(65536)
            if not chunk:
                break
            with send_lock:
                try:
                    sock.sendall(encode_frame(stream_id, chunk))
                except OSError:
                    break
        with send_lock:
            try:
                sock.sendall(encode_frame(stream_id, b""))
            except OSError:
                pass

    def receive() -> None:
        decoder = FrameDecoder()
        while True:
            try:
                data = sock.recv(65536)
            except OSError:
                data = b""
            if not data:
                break
            for stream_id, payload in decoder.feed(data):
                if stream_id != STDIN or proc.stdin is None:
                    continue
                if payload:
                    try:
                        proc.stdin.write(payload)
                        proc.stdin.flush()
                    except (BrokenPipeError, ValueError):
                        return
                else:
                    try:
                        proc.stdin.close()
                    except OSError:
                        pass
                    return

    threads = [
        threading.Thread(target=ship, args=(STDOUT, proc.stdout), daemon=True),
        threading.Thread(target=ship, args=(STDERR, proc.stderr), daemon=True),
        threading.Thread(target=receive, daemon=True),
    ]
    for t in threads:
        t.start()
    rc = proc.wait()
    for t in threads[:2]:
        t.join(timeout=5.0)
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()
    return rc


def run(plan_path: str) -> int:
    scratch = Path.cwd()
    try:
        plan = WrapperPlan.from_dict(json.loads(Path(plan_path).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        return _fail(scratch, f"unreadable plan: {exc}")

    error = _import_sandbox(plan, scratch)
    if error:
        return _fail(scratch, error)

    env = dict(os.environ)
    env.update(plan.env)
    if plan.checkpoint_pairs is not None:
        restore = scratch / CHECKPOINT_FILE
        restore.write_text("".join(f"{k}={v}\n" for k, v in plan.checkpoint_pairs))
        env["WMS_CHECKPOINT_IN"] = str(restore)

    argv = _resolve_command(plan, scratch)
    if isinstance(argv, str):
        return _fail(scratch, argv)

    started = time.monotonic()
    if plan.listener:
        host, port = plan.listener[0], int(plan.listener[1])
        sock = _connect_listener(host, port)
        if sock is None:
            return _fail(scratch, f"interactive listener {host}:{port} unreachable")
        rc = _run_interactive(argv, env, sock)
    else:
        try:
            stdin_fh = open(scratch / plan.stdin, "rb") if plan.stdin else subprocess.DEVNULL
        except OSError as exc:
            return _fail(scratch, f"stdin unavailable: {exc}")
        out_name = plan.stdout or "stdout.log"
        err_name = plan.stderr or "stderr.log"
        with open(scratch / out_name, "wb") as out_fh, open(scratch / err_name, "wb") as err_fh:
            try:
                proc = subprocess.Popen(argv, env=env, stdin=stdin_fh, stdout=out_fh, stderr=err_fh)
            except OSError as exc:
                return _fail(scratch, f"exec failed: {exc}")
            finally:
                if stdin_fh is not subprocess.DEVNULL:
                    stdin_fh.close()
            rc = proc.wait()

    wall = time.monotonic() - started
    cpu_seconds = float(env.get("WMS_FAKE_CPU_SECONDS", wall))

    if rc < 0:
        _write_result(scratch, {"error": f"user executable killed by signal {-rc}", "signal": -rc})
        return SETUP_FAILED

    error = _export_sandbox(plan, scratch)
    if error:
        return _fail(scratch, error)

    _write_result(scratch, {"exit": rc, "cpu_seconds": cpu_seconds})
    return rc if 0 <= rc < 125 else 124


def main() -> int:
    if len(sys.argv) != 2:
        sys.stderr.write("usage: python -m gridwms.wrapper <plan.json>\n")
        return 2
    return run(sys.argv[1])


if __name__ == "__main__":
    raise SystemExit(main())
