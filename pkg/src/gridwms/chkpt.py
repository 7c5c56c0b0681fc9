"""In-job checkpoint helper: the state API jobs call from any language.

    wms-chkpt save var=value [var=value ...]
    wms-chkpt load

`save` records the pairs as the job's next checkpoint state through the
gateway.  `load` prints the restore state one var=value per line: the
contents of $WMS_CHECKPOINT_IN when the scheduler restarted the job from
a saved state, otherwise the latest saved state; a fresh job with
neither prints nothing and exits 0.
"""

from __future__ import annotations

import os
import sys

from .client import GatewayClient, GatewayError, TransportError


def _save(argv: list[str]) -> int:
    job_id = os.environ.get("WMS_JOB_ID")
    if not job_id:
        print("wms-chkpt: WMS_JOB_ID is not set", file=sys.stderr)
        return 1
    pairs = []
    for spec in argv:
        var, sep, value = spec.partition("=")
        if not sep or not var:
            print(f"wms-chkpt: bad pair {spec!r}, expected var=value", file=sys.stderr)
            return 1
        pairs.append([var, value])
    if not pairs:
        print("wms-chkpt: save needs at least one var=value", file=sys.stderr)
        return 1
    try:
        with GatewayClient.from_addr(None) as client:
            body = client.call("save-state", job=job_id, pairs=pairs)
        print(body["seq"])
        return 0
    except (TransportError, GatewayError) as exc:
        print(f"wms-chkpt: {exc}", file=sys.stderr)
        return 1


def _load() -> int:
    restore = os.environ.get("WMS_CHECKPOINT_IN")
    if restore and os.path.isfile(restore):
        with open(restore, "r", encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
        return 0
    job_id = os.environ.get("WMS_JOB_ID")
    if not job_id:
        return 0  # fresh start, nothing to restore
    try:
        with GatewayClient.from_addr(None) as client:
            body = client.call("get-state", job=job_id)
    except GatewayError as exc:
        if exc.code == "NoSuchState":
            return 0
        print(f"wms-chkpt: {exc}", file=sys.stderr)
        return 1
    except TransportError as exc:
        print(f"wms-chkpt: {exc}", file=sys.stderr)
        return 1
    for var, value in body["pairs"]:
        print(f"{var}={value}")
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] not in ("save", "load"):
        print("usage: wms-chkpt save var=value [...] | wms-chkpt load", file=sys.stderr)
        return 1
    if argv[0] == "save":
        return _save(argv[1:])
    return _load()


if __name__ == "__main__":
    raise SystemExit(main())
