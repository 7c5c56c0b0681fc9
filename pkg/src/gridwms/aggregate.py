"""Aggregator job body: merge sub-job states into one.

Runs as the aggregator node of a partitioned (or user) DAG.  The manager
injects WMS_AGGREGATE="node=jobId,..." at submission time, once the
sub-job ids are known.  The merged pairs, namespaced <node>.<var>, are
saved as this job's own checkpoint state.
"""

from __future__ import annotations

import os
import sys

from .client import GatewayClient, GatewayError, TransportError
from .partition import merge_pairs


def main(argv: list[str] | None = None) -> int:
    mapping_text = os.environ.get("WMS_AGGREGATE", "")
    job_id = os.environ.get("WMS_JOB_ID")
    if not job_id:
        print("aggregate: WMS_JOB_ID is not set", file=sys.stderr)
        return 1
    mapping: dict[str, str] = {}
    for part in filter(None, mapping_text.split(",")):
        node, sep, sub_id = part.partition("=")
        if sep:
            mapping[node] = sub_id
    if not mapping:
        print("aggregate: WMS_AGGREGATE lists no sub-jobs", file=sys.stderr)
        return 1
    try:
        with GatewayClient.from_addr(None) as client:
            states: dict[str, list[tuple[str, str]]] = {}
            for node, sub_id in mapping.items():
                status = client.call("status", job=sub_id)
                if status["state"] != "DONE_OK":
                    print(f"aggregate: sub-job {node} is {status['state']}", file=sys.stderr)
                    return 1
                body = client.call("get-state", job=sub_id)
                states[node] = [(k, v) for k, v in body["pairs"]]
            merged = merge_pairs(states)
            client.call("save-state", job=job_id, pairs=[[k, v] for k, v in merged])
    except GatewayError as exc:
        if exc.code == "NoSuchState":
            print("aggregate: a sub-job saved no state", file=sys.stderr)
        else:
            print(f"aggregate: {exc}", file=sys.stderr)
        return 1
    except TransportError as exc:
        print(f"aggregate: {exc}", file=sys.stderr)
        return 1
    for var, value in merged:
        print(f"{var}={value}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
