"""Deterministic crash-point instrumentation for recovery testing.

A component calls crash_point("name") at its stage boundaries.  In normal
operation this is a no-op.  When WMS_CRASH_ENABLE=1, the control file
$WMS_SPOOL/crashctl/$WMS_COMPONENT is consulted: if it contains
"<point> <n>", the process hard-exits on the n-th hit of that point,
simulating a kill at exactly that boundary.
"""

from __future__ import annotations

import os
from pathlib import Path

_hits: dict[str, int] = {}

CRASH_EXIT_CODE = 137


def crash_point(name: str) -> None:
    if os.environ.get("WMS_CRASH_ENABLE") != "1":
        return
    spool = os.environ.get("WMS_SPOOL")
    component = os.environ.get("WMS_COMPONENT")
    if not spool or not component:
        return
    ctl = Path(spool) / "crashctl" / component
    try:
        text = ctl.read_text().strip()
    except OSError:
        return
    if not text:
        return
    parts = text.split()
    if not parts or parts[0] != name:
        return
    want = int(parts[1]) if len(parts) > 1 else 1
    _hits[name] = _hits.get(name, 0) + 1
    if _hits[name] >= want:
        os._exit(CRASH_EXIT_CODE)
