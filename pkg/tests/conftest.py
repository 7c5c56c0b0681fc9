"""Shared fixtures: spool trees, resource fixtures, and a full stack."""

from __future__ import annotations

import time
from pathlib import Path

import pytest

from gridwms.client import GatewayClient
from gridwms.layout import SpoolLayout
from gridwms.stack import Stack

TERMINAL = {"DONE_OK", "DONE_FAILED", "ABORTED", "CANCELLED", "CLEARED"}


def write_resource(res_dir: Path, rid: str, rtype: str = "CE", **attrs) -> Path:
    """Write one resource fixture ad.  Keyword values: int, str, or list."""
    parts = [f'Id = "{rid}"', f'Type = "{rtype}"']
    for name, value in attrs.items():
        if isinstance(value, bool):
            parts.append(f"{name} = {'true' if value else 'false'}")
        elif isinstance(value, int):
            parts.append(f"{name} = {value}")
        elif isinstance(value, (list, tuple)):
            items = ", ".join(f'"{v}"' for v in value)
            parts.append(f"{name} = {{{items}}}")
        else:
            parts.append(f'{name} = "{value}"')
    res_dir.mkdir(parents=True, exist_ok=True)
    path = res_dir / f"{rid.lower()}.ad"
    path.write_text("[ " + "; ".join(parts) + "; ]")
    return path


def write_accounts(spool: Path, funding: dict[str, tuple[str, int]]) -> None:
    entries = ", ".join(
        f'[ Id = "{aid}"; Kind = "{kind}"; Balance = {balance}; ]'
        for aid, (kind, balance) in funding.items()
    )
    (spool / "accounts.ad").write_text(f"[ Accounts = {{ {entries} }}; ]")


def default_fixture(spool: Path) -> Path:
    """Three production CEs sharing one SE plus a drained CE."""
    res = spool / "resources"
    write_resource(res, "CE1", Status="Production", FreeCPUs=4, TotalCPUs=4, Slots=3,
                   CloseSEs=["SE1"], OwnerGroup="physics", PricePerCpuSecond=2)
    write_resource(res, "CE2", Status="Production", FreeCPUs=2, TotalCPUs=2, Slots=3,
                   CloseSEs=["SE1"], OwnerGroup="physics", PricePerCpuSecond=1)
    write_resource(res, "CE3", Status="Production", FreeCPUs=7, TotalCPUs=8, Slots=2,
                   CloseSEs=[], OwnerGroup="astro", PricePerCpuSecond=3)
    write_resource(res, "SE1", rtype="SE", AvailableSpace=1000)
    return res


@pytest.fixture
def spool(tmp_path: Path) -> SpoolLayout:
    layout = SpoolLayout(tmp_path / "spool").ensure()
    default_fixture(layout.root)
    write_accounts(layout.root, {"alice": ("User", 10_000), "bob": ("User", 500),
                                 "physics": ("Group", 5_000), "astro": ("Group", 5_000)})
    return layout


@pytest.fixture
def stack(spool: SpoolLayout):
    with Stack(spool.root, fake_cpu_seconds=0.5, match_retries=2, stuck_after=8.0) as st:
        yield st


@pytest.fixture
def client(stack: Stack):
    with GatewayClient.from_addr(stack.address, user="alice") as c:
        yield c


def wait_state(client: GatewayClient, job: str, want: set[str] | None = None, timeout: float = 30.0) -> dict:
    """Poll status until the job reaches one of `want` (default: terminal)."""
    want = want or TERMINAL
    deadline = time.monotonic() + timeout
    last = None
    while time.monotonic() < deadline:
        last = client.call("status", job=job)
        if last["state"] in want:
            return last
        time.sleep(0.1)
    raise AssertionError(f"job {job} stuck in {last['state'] if last else '?'} after {timeout}s")
