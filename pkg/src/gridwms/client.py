"""Line-protocol client for the gateway."""

from __future__ import annotations

import base64
import json
import os
import socket
from pathlib import Path

from .errors import WmsError
from .gateway import CHUNK_SIZE, DEFAULT_PORT


class TransportError(Exception):
    """Connection-level failure (distinct from gateway error responses)."""


class GatewayError(WmsError):
    def __init__(self, code: str, message: str, body: dict | None = None):
        self.code = code
        self.body = body or {}
        super().__init__(message)


def parse_addr(text: str | None) -> tuple[str, int]:
    if not text:
        return "127.0.0.1", DEFAULT_PORT
    host, _, port = text.rpartition(":")
    if not host:
        return text, DEFAULT_PORT
    return host, int(port)


class GatewayClient:
    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, user: str = "", timeout: float = 30.0):
        self.user = user or os.environ.get("WMS_USER") or os.environ.get("USER", "anonymous")
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach gateway at {host}:{port}: {exc}") from exc
        self._fh = self._sock.makefile("rwb")
        self._next_id = 0

    @classmethod
    def from_addr(cls, addr: str | None, user: str = "", timeout: float = 30.0) -> "GatewayClient":
        host, port = parse_addr(addr or os.environ.get("WMS_GATEWAY"))
        return cls(host, port, user=user, timeout=timeout)

    def close(self) -> None:
        try:
            self._fh.close()
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "GatewayClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def call(self, cmd: str, **args) -> dict:
        self._next_id += 1
        req_id = f"r{self._next_id}"
        request = {"id": req_id, "cmd": cmd, "user": self.user, "args": args}
        try:
            self._fh.write((json.dumps(request) + "\n").encode("utf-8"))
            self._fh.flush()
            line = self._fh.readline()
        except OSError as exc:
            raise TransportError(f"gateway connection failed: {exc}") from exc
        if not line:
            raise TransportError("gateway closed the connection")
        response = json.loads(line.decode("utf-8"))
        if response.get("id") != req_id:
            raise TransportError(f"response id mismatch: {response.get('id')!r}")
        body = response.get("body") or {}
        if response.get("status") != "ok":
            raise GatewayError(body.get("code", "Internal"), body.get("message", "error"), body)
        return body

    # -- conveniences ------------------------------------------------------

    def upload_file(self, job_id: str, name: str, path: Path) -> None:
        data = Path(path).read_bytes()
        total = max(1, (len(data) + CHUNK_SIZE - 1) // CHUNK_SIZE)
        for i in range(total):
            chunk = data[i * CHUNK_SIZE : (i + 1) * CHUNK_SIZE]
            self.call(
                "sandbox-put",
                job=job_id,
                name=name,
                seq=i + 1,
                data=base64.b64encode(chunk).decode("ascii"),
                eof=(i + 1 == total),
            )

    def download_file(self, job_id: str, name: str, dest: Path) -> None:
        dest.parent.mkdir(parents=True, exist_ok=True)
        with open(dest, "wb") as fh:
            seq = 1
            while True:
                body = self.call("output-get", job=job_id, name=name, seq=seq)
                fh.write(base64.b64decode(body["data"]))
                if body.get("eof"):
                    break
                seq += 1
