"""Small filesystem and clock helpers shared across components."""

from __future__ import annotations

import fcntl
import json
import os
import secrets
import sys
import time
from contextlib import contextmanager
from pathlib import Path


def now_ms() -> int:
    return int(time.time() * 1000)


def random_suffix(nbytes: int = 4) -> str:
    return secrets.token_hex(nbytes)


def fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def atomic_write_bytes(path: Path, data: bytes, tmp_prefix: str = ".tmp.") -> None:
    """Write via a temp file in the same directory, fsync, then rename.

    The rename is the commit point: readers either see the old content or
    the complete new content, never a partial write.
    """
    tmp = path.parent / f"{tmp_prefix}{random_suffix()}"
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.rename(tmp, path)
        fsync_dir(path.parent)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@contextmanager
def flocked(lock_path: Path):
    """Exclusive advisory lock held for the duration of the block.

    flock is released automatically if the holding process dies, which is
    what makes it safe to use in crash-prone components.
    """
    lock_path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(lock_path, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        yield
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def append_line(path: Path, line: str) -> None:
    """Append one newline-terminated line with a single write plus fsync.

    If a previous crash left a partial line at the end of the file, a
    newline is inserted first so the corrupt tail stays isolated on its
    own (unparseable) line instead of merging with this record.
    """
    data = line.encode("utf-8")
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        size = os.fstat(fd).st_size
        if size > 0:
            with open(path, "rb") as rf:
                rf.seek(size - 1)
                if rf.read(1) != b"\n":
                    os.write(fd, b"\n")
        os.write(fd, data + b"\n")
        os.fsync(fd)
    finally:
        os.close(fd)


def read_json_lines(path: Path) -> list[dict]:
    """Parse one-JSON-object-per-line files, skipping corrupt lines."""
    out: list[dict] = []
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        return out
    for line in raw.split(b"\n"):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            continue
        if isinstance(obj, dict):
            out.append(obj)
    return out


def python_child_env(extra: dict[str, str] | None = None) -> dict[str, str]:
    """Environment for spawning `python -m gridwms...` children.

    Prepends this package's source root to PYTHONPATH so children work
    whether or not the package is pip-installed.
    """
    env = dict(os.environ)
    pkg_root = str(Path(__file__).resolve().parent.parent)
    existing = env.get("PYTHONPATH", "")
    parts = [pkg_root] + ([existing] if existing else [])
    env["PYTHONPATH"] = os.pathsep.join(parts)
    if extra:
        env.update(extra)
    return env


def python_executable() -> str:
    return sys.executable
