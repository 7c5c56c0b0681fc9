"""Crash-safe FIFO queues in the filesystem.

Layout inside a queue root:

    SEQ                       persisted sequence counter
    <seq>.msg                 unclaimed item (16-digit zero-padded seq)
    <seq>.claimed.<owner>     item claimed by a consumer
    .tmp.<random>             in-flight temporaries
    .lock                     advisory lock serializing mutations
    .attempts.<seq>           delivery-attempt counter sidecar

Every visible mutation is a single atomic rename, so a crash at any point
leaves either the old state or the new state, never an in-between.  The
contract is at-least-once: a claimed item whose consumer dies is reverted
to unclaimed by recover_scan and redelivered.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .errors import WmsError
from .util import flocked, fsync_dir, random_suffix

ACK = "ack"
NACK = "nack"

SEQ_WIDTH = 16
DEFAULT_STALE_AFTER = 60.0


class StorageError(WmsError):
    code = "StorageError"


class NotClaimedError(WmsError):
    code = "NotClaimed"


@dataclass(frozen=True)
class QueueItem:
    seq: int
    payload: bytes
    attempts: int

    def json(self) -> dict:
        return json.loads(self.payload.decode("utf-8"))


def _seq_name(seq: int) -> str:
    return str(seq).zfill(SEQ_WIDTH)


class FileQueue:
    """One queue rooted at a directory; safe for concurrent processes.

    `fault_hook`, when set, is invoked as fault_hook(op, path) before each
    filesystem mutation; crash-injection tests raise from it to cut the
    operation sequence at every prefix.
    """

    def __init__(self, root: Path | str, create: bool = True):
        self.root = Path(root)
        self.fault_hook: Callable[[str, str], None] | None = None
        if create:
            self.root.mkdir(parents=True, exist_ok=True)
        elif not self.root.is_dir():
            raise StorageError(f"queue root {self.root} does not exist")

    # -- internals ---------------------------------------------------

    def _hook(self, op: str, path: Path) -> None:
        if self.fault_hook is not None:
            self.fault_hook(op, str(path))

    def _lock(self):
        return flocked(self.root / ".lock")

    def _tmp_path(self) -> Path:
        return self.root / f".tmp.{random_suffix()}"

    def _write_tmp(self, data: bytes, op: str) -> Path:
        tmp = self._tmp_path()
        self._hook(op, tmp)
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
        try:
            os.write(fd, data)
            self._hook(op + ".fsync", tmp)
            os.fsync(fd)
        finally:
            os.close(fd)
        return tmp

    def _rename(self, src: Path, dst: Path, op: str) -> None:
        self._hook(op, dst)
        os.rename(src, dst)
        fsync_dir(self.root)

    def _scan(self) -> tuple[list[tuple[int, Path]], list[tuple[int, str, Path]]]:
        unclaimed: list[tuple[int, Path]] = []
        claimed: list[tuple[int, str, Path]] = []
        for entry in os.listdir(self.root):
            if entry.endswith(".msg"):
                stem = entry[: -len(".msg")]
                if stem.isdigit():
                    unclaimed.append((int(stem), self.root / entry))
            elif ".claimed." in entry:
                stem, _, owner = entry.partition(".claimed.")
                if stem.isdigit():
                    claimed.append((int(stem), owner, self.root / entry))
        unclaimed.sort()
        claimed.sort()
        return unclaimed, claimed

    def _read_seq_file(self) -> int:
        try:
            return int((self.root / "SEQ").read_text().strip() or "0")
        except (FileNotFoundError, ValueError):
            return 0

    def _attempts_path(self, seq: int) -> Path:
        return self.root / f".attempts.{_seq_name(seq)}"

    def _read_attempts(self, seq: int) -> int:
        try:
            return int(self._attempts_path(seq).read_text().strip() or "0")
        except (FileNotFoundError, ValueError):
            return 0

    # -- operations ---------------------------------------------------

    def enqueue(self, payload: Mapping | bytes) -> int:
        """Durably append one item; returns its sequence number.

        The payload must be a single JSON object.  On return the item is
        on disk and visible to claimers in FIFO position; on any failure
        it is provably absent.
        """
        if isinstance(payload, Mapping):
            data = json.dumps(dict(payload), sort_keys=True).encode("utf-8")
        else:
            data = bytes(payload)
            try:
                if not isinstance(json.loads(data.decode("utf-8")), dict):
                    raise ValueError
            except (ValueError, UnicodeDecodeError):
                raise StorageError("payload must be a UTF-8 JSON object") from None
        try:
            with self._lock():
                unclaimed, claimed = self._scan()
                on_disk = [s for s, _ in unclaimed] + [s for s, _o, _p in claimed]
                seq = max([self._read_seq_file()] + on_disk) + 1
                seq_tmp = self._write_tmp(str(seq).encode(), "seq.write")
                self._rename(seq_tmp, self.root / "SEQ", "seq.rename")
                msg_tmp = self._write_tmp(data, "msg.write")
                self._rename(msg_tmp, self.root / f"{_seq_name(seq)}.msg", "msg.rename")
                return seq
        except OSError as exc:
            raise StorageError(f"enqueue failed: {exc}") from exc

    def claim(self, owner: str) -> QueueItem | None:
        """Atomically claim the oldest unclaimed item, or None when empty.

        A claimed item is invisible to other claimers until settled or
        reverted by recover_scan.
        """
        if not owner or "/" in owner:
            raise ValueError("owner must be a non-empty path-safe string")
        try:
            with self._lock():
                unclaimed, _ = self._scan()
                if not unclaimed:
                    return None
                seq, path = unclaimed[0]
                target = self.root / f"{_seq_name(seq)}.claimed.{owner}"
                self._rename(path, target, "claim.rename")
                os.utime(target)  # claim time drives staleness detection
                attempts = self._read_attempts(seq) + 1
                tmp = self._write_tmp(str(attempts).encode(), "claim.attempts")
                self._rename(tmp, self._attempts_path(seq), "claim.attempts.rename")
                payload = target.read_bytes()
                return QueueItem(seq=seq, payload=payload, attempts=attempts)
        except OSError as exc:
            raise StorageError(f"claim failed: {exc}") from exc

    def settle(self, seq: int, disposition: str) -> None:
        """Ack deletes the claimed item durably; nack returns it to the
        queue in its original FIFO slot."""
        if disposition not in (ACK, NACK):
            raise ValueError(f"disposition must be {ACK!r} or {NACK!r}")
        try:
            with self._lock():
                _, claimed = self._scan()
                match = [(s, p) for s, _o, p in claimed if s == seq]
                if not match:
                    raise NotClaimedError(f"item {seq} is not claimed")
                _, path = match[0]
                if disposition == ACK:
                    self._hook("settle.unlink", path)
                    os.unlink(path)
                    try:
                        os.unlink(self._attempts_path(seq))
                    except FileNotFoundError:
                        pass
                    fsync_dir(self.root)
                else:
                    self._rename(path, self.root / f"{_seq_name(seq)}.msg", "settle.nack")
        except OSError as exc:
            raise StorageError(f"settle failed: {exc}") from exc

    def recover_scan(self, stale_after: float = DEFAULT_STALE_AFTER) -> int:
        """Remove orphan temporaries and revert stale claims.

        Returns the number of items made claimable again.  Any .tmp.* file
        visible here is an orphan: live operations hold the queue lock for
        the whole temp-write-then-rename sequence.
        """
        recovered = 0
        now = time.time()
        try:
            with self._lock():
                for entry in os.listdir(self.root):
                    if entry.startswith(".tmp."):
                        try:
                            os.unlink(self.root / entry)
                        except FileNotFoundError:
                            pass
                _, claimed = self._scan()
                for seq, _owner, path in claimed:
                    try:
                        age = now - path.stat().st_mtime
                    except FileNotFoundError:
                        continue
                    if age >= stale_after:
                        self._rename(path, self.root / f"{_seq_name(seq)}.msg", "recover.revert")
                        recovered += 1
                fsync_dir(self.root)
        except OSError as exc:
            raise StorageError(f"recover_scan failed: {exc}") from exc
        return recovered

    def recover_dead_owners(self, is_alive: Callable[[str], bool] | None = None) -> int:
        """Revert claims whose owner process is gone.

        Owners are conventionally "<component>-<pid>"; the default probe
        treats an owner as dead when its pid no longer exists.
        """
        probe = is_alive or _owner_pid_alive
        recovered = 0
        try:
            with self._lock():
                _, claimed = self._scan()
                for seq, owner, path in claimed:
                    if not probe(owner):
                        self._rename(path, self.root / f"{_seq_name(seq)}.msg", "recover.dead")
                        recovered += 1
        except OSError as exc:
            raise StorageError(f"recover_dead_owners failed: {exc}") from exc
        return recovered

    # -- non-destructive inspection ------------------------------------

    def iter_items(self) -> Iterable[tuple[int, str, bytes]]:
        """Yield (seq, state, payload) for every item, claimed or not."""
        unclaimed, claimed = self._scan()
        entries = [(seq, "unclaimed", path) for seq, path in unclaimed]
        entries += [(seq, f"claimed.{owner}", path) for seq, owner, path in claimed]
        for seq, state, path in sorted(entries):
            try:
                yield seq, state, path.read_bytes()
            except FileNotFoundError:
                continue

    def pending_count(self) -> int:
        unclaimed, claimed = self._scan()
        return len(unclaimed) + len(claimed)


def _owner_pid_alive(owner: str) -> bool:
    _, _, pid_text = owner.rpartition("-")
    if not pid_text.isdigit():
        return True  # unrecognized owner format: leave it alone
    pid = int(pid_text)
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True
