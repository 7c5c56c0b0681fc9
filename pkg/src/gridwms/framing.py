"""Stream framing for interactive jobs.

Each frame is 1 byte of stream id (0 = stdin toward the job, 1 = stdout,
2 = stderr) followed by a 4-byte big-endian payload length and the
payload.  A zero-length frame signals end-of-stream for that id.  Frames
are self-delimiting, so concatenated frames split at arbitrary byte
boundaries reassemble identically.
"""

from __future__ import annotations

import struct

STDIN, STDOUT, STDERR = 0, 1, 2

_HEADER = struct.Struct(">BI")
MAX_FRAME = 1 << 20


def encode_frame(stream_id: int, payload: bytes) -> bytes:
    if not 0 <= stream_id <= 255:
        raise ValueError("stream id out of range")
    if len(payload) > MAX_FRAME:
        raise ValueError("frame too large")
    return _HEADER.pack(stream_id, len(payload)) + payload


class FrameDecoder:
    """Incremental decoder: feed() bytes, collect (stream_id, payload)."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < _HEADER.size:
                break
            stream_id, length = _HEADER.unpack_from(self._buf)
            if length > MAX_FRAME:
                raise ValueError("frame exceeds maximum size")
            end = _HEADER.size + length
            if len(self._buf) < end:
                break
            frames.append((stream_id, bytes(self._buf[_HEADER.size : end])))
            del self._buf[:end]
        return frames
