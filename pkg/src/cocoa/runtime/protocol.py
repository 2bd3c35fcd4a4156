"""Length-prefixed binary frames between coordinator and workers.

Frame layout::

    u32 LE  payload length
    u8      tag
    ...     payload

Vectors are ``u32 LE count`` followed by ``count`` little-endian float64
(or int64 for index arrays).

Payloads
--------
HELLO        u8 protocol version
ASSIGN       u32 json length, utf-8 JSON header, then the arrays listed in
             the header's ``arrays`` field, in order
BROADCAST_V  u32 round id, vec v
RESULT_DV    u32 round id, u32 steps, f64 sum of g_i over the updated local
             block, f64 local subproblem value, vec dv
DONE         coordinator -> worker: empty. worker -> coordinator: vec alpha
             block, vec averaged alpha block (count 0 when not averaging)
ERROR        utf-8 message
"""

from __future__ import annotations

import json
import socket
import struct

import numpy as np

VERSION = 1

HELLO = 0x01
ASSIGN = 0x02
BROADCAST_V = 0x03
RESULT_DV = 0x04
DONE = 0x05
ERROR = 0x06
TAGS = {HELLO: "HELLO", ASSIGN: "ASSIGN", BROADCAST_V: "BROADCAST_V",
        RESULT_DV: "RESULT_DV", DONE: "DONE", ERROR: "ERROR"}

HEADER = struct.Struct("<IB")
U32 = struct.Struct("<I")
MAX_PAYLOAD = 1 << 31

# per-frame bytes beyond the 8*d vector body
BROADCAST_OVERHEAD = HEADER.size + 4 + 4
RESULT_OVERHEAD = HEADER.size + 4 + 4 + 8 + 8 + 4


class FrameError(ValueError):
    """Malformed or truncated frame."""


def broadcast_frame_size(d: int) -> int:
    return BROADCAST_OVERHEAD + 8 * d


def result_frame_size(d: int) -> int:
    return RESULT_OVERHEAD + 8 * d


def encode_frame(tag: int, payload: bytes = b"") -> bytes:
    if tag not in TAGS:
        raise FrameError(f"unknown tag {tag:#x}")
    return HEADER.pack(len(payload), tag) + payload


def decode_frame(buf: bytes) -> tuple[int, bytes]:
    """Decode exactly one frame from ``buf``."""
    if len(buf) < HEADER.size:
        raise FrameError("truncated header")
    length, tag = HEADER.unpack_from(buf)
    if tag not in TAGS:
        raise FrameError(f"unknown tag {tag:#x}")
    if len(buf) != HEADER.size + length:
        raise FrameError(f"payload length {len(buf) - HEADER.size} does not match header {length}")
    return tag, bytes(buf[HEADER.size:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            break
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes, int]:
    """Block until one frame arrives; returns ``(tag, payload, bytes_read)``.

    Raises ``EOFError`` on a clean close before any byte and ``FrameError``
    when the stream ends mid-frame.
    """
    head = _recv_exact(sock, HEADER.size)
    if not head:
        raise EOFError("connection closed")
    if len(head) < HEADER.size:
        raise FrameError("truncated header")
    length, tag = HEADER.unpack(head)
    if tag not in TAGS:
        raise FrameError(f"unknown tag {tag:#x}")
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload length {length} too large")
    payload = _recv_exact(sock, length)
    if len(payload) < length:
        raise FrameError(f"truncated payload: {len(payload)} of {length} bytes")
    return tag, payload, HEADER.size + length


def send_frame(sock: socket.socket, tag: int, payload: bytes = b"") -> int:
    frame = encode_frame(tag, payload)
    sock.sendall(frame)
    return len(frame)


# --- vectors ---------------------------------------------------------------


def pack_vector(x, dtype="<f8") -> bytes:
    arr = np.ascontiguousarray(x, dtype=dtype)
    return U32.pack(arr.size) + arr.tobytes()


def unpack_vector(buf: bytes, offset: int = 0, dtype="<f8") -> tuple[np.ndarray, int]:
    if len(buf) < offset + 4:
        raise FrameError("truncated vector count")
    (count,) = U32.unpack_from(buf, offset)
    offset += 4
    size = np.dtype(dtype).itemsize * count
    if len(buf) < offset + size:
        raise FrameError("truncated vector body")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).astype(np.dtype(dtype).newbyteorder("="))
    return arr, offset + size


# --- messages --------------------------------------------------------------


def encode_hello(version: int = VERSION) -> bytes:
    return struct.pack("<B", version)


def decode_hello(payload: bytes) -> int:
    if len(payload) != 1:
        raise FrameError("HELLO payload must be one byte")
    return payload[0]


def encode_broadcast(round_id: int, v) -> bytes:
    return U32.pack(round_id) + pack_vector(v)


def decode_broadcast(payload: bytes) -> tuple[int, np.ndarray]:
    if len(payload) < 4:
        raise FrameError("truncated BROADCAST_V")
    (round_id,) = U32.unpack_from(payload)
    v, end = unpack_vector(payload, 4)
    if end != len(payload):
        raise FrameError("trailing bytes in BROADCAST_V")
    return round_id, v


_RESULT_HEAD = struct.Struct("<IIdd")


def encode_result(round_id: int, steps: int, g_sum: float, sub_value: float, dv) -> bytes:
    return _RESULT_HEAD.pack(round_id, steps, g_sum, sub_value) + pack_vector(dv)


def decode_result(payload: bytes) -> tuple[int, int, float, float, np.ndarray]:
    if len(payload) < _RESULT_HEAD.size:
        raise FrameError("truncated RESULT_DV")
    round_id, steps, g_sum, sub_value = _RESULT_HEAD.unpack_from(payload)
    dv, end = unpack_vector(payload, _RESULT_HEAD.size)
    if end != len(payload):
        raise FrameError("trailing bytes in RESULT_DV")
    return round_id, steps, g_sum, sub_value, dv


def encode_done_reply(alpha, alpha_avg=None) -> bytes:
    return pack_vector(alpha) + pack_vector(np.zeros(0) if alpha_avg is None else alpha_avg)


def decode_done_reply(payload: bytes) -> tuple[np.ndarray, np.ndarray | None]:
    alpha, off = unpack_vector(payload, 0)
    avg, end = unpack_vector(payload, off)
    if end != len(payload):
        raise FrameError("trailing bytes in DONE")
    return alpha, (avg if avg.size or alpha.size == 0 else None)


def encode_assign(header: dict, arrays: list[tuple[str, np.ndarray, str]]) -> bytes:
    """``arrays`` is a list of ``(name, array, dtype)``; names go into the header."""
    header = dict(header, arrays=[[name, dt] for name, _, dt in arrays])
    raw = json.dumps(header, sort_keys=True).encode()
    parts = [U32.pack(len(raw)), raw]
    parts.extend(pack_vector(arr, dt) for _, arr, dt in arrays)
    return b"".join(parts)


def decode_assign(payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(payload) < 4:
        raise FrameError("truncated ASSIGN")
    (hlen,) = U32.unpack_from(payload)
    if len(payload) < 4 + hlen:
        raise FrameError("truncated ASSIGN header")
    try:
        header = json.loads(payload[4:4 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FrameError(f"bad ASSIGN header: {err}") from None
    off = 4 + hlen
    arrays = {}
    for name, dt in header.get("arrays", []):
        arrays[name], off = unpack_vector(payload, off, dt)
    if off != len(payload):
        raise FrameError("trailing bytes in ASSIGN")
    return header, arrays
