"""Length-prefixed binary wire protocol for external clip classifiers.

Frame layout::

    b"EPB1" | u8 msg_type | u32 LE header length | UTF-8 JSON header | payload

Inference requests (type 1) carry ``prod(dims)`` little-endian float32 values
in C order after a header ``{"dims": [...], "dtype": "f32", "id": n}``.
Responses are type 2 ``{"id": n, "scores": [...]}``. A type 0 request is the
handshake, answered with type 0 ``{"classes": C, "name": str}``. Servers
report failures with type 3 ``{"id": n, "kind": str, "error": str}``.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"EPB1"
MSG_HANDSHAKE = 0
MSG_INFER = 1
MSG_SCORES = 2
MSG_ERROR = 3
_PREFIX = struct.Struct("<4sBI")
MAX_HEADER = 1 << 20


class BackendError(Exception):
    """Base class for backend failures."""

    kind = "backend"


class ProtocolError(BackendError):
    """The peer sent bytes that do not form a valid frame."""

    kind = "malformed"


class BackendTimeout(BackendError):
    kind = "timeout"


class DimensionMismatch(BackendError):
    kind = "dimension_mismatch"


class TransportError(BackendError):
    """The byte stream broke: peer exited, EOF, broken pipe."""

    kind = "transport"


def encode_frame(msg_type: int, header: dict, payload: bytes = b"") -> bytes:
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, msg_type, len(head)) + head + payload


def encode_clip(data: np.ndarray, request_id: int) -> bytes:
    arr = np.ascontiguousarray(data, dtype="<f4")
    header = {"dims": list(arr.shape), "dtype": "f32", "id": int(request_id)}
    return encode_frame(MSG_INFER, header, arr.tobytes(order="C"))


def payload_nbytes(msg_type: int, header: dict) -> int:
    if msg_type != MSG_INFER:
        return 0
    dims = header.get("dims")
    if header.get("dtype") != "f32" or not isinstance(dims, list) or not all(
        isinstance(d, int) and d > 0 for d in dims
    ):
        raise ProtocolError(f"bad infer header {header!r}")
    return 4 * int(np.prod(dims))


def parse_prefix(prefix: bytes) -> tuple[int, int]:
    magic, msg_type, n = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if msg_type not in (MSG_HANDSHAKE, MSG_INFER, MSG_SCORES, MSG_ERROR):
        raise ProtocolError(f"unknown message type {msg_type}")
    if n > MAX_HEADER:
        raise ProtocolError(f"header length {n} exceeds limit")
    return msg_type, n


def parse_header(raw: bytes) -> dict:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"header is not UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise ProtocolError("header must be a JSON object")
    return header


def read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise TransportError(f"stream closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(stream: BinaryIO) -> tuple[int, dict, bytes]:
    """Read one frame from a blocking binary stream."""
    msg_type, n = parse_prefix(read_exact(stream, _PREFIX.size))
    header = parse_header(read_exact(stream, n))
    payload = read_exact(stream, payload_nbytes(msg_type, header))
    return msg_type, header, payload


def decode_clip(header: dict, payload: bytes) -> np.ndarray:
    dims = header["dims"]
    if len(payload) != 4 * int(np.prod(dims)):
        raise ProtocolError("payload size does not match dims")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def decode_clip_frame(frame: bytes) -> tuple[int, np.ndarray]:
    """Inverse of :func:`encode_clip` on an in-memory frame."""
    import io

    msg_type, header, payload = read_frame(io.BytesIO(frame))
    if msg_type != MSG_INFER:
        raise ProtocolError(f"expected infer frame, got type {msg_type}")
    return header["id"], decode_clip(header, payload)


PREFIX_SIZE = _PREFIX.size
