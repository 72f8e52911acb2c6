"""
Worker <-> parameter-server wire format.

Every frame is ``<u32 length><u8 tag><payload>`` where ``length`` counts the
tag byte plus the payload. Integers and float64 arrays are little-endian.

    tag 1  FetchRequest   u32 worker_id
    tag 2  ModelReply     u64 generation, u32 count, count x f64
    tag 3  GradientPush   u32 worker_id, u64 base_generation, u32 count, count x f64
    tag 4  Shutdown       (empty)
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError

TAG_FETCH, TAG_MODEL, TAG_GRADIENT, TAG_SHUTDOWN = 1, 2, 3, 4

_HEADER = struct.Struct("<IB")
_LEN = struct.Struct("<I")
_FETCH = struct.Struct("<I")
_MODEL = struct.Struct("<QI")
_GRADIENT = struct.Struct("<IQI")
_F64 = np.dtype("<f8")


@dataclass(frozen=True)
class FetchRequest:
    worker_id: int


@dataclass(frozen=True)
class Shutdown:
    pass


def _same_array(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.astype(_F64, copy=False).tobytes() == b.astype(_F64, copy=False).tobytes()


@dataclass(eq=False)
class ModelReply:
    generation: int
    params: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, ModelReply):
            return NotImplemented
        return self.generation == other.generation and _same_array(self.params, other.params)


@dataclass(eq=False)
class GradientPush:
    worker_id: int
    base_generation: int
    grad: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, GradientPush):
            return NotImplemented
        return (self.worker_id == other.worker_id
                and self.base_generation == other.base_generation
                and _same_array(self.grad, other.grad))


def _floats(arr) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=_F64)
    if arr.ndim != 1:
        raise ValueError("parameter arrays travel flattened")
    return arr


def encode_parts(msg) -> list:
    """Frame as a list of buffers, so large arrays are never concatenated."""
    if isinstance(msg, FetchRequest):
        return [_HEADER.pack(1 + _FETCH.size, TAG_FETCH) + _FETCH.pack(msg.worker_id)]
    if isinstance(msg, Shutdown):
        return [_HEADER.pack(1, TAG_SHUTDOWN)]
    if isinstance(msg, ModelReply):
        arr = _floats(msg.params)
        head = _HEADER.pack(1 + _MODEL.size + arr.nbytes, TAG_MODEL) + _MODEL.pack(msg.generation, arr.size)
        return [head, memoryview(arr).cast("B")]
    if isinstance(msg, GradientPush):
        arr = _floats(msg.grad)
        head = (_HEADER.pack(1 + _GRADIENT.size + arr.nbytes, TAG_GRADIENT)
                + _GRADIENT.pack(msg.worker_id, msg.base_generation, arr.size))
        return [head, memoryview(arr).cast("B")]
    raise TypeError(f"cannot encode {type(msg).__name__}")


def encode(msg) -> bytes:
    return b"".join(bytes(p) for p in encode_parts(msg))


def _check_count(count: int, nbytes: int, field: str, expected: int | None) -> None:
    if expected is not None and count != expected:
        raise ProtocolError(field, f"carries {count} values, model has {expected}")
    if nbytes != 8 * count:
        raise ProtocolError(field, f"declares {count} values but payload holds {nbytes} bytes")


def _decode_array(body: memoryview, offset: int, count: int, field: str, expected: int | None):
    _check_count(count, len(body) - offset, field, expected)
    arr = np.frombuffer(body, dtype=_F64, count=count, offset=offset)
    # BLAS refuses misaligned doubles and numpy's fallback sums in another order,
    # so a misaligned payload would give results that differ in the last bit
    return arr if arr.flags.aligned else arr.copy()


def decode_body(tag: int, body, expected_count: int | None = None):
    """Decode the payload of one frame whose tag has already been read."""
    body = memoryview(body)
    if tag == TAG_FETCH:
        if len(body) != _FETCH.size:
            raise ProtocolError("payload", f"FetchRequest payload must be {_FETCH.size} bytes, got {len(body)}")
        return FetchRequest(*_FETCH.unpack(body))
    if tag == TAG_SHUTDOWN:
        if len(body):
            raise ProtocolError("payload", "Shutdown carries no payload")
        return Shutdown()
    if tag == TAG_MODEL:
        if len(body) < _MODEL.size:
            raise ProtocolError("payload", "ModelReply header truncated")
        generation, count = _MODEL.unpack_from(body)
        return ModelReply(generation, _decode_array(body, _MODEL.size, count, "params", expected_count))
    if tag == TAG_GRADIENT:
        if len(body) < _GRADIENT.size:
            raise ProtocolError("payload", "GradientPush header truncated")
        worker_id, base, count = _GRADIENT.unpack_from(body)
        return GradientPush(worker_id, base, _decode_array(body, _GRADIENT.size, count, "grad", expected_count))
    raise ProtocolError("tag", f"unknown message tag {tag}")


def decode_frame(buf, offset: int = 0, expected_count: int | None = None):
    """Decode the frame starting at ``offset``; returns ``(message, next_offset)``."""
    view = memoryview(buf)
    if len(view) - offset < _LEN.size:
        raise ProtocolError("length", "truncated frame header")
    (length,) = _LEN.unpack_from(view, offset)
    if length < 1:
        raise ProtocolError("length", "frame must contain at least a tag byte")
    start = offset + _LEN.size
    end = start + length
    if end > len(view):
        raise ProtocolError("length", f"truncated frame: declared {length} bytes, {len(view) - start} available")
    return decode_body(view[start], view[start + 1:end], expected_count), end


def decode(buf, expected_count: int | None = None):
    msg, end = decode_frame(buf, 0, expected_count)
    if end != len(buf):
        raise ProtocolError("length", f"{len(buf) - end} trailing bytes after frame")
    return msg


def decode_stream(buf, expected_count: int | None = None) -> list:
    out, pos = [], 0
    while pos < len(buf):
        msg, pos = decode_frame(buf, pos, expected_count)
        out.append(msg)
    return out


def send_message(sock: socket.socket, msg) -> None:
    for part in encode_parts(msg):
        sock.sendall(part)


def _recv_into(sock: socket.socket, view: memoryview, at_boundary: bool = False) -> bool:
    """Fill ``view`` from the socket; ``False`` on a clean close before the first byte."""
    got, n = 0, len(view)
    while got < n:
        k = sock.recv_into(view[got:])
        if k == 0:
            if got == 0 and at_boundary:
                return False
            raise ProtocolError("length", f"connection closed mid-frame ({got}/{n} bytes)")
        got += k
    return True


def _recv_exact(sock: socket.socket, n: int, at_boundary: bool) -> bytearray | None:
    buf = bytearray(n)
    if not _recv_into(sock, memoryview(buf), at_boundary):
        return None
    return buf


def recv_header(sock: socket.socket) -> int | None:
    """Length field of the next frame, or ``None`` when the peer closed cleanly."""
    head = _recv_exact(sock, _LEN.size, at_boundary=True)
    if head is None:
        return None
    (length,) = _LEN.unpack(head)
    if length < 1:
        raise ProtocolError("length", "frame must contain at least a tag byte")
    return length


def recv_body(sock: socket.socket, length: int, expected_count: int | None = None):
    """Rest of a frame whose length field has been read.

    Float arrays are received straight into a fresh (aligned) numpy array.
    """
    tag = _recv_exact(sock, 1, at_boundary=False)[0]
    fixed = {TAG_MODEL: _MODEL, TAG_GRADIENT: _GRADIENT}.get(tag)
    if fixed is None or length - 1 < fixed.size:
        body = _recv_exact(sock, length - 1, at_boundary=False)
        return decode_body(tag, body, expected_count)
    header = fixed.unpack(_recv_exact(sock, fixed.size, at_boundary=False))
    count = header[-1]
    field = "params" if tag == TAG_MODEL else "grad"
    _check_count(count, length - 1 - fixed.size, field, expected_count)
    arr = np.empty(count, dtype=_F64)
    _recv_into(sock, memoryview(arr).cast("B"))
    if tag == TAG_MODEL:
        return ModelReply(header[0], arr)
    return GradientPush(header[0], header[1], arr)


def recv_message(sock: socket.socket, expected_count: int | None = None):
    """Read one frame; ``None`` when the peer closed cleanly between frames."""
    length = recv_header(sock)
    if length is None:
        return None
    return recv_body(sock, length, expected_count)
