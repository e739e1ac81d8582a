"""Line-protocol codec, standard library only.

Implements the message grammar from docs/PROTOCOL.md: newline-delimited
JSON frames, f32 little-endian base64 tensors, three target encodings,
and the fixed error-code vocabulary. Validation here mirrors the
reference engine check for check so both sides classify malformed input
onto the same error codes.
"""

from __future__ import annotations

import base64
import json
import struct
from typing import BinaryIO, Sequence

from .twin import CLASS_INDEX, REFERENCE_SET, TOKEN_SEQUENCE

PROTOCOL_VERSION = 1
MAX_LINE_BYTES = 64 * 1024 * 1024

OPS = ("describe", "loss_and_grad", "generate", "rewrite")

ERROR_CODES = (
    "bad-json",      # line is not a JSON object
    "bad-request",   # JSON but missing/mistyped fields
    "unknown-op",    # op outside OPS
    "bad-tensor",    # undecodable base64, wrong dtype, or byte-count mismatch
    "bad-target",    # malformed or unsupported target encoding
    "oversize-line", # line exceeded the size cap
    "slot-mismatch", # input count does not match the model's slots
    "model-error",   # model evaluation failed (non-finite loss, internal)
    "unsupported",   # op valid but not offered by this server
)


class ProtocolError(ValueError):
    """Peer sent something outside the message grammar."""


def encode_tensor(shape: Sequence[int], values: Sequence[float]) -> dict:
    """f32 little-endian payload; binary64 values are rounded to f32 here."""
    data = struct.pack(f"<{len(values)}f", *values)
    return {
        "shape": [int(d) for d in shape],
        "dtype": "f32",
        "data": base64.b64encode(data).decode("ascii"),
    }


def decode_tensor(payload: object) -> tuple[tuple[int, ...], list[float]]:
    """Shape and row-major values (exact binary64 images of the f32 bits)."""
    if not isinstance(payload, dict):
        raise ProtocolError("tensor payload must be an object")
    if payload.get("dtype") != "f32":
        raise ProtocolError(f"unsupported tensor dtype {payload.get('dtype')!r}")
    shape = payload.get("shape")
    if (not isinstance(shape, list) or not shape
            or not all(isinstance(d, int) and d > 0 for d in shape)):
        raise ProtocolError(f"bad tensor shape {shape!r}")
    try:
        raw = base64.b64decode(payload.get("data", ""), validate=True)
    except Exception:
        raise ProtocolError("tensor data is not valid base64") from None
    count = 1
    for d in shape:
        count *= d
    if len(raw) != 4 * count:
        raise ProtocolError(
            f"tensor data has {len(raw)} bytes, shape needs {4 * count}"
        )
    return tuple(shape), list(struct.unpack(f"<{count}f", raw))


def decode_target(obj: object) -> tuple[str, object]:
    if not isinstance(obj, dict) or "kind" not in obj or "value" not in obj:
        raise ProtocolError("target must be an object with kind and value")
    kind, value = obj["kind"], obj["value"]
    try:
        if kind == CLASS_INDEX:
            label = int(value)  # type: ignore[arg-type]
            if label < 0:
                raise ValueError("class index must be a non-negative integer")
            return (CLASS_INDEX, label)
        if kind == TOKEN_SEQUENCE:
            toks = tuple(int(v) for v in value)  # type: ignore[union-attr]
            if not toks or any(t < 0 for t in toks):
                raise ValueError("token sequence must be non-empty, non-negative")
            return (TOKEN_SEQUENCE, toks)
        if kind == REFERENCE_SET:
            refs = tuple(str(v) for v in value)  # type: ignore[union-attr]
            if not refs:
                raise ValueError("reference set must be non-empty")
            return (REFERENCE_SET, refs)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"bad target value: {exc}") from None
    raise ProtocolError(f"unknown target kind {kind!r}")


def encode_line(obj: dict) -> bytes:
    line = json.dumps(obj, ensure_ascii=False).encode("utf-8") + b"\n"
    if len(line) > MAX_LINE_BYTES:
        raise ProtocolError(f"encoded line exceeds {MAX_LINE_BYTES} bytes")
    return line


def read_line_capped(stream: BinaryIO, cap: int) -> tuple[bytes | None, bool]:
    """Next line without its newline, or (None, False) at EOF.

    Lines longer than cap are consumed to their newline and flagged so
    the caller can reply oversize-line and stay in sync.
    """
    buf = bytearray()
    overflow = False
    while True:
        chunk = stream.readline(65536)
        if not chunk:
            if buf or overflow:
                return bytes(buf), overflow  # unterminated trailing line
            return None, False
        if not overflow:
            buf += chunk
            if len(buf) > cap:
                overflow = True
                buf.clear()
        if chunk.endswith(b"\n"):
            if buf.endswith(b"\n"):
                del buf[-1]
            return bytes(buf), overflow
