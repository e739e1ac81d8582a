"""Engine side of the model-oracle wire protocol.

Remote models (real VLMs living in their own process, any language) are
driven through newline-delimited JSON over a child process's stdio or a TCP
connection. Tensors travel as {shape, dtype "f32", data: base64 of
little-endian bytes}. Conversations are synchronous with one request in
flight; concurrency is achieved by opening one connection per worker. The
full message grammar, handshake, and error codes live in docs/PROTOCOL.md;
the protocol version is exchanged in the "describe" handshake.
"""

from __future__ import annotations

import base64
import json
import os
import select
import socket
import subprocess
import threading
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    CLASS_INDEX,
    REFERENCE_SET,
    TOKEN_SEQUENCE,
    DifferentiableModel,
    ImageTensor,
    Shape,
    Target,
)
from .prompts import RewriterClient

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 120.0
MAX_LINE_BYTES = 64 * 1024 * 1024

OPS = ("describe", "loss_and_grad", "generate", "rewrite")

# Error codes a conforming model server may return; every malformed-message
# class maps to exactly one of these.
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


class TransportError(RuntimeError):
    """Connection-level failure: unreachable, closed early, or timed out."""


class ProtocolError(RuntimeError):
    """Peer sent something outside the message grammar."""


class OracleError(RuntimeError):
    """Well-formed error response from the peer."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def encode_tensor(arr: np.ndarray) -> dict:
    """f32 little-endian payload; float64 values are rounded to f32 here."""
    arr = np.asarray(arr)
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return {
        "shape": [int(d) for d in arr.shape],
        "dtype": "f32",
        "data": base64.b64encode(data).decode("ascii"),
    }


def decode_tensor(payload: dict) -> np.ndarray:
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
    count = int(np.prod(shape))
    if len(raw) != 4 * count:
        raise ProtocolError(
            f"tensor data has {len(raw)} bytes, shape needs {4 * count}"
        )
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def encode_target(target: Target) -> dict:
    if target.kind == CLASS_INDEX:
        return {"kind": CLASS_INDEX, "value": int(target.value)}  # type: ignore[arg-type]
    if target.kind == TOKEN_SEQUENCE:
        return {"kind": TOKEN_SEQUENCE, "value": [int(t) for t in target.value]}  # type: ignore[union-attr]
    return {"kind": REFERENCE_SET, "value": [str(s) for s in target.value]}  # type: ignore[union-attr]


def decode_target(obj: dict) -> Target:
    if not isinstance(obj, dict) or "kind" not in obj or "value" not in obj:
        raise ProtocolError("target must be an object with kind and value")
    kind, value = obj["kind"], obj["value"]
    try:
        if kind == CLASS_INDEX:
            return Target.class_index(int(value))
        if kind == TOKEN_SEQUENCE:
            return Target.token_sequence([int(v) for v in value])
        if kind == REFERENCE_SET:
            return Target.reference_set([str(v) for v in value])
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"bad target value: {exc}") from None
    raise ProtocolError(f"unknown target kind {kind!r}")


def encode_line(obj: dict) -> bytes:
    line = json.dumps(obj, ensure_ascii=False).encode("utf-8") + b"\n"
    if len(line) > MAX_LINE_BYTES:
        raise ProtocolError(f"encoded line exceeds {MAX_LINE_BYTES} bytes")
    return line


def decode_line(line: bytes) -> dict:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"peer sent invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("peer message must be a JSON object")
    return obj


class Transport:
    """One serialized newline-framed conversation."""

    def request_line(self, line: bytes, timeout: float) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class StdioTransport(Transport):
    """Child process speaking the protocol on its stdin/stdout."""

    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        try:
            self.proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                bufsize=0,
            )
        except OSError as exc:
            raise TransportError(f"cannot start {self.command}: {exc}") from None
        self._buf = b""
        os.set_blocking(self.proc.stdout.fileno(), False)

    def request_line(self, line: bytes, timeout: float) -> bytes:
        if self.proc.poll() is not None:
            raise TransportError(
                f"server process exited with code {self.proc.returncode}"
            )
        try:
            self.proc.stdin.write(line)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"server pipe closed: {exc}") from None
        deadline = time.monotonic() + timeout
        fd = self.proc.stdout.fileno()
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportError(f"no response within {timeout} s")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = self.proc.stdout.read(1 << 20)
            if chunk is None:
                continue
            if chunk == b"":
                raise TransportError("server closed stdout mid-conversation")
            self._buf += chunk
            if len(self._buf) > MAX_LINE_BYTES:
                raise ProtocolError("response line exceeds the size cap")
        out, self._buf = self._buf.split(b"\n", 1)
        return out

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=5)
            except Exception:
                self.proc.kill()
                self.proc.wait()


class TcpTransport(Transport):
    def __init__(self, host: str, port: int, connect_timeout: float = 10.0):
        try:
            self.sock = socket.create_connection((host, port),
                                                 timeout=connect_timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from None
        self._buf = b""

    def request_line(self, line: bytes, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        try:
            self.sock.settimeout(timeout)
            self.sock.sendall(line)
            while b"\n" not in self._buf:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportError(f"no response within {timeout} s")
                self.sock.settimeout(remaining)
                chunk = self.sock.recv(1 << 20)
                if chunk == b"":
                    raise TransportError("server closed the connection")
                self._buf += chunk
                if len(self._buf) > MAX_LINE_BYTES:
                    raise ProtocolError("response line exceeds the size cap")
        except socket.timeout:
            raise TransportError(f"no response within {timeout} s") from None
        except OSError as exc:
            raise TransportError(f"socket error: {exc}") from None
        out, self._buf = self._buf.split(b"\n", 1)
        return out

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class OracleClient:
    """Request/response layer: ids, error mapping, one in flight."""

    def __init__(self, transport: Transport, timeout: float = DEFAULT_TIMEOUT):
        self.transport = transport
        self.timeout = timeout
        self._lock = threading.Lock()
        self._counter = 0

    def request(self, op: str, body: dict | None = None,
                timeout: float | None = None) -> dict:
        with self._lock:
            self._counter += 1
            rid = f"r-{self._counter:06d}"
            msg = {"id": rid, "op": op}
            msg.update(body or {})
            line = encode_line(msg)
            reply = decode_line(
                self.transport.request_line(
                    line, self.timeout if timeout is None else timeout)
            )
        if reply.get("id") != rid:
            raise ProtocolError(
                f"response id {reply.get('id')!r} does not echo {rid!r}"
            )
        err = reply.get("error")
        if err is not None:
            if not isinstance(err, dict) or "code" not in err:
                raise ProtocolError(f"malformed error payload {err!r}")
            if any(k in reply for k in ("loss", "grads", "text", "describe")):
                raise ProtocolError("response mixes error with a result")
            raise OracleError(str(err["code"]), str(err.get("message", "")))
        return reply

    def close(self) -> None:
        self.transport.close()


def _expect(reply: dict, key: str):
    if key not in reply:
        raise ProtocolError(f"response is missing {key!r}")
    return reply[key]


class RemoteModel(DifferentiableModel):
    """DifferentiableModel adapter over an oracle connection.

    The describe handshake fixes slot count and input shapes; the target
    policy (teacher forcing vs self-labeling) belongs to the server side and
    is reported in describe as loss_policy.
    """

    def __init__(self, client: OracleClient):
        self.client = client
        info = _expect(client.request("describe"), "describe")
        if not isinstance(info, dict):
            raise ProtocolError("describe payload must be an object")
        version = info.get("protocol_version")
        if version != PROTOCOL_VERSION:
            raise ProtocolError(
                f"server speaks protocol {version!r}, need {PROTOCOL_VERSION}"
            )
        shapes = info.get("input_shapes")
        count = info.get("slot_count")
        if (not isinstance(shapes, list) or not isinstance(count, int)
                or count != len(shapes) or count < 1):
            raise ProtocolError(f"bad describe payload: {info!r}")
        self._shapes = tuple(
            tuple(int(d) for d in shape) for shape in shapes
        )
        for shape in self._shapes:
            if len(shape) != 3 or min(shape) < 1:
                raise ProtocolError(f"bad input shape {shape} in describe")
        self.model_name = str(info.get("model", "remote"))
        self.loss_policy = str(info.get("loss_policy", "unspecified"))

    @property
    def slot_count(self) -> int:
        return len(self._shapes)

    def input_shapes(self) -> tuple[Shape, ...]:
        return self._shapes

    def loss_and_grad(self, inputs: Sequence[ImageTensor], prompt: str,
                      target: Target):
        reply = self.client.request("loss_and_grad", {
            "inputs": [encode_tensor(x.data) for x in inputs],
            "prompt": prompt,
            "target": encode_target(target),
        })
        loss = _expect(reply, "loss")
        grads_payload = _expect(reply, "grads")
        if not isinstance(grads_payload, list):
            raise ProtocolError("grads must be a list of tensor payloads")
        grads = [decode_tensor(p) for p in grads_payload]
        if len(grads) != len(inputs):
            raise ProtocolError(
                f"server returned {len(grads)} grads for {len(inputs)} inputs"
            )
        return float(loss), grads

    def generate(self, inputs: Sequence[ImageTensor], prompt: str) -> str:
        reply = self.client.request("generate", {
            "inputs": [encode_tensor(x.data) for x in inputs],
            "prompt": prompt,
        })
        return str(_expect(reply, "text"))


class RemoteRewriter(RewriterClient):
    """Question rewriter served over the same wire protocol (op rewrite)."""

    name = "remote"

    def __init__(self, client: OracleClient):
        self.client = client

    def rewrite(self, strategy_tag: str, instruction: str, question: str) -> str:
        reply = self.client.request("rewrite", {
            "strategy": strategy_tag,
            "instruction": instruction,
            "question": question,
        })
        return str(_expect(reply, "text"))


def open_transport(spec: str) -> Transport:
    """Transport from a config string: "tcp:HOST:PORT", "tcp:PORT", or an
    argv command line for a stdio child process."""
    if spec.startswith("tcp:"):
        rest = spec[4:]
        host, sep, port = rest.rpartition(":")
        if not sep:
            host, port = "127.0.0.1", rest
        try:
            return TcpTransport(host, int(port))
        except ValueError:
            raise TransportError(f"bad tcp spec {spec!r}") from None
    import shlex

    argv = shlex.split(spec)
    if not argv:
        raise TransportError("empty transport spec")
    return StdioTransport(argv)
