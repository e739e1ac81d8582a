"""Model server: serves a DifferentiableModel over the line protocol.

Reference implementation of the server side of the wire protocol
(docs/PROTOCOL.md): newline-delimited JSON over stdio or TCP, one reply
line per received line, documented error code for every malformed-input
class. Conformance targets must match this mapping:

    undecodable UTF-8/JSON, or non-object top level  -> bad-json (id null)
    missing/mistyped op, prompt, inputs, id          -> bad-request
    op outside the protocol                          -> unknown-op
    op valid but not offered (e.g. rewrite)          -> unsupported
    input count != slot count                        -> slot-mismatch
    undecodable/mis-shaped/out-of-domain tensor      -> bad-tensor
    undecodable or model-rejected target             -> bad-target
    line longer than the cap                         -> oversize-line
    evaluation failure (non-finite loss, internal)   -> model-error

Run a toy server:  python3 -m vlmadv.server --family linear --seed 7
"""
from __future__ import annotations

import argparse
import json
import socketserver
import sys
from typing import BinaryIO, Callable

from .core import REFERENCE_SET, ImageTensor, ModelError, DifferentiableModel
from .core import loss_and_grad as checked_loss_and_grad
from .oracle import (
    MAX_LINE_BYTES,
    OPS,
    PROTOCOL_VERSION,
    ProtocolError,
    decode_target,
    decode_tensor,
    encode_line,
    encode_tensor,
)
from .toys import TOY_FAMILIES, make_toy_model

__all__ = ["ModelServer", "read_line_capped", "main"]


def _err(rid: str | None, code: str, message: str) -> dict:
    return {"id": rid, "error": {"code": code, "message": message}}


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


class ModelServer:
    """Stateless request dispatcher plus stdio/TCP serving loops."""

    def __init__(self, model: DifferentiableModel,
                 rewriter: Callable[[str, str, str], str] | None = None,
                 max_line_bytes: int = MAX_LINE_BYTES,
                 model_name: str = "toy",
                 loss_policy: str = "self-label-clean-argmax"):
        self.model = model
        self.rewriter = rewriter
        self.max_line_bytes = max_line_bytes
        self.model_name = model_name
        self.loss_policy = loss_policy

    def describe_payload(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "slot_count": self.model.slot_count,
            "input_shapes": [list(s) for s in self.model.input_shapes()],
            "model": self.model_name,
            "loss_policy": self.loss_policy,
            "max_line_bytes": self.max_line_bytes,
        }

    def _decode_inputs(self, rid, obj) -> list[ImageTensor] | dict:
        payload = obj.get("inputs")
        if not isinstance(payload, list):
            return _err(rid, "bad-request", "inputs must be a list")
        if len(payload) != self.model.slot_count:
            return _err(
                rid, "slot-mismatch",
                f"model takes {self.model.slot_count} input(s), "
                f"got {len(payload)}")
        shapes = self.model.input_shapes()
        tensors = []
        for k, (item, shape) in enumerate(zip(payload, shapes)):
            try:
                arr = decode_tensor(item)
                if arr.shape != tuple(shape):
                    raise ProtocolError(
                        f"slot {k} expects shape {tuple(shape)}, "
                        f"got {arr.shape}")
                tensors.append(ImageTensor(arr))
            except (ProtocolError, ValueError, TypeError) as exc:
                return _err(rid, "bad-tensor", f"slot {k}: {exc}")
        return tensors

    def handle(self, raw: bytes) -> dict:
        """One reply object for one received line."""
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            return _err(None, "bad-json", "line is not valid JSON")
        if not isinstance(obj, dict):
            return _err(None, "bad-json", "top-level value must be an object")
        rid_raw = obj.get("id")
        rid = rid_raw if isinstance(rid_raw, str) else None
        op = obj.get("op")
        if not isinstance(op, str):
            return _err(rid, "bad-request", "missing or mistyped op")
        if op not in OPS:
            return _err(rid, "unknown-op", f"unknown op {op!r}")
        try:
            return self._dispatch(rid, op, obj)
        except ModelError as exc:
            return _err(rid, "model-error", str(exc))
        except Exception as exc:  # noqa: BLE001 - a reply beats a crash
            return _err(rid, "model-error", f"internal: {exc}")

    def _dispatch(self, rid, op, obj) -> dict:
        if op == "describe":
            return {"id": rid, "describe": self.describe_payload()}
        if op == "rewrite":
            if self.rewriter is None:
                return _err(rid, "unsupported",
                            "this server does not offer rewrite")
            fields = [obj.get(k) for k in ("strategy", "instruction",
                                           "question")]
            if not all(isinstance(f, str) for f in fields):
                return _err(rid, "bad-request",
                            "rewrite needs strategy, instruction, question")
            return {"id": rid, "text": self.rewriter(*fields)}

        prompt = obj.get("prompt")
        if not isinstance(prompt, str):
            return _err(rid, "bad-request", "missing or mistyped prompt")
        tensors = self._decode_inputs(rid, obj)
        if isinstance(tensors, dict):
            return tensors
        if op == "generate":
            return {"id": rid, "text": self.model.generate(tensors, prompt)}
        try:
            target = decode_target(obj.get("target"))
        except (ProtocolError, ValueError, TypeError) as exc:
            return _err(rid, "bad-target", str(exc))
        if target.kind == REFERENCE_SET:
            # loss policy lives server-side: resolve reference sets against
            # the inputs of this call (callers wanting a frozen label derive
            # a class_index once and send that instead)
            target = self.model.derive_target(tensors, prompt, target)
        try:
            loss, grads = checked_loss_and_grad(
                self.model, tensors, prompt, target)
        except ValueError as exc:
            # the model rejected this target kind
            return _err(rid, "bad-target", str(exc))
        return {"id": rid, "loss": loss,
                "grads": [encode_tensor(g) for g in grads]}

    def _reply_line(self, reply: dict) -> bytes:
        try:
            return encode_line(reply)
        except ProtocolError as exc:
            return encode_line(_err(reply.get("id"), "model-error",
                                    f"reply too large: {exc}"))

    def serve_stream(self, rx: BinaryIO, tx: BinaryIO) -> None:
        while True:
            raw, overflow = read_line_capped(rx, self.max_line_bytes)
            if raw is None:
                return
            if overflow:
                reply = _err(None, "oversize-line",
                             f"line exceeds {self.max_line_bytes} bytes")
            else:
                reply = self.handle(raw)
            tx.write(self._reply_line(reply))
            tx.flush()

    def serve_stdio(self) -> None:
        self.serve_stream(sys.stdin.buffer, sys.stdout.buffer)

    def serve_tcp(self, host: str, port: int,
                  ready_fd: int | None = None) -> None:
        server = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self_h):
                rx = self_h.request.makefile("rb")
                tx = self_h.request.makefile("wb")
                try:
                    server.serve_stream(rx, tx)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        class Srv(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        with Srv((host, port), Handler) as srv:
            if ready_fd is not None:
                # announce the bound port (host may have asked for port 0)
                import os
                os.write(ready_fd, f"{srv.server_address[1]}\n".encode())
                os.close(ready_fd)
            srv.serve_forever()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="vlmadv.server",
        description="Serve a toy model over the line protocol.")
    parser.add_argument("--family", choices=sorted(TOY_FAMILIES),
                        default="linear")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--classes", type=int, default=None,
                        help="number of output classes")
    parser.add_argument("--shape", type=str, default=None,
                        help="input shape as C,H,W (per slot for two-branch)")
    parser.add_argument("--tcp", type=int, default=None, metavar="PORT",
                        help="serve on TCP instead of stdio (0 = ephemeral)")
    parser.add_argument("--host", type=str, default="127.0.0.1")
    parser.add_argument("--no-rewrite", action="store_true",
                        help="answer rewrite with the unsupported error")
    parser.add_argument("--max-line-bytes", type=int, default=MAX_LINE_BYTES)
    parser.add_argument("--ready-fd", type=int, default=None,
                        help="fd to announce the bound TCP port on")
    args = parser.parse_args(argv)

    overrides: dict = {}
    if args.classes is not None:
        overrides["num_classes"] = args.classes
    if args.shape is not None:
        shape = tuple(int(d) for d in args.shape.split(","))
        if len(shape) != 3 or min(shape) < 1:
            parser.error(f"--shape must be C,H,W with positive dims: {args.shape}")
        if args.family == "two-branch":
            overrides["input_shapes"] = (shape, shape)
        else:
            overrides["input_shape"] = shape
    model = make_toy_model(args.family, args.seed, **overrides)

    rewriter = None if args.no_rewrite else (
        lambda strategy, instruction, question: question)
    server = ModelServer(model, rewriter=rewriter,
                         max_line_bytes=args.max_line_bytes,
                         model_name=f"toy-{args.family}-{args.seed}")
    if args.tcp is not None:
        server.serve_tcp(args.host, args.tcp, ready_fd=args.ready_fd)
    else:
        server.serve_stdio()
    return 0


if __name__ == "__main__":
    sys.exit(main())
