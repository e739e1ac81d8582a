"""Serving loops and request dispatch for the sidecar model server.

One reply line per received line, a documented error code for every
malformed-input class, and no way for peer input to crash the process:

    undecodable UTF-8/JSON, or non-object top level  -> bad-json (id null)
    missing/mistyped op, prompt, inputs, id          -> bad-request
    op outside the protocol                          -> unknown-op
    op valid but not offered (e.g. rewrite)          -> unsupported
    input count != slot count                        -> slot-mismatch
    undecodable/mis-shaped/out-of-domain tensor      -> bad-tensor
    undecodable or model-rejected target             -> bad-target
    line longer than the cap                         -> oversize-line
    evaluation failure (non-finite loss, internal)   -> model-error

Run the built-in twin:   python3 -m sidecar --seed 7 --shape 3,2,2
Serve your own model:    python3 -m sidecar --hook mypkg.adapter:build
"""

from __future__ import annotations

import argparse
import json
import math
import socketserver
import sys
from typing import BinaryIO, Callable, Sequence

from .hooks import load_hook
from .protocol import (
    MAX_LINE_BYTES,
    OPS,
    PROTOCOL_VERSION,
    ProtocolError,
    decode_target,
    decode_tensor,
    encode_line,
    encode_tensor,
    read_line_capped,
)
from .twin import REFERENCE_SET, LinearTwin, ModelError, Tensor

__all__ = ["SidecarServer", "main"]


def _err(rid: str | None, code: str, message: str) -> dict:
    return {"id": rid, "error": {"code": code, "message": message}}


def _checked_loss_and_grad(model, inputs: Sequence[Tensor], prompt: str,
                           target) -> tuple[float, list[list[float]]]:
    """Evaluate and enforce the model contract (finite loss, slot-shaped
    finite gradients); violations raise ModelError."""
    loss, grads = model.loss_and_grad(inputs, prompt, target)
    loss = float(loss)
    if not math.isfinite(loss):
        raise ModelError(f"model returned non-finite loss {loss!r}")
    if len(grads) != len(inputs):
        raise ModelError(
            f"model returned {len(grads)} gradients for {len(inputs)} inputs")
    for i, (g, (shape, values)) in enumerate(zip(grads, inputs)):
        if len(g) != len(values):
            raise ModelError(
                f"gradient {i} has {len(g)} values, input has {len(values)}")
        if not all(math.isfinite(v) for v in g):
            raise ModelError(f"gradient {i} contains non-finite values")
    return loss, list(grads)


class SidecarServer:
    """Stateless request dispatcher plus stdio/TCP serving loops."""

    def __init__(self, model,
                 rewriter: Callable[[str, str, str], str] | None = None,
                 max_line_bytes: int = MAX_LINE_BYTES,
                 model_name: str = "twin",
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

    def _decode_inputs(self, rid, obj) -> list[Tensor] | dict:
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
                got_shape, values = decode_tensor(item)
                if got_shape != tuple(shape):
                    raise ProtocolError(
                        f"slot {k} expects shape {tuple(shape)}, "
                        f"got {got_shape}")
                self._check_image(values)
                tensors.append((got_shape, values))
            except (ProtocolError, ValueError, TypeError) as exc:
                return _err(rid, "bad-tensor", f"slot {k}: {exc}")
        return tensors

    @staticmethod
    def _check_image(values: list[float]) -> None:
        # image domain: finite, in [0, 1] (rank 3 is implied by the
        # exact-shape check against the model's slot shapes)
        for v in values:
            if not math.isfinite(v):
                raise ValueError("image contains non-finite values")
        lo, hi = min(values), max(values)
        if lo < 0.0 or hi > 1.0:
            raise ValueError(
                f"image values outside [0,1]: min={lo}, max={hi}")

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
            return {"id": rid, "text": str(self.model.generate(tensors, prompt))}
        try:
            target = decode_target(obj.get("target"))
        except (ProtocolError, ValueError, TypeError) as exc:
            return _err(rid, "bad-target", str(exc))
        if target[0] == REFERENCE_SET:
            # loss policy lives server-side: resolve reference sets against
            # the inputs of this call (callers wanting a frozen label derive
            # a class_index once and send that instead)
            target = self.model.derive_target(tensors, prompt, target)
        try:
            loss, grads = _checked_loss_and_grad(
                self.model, tensors, prompt, target)
        except ValueError as exc:
            # the model rejected this target kind
            return _err(rid, "bad-target", str(exc))
        return {"id": rid, "loss": loss,
                "grads": [encode_tensor(shape, g)
                          for (shape, _), g in zip(tensors, grads)]}

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


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sidecar",
        description="Serve the scalar twin of the linear toy model "
                    "over the line protocol.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--classes", type=int, default=4,
                        help="number of output classes")
    parser.add_argument("--shape", type=str, default="3,4,4",
                        help="input shape as C,H,W")
    parser.add_argument("--hook", type=str, default=None,
                        metavar="MODULE:ATTR",
                        help="serve a model from a factory instead of the "
                             "built-in twin (see sidecar.hooks)")
    parser.add_argument("--tcp", type=int, default=None, metavar="PORT",
                        help="serve on TCP instead of stdio (0 = ephemeral)")
    parser.add_argument("--host", type=str, default="127.0.0.1")
    parser.add_argument("--no-rewrite", action="store_true",
                        help="answer rewrite with the unsupported error")
    parser.add_argument("--max-line-bytes", type=int, default=MAX_LINE_BYTES)
    parser.add_argument("--ready-fd", type=int, default=None,
                        help="fd to announce the bound TCP port on")
    return parser


def build_server(args: argparse.Namespace) -> SidecarServer:
    if args.hook is not None:
        factory = load_hook(args.hook)
        model = factory()
        name = f"hook-{args.hook}"
    else:
        shape = tuple(int(d) for d in args.shape.split(","))
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(
                f"--shape must be C,H,W with positive dims: {args.shape}")
        model = LinearTwin(args.seed, input_shape=shape,
                           num_classes=args.classes)
        name = f"twin-linear-{args.seed}"
    rewriter = None if args.no_rewrite else (
        lambda strategy, instruction, question: question)
    return SidecarServer(model, rewriter=rewriter,
                         max_line_bytes=args.max_line_bytes,
                         model_name=name)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        server = build_server(args)
    except ValueError as exc:
        parser.error(str(exc))
    if args.tcp is not None:
        server.serve_tcp(args.host, args.tcp, ready_fd=args.ready_fd)
    else:
        server.serve_stdio()
    return 0


if __name__ == "__main__":
    sys.exit(main())
