"""Conformance and robustness checks for model-server endpoints.

A server passes when it (a) completes the describe handshake with
well-formed fields, (b) answers loss_and_grad / generate round-trips
with decodable payloads, (c) maps each class of malformed input to the
documented error code, and (d) keeps answering valid requests after
every malformed or fuzzed line (no crash, no desync).

Fuzzing is seeded and reproducible: line i of a run with seed s is a
pure function of (s, i).
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .core import ImageTensor, Target
from .oracle import (
    DEFAULT_TIMEOUT,
    ERROR_CODES,
    OracleClient,
    OracleError,
    RemoteModel,
    Transport,
    TransportError,
    ProtocolError,
    encode_line,
    encode_tensor,
)
from .rng import SplitMix64

__all__ = ["CheckOutcome", "run_conformance", "run_fuzz", "check_endpoint"]


@dataclass(frozen=True)
class CheckOutcome:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}" + (f": {self.detail}" if self.detail else "")


def _mid_inputs(model: RemoteModel) -> list[ImageTensor]:
    return [ImageTensor(np.full(s, 0.5)) for s in model.input_shapes()]


def _probe_reply(transport: Transport, raw: bytes, timeout: float) -> dict:
    """Send one raw line (newline appended) and decode the reply object."""
    if b"\n" in raw:
        raise ValueError("probe payload must be newline-free")
    reply = transport.request_line(raw + b"\n", timeout)
    obj = json.loads(reply.decode("utf-8"))
    if not isinstance(obj, dict):
        raise ProtocolError("server reply is not a JSON object")
    return obj


def _expect_error(transport: Transport, raw: bytes, code: str,
                  timeout: float, echo_id: str | None = None) -> CheckOutcome:
    name = f"error:{code}"
    try:
        obj = _probe_reply(transport, raw, timeout)
    except (TransportError, ProtocolError, ValueError,
            UnicodeDecodeError, json.JSONDecodeError) as exc:
        return CheckOutcome(name, False, f"no decodable reply ({exc})")
    err = obj.get("error")
    if not isinstance(err, dict) or "code" not in err:
        return CheckOutcome(name, False, f"expected an error object, got {obj!r}")
    got = err["code"]
    if got != code:
        return CheckOutcome(name, False, f"expected code {code!r}, got {got!r}")
    want_id = echo_id  # id echoes only when the request carried a usable one
    if obj.get("id") != want_id:
        return CheckOutcome(
            name, False, f"expected id {want_id!r}, got {obj.get('id')!r}")
    return CheckOutcome(name, True)


def _alive(client: OracleClient) -> None:
    """Raises unless the server still answers a describe round-trip."""
    client.request("describe")


def run_conformance(transport: Transport,
                    timeout: float = DEFAULT_TIMEOUT) -> list[CheckOutcome]:
    """Directed checks: handshake, round-trips, one probe per error code."""
    out: list[CheckOutcome] = []
    client = OracleClient(transport, timeout=timeout)

    try:
        model = RemoteModel(client)
    except (TransportError, ProtocolError, OracleError) as exc:
        out.append(CheckOutcome("handshake", False, str(exc)))
        return out
    out.append(CheckOutcome(
        "handshake", True,
        f"model={model.model_name} slots={model.slot_count}"))

    inputs = _mid_inputs(model)
    try:
        loss, grads = model.loss_and_grad(inputs, "probe", Target.class_index(0))
        ok = np.isfinite(loss) and all(
            g.shape == s for g, s in zip(grads, model.input_shapes()))
        out.append(CheckOutcome("loss_and_grad", ok,
                                "" if ok else "bad shapes or non-finite loss"))
    except (TransportError, ProtocolError, OracleError) as exc:
        out.append(CheckOutcome("loss_and_grad", False, str(exc)))
        return out
    try:
        text = model.generate(inputs, "probe")
        out.append(CheckOutcome("generate", isinstance(text, str),
                                "" if isinstance(text, str) else repr(text)))
    except OracleError as exc:
        # generate is optional server-side; "unsupported" is conforming
        ok = exc.code == "unsupported"
        out.append(CheckOutcome("generate", ok, str(exc)))
    except (TransportError, ProtocolError) as exc:
        out.append(CheckOutcome("generate", False, str(exc)))
        return out

    shapes = model.input_shapes()
    tensors = [encode_tensor(np.full(s, 0.5, dtype=np.float32).astype(np.float64))
               for s in shapes]
    tgt = {"kind": "class_index", "value": 0}

    def lag_req(**over) -> bytes:
        msg = {"id": "p-1", "op": "loss_and_grad", "prompt": "x",
               "inputs": list(tensors), "target": dict(tgt)}
        msg.update(over)
        return encode_line(msg).rstrip(b"\n")

    bad_b64 = dict(tensors[0])
    bad_b64["data"] = "!!!not-base64!!!"
    short = dict(tensors[0])
    short["data"] = base64.b64encode(b"\x00" * 4).decode("ascii")

    probes = [
        (b"this is not json", "bad-json", None),
        (b"[1, 2, 3]", "bad-json", None),
        (encode_line({"id": "p-1"}).rstrip(b"\n"), "bad-request", "p-1"),
        (encode_line({"id": "p-1", "op": "frobnicate"}).rstrip(b"\n"),
         "unknown-op", "p-1"),
        (lag_req(inputs=[bad_b64] + list(tensors[1:])), "bad-tensor", "p-1"),
        (lag_req(inputs=[short] + list(tensors[1:])), "bad-tensor", "p-1"),
        (lag_req(target={"kind": "mystery", "value": 0}), "bad-target", "p-1"),
        (lag_req(inputs=list(tensors) + [tensors[0]]), "slot-mismatch", "p-1"),
    ]
    for raw, code, echo in probes:
        out.append(_expect_error(transport, raw, code, timeout, echo))
        try:
            _alive(client)
        except (TransportError, ProtocolError, OracleError) as exc:
            out.append(CheckOutcome(f"alive-after:{code}", False, str(exc)))
            return out
        out.append(CheckOutcome(f"alive-after:{code}", True))
    return out


# Fuzz generator: each category builds one malformed, newline-free line.

def _fuzz_line(stream: SplitMix64) -> bytes:
    kind = stream.below(8)
    if kind == 0:  # printable garbage
        n = 1 + stream.below(60)
        chars = bytes(32 + stream.below(95) for _ in range(n))
        return chars.replace(b"\\", b"/")
    if kind == 1:  # valid JSON, wrong top-level type
        choice = stream.below(4)
        return [b"42", b'"just a string"', b"[[1,2],[3]]", b"null"][choice]
    if kind == 2:  # object missing op
        return json.dumps({"id": f"f-{stream.next_u64():x}"}).encode()
    if kind == 3:  # unknown op
        return json.dumps(
            {"id": "f", "op": f"op-{stream.next_u64():x}"}).encode()
    if kind == 4:  # known op, mistyped fields
        return json.dumps({
            "id": "f", "op": "loss_and_grad",
            "prompt": stream.below(2),
            "inputs": "not-a-list",
            "target": [1, 2],
        }).encode()
    if kind == 5:  # undecodable tensor payload
        junk = base64.b64encode(bytes(stream.below(256) for _ in range(7)))
        return json.dumps({
            "id": "f", "op": "loss_and_grad", "prompt": "q",
            "inputs": [{"shape": [2, 2], "dtype": "f32",
                        "data": junk.decode("ascii")}],
            "target": {"kind": "class_index", "value": 0},
        }).encode()
    if kind == 6:  # truncated JSON
        whole = json.dumps({"id": "f", "op": "describe", "pad": "x" * 40})
        cut = 1 + stream.below(len(whole) - 2)
        return whole[:cut].encode()
    # kind == 7: high-codepoint noise, still invalid JSON
    n = 1 + stream.below(20)
    text = "".join(chr(0x1F300 + stream.below(256)) for _ in range(n))
    return ("﻿" + text).encode("utf-8")


def run_fuzz(transport: Transport, lines: int = 1000, seed: int = 0,
             timeout: float = DEFAULT_TIMEOUT) -> list[CheckOutcome]:
    """Alternates malformed lines with valid describes; both must behave.

    Every malformed line must draw exactly one error reply with a
    documented code, and the describe that follows must succeed.
    """
    out: list[CheckOutcome] = []
    client = OracleClient(transport, timeout=timeout)
    stream = SplitMix64(seed)
    bad_replies = 0
    first_bad = ""
    for i in range(lines):
        raw = _fuzz_line(stream)
        try:
            obj = _probe_reply(transport, raw, timeout)
            err = obj.get("error")
            if not isinstance(err, dict) or err.get("code") not in ERROR_CODES:
                bad_replies += 1
                if not first_bad:
                    first_bad = f"line {i}: reply {obj!r}"
        except Exception as exc:  # noqa: BLE001 - any escape is a failure
            bad_replies += 1
            if not first_bad:
                first_bad = f"line {i}: {exc}"
        try:
            _alive(client)
        except (TransportError, ProtocolError, OracleError) as exc:
            out.append(CheckOutcome(
                "fuzz", False, f"server unresponsive after line {i}: {exc}"))
            return out
    out.append(CheckOutcome(
        "fuzz", bad_replies == 0,
        f"{lines} malformed lines, server stayed responsive"
        if bad_replies == 0 else
        f"{bad_replies} undocumented replies; first: {first_bad}"))
    return out


def check_endpoint(transport: Transport, fuzz_lines: int = 1000,
                   seed: int = 0,
                   timeout: float = DEFAULT_TIMEOUT) -> list[CheckOutcome]:
    """Full suite: directed conformance, then seeded fuzzing."""
    out = run_conformance(transport, timeout=timeout)
    if all(c.passed for c in out) and fuzz_lines > 0:
        out.extend(run_fuzz(transport, lines=fuzz_lines, seed=seed,
                            timeout=timeout))
    return out
