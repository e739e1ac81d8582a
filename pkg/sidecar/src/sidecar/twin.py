"""Scalar-math twin of the toolkit's linear toy model.

Plain Python floats are IEEE binary64, the same arithmetic any array
library uses, so this twin reproduces the primary implementation's
numbers without importing it: weights are bitwise equal (same SplitMix64
draw order, same float32 quantization), losses and gradients agree to
rounding noise orders of magnitude below the 1e-6 wire tolerance.

Model:  logits = W @ flatten(x) + b  over one image slot.
Loss:   mean cross-entropy of the target labels under the logits, i.e.
        logsumexp(logits) - mean(logits[labels]); a class-index target
        is one label, a token-sequence target is several sharing the
        class vocabulary. Reference-set targets cannot be scored;
        callers resolve them through ``derive_target`` first.

Tensors cross this module's boundary as ``(shape, values)`` pairs with
row-major flat value lists; targets as ``(kind, value)`` pairs.
"""

from __future__ import annotations

import math
import struct
from typing import Sequence

from .rng import SplitMix64

CLASS_WORDS = (
    "cat", "dog", "bird", "fish", "horse", "sheep", "train", "boat",
    "car", "plane", "tree", "house", "apple", "chair", "clock", "river",
)

CLASS_INDEX = "class_index"
TOKEN_SEQUENCE = "token_sequence"
REFERENCE_SET = "reference_set"

Tensor = tuple[tuple[int, ...], list[float]]
TargetTuple = tuple[str, object]


class ModelError(RuntimeError):
    """The model broke its contract (non-finite loss, wrong slot count)."""


def f32(value: float) -> float:
    """Round a binary64 value to the nearest float32, kept as a float."""
    return struct.unpack("<f", struct.pack("<f", value))[0]


def _prod(dims: Sequence[int]) -> int:
    n = 1
    for d in dims:
        n *= int(d)
    return n


def _target_labels(target: TargetTuple, num_classes: int) -> list[int]:
    kind, value = target
    if kind == CLASS_INDEX:
        labels = [int(value)]  # type: ignore[arg-type]
    elif kind == TOKEN_SEQUENCE:
        labels = [int(t) for t in value]  # type: ignore[union-attr]
    else:
        raise ValueError(
            f"this model cannot score {kind!r} targets; "
            "resolve through derive_target first"
        )
    for t in labels:
        if t >= num_classes:
            raise ValueError(f"target id {t} >= class count {num_classes}")
    return labels


class LinearTwin:
    """Linear softmax classifier rebuilt from a seed, scalar math only."""

    def __init__(self, seed: int = 0, input_shape: Sequence[int] = (3, 4, 4),
                 num_classes: int = 4):
        if not 2 <= num_classes <= len(CLASS_WORDS):
            raise ValueError(
                f"num_classes must be in [2, {len(CLASS_WORDS)}], "
                f"got {num_classes}")
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        d = _prod(self.input_shape)
        stream = SplitMix64(seed)
        # draw order is part of the contract: W row-major, then b, each
        # value uniform in [-0.5, 0.5) quantized through float32
        flat = [f32(stream.uniform(-0.5, 0.5)) for _ in range(num_classes * d)]
        self.W = [flat[c * d:(c + 1) * d] for c in range(num_classes)]
        self.b = [f32(stream.uniform(-0.5, 0.5)) for _ in range(num_classes)]

    @property
    def slot_count(self) -> int:
        return 1

    def input_shapes(self) -> tuple[tuple[int, ...], ...]:
        return (self.input_shape,)

    def weight_bytes(self) -> bytes:
        """All weights, row-major f32 little-endian, W then b."""
        flat = [v for row in self.W for v in row] + list(self.b)
        return struct.pack(f"<{len(flat)}f", *flat)

    def _logits(self, inputs: Sequence[Tensor]) -> list[float]:
        if len(inputs) != 1:
            raise ModelError(f"model takes 1 input slot, got {len(inputs)}")
        shape, x = inputs[0]
        if _prod(shape) != len(self.W[0]) or len(x) != len(self.W[0]):
            raise ModelError(
                f"input shape {tuple(shape)} does not match "
                f"{self.input_shape}")
        out = []
        for c in range(self.num_classes):
            row = self.W[c]
            acc = 0.0
            for j in range(len(x)):
                acc += row[j] * x[j]
            out.append(acc + self.b[c])
        return out

    def predict(self, inputs: Sequence[Tensor]) -> int:
        logits = self._logits(inputs)
        best = 0
        for c in range(1, self.num_classes):
            if logits[c] > logits[best]:
                best = c
        return best

    def generate(self, inputs: Sequence[Tensor], prompt: str) -> str:
        word = CLASS_WORDS[self.predict(inputs)]
        if "caption" in prompt.lower():
            return f"a photo of a {word}"
        return word

    def derive_target(self, inputs: Sequence[Tensor], prompt: str,
                      declared: TargetTuple) -> TargetTuple:
        """Self-label from the clean prediction (untargeted-attack label)."""
        return (CLASS_INDEX, self.predict(inputs))

    def loss_and_grad(
        self, inputs: Sequence[Tensor], prompt: str, target: TargetTuple
    ) -> tuple[float, list[list[float]]]:
        logits = self._logits(inputs)
        labels = _target_labels(target, self.num_classes)
        m = max(logits)
        z = [math.exp(l - m) for l in logits]
        total = sum(z)
        lse = m + math.log(total)
        mean_onehot = [0.0] * self.num_classes
        for t in labels:
            mean_onehot[t] += 1.0 / len(labels)
        picked = 0.0
        for c in range(self.num_classes):
            picked += mean_onehot[c] * logits[c]
        loss = lse - picked
        coeff = [z[c] / total - mean_onehot[c] for c in range(self.num_classes)]
        d = len(self.W[0])
        grad = [0.0] * d
        for c in range(self.num_classes):
            row, k = self.W[c], coeff[c]
            for j in range(d):
                grad[j] += row[j] * k
        return loss, [grad]
