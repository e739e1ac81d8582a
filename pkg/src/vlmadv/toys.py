"""In-process toy models with hand-derived analytic gradients.

Three small architectures stand in for full vision-language models so the
attacks, metrics, and harness can run end to end on a desk CPU: a linear
softmax classifier, a one-hidden-layer tanh MLP, and a two-branch model whose
input slots mimic a two-encoder ensemble. Weights are uniform draws in
[-0.5, 0.5] from SplitMix64 (one stream per model, fixed draw order),
quantized to float32 at construction so the f32 weight file and any
cross-language twin reproduce them bitwise.

Targets: class indices and token sequences share one vocabulary of size
``num_classes``; token-sequence loss is the mean cross-entropy of the tokens
under the class logits. Reference-set targets cannot be scored by these
models; callers resolve them through ``derive_target`` first.
"""

from __future__ import annotations

import math
import struct
from typing import Sequence

import numpy as np

from .core import (
    CLASS_INDEX,
    TOKEN_SEQUENCE,
    DifferentiableModel,
    ImageTensor,
    Shape,
    Target,
)
from .rng import SplitMix64

CLASS_WORDS = (
    "cat", "dog", "bird", "fish", "horse", "sheep", "train", "boat",
    "car", "plane", "tree", "house", "apple", "chair", "clock", "river",
)

WEIGHTS_MAGIC = b"ADVT"
WEIGHTS_VERSION = 1


def _draw_array(stream: SplitMix64, shape: tuple[int, ...]) -> np.ndarray:
    """Row-major uniform[-0.5, 0.5] draws, quantized to f32 values."""
    flat = np.empty(int(np.prod(shape)), dtype=np.float64)
    for i in range(flat.size):
        flat[i] = stream.uniform(-0.5, 0.5)
    return flat.astype(np.float32).astype(np.float64).reshape(shape)


def _target_labels(target: Target, num_classes: int) -> list[int]:
    if target.kind == CLASS_INDEX:
        labels = [int(target.value)]
    elif target.kind == TOKEN_SEQUENCE:
        labels = [int(t) for t in target.value]  # type: ignore[union-attr]
    else:
        raise ValueError(
            f"toy models cannot score {target.kind!r} targets; "
            "resolve through derive_target first"
        )
    for t in labels:
        if t >= num_classes:
            raise ValueError(f"target id {t} >= class count {num_classes}")
    return labels


def _ce_parts(
    logits: np.ndarray, target: Target, num_classes: int
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over target labels and its gradient w.r.t. logits.

    loss = logsumexp(logits) - mean(logits[labels]); gradient coefficient is
    softmax(logits) minus the mean one-hot of the labels.
    """
    labels = _target_labels(target, num_classes)
    m = float(np.max(logits))
    z = np.exp(logits - m)
    total = float(np.sum(z))
    lse = m + math.log(total)
    p = z / total
    mean_onehot = np.zeros(num_classes, dtype=np.float64)
    for t in labels:
        mean_onehot[t] += 1.0 / len(labels)
    loss = lse - float(np.dot(mean_onehot, logits))
    return loss, p - mean_onehot


def _check_num_classes(num_classes: int) -> None:
    if not 2 <= num_classes <= len(CLASS_WORDS):
        raise ValueError(
            f"num_classes must be in [2, {len(CLASS_WORDS)}], got {num_classes}"
        )


def _as_weight(arr: np.ndarray, shape: tuple[int, ...], name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"{name} has shape {out.shape}, expected {shape}")
    return out.copy()


class _ToyBase(DifferentiableModel):
    """Shared prediction surface: argmax over (possibly summed) logits."""

    family: str
    num_classes: int

    def _ensemble_logits(self, inputs: Sequence[ImageTensor]) -> np.ndarray:
        raise NotImplementedError

    @property
    def weights(self) -> tuple[np.ndarray, ...]:
        raise NotImplementedError

    def predict(self, inputs: Sequence[ImageTensor]) -> int:
        return int(np.argmax(self._ensemble_logits(inputs)))

    def generate(self, inputs: Sequence[ImageTensor], prompt: str) -> str:
        word = CLASS_WORDS[self.predict(inputs)]
        if "caption" in prompt.lower():
            return f"a photo of a {word}"
        return word

    def derive_target(
        self, inputs: Sequence[ImageTensor], prompt: str, declared: Target
    ) -> Target:
        """Self-label from the clean prediction (untargeted-attack label)."""
        return Target.class_index(self.predict(inputs))

    def save_weights(self, path) -> None:
        save_weights_file(path, self.weights)


class ToyLinearModel(_ToyBase):
    """logits = W @ flatten(x) + b over a single input slot."""

    family = "linear"

    def __init__(self, seed: int, input_shape: Shape = (3, 4, 4),
                 num_classes: int = 4):
        _check_num_classes(num_classes)
        d = int(np.prod(input_shape))
        stream = SplitMix64(seed)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.W = _draw_array(stream, (num_classes, d))
        self.b = _draw_array(stream, (num_classes,))

    @classmethod
    def from_arrays(cls, W: np.ndarray, b: np.ndarray,
                    input_shape: Shape) -> "ToyLinearModel":
        m = cls.__new__(cls)
        d = int(np.prod(input_shape))
        num_classes = np.asarray(W).shape[0]
        _check_num_classes(num_classes)
        m.input_shape = tuple(input_shape)
        m.num_classes = num_classes
        m.W = _as_weight(W, (num_classes, d), "W")
        m.b = _as_weight(b, (num_classes,), "b")
        return m

    @classmethod
    def from_weights_file(cls, path, input_shape: Shape) -> "ToyLinearModel":
        W, b = load_weights_file(path, expect_count=2)
        return cls.from_arrays(W, b, input_shape)

    @property
    def slot_count(self) -> int:
        return 1

    def input_shapes(self) -> tuple[Shape, ...]:
        return (self.input_shape,)

    @property
    def weights(self) -> tuple[np.ndarray, ...]:
        return (self.W, self.b)

    def _ensemble_logits(self, inputs: Sequence[ImageTensor]) -> np.ndarray:
        return self.W @ inputs[0].data.reshape(-1) + self.b

    def loss_and_grad(self, inputs, prompt, target):
        logits = self._ensemble_logits(inputs)
        loss, coeff = _ce_parts(logits, target, self.num_classes)
        grad = (self.W.T @ coeff).reshape(self.input_shape)
        return loss, [grad]


class ToyMLPModel(_ToyBase):
    """One tanh hidden layer: logits = W2 @ tanh(W1 @ flatten(x) + b1) + b2."""

    family = "mlp"

    def __init__(self, seed: int, input_shape: Shape = (1, 4, 4),
                 hidden: int = 8, num_classes: int = 4):
        _check_num_classes(num_classes)
        if hidden < 1:
            raise ValueError("hidden width must be positive")
        d = int(np.prod(input_shape))
        stream = SplitMix64(seed)
        self.input_shape = tuple(input_shape)
        self.hidden = hidden
        self.num_classes = num_classes
        self.W1 = _draw_array(stream, (hidden, d))
        self.b1 = _draw_array(stream, (hidden,))
        self.W2 = _draw_array(stream, (num_classes, hidden))
        self.b2 = _draw_array(stream, (num_classes,))

    @classmethod
    def from_arrays(cls, W1, b1, W2, b2, input_shape: Shape) -> "ToyMLPModel":
        m = cls.__new__(cls)
        d = int(np.prod(input_shape))
        hidden = np.asarray(W1).shape[0]
        num_classes = np.asarray(W2).shape[0]
        _check_num_classes(num_classes)
        m.input_shape = tuple(input_shape)
        m.hidden = hidden
        m.num_classes = num_classes
        m.W1 = _as_weight(W1, (hidden, d), "W1")
        m.b1 = _as_weight(b1, (hidden,), "b1")
        m.W2 = _as_weight(W2, (num_classes, hidden), "W2")
        m.b2 = _as_weight(b2, (num_classes,), "b2")
        return m

    @classmethod
    def from_weights_file(cls, path, input_shape: Shape) -> "ToyMLPModel":
        arrays = load_weights_file(path, expect_count=4)
        return cls.from_arrays(*arrays, input_shape=input_shape)

    @property
    def slot_count(self) -> int:
        return 1

    def input_shapes(self) -> tuple[Shape, ...]:
        return (self.input_shape,)

    @property
    def weights(self) -> tuple[np.ndarray, ...]:
        return (self.W1, self.b1, self.W2, self.b2)

    def _hidden(self, inputs: Sequence[ImageTensor]) -> np.ndarray:
        return np.tanh(self.W1 @ inputs[0].data.reshape(-1) + self.b1)

    def _ensemble_logits(self, inputs: Sequence[ImageTensor]) -> np.ndarray:
        return self.W2 @ self._hidden(inputs) + self.b2

    def loss_and_grad(self, inputs, prompt, target):
        h = self._hidden(inputs)
        logits = self.W2 @ h + self.b2
        loss, coeff = _ce_parts(logits, target, self.num_classes)
        dh = (self.W2.T @ coeff) * (1.0 - h * h)
        grad = (self.W1.T @ dh).reshape(self.input_shape)
        return loss, [grad]


class ToyTwoBranchModel(_ToyBase):
    """Two input slots, one linear head each; branch losses are summed.

    Predictions use the summed logits (an ensemble vote), while the loss is
    the sum of per-branch cross-entropies so the gradient with respect to
    slot i depends only on input i.
    """

    family = "two-branch"

    def __init__(self, seed: int,
                 input_shapes: tuple[Shape, Shape] = ((1, 3, 3), (1, 3, 3)),
                 num_classes: int = 4):
        _check_num_classes(num_classes)
        if len(input_shapes) != 2:
            raise ValueError("two-branch model takes exactly 2 input shapes")
        stream = SplitMix64(seed)
        self._input_shapes = tuple(tuple(s) for s in input_shapes)
        self.num_classes = num_classes
        d0 = int(np.prod(self._input_shapes[0]))
        d1 = int(np.prod(self._input_shapes[1]))
        self.W0 = _draw_array(stream, (num_classes, d0))
        self.b0 = _draw_array(stream, (num_classes,))
        self.W1 = _draw_array(stream, (num_classes, d1))
        self.b1 = _draw_array(stream, (num_classes,))

    @classmethod
    def from_arrays(cls, W0, b0, W1, b1,
                    input_shapes: tuple[Shape, Shape]) -> "ToyTwoBranchModel":
        m = cls.__new__(cls)
        if len(input_shapes) != 2:
            raise ValueError("two-branch model takes exactly 2 input shapes")
        num_classes = np.asarray(W0).shape[0]
        _check_num_classes(num_classes)
        m._input_shapes = tuple(tuple(s) for s in input_shapes)
        m.num_classes = num_classes
        d0 = int(np.prod(m._input_shapes[0]))
        d1 = int(np.prod(m._input_shapes[1]))
        m.W0 = _as_weight(W0, (num_classes, d0), "W0")
        m.b0 = _as_weight(b0, (num_classes,), "b0")
        m.W1 = _as_weight(W1, (num_classes, d1), "W1")
        m.b1 = _as_weight(b1, (num_classes,), "b1")
        return m

    @classmethod
    def from_weights_file(cls, path,
                          input_shapes: tuple[Shape, Shape]) -> "ToyTwoBranchModel":
        arrays = load_weights_file(path, expect_count=4)
        return cls.from_arrays(*arrays, input_shapes=input_shapes)

    @property
    def slot_count(self) -> int:
        return 2

    def input_shapes(self) -> tuple[Shape, ...]:
        return self._input_shapes

    @property
    def weights(self) -> tuple[np.ndarray, ...]:
        return (self.W0, self.b0, self.W1, self.b1)

    def _branch_logits(self, inputs: Sequence[ImageTensor]) -> list[np.ndarray]:
        return [
            self.W0 @ inputs[0].data.reshape(-1) + self.b0,
            self.W1 @ inputs[1].data.reshape(-1) + self.b1,
        ]

    def _ensemble_logits(self, inputs: Sequence[ImageTensor]) -> np.ndarray:
        l0, l1 = self._branch_logits(inputs)
        return l0 + l1

    def loss_and_grad(self, inputs, prompt, target):
        l0, l1 = self._branch_logits(inputs)
        loss0, c0 = _ce_parts(l0, target, self.num_classes)
        loss1, c1 = _ce_parts(l1, target, self.num_classes)
        g0 = (self.W0.T @ c0).reshape(self._input_shapes[0])
        g1 = (self.W1.T @ c1).reshape(self._input_shapes[1])
        return loss0 + loss1, [g0, g1]


TOY_FAMILIES = {
    "linear": ToyLinearModel,
    "mlp": ToyMLPModel,
    "two-branch": ToyTwoBranchModel,
}


def make_toy_model(family: str, seed: int, **overrides) -> _ToyBase:
    try:
        ctor = TOY_FAMILIES[family]
    except KeyError:
        raise ValueError(
            f"unknown toy family {family!r}; pick one of {sorted(TOY_FAMILIES)}"
        ) from None
    return ctor(seed, **overrides)


def save_weights_file(path, arrays: Sequence[np.ndarray]) -> None:
    """Write weights as: magic "ADVT", version u16 LE, tensor count u16 LE,
    per-tensor (ndim u8, dims u32 LE each), then all data as f32 LE row-major.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if not arrays:
        raise ValueError("no arrays to save")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<HH", WEIGHTS_VERSION, len(arrays)))
        for a in arrays:
            if a.ndim < 1 or a.ndim > 255:
                raise ValueError(f"unsupported tensor rank {a.ndim}")
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_weights_file(path, expect_count: int | None = None) -> list[np.ndarray]:
    """Read an ADVT weight file back as float64 arrays (exact f32 values)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError("not a toy weight file (bad magic)")
    if len(blob) < 8:
        raise ValueError("truncated weight file header")
    version, count = struct.unpack_from("<HH", blob, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    if expect_count is not None and count != expect_count:
        raise ValueError(f"weight file has {count} tensors, expected {expect_count}")
    off = 8
    shapes: list[tuple[int, ...]] = []
    for _ in range(count):
        if off + 1 > len(blob):
            raise ValueError("truncated weight file header")
        ndim = blob[off]
        off += 1
        if off + 4 * ndim > len(blob):
            raise ValueError("truncated weight file header")
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if ndim == 0 or any(d == 0 for d in dims):
            raise ValueError("weight tensors must have positive dimensions")
        shapes.append(tuple(dims))
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        nbytes = 4 * n
        if off + nbytes > len(blob):
            raise ValueError("truncated weight file data")
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        off += nbytes
        arrays.append(data.astype(np.float64).reshape(shape))
    if off != len(blob):
        raise ValueError("trailing bytes after weight data")
    return arrays
