"""Core data types and the differentiable-model contract.

The attack engine only ever sees this interface: a model exposes how many
image inputs it takes, a scalar loss with one gradient array per input slot,
and text generation for scoring. Implementations live in :mod:`vlmadv.toys`
(in-process analytic models) and :mod:`vlmadv.oracle` (remote models behind
the wire protocol).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Shape = tuple[int, int, int]


class ModelError(RuntimeError):
    """A model violated its contract (non-finite loss, bad gradient shape)."""


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Dense (channels, height, width) image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"expected (C,H,W) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image values outside [0,1]: min={lo}, max={hi}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> Shape:
        return self.data.shape  # type: ignore[return-value]

    def same_shape(self, other: "ImageTensor") -> bool:
        return self.shape == other.shape

    def bitwise_equal(self, other: "ImageTensor") -> bool:
        return self.shape == other.shape and np.array_equal(
            self.data.view(np.uint64), other.data.view(np.uint64)
        )


CLASS_INDEX = "class_index"
TOKEN_SEQUENCE = "token_sequence"
REFERENCE_SET = "reference_set"


@dataclass(frozen=True)
class Target:
    """Attack target: a class label, a token sequence, or reference strings."""

    kind: str
    value: object

    @staticmethod
    def class_index(label: int) -> "Target":
        if isinstance(label, bool) or not isinstance(label, int) or label < 0:
            raise ValueError("class index must be a non-negative integer")
        return Target(CLASS_INDEX, label)

    @staticmethod
    def token_sequence(tokens: Sequence[int]) -> "Target":
        toks = tuple(int(t) for t in tokens)
        if not toks or any(t < 0 for t in toks):
            raise ValueError("token sequence must be non-empty, non-negative")
        return Target(TOKEN_SEQUENCE, toks)

    @staticmethod
    def reference_set(texts: Sequence[str]) -> "Target":
        refs = tuple(str(t) for t in texts)
        if not refs:
            raise ValueError("reference set must be non-empty")
        return Target(REFERENCE_SET, refs)

    def __post_init__(self):
        if self.kind not in (CLASS_INDEX, TOKEN_SEQUENCE, REFERENCE_SET):
            raise ValueError(f"unknown target kind {self.kind!r}")


@dataclass(frozen=True)
class Sample:
    """One evaluation item: image inputs, a text prompt, and a target."""

    id: str
    inputs: tuple[ImageTensor, ...]
    prompt: str
    target: Target

    def __post_init__(self):
        if not self.inputs:
            raise ValueError("sample needs at least one image input")
        object.__setattr__(self, "inputs", tuple(self.inputs))


class DifferentiableModel:
    """Behavioral contract the attack engine optimizes against.

    ``loss_and_grad`` must be a pure function of its arguments and safe to
    call concurrently; gradients are the unclamped analytic gradients
    (projection back to the feasible box is the attack's job, not the
    model's).
    """

    @property
    def slot_count(self) -> int:
        raise NotImplementedError

    def input_shapes(self) -> tuple[Shape, ...]:
        raise NotImplementedError

    def loss_and_grad(
        self, inputs: Sequence[ImageTensor], prompt: str, target: Target
    ) -> tuple[float, list[np.ndarray]]:
        raise NotImplementedError

    def generate(self, inputs: Sequence[ImageTensor], prompt: str) -> str:
        raise NotImplementedError

    def derive_target(
        self, inputs: Sequence[ImageTensor], prompt: str, declared: Target
    ) -> Target:
        """Target the attack maximizes loss against.

        Default: the target declared by the dataset record. In-process toy
        models override this to self-label from their clean prediction, the
        conventional "original label" of an untargeted attack.
        """
        return declared


def _check_inputs(model: DifferentiableModel, inputs: Sequence[ImageTensor]) -> None:
    if len(inputs) != model.slot_count:
        raise ValueError(
            f"model takes {model.slot_count} input slot(s), got {len(inputs)}"
        )


def loss_and_grad(
    model: DifferentiableModel,
    inputs: Sequence[ImageTensor],
    prompt: str,
    target: Target,
) -> tuple[float, list[np.ndarray]]:
    """Validated loss/gradient evaluation; the single entry the attacks use.

    Raises ModelError if the model returns a non-finite loss or gradients
    whose shapes do not match the corresponding input slots.
    """
    _check_inputs(model, inputs)
    loss, grads = model.loss_and_grad(inputs, prompt, target)
    loss = float(loss)
    if not math.isfinite(loss):
        raise ModelError(f"model returned non-finite loss {loss!r}")
    if len(grads) != len(inputs):
        raise ModelError(
            f"model returned {len(grads)} gradients for {len(inputs)} inputs"
        )
    out = []
    for i, (g, x) in enumerate(zip(grads, inputs)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            raise ModelError(
                f"gradient {i} has shape {g.shape}, input has {x.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise ModelError(f"gradient {i} contains non-finite values")
        out.append(g)
    return loss, out


def finite_diff_grad(
    model: DifferentiableModel,
    inputs: Sequence[ImageTensor],
    prompt: str,
    target: Target,
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient estimate, (L(x+h·e) - L(x-h·e)) / 2h.

    Every element must lie strictly inside (h, 1-h) so both probes stay in
    the model's valid input range.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    _check_inputs(model, inputs)
    for i, x in enumerate(inputs):
        lo, hi = float(x.data.min()), float(x.data.max())
        if lo <= h or hi >= 1.0 - h:
            raise ValueError(
                f"input {i} has elements within {h} of the [0,1] boundary"
            )

    def loss_at(slot_arrays: list[np.ndarray]) -> float:
        probe = [ImageTensor(a) for a in slot_arrays]
        loss, _ = model.loss_and_grad(probe, prompt, target)
        return float(loss)

    base = [x.data.copy() for x in inputs]
    grads = []
    for s in range(len(inputs)):
        est = np.zeros_like(base[s])
        flat = est.reshape(-1)
        work = base[s].reshape(-1)
        for j in range(work.size):
            orig = work[j]
            work[j] = orig + h
            up = loss_at(base)
            work[j] = orig - h
            down = loss_at(base)
            work[j] = orig
            flat[j] = (up - down) / (2.0 * h)
        grads.append(est)
    return grads
