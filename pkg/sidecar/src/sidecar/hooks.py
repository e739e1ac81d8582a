"""Serve a framework-backed model through the sidecar.

The server is model-agnostic: anything satisfying the small contract
below can sit behind the wire, so a real gradient-capable model (torch,
jax, an RPC shim) is served by writing one adapter module and pointing
the CLI at it:

    python3 -m sidecar --hook mypkg.adapter:build_model

``build_model`` is any zero-argument callable returning the model
object. The contract, with tensors as ``(shape, flat_row_major_values)``
pairs and targets as ``(kind, value)`` pairs:

    slot_count                          int property
    input_shapes()                      sequence of (C, H, W) tuples
    loss_and_grad(inputs, prompt, target)
        -> (loss, grads): binary64 loss and one flat gradient list per
           input slot. Raise ValueError to reject a target kind (the
           peer sees bad-target); any other failure becomes model-error.
    generate(inputs, prompt)            -> text
    derive_target(inputs, prompt, declared)
        -> the target the loss should use when the peer sends a
           reference_set; return ("class_index", label) or similar.

Gradients must be the unclamped analytic gradients; the attacking side
owns projection. The server checks finiteness and slot agreement and
turns violations into model-error replies.
"""

from __future__ import annotations

import importlib
from typing import Callable, Sequence

from .twin import Tensor, TargetTuple

__all__ = ["load_hook", "FrameworkModelSkeleton"]


def load_hook(spec: str) -> Callable[[], object]:
    """Resolve "package.module:attribute" to a model factory."""
    module_name, sep, attr = spec.partition(":")
    if not sep or not module_name or not attr:
        raise ValueError(
            f"hook spec must look like package.module:attribute, got {spec!r}")
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise ValueError(f"cannot import hook module {module_name!r}: {exc}")
    try:
        return getattr(module, attr)
    except AttributeError:
        raise ValueError(
            f"module {module_name!r} has no attribute {attr!r}") from None


class FrameworkModelSkeleton:
    """Starting point for a framework adapter; fill in the math.

    Typical torch adapter shape: keep the module and a loss head here,
    build a requires-grad tensor from each slot's values in
    ``loss_and_grad``, run forward + backward, and return
    ``loss.item()`` with each slot gradient flattened to a list.
    """

    def __init__(self, input_shape: Sequence[int] = (3, 224, 224)):
        self.input_shape = tuple(int(d) for d in input_shape)

    @property
    def slot_count(self) -> int:
        return 1

    def input_shapes(self) -> tuple[tuple[int, ...], ...]:
        return (self.input_shape,)

    def loss_and_grad(
        self, inputs: Sequence[Tensor], prompt: str, target: TargetTuple
    ) -> tuple[float, list[list[float]]]:
        raise NotImplementedError("wire the framework forward/backward here")

    def generate(self, inputs: Sequence[Tensor], prompt: str) -> str:
        raise NotImplementedError("wire the framework decoder here")

    def derive_target(self, inputs: Sequence[Tensor], prompt: str,
                      declared: TargetTuple) -> TargetTuple:
        # reasonable default for classifiers: self-label the clean input
        raise NotImplementedError(
            "return e.g. (CLASS_INDEX, argmax_of_clean_logits)")
