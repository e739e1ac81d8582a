"""Deterministic toy instances and datasets for desk-scale evaluation runs.

Everything here is derived from SplitMix64 streams keyed by explicit seeds,
so suites can be frozen as (family, seed) pairs and rebuilt bit-identically.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import ImageTensor, Sample, Target
from .dataset import (
    Dataset,
    DatasetRecord,
    TASK_CAPTIONING,
    TASK_VQA,
    save_dataset,
    save_ppm,
)
from .metrics import NUM_ANNOTATORS
from .rng import SplitMix64, derive_seed
from .toys import ToyLinearModel, ToyMLPModel, ToyTwoBranchModel, _ToyBase

# Families for the frozen attack-ordering suite. The convex families use two
# classes: their cross-entropy gradient direction is constant in x, so every
# sign-ascent attack converges to the same clipped vertex bitwise and paired
# comparisons cannot be perturbed by float noise. The sharpened MLP (weights
# scaled 8x) is curved enough that adaptive-step refinement shows a real
# margin over fixed-step ascent.
ORDERING_FAMILIES = ("linear2", "mlp-sharp", "two-branch2")


def make_ordering_model(family: str, seed: int) -> _ToyBase:
    if family == "linear2":
        return ToyLinearModel(seed, input_shape=(1, 4, 4), num_classes=2)
    if family == "mlp-sharp":
        base = ToyMLPModel(seed, input_shape=(1, 4, 4), hidden=16,
                           num_classes=6)
        return ToyMLPModel.from_arrays(
            base.W1 * 8.0, base.b1 * 8.0, base.W2 * 8.0, base.b2,
            input_shape=base.input_shape)
    if family == "two-branch2":
        return ToyTwoBranchModel(seed, input_shapes=((1, 3, 3), (1, 3, 3)),
                                 num_classes=2)
    raise ValueError(f"unknown ordering family {family!r}")


def make_uniform_inputs(model: _ToyBase, seed: int) -> tuple[ImageTensor, ...]:
    """Uniform [0,1) inputs for every slot, drawn row-major from one stream."""
    stream = SplitMix64(derive_seed(seed, 1))
    out = []
    for shape in model.input_shapes():
        flat = np.empty(int(np.prod(shape)), dtype=np.float64)
        for j in range(flat.size):
            flat[j] = stream.random()
        out.append(ImageTensor(flat.reshape(shape)))
    return tuple(out)


def make_ordering_instance(family: str, seed: int) -> tuple[_ToyBase, Sample]:
    """One self-labeled attack instance: inputs plus the clean-argmax target."""
    model = make_ordering_model(family, seed)
    inputs = make_uniform_inputs(model, seed)
    target = Target.class_index(model.predict(inputs))
    sample = Sample(id=f"{family}-{seed:016x}", inputs=inputs, prompt="",
                    target=target)
    return model, sample


def make_toy_dataset(out_dir, task: str, model: _ToyBase, count: int = 100,
                     seed: int = 0, name: str = "toy") -> Path:
    """Writes a PPM-backed dataset labeled by the model's own clean outputs.

    Pixel draws are quantized to the 255 grid so the PPM round-trip is
    bit-exact, and every label (caption reference or answer set) is the
    model's clean generation on the stored image. A clean evaluation of
    the same model therefore scores the metric maximum by construction,
    and any attack row can only tie or fall below it.

    Returns the path of the written JSONL index; images land under
    out_dir/images/.
    """
    if task not in (TASK_CAPTIONING, TASK_VQA):
        raise ValueError(f"unknown task {task!r}")
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    shapes = model.input_shapes()
    for shape in shapes:
        if shape[0] != 3:
            raise ValueError(
                f"PPM-backed datasets need 3-channel inputs, got {shape}")
    stream = SplitMix64(derive_seed(seed, 2))
    records = []
    for i in range(count):
        inputs = []
        refs = []
        for k, shape in enumerate(shapes):
            flat = np.empty(int(np.prod(shape)), dtype=np.float64)
            for j in range(flat.size):
                flat[j] = stream.random()
            arr = np.rint(flat.reshape(shape) * 255.0) / 255.0
            image = ImageTensor(arr)
            suffix = f"-{k}" if len(shapes) > 1 else ""
            rel = f"images/{name}-{i:04d}{suffix}.ppm"
            save_ppm(image, out_dir / rel)
            inputs.append(image)
            refs.append(rel)
        if task == TASK_CAPTIONING:
            caption = model.generate(tuple(inputs), "caption")
            records.append(DatasetRecord(
                id=f"{name}-{i:04d}", task=task, image_refs=tuple(refs),
                references=(caption,)))
        else:
            word = model.generate(tuple(inputs), "")
            records.append(DatasetRecord(
                id=f"{name}-{i:04d}", task=task, image_refs=tuple(refs),
                question=f"what is shown in image {i}?",
                answers=(word,) * NUM_ANNOTATORS))
    index = out_dir / f"{name}.jsonl"
    save_dataset(Dataset(records, base_dir=out_dir), index)
    return index
