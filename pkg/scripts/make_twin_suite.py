#!/usr/bin/env python3
"""Regenerate fixtures/golden_twin_suite.json.

Frozen wire-level material for checking an independent server
implementation (the sidecar package, or a port in another language)
against this one, request by request, without importing either side
into the other. Each of the 20 entries freezes one linear toy model
(seed, shape, class count) together with:

- the exact f32 tensor payloads a client sends (inputs, f32-quantized
  before encoding so the wire is lossless),
- the expected loss, f32 gradient payloads, and generate text at the
  clean point,
- one epsilon sign-step: x' = clip(x + eps * sign(g), 0, 1) computed
  from the f32 wire gradients and re-quantized to f32, plus the loss
  at that stepped point, so a client can replay a one-step trajectory
  and check both losses,
- a SHA-256 over the model's f32 weight bytes (W row-major, then b),
  so a reimplementation can prove bitwise weight agreement.

Seeds are screened so every f32 gradient coordinate clears 1e-9 in
magnitude: sign decisions then survive the f32 wire and any sane
evaluation-order differences, which keeps the recorded step point
reproducible to the bit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
from pathlib import Path

import numpy as np

from vlmadv.core import ImageTensor, Target, loss_and_grad
from vlmadv.oracle import decode_tensor, encode_target, encode_tensor
from vlmadv.rng import SplitMix64, derive_seed
from vlmadv.toys import ToyLinearModel

SHAPES = ((3, 2, 2), (1, 4, 4), (2, 3, 3), (3, 3, 3))
CLASSES = (2, 3, 4, 6, 16)
EPSILONS = (4, 8, 16)
PROMPTS = ("", "Provide a short caption for this image.",
           "name the object in the image")
GRAD_FLOOR = 1e-9


def draw_inputs(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform [0,1) pixels, row-major, quantized through f32."""
    stream = SplitMix64(derive_seed(seed, 1))
    flat = np.array([stream.random() for _ in range(int(np.prod(shape)))])
    return flat.astype(np.float32).astype(np.float64).reshape(shape)


def weight_digest(model: ToyLinearModel) -> str:
    blob = b"".join(
        np.ascontiguousarray(w, dtype="<f4").tobytes() for w in model.weights
    )
    return hashlib.sha256(blob).hexdigest()


def build_entry(idx: int, seed: int) -> dict | None:
    shape = SHAPES[idx % len(SHAPES)]
    classes = CLASSES[idx % len(CLASSES)]
    eps_num = EPSILONS[idx % len(EPSILONS)]
    prompt = PROMPTS[idx % len(PROMPTS)]

    model = ToyLinearModel(seed, input_shape=shape, num_classes=classes)
    x = draw_inputs(seed, shape)
    image = ImageTensor(x)
    label = model.predict([image])
    if idx % 7 == 3:
        target = Target.token_sequence(
            [label, (label + 1) % classes, (label + 2) % classes])
    else:
        target = Target.class_index(label)

    loss, grads = loss_and_grad(model, [image], prompt, target)
    g32 = decode_tensor(encode_tensor(grads[0]))
    if float(np.min(np.abs(g32))) <= GRAD_FLOOR:
        return None

    eps = eps_num / 255.0
    step = np.clip(x + eps * np.sign(g32), 0.0, 1.0)
    step32 = step.astype(np.float32).astype(np.float64)
    step_loss, _ = loss_and_grad(model, [ImageTensor(step32)], prompt, target)

    return {
        "id": f"twin-{idx:02d}",
        "seed": seed,
        "shape": list(shape),
        "classes": classes,
        "epsilon_num": eps_num,
        "epsilon_den": 255,
        "prompt": prompt,
        "target": encode_target(target),
        "inputs": [encode_tensor(x)],
        "weights_sha256": weight_digest(model),
        "clean_loss": loss,
        "clean_grads": [encode_tensor(grads[0])],
        "clean_generate": model.generate([image], prompt),
        "step_inputs": [encode_tensor(step32)],
        "step_loss": step_loss,
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--base-seed", type=int, default=1313)
    parser.add_argument("--size", type=int, default=20)
    parser.add_argument(
        "--out",
        type=Path,
        default=Path(__file__).resolve().parent.parent
        / "fixtures" / "golden_twin_suite.json",
    )
    args = parser.parse_args()

    entries = []
    for idx in range(args.size):
        for attempt in range(64):
            entry = build_entry(idx, derive_seed(args.base_seed, idx, attempt))
            if entry is not None:
                break
        else:
            raise RuntimeError(f"no seed with clear gradient signs, slot {idx}")
        if attempt:
            print(f"slot {idx}: skipped {attempt} seed(s) near-zero gradients")
        entries.append(entry)

    fixture = {"version": 1, "grad_floor": GRAD_FLOOR, "fixtures": entries}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(fixture, indent=2) + "\n")
    gaps = [e["step_loss"] - e["clean_loss"] for e in entries]
    print(f"wrote {args.out} ({len(entries)} entries)")
    print(f"step-minus-clean loss gaps: min {min(gaps):.3e}, max {max(gaps):.3e}")


if __name__ == "__main__":
    main()
