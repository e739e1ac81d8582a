"""White-box l-inf attacks: FGSM, PGD, and Auto-PGD (APGD).

All three are projected sign-ascent maximizers of a model's loss over the
intersection of the l-inf ball of radius epsilon around the original inputs
and the [0,1] pixel box. The loss trace always starts at the clean point and
has one entry per evaluated iterate; PGD and APGD return the best evaluated
iterate, FGSM returns the stepped point by definition.

Multi-input models are attacked through an input mask: gradients of unmasked
slots are discarded and those slots pass through as the same objects, so
unmasked outputs are bitwise identical to the originals.

APGD follows the published Auto-PGD recipe: momentum 0.75 after the first
step, initial step size 2*epsilon, and step halving at a fixed checkpoint
schedule when progress stalls, restarting each halving from the best point
seen so far. The checkpoint schedule is the ceiling of the fractional
recursion p_0 = 0, p_1 = 0.22, p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03,
0.06) scaled by the iteration budget, evaluated in exact rational arithmetic
because float rounding shifts some ceilings (the float recursion reaches
0.5700000000000001, whose scaled ceiling is 58 instead of 57).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .core import DifferentiableModel, ImageTensor, Sample, Target, loss_and_grad
from .rng import SplitMix64

FGSM = "fgsm"
PGD = "pgd"
APGD = "apgd"
METHODS = (FGSM, PGD, APGD)

APGD_MOMENTUM = 0.75
APGD_RHO = 0.75


@dataclass(frozen=True)
class AttackConfig:
    """One attack specification.

    step_size None means the per-method default: epsilon/4 for PGD, initial
    step 2*epsilon for APGD; FGSM always steps exactly epsilon. input_mask
    None perturbs every slot; otherwise only the listed slot indices move.
    """

    method: str
    epsilon: float
    iterations: int = 100
    step_size: float | None = None
    input_mask: tuple[int, ...] | None = None
    seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        method = str(self.method).lower()
        if method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        object.__setattr__(self, "method", method)
        if not (float(self.epsilon) > 0.0):
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "epsilon", float(self.epsilon))
        iterations = 1 if method == FGSM else int(self.iterations)
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        if method == APGD and iterations < 2:
            raise ValueError("apgd needs at least 2 iterations")
        object.__setattr__(self, "iterations", iterations)
        if self.step_size is not None and not (float(self.step_size) > 0.0):
            raise ValueError("step_size must be positive when given")
        if self.input_mask is not None:
            mask = tuple(sorted({int(i) for i in self.input_mask}))
            if not mask:
                raise ValueError("input_mask must not be empty")
            if mask[0] < 0:
                raise ValueError("input_mask indices must be non-negative")
            object.__setattr__(self, "input_mask", mask)


@dataclass(frozen=True)
class AttackResult:
    """Attack outcome plus its bound-compliance evidence.

    delta_inf_norm has one entry per model slot (0.0 for unmasked slots);
    best_loss is max(loss_trace) and best_iteration its first index.
    """

    adversarial_inputs: tuple[ImageTensor, ...]
    delta_inf_norm: tuple[float, ...]
    loss_trace: tuple[float, ...]
    best_loss: float
    best_iteration: int
    iterations_used: int

    def to_dict(self, include_trace: bool = True) -> dict:
        out = {
            "delta_inf_norm": list(self.delta_inf_norm),
            "best_loss": self.best_loss,
            "best_iteration": self.best_iteration,
            "iterations_used": self.iterations_used,
            "clean_loss": self.loss_trace[0],
        }
        if include_trace:
            out["loss_trace"] = list(self.loss_trace)
        return out


def apgd_checkpoints(iterations: int) -> list[int]:
    """Step-halving checkpoint schedule for a given iteration budget.

    Exact rational evaluation of the fractional recursion; returns strictly
    increasing iteration indices, starting at 0, all below the budget.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    ps = [Fraction(0), Fraction(22, 100)]
    while ps[-1] < 1:
        ps.append(ps[-1] + max(ps[-1] - ps[-2] - Fraction(3, 100), Fraction(6, 100)))
    out: list[int] = []
    for p in ps:
        if p >= 1:
            break
        w = math.ceil(p * iterations)
        if w >= iterations:
            break
        if not out or w > out[-1]:
            out.append(w)
    return out


def _project_array(candidate: np.ndarray, origin: np.ndarray,
                   epsilon: float) -> np.ndarray:
    lo = np.maximum(origin - epsilon, 0.0)
    hi = np.minimum(origin + epsilon, 1.0)
    return np.minimum(np.maximum(candidate, lo), hi)


def project_linf(candidate: ImageTensor, origin: ImageTensor,
                 epsilon: float) -> ImageTensor:
    """Clamp each element to [max(0, origin-eps), min(1, origin+eps)]."""
    if candidate.shape != origin.shape:
        raise ValueError(
            f"shape mismatch: {candidate.shape} vs {origin.shape}"
        )
    return ImageTensor(_project_array(candidate.data, origin.data, epsilon))


@dataclass
class _Ctx:
    model: DifferentiableModel
    origin: tuple[ImageTensor, ...]
    mask: tuple[int, ...]
    prompt: str
    target: Target
    eps: float


def _prepare(model: DifferentiableModel, sample: Sample,
             config: AttackConfig) -> _Ctx:
    if len(sample.inputs) != model.slot_count:
        raise ValueError(
            f"sample has {len(sample.inputs)} inputs, "
            f"model takes {model.slot_count}"
        )
    if config.input_mask is None:
        mask = tuple(range(model.slot_count))
    else:
        mask = config.input_mask
        if mask[-1] >= model.slot_count:
            raise ValueError(
                f"input_mask {mask} out of range for "
                f"{model.slot_count} slot(s)"
            )
    return _Ctx(model, tuple(sample.inputs), mask, sample.prompt,
                sample.target, config.epsilon)


def _evaluate(ctx: _Ctx, arrs: Mapping[int, np.ndarray]):
    """Loss and masked-slot gradients at the point given by arrs overrides."""
    inputs = [
        ImageTensor(arrs[i]) if i in arrs else ctx.origin[i]
        for i in range(len(ctx.origin))
    ]
    loss, grads = loss_and_grad(ctx.model, inputs, ctx.prompt, ctx.target)
    return loss, {i: grads[i] for i in ctx.mask}


def _random_start(ctx: _Ctx, seed: int) -> dict[int, np.ndarray]:
    """Uniform draw in the l-inf ball, projected into the box.

    Draw order: masked slots ascending, elements row-major, one uniform in
    [-eps, eps] each, from SplitMix64(seed).
    """
    stream = SplitMix64(seed)
    arrs = {}
    for i in ctx.mask:
        x = ctx.origin[i].data
        u = np.empty(x.size, dtype=np.float64)
        for j in range(x.size):
            u[j] = stream.uniform(-ctx.eps, ctx.eps)
        arrs[i] = _project_array(x + u.reshape(x.shape), x, ctx.eps)
    return arrs


def _result(ctx: _Ctx, final_arrs: Mapping[int, np.ndarray],
            trace: Sequence[float], best_index: int,
            iterations_used: int) -> AttackResult:
    adv = tuple(
        ImageTensor(final_arrs[i]) if i in final_arrs else ctx.origin[i]
        for i in range(len(ctx.origin))
    )
    deltas = tuple(
        float(np.max(np.abs(adv[i].data - ctx.origin[i].data)))
        if i in ctx.mask else 0.0
        for i in range(len(ctx.origin))
    )
    return AttackResult(
        adversarial_inputs=adv,
        delta_inf_norm=deltas,
        loss_trace=tuple(float(v) for v in trace),
        best_loss=float(trace[best_index]),
        best_iteration=int(best_index),
        iterations_used=iterations_used,
    )


def fgsm(model: DifferentiableModel, sample: Sample,
         config: AttackConfig) -> AttackResult:
    """Single sign step of size epsilon, projected into the feasible set."""
    if config.method != FGSM:
        raise ValueError(f"config.method is {config.method!r}, expected fgsm")
    ctx = _prepare(model, sample, config)
    loss0, grads = _evaluate(ctx, {})
    adv = {
        i: _project_array(
            ctx.origin[i].data + ctx.eps * np.sign(grads[i]),
            ctx.origin[i].data, ctx.eps)
        for i in ctx.mask
    }
    loss1, _ = _evaluate(ctx, adv)
    trace = [loss0, loss1]
    best_index = 1 if loss1 > loss0 else 0
    return _result(ctx, adv, trace, best_index, 1)


def pgd(model: DifferentiableModel, sample: Sample,
        config: AttackConfig) -> AttackResult:
    """Fixed-step projected sign ascent; returns the best evaluated iterate."""
    if config.method != PGD:
        raise ValueError(f"config.method is {config.method!r}, expected pgd")
    ctx = _prepare(model, sample, config)
    step = config.step_size if config.step_size is not None else ctx.eps / 4.0
    loss0, grads0 = _evaluate(ctx, {})
    trace = [loss0]
    best_arrs: Mapping[int, np.ndarray] = {i: ctx.origin[i].data for i in ctx.mask}
    best_loss, best_index = loss0, 0
    cur = {i: ctx.origin[i].data for i in ctx.mask}
    cur_grads = grads0
    if config.random_start:
        cur = _random_start(ctx, config.seed)
        loss_s, cur_grads = _evaluate(ctx, cur)
        trace.append(loss_s)
        if loss_s > best_loss:
            best_arrs, best_loss, best_index = cur, loss_s, len(trace) - 1
    for _ in range(config.iterations):
        cur = {
            i: _project_array(cur[i] + step * np.sign(cur_grads[i]),
                              ctx.origin[i].data, ctx.eps)
            for i in ctx.mask
        }
        loss_k, cur_grads = _evaluate(ctx, cur)
        trace.append(loss_k)
        if loss_k > best_loss:
            best_arrs, best_loss, best_index = cur, loss_k, len(trace) - 1
    return _result(ctx, best_arrs, trace, best_index, config.iterations)


def apgd(model: DifferentiableModel, sample: Sample,
         config: AttackConfig) -> AttackResult:
    """Momentum sign ascent with checkpointed step halving (Auto-PGD).

    At each checkpoint the step is halved if fewer than APGD_RHO of the
    update steps in the window improved on their predecessor's loss, or if
    the previous checkpoint did not halve and the best loss has not improved
    since it; every halving restarts from the best point and its gradient.
    """
    if config.method != APGD:
        raise ValueError(f"config.method is {config.method!r}, expected apgd")
    ctx = _prepare(model, sample, config)
    eta = config.step_size if config.step_size is not None else 2.0 * ctx.eps
    n = config.iterations
    checkset = set(apgd_checkpoints(n)[1:])

    loss0, grads0 = _evaluate(ctx, {})
    trace = [loss0]
    cur = {i: ctx.origin[i].data for i in ctx.mask}
    cur_grads = grads0
    best_arrs, best_grads = dict(cur), cur_grads
    best_loss, best_index = loss0, 0
    if config.random_start:
        cur = _random_start(ctx, config.seed)
        loss_s, cur_grads = _evaluate(ctx, cur)
        trace.append(loss_s)
        if loss_s > best_loss:
            best_arrs, best_grads = dict(cur), cur_grads
            best_loss, best_index = loss_s, len(trace) - 1

    # step_losses[k] is the loss after update k; entry 0 is the start point.
    step_losses = [trace[-1]]
    prev = cur
    last_check = 0
    halved_last = True  # disables the stagnation condition at checkpoint 1
    best_at_last = best_loss

    for k in range(1, n + 1):
        a = 1.0 if k == 1 else APGD_MOMENTUM
        new = {}
        for i in ctx.mask:
            o = ctx.origin[i].data
            z = _project_array(cur[i] + eta * np.sign(cur_grads[i]), o, ctx.eps)
            w = cur[i] + a * (z - cur[i]) + (1.0 - a) * (cur[i] - prev[i])
            new[i] = _project_array(w, o, ctx.eps)
        prev, cur = cur, new
        loss_k, cur_grads = _evaluate(ctx, cur)
        trace.append(loss_k)
        step_losses.append(loss_k)
        if loss_k > best_loss:
            best_arrs, best_grads = dict(cur), cur_grads
            best_loss, best_index = loss_k, len(trace) - 1
        if k in checkset:
            window = k - last_check
            improved = sum(
                1 for j in range(last_check + 1, k + 1)
                if step_losses[j] > step_losses[j - 1]
            )
            cond_oscillation = improved < APGD_RHO * window
            cond_stagnation = (not halved_last) and (best_at_last >= best_loss)
            halve = cond_oscillation or cond_stagnation
            if halve:
                eta /= 2.0
                cur = dict(best_arrs)
                cur_grads = best_grads
            halved_last = halve
            best_at_last = best_loss
            last_check = k
    return _result(ctx, best_arrs, trace, best_index, n)


def attack(model: DifferentiableModel, sample: Sample,
           config: AttackConfig) -> AttackResult:
    """Dispatch on config.method."""
    if config.method == FGSM:
        return fgsm(model, sample, config)
    if config.method == PGD:
        return pgd(model, sample, config)
    if config.method == APGD:
        return apgd(model, sample, config)
    raise ValueError(f"unknown attack method {config.method!r}")
