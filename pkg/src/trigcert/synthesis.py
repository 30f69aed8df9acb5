"""Concrete trigger generation.

Candidate trigger values (typically an LP model, which may be spurious
because the constraint system over-approximates the network) are first
validated by stamping and forward evaluation. When validation fails, the
attack loss is minimized by projected gradient descent over the trigger
values with central finite-difference gradients. A trigger is returned
only when the loss reaches exactly zero on every image, i.e. the target
logit strictly dominates all others after stamping; ties count as failure.
"""

from __future__ import annotations

import time

import numpy as np

from .nets import Image, Network, Trigger, TriggerSpec, forward_batch, stamp_batch, trigger_pixel_indices

LOSS_EPS = 1e-9  # added to a non-successful image's margin so loss 0 <=> success
FD_STEP = 1e-4
LEARNING_RATE = 0.05
MIN_LEARNING_RATE = 1e-7


def _margins(net: Network, pixels: np.ndarray, indices: np.ndarray, values: np.ndarray,
             target: int) -> tuple[np.ndarray, np.ndarray]:
    """(target logit, best other logit) per image after stamping ``values``."""
    logits = forward_batch(net, stamp_batch(pixels, indices, values))
    n_s = logits[:, target]
    others = np.delete(logits, target, axis=1)
    n_o = others.max(axis=1)
    return n_s, n_o


def _loss_vector(net: Network, pixels: np.ndarray, indices: np.ndarray, values: np.ndarray,
                 target: int) -> np.ndarray:
    n_s, n_o = _margins(net, pixels, indices, values, target)
    return np.where(n_s > n_o, 0.0, n_o - n_s + LOSS_EPS)


def image_loss(net: Network, image: Image, trigger: Trigger, target: int) -> float:
    """0 when the stamped image is classified as the target with a strict
    margin, else (best other logit - target logit + epsilon)."""
    idx = trigger_pixel_indices(image.shape, trigger.spec)
    return float(_loss_vector(net, image.pixels[None, :], idx, trigger.values, target)[0])


def total_loss(net: Network, images: list[Image], trigger: Trigger, target: int) -> float:
    """Sum of per-image losses; zero iff the trigger attacks every image."""
    if not images:
        return 0.0
    idx = trigger_pixel_indices(images[0].shape, trigger.spec)
    pixels = np.stack([img.pixels for img in images])
    return float(_loss_vector(net, pixels, idx, trigger.values, target).sum())


def _fd_gradient(loss_fn, values: np.ndarray) -> np.ndarray:
    grad = np.empty_like(values)
    for i in range(values.shape[0]):
        bumped = values.copy()
        bumped[i] = values[i] + FD_STEP
        hi = loss_fn(bumped)
        bumped[i] = values[i] - FD_STEP
        lo = loss_fn(bumped)
        grad[i] = (hi - lo) / (2.0 * FD_STEP)
    return grad


def op_trigger(
    net: Network,
    images: list[Image],
    spec: TriggerSpec,
    target: int,
    candidate: np.ndarray | None = None,
    budget_secs: float = 30.0,
    max_iters: int = 400,
    restarts: int = 3,
    rng: np.random.Generator | None = None,
    cancel=None,
) -> Trigger | None:
    """Produce a trigger that attacks every image in ``images``, or None.

    A provided candidate is validated as-is first and returned unchanged
    if it already succeeds. Otherwise projected gradient descent runs from
    the candidate (or the domain midpoint) plus ``restarts`` random
    starting points. ``cancel`` may be a threading.Event checked
    cooperatively between iterations.
    """
    if not images:
        raise ValueError("op_trigger needs at least one image")
    spec.validate_for(net.input_shape)
    idx = trigger_pixel_indices(net.input_shape, spec)
    pixels = np.stack([img.pixels for img in images])
    lo = net.input_low[idx]
    hi = net.input_high[idx]
    if rng is None:
        rng = np.random.default_rng()

    def losses(values):
        return _loss_vector(net, pixels, idx, values, target)

    if idx.size == 0:
        # Degenerate footprint: nothing to optimize, the "trigger" succeeds
        # iff the clean images are already classified as the target.
        if float(losses(np.zeros(0)).sum()) == 0.0:
            return Trigger(spec, np.zeros(0))
        return None

    if candidate is not None:
        cand = np.clip(np.asarray(candidate, dtype=np.float64), lo, hi)
        if float(losses(cand).sum()) == 0.0:
            return Trigger(spec, cand)
    else:
        cand = None

    deadline = time.monotonic() + budget_secs
    starts = [cand if cand is not None else 0.5 * (lo + hi)]
    starts += [rng.uniform(lo, hi) for _ in range(restarts)]

    def loss_total(values):
        return float(losses(values).sum())

    for start in starts:
        values = np.clip(start, lo, hi)
        best = loss_total(values)
        if best == 0.0:
            return Trigger(spec, values)
        lr = LEARNING_RATE
        for _ in range(max_iters):
            if time.monotonic() > deadline or (cancel is not None and cancel.is_set()):
                return None
            grad = _fd_gradient(loss_total, values)
            norm = np.abs(grad).max()
            if norm == 0.0:
                break  # flat plateau, this start is hopeless
            step = np.clip(values - lr * grad, lo, hi)
            cand_loss = loss_total(step)
            if cand_loss < best:
                values = step
                best = cand_loss
                if best == 0.0:
                    return Trigger(spec, values)
            else:
                lr *= 0.5
                if lr < MIN_LEARNING_RATE:
                    break
    return None
