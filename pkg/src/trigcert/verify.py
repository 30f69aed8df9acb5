"""Verification drivers.

``verify_x`` sweeps every trigger position against a fixed image set: a
position survives only if the attack condition of every image is
individually satisfiable (cheap output-bound check first, then the LP) and
the conjunction over all images is not refuted; surviving positions go to
the trigger generator. SAFE means every position was refuted; a generated
trigger means UNSAFE; anything in between is UNKNOWN.

``verify_pr`` wraps verify_x in Wald's sequential probability ratio test:
each round draws K images from the filtered population and tests them, and
the test accepts H0 (no attack with success rate >= theta, verdict SAFE)
or H1 (verdict UNKNOWN) once the log likelihood ratio crosses the
alpha/beta thresholds. A generated trigger whose measured success rate on
the validation set reaches theta ends the run with UNSAFE immediately.
"""

from __future__ import annotations

import enum
import math
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, fields

import numpy as np

from .constraints import GLOBAL, QuickCheck, VariableId, attack_condition, quick_unsat
from .deeppoly import analyze_trigger_region
from .lp import Sat, Unsat, check_feasible, conjoin
from .nets import Image, Network, Trigger, TriggerSpec, forward_batch, stamp_batch, trigger_pixel_indices
from .synthesis import op_trigger


class Verdict(enum.Enum):
    SAFE = "safe"
    UNSAFE = "unsafe"
    UNKNOWN = "unknown"


class SprtOutcome(enum.Enum):
    ACCEPT_H0 = "accept_h0"
    ACCEPT_H1 = "accept_h1"
    CONTINUE = "continue"


class EmptyPopulationError(ValueError):
    """No images survive filtering for this target."""


@dataclass(frozen=True)
class SprtParams:
    """Sequential test parameters; p0/p1 bracket 1 - theta^k by delta."""

    theta: float = 0.9
    k: int = 5
    alpha: float = 0.01
    beta: float = 0.01
    delta: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0,1), got {self.theta}")
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        for name in ("alpha", "beta", "delta"):
            v = getattr(self, name)
            if not 0.0 < v < 0.5:
                raise ValueError(f"{name} must be in (0, 0.5), got {v}")
        if not 0.0 < self.p1 < self.p0 < 1.0:
            raise ValueError(f"derived p0={self.p0}, p1={self.p1} must satisfy 0 < p1 < p0 < 1")

    @property
    def p0(self) -> float:
        return (1.0 - self.theta ** self.k) + self.delta

    @property
    def p1(self) -> float:
        return (1.0 - self.theta ** self.k) - self.delta


def sprt_log_ratio(params: SprtParams, n: int, z: int) -> float:
    """log of p1^z/p0^z * (1-p1)^(n-z)/(1-p0)^(n-z)."""
    return z * math.log(params.p1 / params.p0) + (n - z) * math.log((1.0 - params.p1) / (1.0 - params.p0))


def sprt_decision(params: SprtParams, n: int, z: int) -> SprtOutcome:
    if z > n or n < 0:
        raise ValueError(f"inconsistent counters n={n}, z={z}")
    ratio = sprt_log_ratio(params, n, z)
    if ratio <= math.log(params.beta / (1.0 - params.alpha)):
        return SprtOutcome.ACCEPT_H0
    if ratio >= math.log((1.0 - params.beta) / params.alpha):
        return SprtOutcome.ACCEPT_H1
    return SprtOutcome.CONTINUE


def sprt_step(params: SprtParams, n: int, z: int, round_safe: bool) -> tuple[SprtOutcome, int, int]:
    """Account one round and evaluate the stopping rule."""
    n += 1
    if round_safe:
        z += 1
    return sprt_decision(params, n, z), n, z


@dataclass
class PositionStats:
    """Counters over the position sweep(s)."""

    positions: int = 0
    quick_unsat: int = 0
    image_unsat: int = 0
    conjunction_unsat: int = 0
    solver_sat: int = 0
    solver_unknown: int = 0
    optimizer_failures: int = 0

    def merge(self, other: "PositionStats") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class VerifyXResult:
    verdict: Verdict
    trigger: Trigger | None = None
    stats: PositionStats = field(default_factory=PositionStats)


@dataclass
class VerifyPrResult:
    verdict: Verdict
    trigger: Trigger | None = None
    success_rate: float | None = None
    rounds: int = 0
    safe_rounds: int = 0
    reason: str | None = None  # "accept_h0" | "accept_h1" | "validated_trigger" | "budget"
    stats: PositionStats = field(default_factory=PositionStats)


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def _output_bounds(net: Network, image: Image, spec: TriggerSpec, cache: dict | None):
    key = (image, spec.position)
    if cache is not None and key in cache:
        return cache[key]
    idx = trigger_pixel_indices(net.input_shape, spec)
    state = analyze_trigger_region(net, image.pixels, idx)
    out = state.layer_count - 1
    bounds = (state.lower(out), state.upper(out))
    if cache is not None:
        cache[key] = bounds
    return bounds


def trigger_positions(net: Network, trigger_shape: tuple[int, int, int]):
    """Row-major sweep of all placements of the given shape."""
    _, h_s, w_s = trigger_shape
    h, w = net.input_shape.height, net.input_shape.width
    return [(r, c) for r in range(h - h_s + 1) for c in range(w - w_s + 1)]


def _examine_position(net, images, trigger_shape, target, position, *, seed, deadline,
                      solver_budget_secs, solver_max_pivots, opt_budget_secs, opt_max_iters,
                      cancel, quick_cache, lp_sink, bounds_sink):
    """One position of the verify_x sweep.

    Returns ("pruned", stats) when no trigger can exist here, ("unsafe",
    trigger, stats) on success, ("unknown", stats) when inconclusive and
    ("cancelled", stats) when another worker already found a trigger.
    """
    stats = PositionStats(positions=1)
    if cancel is not None and cancel.is_set():
        return ("cancelled", stats)
    spec = TriggerSpec(trigger_shape, position)

    def remaining():
        return max(0.0, deadline - time.monotonic()) if deadline is not None else math.inf

    systems = []
    for i, image in enumerate(images):
        out_lw, out_up = _output_bounds(net, image, spec, quick_cache)
        if quick_unsat(out_lw, out_up, target) is QuickCheck.DEFINITELY_UNSAT:
            stats.quick_unsat += 1
            return ("pruned", stats)
        on_state = None
        if bounds_sink is not None:
            on_state = lambda state, _tag=f"img{i}": bounds_sink(_tag, position, state)
        _, system = attack_condition(net, image, spec, target, image_tag=f"img{i}", on_state=on_state)
        result = check_feasible(system, min(solver_budget_secs, remaining() + 1.0), solver_max_pivots)
        if isinstance(result, Unsat):
            stats.image_unsat += 1
            return ("pruned", stats)
        systems.append(system)

    conjunction = conjoin(systems)
    if lp_sink is not None:
        lp_sink(position, conjunction)
    result = check_feasible(conjunction, min(solver_budget_secs, remaining() + 1.0), solver_max_pivots)
    if isinstance(result, Unsat):
        stats.conjunction_unsat += 1
        return ("pruned", stats)

    candidate = None
    if isinstance(result, Sat):
        stats.solver_sat += 1
        idx = trigger_pixel_indices(net.input_shape, spec)
        candidate = np.array([result.model[VariableId(GLOBAL, 0, int(j))] for j in idx])
    else:
        stats.solver_unknown += 1

    rng = np.random.default_rng(_seed_list(seed) + [position[0], position[1]])
    trigger = op_trigger(net, images, spec, target, candidate,
                         budget_secs=min(opt_budget_secs, remaining() + 1.0),
                         max_iters=opt_max_iters, rng=rng, cancel=cancel)
    if trigger is not None:
        return ("unsafe", trigger, stats)
    stats.optimizer_failures += 1
    return ("unknown", stats)


def verify_x(
    net: Network,
    images: list[Image],
    trigger_shape: tuple[int, int, int],
    target: int,
    *,
    workers: int = 1,
    seed=0,
    budget_secs: float | None = 600.0,
    solver_budget_secs: float = 20.0,
    solver_max_pivots: int | None = None,
    opt_budget_secs: float = 30.0,
    opt_max_iters: int = 400,
    cancel: threading.Event | None = None,
    quick_cache: dict | None = None,
    lp_sink=None,
    bounds_sink=None,
) -> VerifyXResult:
    """Decide whether one trigger can attack every image in ``images``."""
    if not images:
        raise ValueError("verify_x needs a nonempty image set")
    for image in images:
        if image.shape != net.input_shape:
            raise ValueError("image shape does not match network input")
    TriggerSpec(trigger_shape, (0, 0)).validate_for(net.input_shape)
    if not (0 <= target < net.labels):
        raise ValueError(f"target {target} out of range for {net.labels} labels")

    positions = trigger_positions(net, trigger_shape)
    deadline = None if budget_secs is None else time.monotonic() + budget_secs
    cancel = cancel or threading.Event()
    stats = PositionStats()
    has_unknown = False
    exhausted = False

    kwargs = dict(seed=seed, deadline=deadline, solver_budget_secs=solver_budget_secs,
                  solver_max_pivots=solver_max_pivots, opt_budget_secs=opt_budget_secs,
                  opt_max_iters=opt_max_iters, cancel=cancel, quick_cache=quick_cache,
                  lp_sink=lp_sink, bounds_sink=bounds_sink)

    if workers <= 1:
        for position in positions:
            if deadline is not None and time.monotonic() > deadline:
                exhausted = True
                break
            outcome = _examine_position(net, images, trigger_shape, target, position, **kwargs)
            stats.merge(outcome[-1])
            if outcome[0] == "unsafe":
                return VerifyXResult(Verdict.UNSAFE, outcome[1], stats)
            if outcome[0] == "unknown":
                has_unknown = True
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_examine_position, net, images, trigger_shape, target, p, **kwargs): p
                       for p in positions}
            pending = set(futures)
            trigger = None
            while pending:
                timeout = None if deadline is None else max(0.0, deadline - time.monotonic())
                done, pending = wait(pending, timeout=timeout, return_when=FIRST_COMPLETED)
                if not done:  # deadline hit with tasks still running
                    exhausted = True
                    cancel.set()
                    break
                for fut in done:
                    outcome = fut.result()
                    stats.merge(outcome[-1])
                    if outcome[0] == "unsafe" and trigger is None:
                        trigger = outcome[1]
                        cancel.set()
                    elif outcome[0] in ("unknown", "cancelled"):
                        has_unknown = True
                if trigger is not None:
                    for fut in pending:
                        fut.cancel()
                    break
            if trigger is not None:
                return VerifyXResult(Verdict.UNSAFE, trigger, stats)

    if exhausted:
        return VerifyXResult(Verdict.UNKNOWN, None, stats)
    return VerifyXResult(Verdict.UNKNOWN if has_unknown else Verdict.SAFE, None, stats)


def filter_population(net: Network, dataset: list[Image], target: int) -> list[Image]:
    """Images the network classifies correctly and not as the target."""
    if not dataset:
        return []
    for image in dataset:
        if image.label is None:
            raise ValueError("filter_population needs labeled images")
    preds = forward_batch(net, np.stack([img.pixels for img in dataset])).argmax(axis=1)
    return [img for img, p in zip(dataset, preds) if p == img.label and p != target]


def validate_success_rate(net: Network, trigger: Trigger, validation: list[Image], target: int) -> float:
    """Fraction of validation images classified as the target after stamping."""
    if not validation:
        raise ValueError("validation set is empty")
    idx = trigger_pixel_indices(net.input_shape, trigger.spec)
    stamped = stamp_batch(np.stack([img.pixels for img in validation]), idx, trigger.values)
    preds = forward_batch(net, stamped).argmax(axis=1)
    return float(np.mean(preds == target))


def verify_pr(
    net: Network,
    population: list[Image],
    validation: list[Image],
    params: SprtParams,
    trigger_shape: tuple[int, int, int],
    target: int,
    *,
    seed=0,
    workers: int = 1,
    global_budget_secs: float | None = 7200.0,
    verifyx_budget_secs: float | None = 600.0,
    solver_budget_secs: float = 20.0,
    solver_max_pivots: int | None = None,
    opt_budget_secs: float = 30.0,
    opt_max_iters: int = 400,
    verify_x_fn=None,
) -> VerifyPrResult:
    """Sequential hypothesis test for backdoor absence at one target label.

    ``verify_x_fn`` replaces the real verify_x when supplied (signature:
    (net, images, trigger_shape, target, **kwargs) -> VerifyXResult).
    """
    filtered = filter_population(net, population, target)
    if not filtered:
        raise EmptyPopulationError(f"no usable images for target {target}")
    if len(filtered) < params.k:
        raise ValueError(f"filtered population has {len(filtered)} images, need at least k={params.k}")
    filtered_val = filter_population(net, validation, target)
    if not filtered_val:
        raise EmptyPopulationError(f"no usable validation images for target {target}")

    base_seed = _seed_list(seed)
    sample_rng = np.random.default_rng(base_seed + [1])
    deadline = None if global_budget_secs is None else time.monotonic() + global_budget_secs
    quick_cache: dict = {}
    stats = PositionStats()
    n = z = 0

    while True:
        if deadline is not None and time.monotonic() > deadline:
            return VerifyPrResult(Verdict.UNKNOWN, rounds=n, safe_rounds=z, reason="budget", stats=stats)
        picks = sample_rng.choice(len(filtered), size=params.k, replace=False)
        batch = [filtered[int(i)] for i in picks]

        vx_budget = verifyx_budget_secs
        if deadline is not None:
            room = max(0.0, deadline - time.monotonic())
            vx_budget = room if vx_budget is None else min(vx_budget, room)
        kwargs = dict(workers=workers, seed=base_seed + [2, n],
                      budget_secs=vx_budget, solver_budget_secs=solver_budget_secs,
                      solver_max_pivots=solver_max_pivots, opt_budget_secs=opt_budget_secs,
                      opt_max_iters=opt_max_iters, quick_cache=quick_cache)
        if verify_x_fn is None:
            result = verify_x(net, batch, trigger_shape, target, **kwargs)
        else:
            result = verify_x_fn(net, batch, trigger_shape, target, **kwargs)
        stats.merge(result.stats)

        if result.verdict is Verdict.UNSAFE:
            rate = validate_success_rate(net, result.trigger, filtered_val, target)
            if rate >= params.theta:
                return VerifyPrResult(Verdict.UNSAFE, result.trigger, rate,
                                      rounds=n + 1, safe_rounds=z,
                                      reason="validated_trigger", stats=stats)

        outcome, n, z = sprt_step(params, n, z, result.verdict is Verdict.SAFE)
        if outcome is SprtOutcome.ACCEPT_H0:
            return VerifyPrResult(Verdict.SAFE, rounds=n, safe_rounds=z, reason="accept_h0", stats=stats)
        if outcome is SprtOutcome.ACCEPT_H1:
            return VerifyPrResult(Verdict.UNKNOWN, rounds=n, safe_rounds=z, reason="accept_h1", stats=stats)
