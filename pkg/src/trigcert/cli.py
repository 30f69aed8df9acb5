"""Command-line front end.

Subcommands:
  verify      sequential certification of one target label (or all labels)
  verify-set  single position sweep against an explicit image list
  attack      trigger generation only, no verification
  eval        forward/classify a dataset and report accuracy

Exit status encodes the worst verdict across targets: 0 safe, 2 unknown,
3 unsafe (or trigger found), 1 operational error.
"""

from __future__ import annotations

import argparse
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .nets import Image, Network, TriggerSpec, forward_batch
from .synthesis import op_trigger
from .verify import (
    SprtParams,
    Verdict,
    VerifyPrResult,
    VerifyXResult,
    trigger_positions,
    verify_pr,
    verify_x,
)

EXIT_SAFE = 0
EXIT_ERROR = 1
EXIT_UNKNOWN = 2
EXIT_UNSAFE = 3

_VERDICT_STATUS = {Verdict.SAFE: EXIT_SAFE, Verdict.UNKNOWN: EXIT_UNKNOWN, Verdict.UNSAFE: EXIT_UNSAFE}


@dataclass
class RunConfig:
    command: str
    network: str
    dataset_images: str | None = None
    dataset_labels: str | None = None
    validation_images: str | None = None
    validation_labels: str | None = None
    trigger_shape: tuple[int, int, int] = (1, 3, 3)
    target: int | str = 0  # label index or "all"
    theta: float = 0.9
    k: int = 5
    alpha: float = 0.01
    beta: float = 0.01
    delta: float = 0.01
    workers: int = 1
    seed: int = 0
    verifyx_budget_secs: float = 600.0
    global_budget_secs: float = 7200.0
    solver_budget_secs: float = 20.0
    opt_budget_secs: float = 30.0
    solver_max_pivots: int | None = None
    opt_max_iters: int = 400
    report: str | None = None
    dump_bounds: str | None = None
    dump_lp: str | None = None
    indices: list[int] | None = None
    first: int | None = None
    position: str | None = None
    verbose: bool = False


@dataclass
class Report:
    command: str
    config: dict
    results: list = field(default_factory=list)
    nondeterministic: bool = False
    wall_time_secs: float = 0.0  # stdout only; kept out of the canonical file

    def to_doc(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "nondeterministic": self.nondeterministic,
            "results": self.results,
        }


def _load_dataset(images_path: str, labels_path: str | None) -> list[Image]:
    if images_path.endswith(".csv"):
        return formats.load_csv_dataset(images_path)
    if labels_path is None:
        raise formats.DatasetFormatError("IDX datasets need both an images file and a labels file")
    return formats.load_mnist_idx(images_path, labels_path)


def _config_echo(config: RunConfig, net: Network, targets: list[int]) -> dict:
    echo = {
        "network": config.network,
        "dataset_images": config.dataset_images,
        "dataset_labels": config.dataset_labels,
        "validation_images": config.validation_images or config.dataset_images,
        "validation_labels": config.validation_labels or config.dataset_labels,
        "trigger_shape": list(config.trigger_shape),
        "targets": targets,
        "labels": net.labels,
        "theta": config.theta,
        "k": config.k,
        "alpha": config.alpha,
        "beta": config.beta,
        "delta": config.delta,
        "workers": config.workers,
        "seed": config.seed,
        "budgets": {
            "verifyx_secs": config.verifyx_budget_secs,
            "global_secs": config.global_budget_secs,
            "solver_secs": config.solver_budget_secs,
            "opt_secs": config.opt_budget_secs,
        },
        "solver_max_pivots": config.solver_max_pivots,
        "opt_max_iters": config.opt_max_iters,
    }
    if config.command in ("verify-set", "attack"):
        echo["indices"] = config.indices
        echo["first"] = config.first
    if config.command == "attack":
        echo["position"] = config.position
    return echo


class _Sinks:
    """Flag-gated debug outputs, shared across worker threads."""

    def __init__(self, config: RunConfig):
        self._lock = threading.Lock()
        self._bounds_stream = open(config.dump_bounds, "w", encoding="utf-8") if config.dump_bounds else None
        self._lp_dir = config.dump_lp
        self._lp_count = 0

    def bounds_sink(self, target: int):
        if self._bounds_stream is None:
            return None

        def sink(tag, position, state):
            with self._lock:
                formats.append_bounds_dump(self._bounds_stream, f"t{target}/{tag}", position, state)
        return sink

    def lp_sink(self, target: int):
        if self._lp_dir is None:
            return None
        from .lp import write_lp_text
        import os

        os.makedirs(self._lp_dir, exist_ok=True)

        def sink(position, system):
            with self._lock:
                self._lp_count += 1
                name = f"t{target}_p{position[0]}_{position[1]}_{self._lp_count:04d}.lp"
                with open(os.path.join(self._lp_dir, name), "w", encoding="utf-8") as fh:
                    write_lp_text(system, fh)
        return sink

    def close(self):
        if self._bounds_stream is not None:
            self._bounds_stream.close()


def _result_entry_pr(target: int, res: VerifyPrResult, validation_example: Image | None) -> dict:
    entry = {
        "target": target,
        "verdict": res.verdict.value,
        "rounds": res.rounds,
        "safe_rounds": res.safe_rounds,
        "reason": res.reason,
        "diagnostics": res.stats.as_dict(),
    }
    if res.trigger is not None:
        entry["trigger"] = formats.trigger_to_doc(res.trigger, validation_example)
        entry["success_rate"] = res.success_rate
    return entry


def _result_entry_x(target: int, res: VerifyXResult, example: Image | None) -> dict:
    entry = {
        "target": target,
        "verdict": res.verdict.value,
        "diagnostics": res.stats.as_dict(),
    }
    if res.trigger is not None:
        entry["trigger"] = formats.trigger_to_doc(res.trigger, example)
    return entry


def _select_images(dataset: list[Image], config: RunConfig) -> list[Image]:
    if config.indices is not None:
        bad = [i for i in config.indices if not (0 <= i < len(dataset))]
        if bad:
            raise ValueError(f"image indices {bad} out of range for dataset of {len(dataset)}")
        return [dataset[i] for i in config.indices]
    first = config.first if config.first is not None else 5
    if first < 1 or first > len(dataset):
        raise ValueError(f"--first {first} out of range for dataset of {len(dataset)}")
    return dataset[:first]


def _parse_targets(config: RunConfig, net: Network) -> list[int]:
    if config.target == "all":
        return list(range(net.labels))
    t = int(config.target)
    if not (0 <= t < net.labels):
        raise ValueError(f"target {t} out of range for {net.labels} labels")
    return [t]


def run(config: RunConfig) -> tuple[Report, int]:
    """Execute one CLI command; returns the report and the exit status."""
    started = time.monotonic()
    net = formats.load_network(config.network)
    sinks = _Sinks(config)
    try:
        if config.command == "eval":
            report, status = _run_eval(config, net)
        elif config.command == "attack":
            report, status = _run_attack(config, net, sinks)
        elif config.command == "verify-set":
            report, status = _run_verify_set(config, net, sinks)
        elif config.command == "verify":
            report, status = _run_verify(config, net, sinks)
        else:
            raise ValueError(f"unknown command {config.command!r}")
    finally:
        sinks.close()
    report.wall_time_secs = time.monotonic() - started
    if config.report:
        formats.save_report(report.to_doc(), config.report)
    return report, status


def _run_eval(config: RunConfig, net: Network) -> tuple[Report, int]:
    dataset = _load_dataset(config.dataset_images, config.dataset_labels)
    preds = forward_batch(net, np.stack([img.pixels for img in dataset])).argmax(axis=1)
    labels = np.array([-1 if img.label is None else img.label for img in dataset])
    counts = {int(t): int((preds == t).sum()) for t in range(net.labels)}
    entry = {
        "images": len(dataset),
        "accuracy": float(np.mean(preds == labels)) if (labels >= 0).all() else None,
        "predicted_counts": counts,
    }
    report = Report("eval", _config_echo(config, net, []), results=[entry])
    return report, EXIT_SAFE


def _run_attack(config: RunConfig, net: Network, sinks: _Sinks) -> tuple[Report, int]:
    if config.target == "all":
        raise ValueError("attack needs a single target label")
    target = int(config.target)
    dataset = _load_dataset(config.dataset_images, config.dataset_labels)
    images = _select_images(dataset, config)
    if config.position is None or config.position == "all":
        positions = trigger_positions(net, config.trigger_shape)
    else:
        h_p, w_p = (int(v) for v in config.position.split(","))
        positions = [(h_p, w_p)]

    trigger = None
    for position in positions:
        spec = TriggerSpec(config.trigger_shape, position)
        rng = np.random.default_rng([config.seed, target, position[0], position[1]])
        trigger = op_trigger(net, images, spec, target,
                             budget_secs=config.opt_budget_secs,
                             max_iters=config.opt_max_iters, rng=rng)
        if trigger is not None:
            break

    entry = {"target": target, "found": trigger is not None}
    if trigger is not None:
        entry["trigger"] = formats.trigger_to_doc(trigger, images[0])
    report = Report("attack", _config_echo(config, net, [target]), results=[entry])
    return report, EXIT_UNSAFE if trigger is not None else EXIT_UNKNOWN


def _run_verify_set(config: RunConfig, net: Network, sinks: _Sinks) -> tuple[Report, int]:
    dataset = _load_dataset(config.dataset_images, config.dataset_labels)
    images = _select_images(dataset, config)
    targets = _parse_targets(config, net)
    results = []
    worst = EXIT_SAFE
    for target in targets:
        res = verify_x(
            net, images, config.trigger_shape, target,
            workers=config.workers if len(targets) == 1 else 1,
            seed=[config.seed, target],
            budget_secs=config.verifyx_budget_secs,
            solver_budget_secs=config.solver_budget_secs,
            solver_max_pivots=config.solver_max_pivots,
            opt_budget_secs=config.opt_budget_secs,
            opt_max_iters=config.opt_max_iters,
            lp_sink=sinks.lp_sink(target),
            bounds_sink=sinks.bounds_sink(target),
        )
        results.append(_result_entry_x(target, res, images[0]))
        worst = max(worst, _VERDICT_STATUS[res.verdict])
        if config.verbose:
            print(f"target {target}: {res.verdict.value}")
    report = Report("verify-set", _config_echo(config, net, targets), results=results,
                    nondeterministic=config.workers > 1)
    return report, worst


def _run_verify(config: RunConfig, net: Network, sinks: _Sinks) -> tuple[Report, int]:
    population = _load_dataset(config.dataset_images, config.dataset_labels)
    if config.validation_images:
        validation = _load_dataset(config.validation_images,
                                   config.validation_labels or config.dataset_labels)
    else:
        validation = population
    targets = _parse_targets(config, net)
    params = SprtParams(config.theta, config.k, config.alpha, config.beta, config.delta)

    def one_target(target: int) -> VerifyPrResult:
        return verify_pr(
            net, population, validation, params, config.trigger_shape, target,
            seed=[config.seed, target],
            workers=config.workers if len(targets) == 1 else 1,
            global_budget_secs=config.global_budget_secs,
            verifyx_budget_secs=config.verifyx_budget_secs,
            solver_budget_secs=config.solver_budget_secs,
            solver_max_pivots=config.solver_max_pivots,
            opt_budget_secs=config.opt_budget_secs,
            opt_max_iters=config.opt_max_iters,
        )

    outcomes: dict[int, VerifyPrResult] = {}
    if len(targets) > 1 and config.workers > 1:
        with ThreadPoolExecutor(max_workers=min(config.workers, len(targets))) as pool:
            futures = {pool.submit(one_target, t): t for t in targets}
            for fut, t in futures.items():
                outcomes[t] = fut.result()
    else:
        for t in targets:
            outcomes[t] = one_target(t)
            if config.verbose:
                res = outcomes[t]
                print(f"target {t}: {res.verdict.value} (rounds={res.rounds}, safe={res.safe_rounds})")

    example = validation[0] if validation else None
    results = [_result_entry_pr(t, outcomes[t], example) for t in targets]
    worst = max(_VERDICT_STATUS[outcomes[t].verdict] for t in targets)
    report = Report("verify", _config_echo(config, net, targets), results=results,
                    nondeterministic=config.workers > 1)
    return report, worst


# ------------------------------------------------------------ arg parsing

def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = tuple(int(v) for v in text.split(","))
    if len(parts) != 3 or any(v < 1 for v in parts):
        raise argparse.ArgumentTypeError(f"trigger shape must be three positive ints, got {text!r}")
    return parts


def _parse_target(text: str):
    return text if text == "all" else int(text)


def _parse_indices(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trigcert",
                                     description="Certify absence of input-agnostic backdoor triggers "
                                                 "or synthesize one.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--network", required=True, help="network file (YAML)")
    common.add_argument("--dataset-images", required=True, help="IDX images file or CSV dataset")
    common.add_argument("--dataset-labels", help="IDX labels file (unused for CSV)")
    common.add_argument("--trigger-shape", type=_parse_shape, default=(1, 3, 3), metavar="c,h,w")
    common.add_argument("--target", type=_parse_target, default=0, metavar="N|all")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--verifyx-budget-secs", type=float, default=600.0)
    common.add_argument("--global-budget-secs", type=float, default=7200.0)
    common.add_argument("--solver-budget-secs", type=float, default=20.0)
    common.add_argument("--opt-budget-secs", type=float, default=30.0)
    common.add_argument("--solver-max-pivots", type=int, default=None,
                        help="deterministic pivot cap for the LP solver")
    common.add_argument("--opt-max-iters", type=int, default=400,
                        help="deterministic iteration cap for the trigger optimizer")
    common.add_argument("--report", help="write the machine-readable report here")
    common.add_argument("--dump-bounds", metavar="PATH", help="append per-layer bound dumps to PATH")
    common.add_argument("--dump-lp", metavar="DIR", help="write conjunction systems as LP files into DIR")
    common.add_argument("--verbose", action="store_true")

    p_verify = sub.add_parser("verify", parents=[common],
                              help="SPRT certification of backdoor absence")
    p_verify.add_argument("--validation-images", help="defaults to the dataset images")
    p_verify.add_argument("--validation-labels")
    p_verify.add_argument("--theta", type=float, default=0.9)
    p_verify.add_argument("--k", type=int, default=5)
    p_verify.add_argument("--alpha", type=float, default=0.01)
    p_verify.add_argument("--beta", type=float, default=0.01)
    p_verify.add_argument("--delta", type=float, default=0.01)

    p_set = sub.add_parser("verify-set", parents=[common],
                           help="single sweep against an explicit image list")
    p_set.add_argument("--indices", type=_parse_indices, metavar="i,j,...",
                       help="dataset indices to verify against")
    p_set.add_argument("--first", type=int, help="use the first N dataset images (default 5)")

    p_attack = sub.add_parser("attack", parents=[common], help="trigger generation only")
    p_attack.add_argument("--indices", type=_parse_indices, metavar="i,j,...")
    p_attack.add_argument("--first", type=int)
    p_attack.add_argument("--position", metavar="h,w|all", default="all")

    sub.add_parser("eval", parents=[common], help="classify a dataset")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig(command=args.command, network=args.network)
    for name in vars(args):
        if name != "command" and hasattr(config, name):
            setattr(config, name, getattr(args, name))
    return config


def _print_summary(report: Report) -> None:
    print(f"== trigcert {report.command} ==")
    for entry in report.results:
        if report.command == "eval":
            acc = entry["accuracy"]
            acc_text = "n/a" if acc is None else f"{acc:.4f}"
            print(f"images={entry['images']} accuracy={acc_text}")
            continue
        target = entry.get("target")
        if report.command == "attack":
            found = entry["found"]
            print(f"target {target}: {'trigger found' if found else 'no trigger found'}")
        else:
            line = f"target {target}: {entry['verdict'].upper()}"
            if "rounds" in entry:
                line += f" (rounds={entry['rounds']}, safe_rounds={entry['safe_rounds']}, reason={entry['reason']})"
            if "success_rate" in entry:
                line += f" success_rate={entry['success_rate']:.4f}"
            print(line)
        if "trigger" in entry:
            t = entry["trigger"]
            print(f"  trigger shape={t['shape']} position={t['position']}")
            print(f"  values={t['values']}")
    if report.nondeterministic:
        print("note: multi-worker run; which trigger is found first may vary")
    print(f"wall time: {report.wall_time_secs:.1f}s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = _config_from_args(args)
    try:
        report, status = run(config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _print_summary(report)
    if config.report:
        print(f"report written to {config.report}")
    return status


if __name__ == "__main__":
    sys.exit(main())
