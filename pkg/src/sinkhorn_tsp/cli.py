"""Command-line surface tying the library together.

Subcommands: generate, oracle, train, solve, bench, ablate, heatmap.
Exit codes: 0 success, 1 usage error, 2 runtime error. Every config key is
mirrored as a flag with its dotted name (dashes accepted for underscores);
flags override config-file values. The run-directory root can be overridden
only via the SINKHORN_TSP_RUN_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import signal
import sys
import time
from pathlib import Path

from . import bench as bench_mod
from . import training as tr
from .config import ConfigError, RunDir, all_config_keys, load_config, run_root
from .decoders import dump_heatmap
from .model import encode_heatmap
from .tsp import generate_instances, read_instances, solve_exact, write_instances, write_tours


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code pinned to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(parser):
    for key, _ in all_config_keys():
        names = ["--" + key]
        dashed = "--" + key.replace("_", "-")
        if dashed not in names:
            names.append(dashed)
        parser.add_argument(*names, dest=key, default=None, metavar="V",
                            nargs="?", const="true",
                            help=f"override config key {key}")


def _overrides_from(args):
    return {key: getattr(args, key) for key, _ in all_config_keys() if getattr(args, key) is not None}


def build_parser():
    parser = _Parser(prog="sinkhorn-tsp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write random instances to a .tspjl file")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("oracle", help="solve instances exactly (n <= 16) to a .tourjl file")
    p.add_argument("-i", "--instances", required=True)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("train", help="train a model into a run directory")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("-o", "--run-dir", help="run directory (default: under the run root)")
    _add_config_flags(p)

    p = sub.add_parser("solve", help="decode tours with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--search", choices=("greedy", "beam", "sample"), default="greedy")
    p.add_argument("--width", type=int, default=1)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("bench", help="gap report for a checkpoint against the exact oracle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--search", choices=("greedy", "beam", "sample"), default="greedy")
    p.add_argument("--width", type=int, default=1)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--oracle-tours", help="reference .tourjl when n > 16")
    p.add_argument("-o", "--output", help="report JSON path (default: stdout)")
    p.add_argument("--csv", help="also write a one-row CSV summary")

    p = sub.add_parser("ablate", help="regularization/iteration sweep at desk scale")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", required=True, help="comma-separated, e.g. 0.5,2,5")
    p.add_argument("--iterations", required=True, help="comma-separated, e.g. 1,3")
    p.add_argument("--eval-count", type=int, default=200)
    p.add_argument("--beam-width", type=int, default=16)
    p.add_argument("-o", "--output", required=True, help="CSV path")
    _add_config_flags(p)

    p = sub.add_parser("heatmap", help="dump one instance's heatmap as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--stage", choices=("probs", "logits", "tanh"), default="probs")
    p.add_argument("--mask-diagonal", action="store_true")
    p.add_argument("-o", "--output", required=True)

    return parser


def _search_spec(args):
    return bench_mod.SearchSpec(
        kind=args.search, width=args.width, samples=args.samples, seed=args.sample_seed
    )


def _cmd_generate(args):
    write_instances(args.output, generate_instances(args.count, args.n, args.seed))
    print(f"wrote {args.count} instances (n={args.n}) to {args.output}")


def _cmd_oracle(args):
    instances = read_instances(args.instances)
    write_tours(args.output, [solve_exact(inst) for inst in instances])
    print(f"wrote {len(instances)} exact tours to {args.output}")


def _cmd_train(args):
    config = load_config(args.config, _overrides_from(args))
    if args.run_dir:
        run_path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_path = run_root() / f"tsp{config.n}-{config.decoder}-seed{config.seed}-{stamp}"
    run = RunDir.create(run_path, config)

    stop = {"flag": False}

    def _on_interrupt(signum, frame):
        print("interrupt: finishing the current batch and checkpointing", file=sys.stderr)
        stop["flag"] = True

    previous = signal.signal(signal.SIGINT, _on_interrupt)
    try:
        result = tr.train(
            config,
            run_dir=run,
            should_stop=lambda: stop["flag"],
            log=lambda r: print(
                f"epoch {r['epoch']:3d}  sampled {r['mean_sampled_length'] or float('nan'):.4f}  "
                f"val-greedy {r['mean_greedy_val_length']:.4f}  "
                f"baseline-updated {r['baseline_updated']}"
            ),
        )
    finally:
        signal.signal(signal.SIGINT, previous)
    if result.interrupted:
        print(f"interrupted; run directory: {run.path}")
    else:
        print(f"run directory: {run.path}")


def _cmd_solve(args):
    checkpoint = tr.load_checkpoint(args.checkpoint)
    store = tr.store_from_checkpoint(checkpoint)
    instances = read_instances(args.instances)
    tours, wall = bench_mod.decode_instances(store, checkpoint.config, instances, _search_spec(args))
    write_tours(args.output, tours)
    print(f"decoded {len(tours)} tours in {wall:.3f}s -> {args.output}")


def _cmd_bench(args):
    report = bench_mod.run_benchmark(
        args.checkpoint, args.instances, _search_spec(args), oracle_tours=args.oracle_tours
    )
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
        print(f"gap {report.gap_percent:.3f}% ({report.search}) -> {args.output}")
    else:
        print(text)
    if args.csv:
        Path(args.csv).write_text(report.csv_summary(), encoding="utf-8")


def _cmd_ablate(args):
    config = load_config(args.config, _overrides_from(args))
    lambdas = [float(x) for x in args.lambdas.split(",") if x]
    iterations = [int(x) for x in args.iterations.split(",") if x]
    rows, csv_text = bench_mod.ablate_sinkhorn(
        config, lambdas, iterations, eval_count=args.eval_count, beam_width=args.beam_width
    )
    Path(args.output).write_text(csv_text, encoding="utf-8")
    print(f"{len(rows)} ablation cells -> {args.output}")


def _cmd_heatmap(args):
    checkpoint = tr.load_checkpoint(args.checkpoint)
    store = tr.store_from_checkpoint(checkpoint)
    instances = read_instances(args.instances)
    if not 0 <= args.index < len(instances):
        raise ConfigError(f"--index {args.index} out of range for {len(instances)} instances")
    inst = instances[args.index]
    if args.stage == "tanh":
        values = encode_heatmap(inst.coords, store, checkpoint.config.encoder).value
    else:
        logits = tr.heatmap_logits(inst.coords, store, checkpoint.config)
        values = logits.p.value if args.stage == "probs" else logits.p_logits.value
    dump_heatmap(values, args.output, mask_diagonal=args.mask_diagonal)
    print(f"wrote {values.shape[0]}x{values.shape[1]} {args.stage} heatmap to {args.output}")


_COMMANDS = {
    "generate": _cmd_generate,
    "oracle": _cmd_oracle,
    "train": _cmd_train,
    "solve": _cmd_solve,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
    "heatmap": _cmd_heatmap,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 1
    try:
        code = _COMMANDS[args.command](args)
        return 0 if code is None else code
    except Exception as exc:  # runtime errors: message to stderr, exit 2
        print(f"sinkhorn-tsp {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
