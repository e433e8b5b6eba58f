"""Command line entry point.

Exit codes: 0 success, 2 config error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import sys

from . import harness

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override master_seed")
    common.add_argument("--out-dir", help="override output_dir")

    p = argparse.ArgumentParser(prog="twinchain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenario", parents=[common], help="write one scenario file")
    g.add_argument("--workload", default="WL1", help="WL1 or WL2")
    g.add_argument("--index", type=int, default=0, help="which scenario of the workload")
    g.add_argument("--output", help="file to write (default <out-dir>/scenario_<wl>_<index>.json)")

    t = sub.add_parser("train", parents=[common], help="train the Q-table on WL1")
    t.add_argument("--episodes", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="paired evaluation of controllers")
    e.add_argument("--controllers", help="comma list of " + ",".join(harness.CONTROLLERS))
    e.add_argument("--tables", help="directory holding the trained tables (default <out-dir>)")
    e.add_argument("--workload", default="WL2")
    e.add_argument("--freeze-qtable", action="store_true", help="no online updates during evaluation")

    r = sub.add_parser("compare-runtime", parents=[common], help="agent+ vs sim-only runtime")
    r.add_argument("--tables", help="directory holding the trained tables (default <out-dir>)")
    r.add_argument("--freeze-qtable", action="store_true")

    sub.add_parser("show-config", parents=[common], help="print the effective config as JSON")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = harness.load_config(args.config)
        cfg = harness.with_overrides(
            cfg,
            master_seed=args.seed,
            output_dir=args.out_dir,
            episodes=getattr(args, "episodes", None),
            freeze_qtable=getattr(args, "freeze_qtable", None) or None,
        )
        if args.command == "show-config":
            print(cfg.dumps())
        elif args.command == "gen-scenario":
            path = harness.cmd_gen_scenario(cfg, args.workload, args.index, args.output)
            print(path)
        elif args.command == "train":

            def progress(name, e, result):
                print(f"{name} episode {e + 1}/{cfg.episodes}: {result.mean_latency:.4f} s", file=sys.stderr)

            art = harness.cmd_train(cfg, progress)
            for path in (*art.paths.values(), art.curve_path):
                print(path)
        elif args.command == "evaluate":
            rows = harness.cmd_evaluate(cfg, args.controllers, args.tables, args.workload)
            for name, lat in harness.summarize_results(rows).items():
                print(f"{name:15s} {lat:.4f} s")
        elif args.command == "compare-runtime":
            for r in harness.cmd_compare_runtime(cfg, args.tables):
                print(
                    f"{r.controller:9s} seed {r.seed} calls {r.simulator_calls} "
                    f"mean decision {r.mean_decision_wall_ns / 1e6:.3f} ms"
                )
    except harness.MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (harness.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
