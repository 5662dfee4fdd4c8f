"""Command-line entry point: one JSON config drives every stage.

Exit codes: 0 on success, 1 for configuration/usage problems, 2 for
failures inside a stage.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .pipeline import (
    run_pipeline,
    stage_data,
    stage_evaluate,
    stage_export,
    stage_train_cgl,
    stage_train_dgc,
)

COMMANDS = ("synth", "ingest", "train-cgl", "train-dgc", "evaluate", "export-graph", "pipeline")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccgl", description="Contrastive connectivity graph learning pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="path to the run configuration JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed list")
    parser.add_argument("--out", default=None, help="override the configured output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg = cfg.with_out_dir(args.out)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "synth" and cfg.synth is None:
            raise ConfigError("data.synth", "command 'synth' needs a synth block in the config")
        if args.command == "ingest" and cfg.manifest is None:
            raise ConfigError("data.manifest", "command 'ingest' needs a manifest path in the config")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    seed = cfg.seeds[0]
    try:
        if args.command in ("synth", "ingest"):
            cohort = stage_data(cfg, seed)
            print(f"cohort of {len(cohort)} patients written under {cfg.out_dir}/seed_{seed}")
        elif args.command == "train-cgl":
            _, history = stage_train_cgl(cfg, seed)
            last = history[-1]
            print(
                f"cgl trained {len(history)} epochs: loss {last['loss']:.4f}, "
                f"homo {last['mean_homo']:.3f}, heter {last['mean_heter']:.3f}"
            )
        elif args.command == "train-dgc":
            _, history = stage_train_dgc(cfg, seed)
            print(f"dgc trained {len(history)} epochs: best val metric "
                  f"{max(h['val_metric'] for h in history):.3f}")
        elif args.command == "evaluate":
            run = stage_evaluate(cfg, seed)
            print(
                f"seed {seed}: auc {run['auc']:.4f}, acc {_fmt(run['acc'])}, "
                f"sen {_fmt(run['sen'])}, spec {_fmt(run['spec'])}, "
                f"knn baseline auc {run['knn_baseline_auc']:.4f}"
            )
        elif args.command == "export-graph":
            for path in stage_export(cfg, seed):
                print(f"wrote {path}")
        elif args.command == "pipeline":
            aggregated = run_pipeline(cfg)
            mean, std = aggregated["mean"], aggregated["std"]
            print(
                f"{aggregated['n_runs']} runs: auc {mean['auc']:.4f} +- {std['auc']:.4f}, "
                f"knn baseline {mean['knn_baseline_auc']:.4f}"
            )
    except Exception as exc:  # noqa: BLE001 - stage failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _fmt(value) -> str:
    return "undefined" if value is None else f"{value:.3f}"


if __name__ == "__main__":
    sys.exit(main())
