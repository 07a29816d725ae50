"""Command line entry point.

Subcommands:
  run <config.json>           one experiment: metrics.csv, manifest.json,
                              per-client checkpoints, global encoder, features
  ablate <config.json>        the five component variants (full, no_dcc,
                              no_caa, no_aff, no_encoder_adv)
  sweep-lambda <config.json>  the balance-weight sweep over {0.01, 0.1, 1}
  report <dir>                aggregate metrics.csv files into a summary table

Variant runs of ablate / sweep-lambda execute in a thread pool capped by the
AFEDCL_MAX_WORKERS environment variable (default 1, i.e. sequential).
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import __version__
from .config import LAMBDA_SWEEP, ConfigError, ExperimentConfig, config_to_dict, load_config, with_flags
from .federation import AFEDCL, run_experiment
from .metrics import export_features_csv, read_metrics_csv, write_metrics_csv
from .models import checkpoint_save, params_to_vector

ABLATION_VARIANTS = {
    "full": {},
    "no_dcc": {"enable_dcc": False},
    "no_caa": {"enable_caa": False},
    "no_aff": {"enable_aff": False},
    "no_encoder_adv": {"enable_encoder_adversarial_update": False},
}


def _write_manifest(config: ExperimentConfig, out_dir: str) -> None:
    manifest = {
        "config": config_to_dict(config),
        "versions": {
            "afedcl": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_run_outputs(result, config: ExperimentConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    rows = [row for report in result.reports for row in report.rows]
    write_metrics_csv(rows, os.path.join(out_dir, "metrics.csv"))
    _write_manifest(config, out_dir)

    completed_rounds = result.server.round_index - 1
    for client in result.clients:
        blob = checkpoint_save(
            client.encoder, client.classifier, client.discriminator,
            client.fusion_weight, completed_rounds,
        )
        with open(os.path.join(out_dir, f"client_{client.client_id}.ckpt"), "wb") as handle:
            handle.write(blob)

    global_vec = params_to_vector(result.server.global_encoder)
    with open(os.path.join(out_dir, "global_encoder.bin"), "wb") as handle:
        handle.write(struct.pack("<Q", len(global_vec)))
        handle.write(global_vec.astype("<f8").tobytes())

    export_features_csv(
        result.server.global_encoder, result.split.global_test,
        os.path.join(out_dir, "features.csv"),
    )


def _run_single(config: ExperimentConfig, out_dir: str) -> str:
    result = run_experiment(config)
    write_run_outputs(result, config, out_dir)
    return out_dir


def _run_variants(jobs: list[tuple[ExperimentConfig, str]]) -> None:
    workers = max(1, int(os.environ.get("AFEDCL_MAX_WORKERS", "1")))
    if workers == 1:
        for config, out_dir in jobs:
            _run_single(config, out_dir)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_single, config, out_dir) for config, out_dir in jobs]
        for future in futures:
            future.result()


def cmd_run(args) -> int:
    config = load_config(args.config)
    out_dir = args.output or config.output_dir
    _run_single(replace(config, output_dir=out_dir), out_dir)
    print(f"run complete: {out_dir}/metrics.csv")
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    if base.method != AFEDCL:
        raise ConfigError("ablate requires an afedcl config")
    root = args.output or base.output_dir
    jobs = []
    for name, overrides in ABLATION_VARIANTS.items():
        out_dir = os.path.join(root, name)
        jobs.append((replace(with_flags(base, **overrides), output_dir=out_dir), out_dir))
    _run_variants(jobs)
    print(f"ablation complete: {len(jobs)} variants under {root}")
    return 0


def cmd_sweep_lambda(args) -> int:
    base = load_config(args.config)
    if base.method != AFEDCL:
        raise ConfigError("sweep-lambda requires an afedcl config")
    root = args.output or base.output_dir
    jobs = []
    for value in LAMBDA_SWEEP:
        out_dir = os.path.join(root, f"lambda_{value:g}")
        jobs.append((replace(base, balance=value, output_dir=out_dir), out_dir))
    _run_variants(jobs)
    print(f"lambda sweep complete: {len(jobs)} runs under {root}")
    return 0


def cmd_report(args) -> int:
    paths = []
    for dirpath, _, filenames in os.walk(args.directory):
        if "metrics.csv" in filenames:
            paths.append(os.path.join(dirpath, "metrics.csv"))
    if not paths:
        raise ConfigError(f"no metrics.csv files under {args.directory}")

    lines = [("run", "final_round", "test_accuracy", "macro_f1")]
    for path in sorted(paths):
        rows = read_metrics_csv(path)
        final_round = max(r.round for r in rows)
        summary = next(r for r in rows if r.round == final_round and r.client_id == "global")
        lines.append(
            (
                os.path.relpath(os.path.dirname(path), args.directory) or ".",
                str(final_round),
                "" if summary.test_accuracy is None else f"{summary.test_accuracy:.4f}",
                "" if summary.macro_f1 is None else f"{summary.macro_f1:.4f}",
            )
        )

    widths = [max(len(line[i]) for line in lines) for i in range(4)]
    for line in lines:
        print("  ".join(cell.ljust(width) for cell, width in zip(line, widths)))
    summary_path = os.path.join(args.directory, "summary.csv")
    with open(summary_path, "w", encoding="utf-8") as handle:
        for line in lines:
            handle.write(",".join(line) + "\n")
    print(f"wrote {summary_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afedcl", description="Personalized FL simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--output", help="override the config's output directory")
    p_run.set_defaults(fn=cmd_run)

    p_ablate = sub.add_parser("ablate", help="run the five ablation variants")
    p_ablate.add_argument("config")
    p_ablate.add_argument("--output")
    p_ablate.set_defaults(fn=cmd_ablate)

    p_sweep = sub.add_parser("sweep-lambda", help="sweep the balance weight over {0.01, 0.1, 1}")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--output")
    p_sweep.set_defaults(fn=cmd_sweep_lambda)

    p_report = sub.add_parser("report", help="summarize metrics.csv files under a directory")
    p_report.add_argument("directory")
    p_report.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
