"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pydantic import ValidationError

from . import landscape
from .config import ConfigError, ExperimentConfig, format_errors, load_config
from .trainer import (
    NumericFailure,
    compare_runs,
    eval_loss,
    gradcheck_total_objective,
    load_splits,
    run_ablation,
    run_kpass,
    run_size_study,
    run_training,
)
from .transformer import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
GRADCHECK_TOLERANCE = 1e-4


def _fmt(value) -> str:
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def write_table(rows: list[dict], columns: Sequence[str], path: Path) -> str:
    """Write ``rows`` as CSV (4-decimal floats) and return an aligned text rendering."""
    cells = [[_fmt(r[c]) for c in columns] for r in rows]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(cells)
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["out_dir"] = args.out
    if changes:
        cfg = cfg.variant(**changes)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(cfg.to_json())
    return cfg, out


def cmd_train(args) -> int:
    cfg, out = _resolve(args)
    results = []
    with (out / "train_log.jsonl").open("w") as log_file:
        for seed in cfg.seeds:
            results.append(run_training(cfg, seed, log_file, out / f"checkpoint_seed{seed}.json", keep_params=False))
    rows = [r.summary() for r in results]
    print(write_table(rows, ["seed", "test_accuracy", "best_test_accuracy", "best_epoch", "val_accuracy"], out / "results.csv"))
    with (out / "epochs.jsonl").open("w") as fh:
        for r in results:
            for e in r.epoch_losses:
                fh.write(json.dumps({"seed": r.seed, **e}) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, out = _resolve(args)
    rows = run_ablation(cfg)
    for r in rows:
        r["runs"] = len(r["accs"])
    print(write_table(rows, ["method", "mean_acc", "std_acc", "runs"], out / "results.csv"))
    return EXIT_OK


def cmd_size_study(args) -> int:
    cfg, out = _resolve(args)
    rows = run_size_study(cfg)
    print(write_table(rows, ["size", "baseline", "rdrop", "lrdrop"], out / "results.csv"))
    return EXIT_OK


def cmd_kpass(args) -> int:
    cfg, out = _resolve(args)
    rows = run_kpass(cfg)
    print(write_table(rows, ["k", "mean_acc", "std_acc"], out / "results.csv"))
    if len(cfg.seeds) >= 2:
        by_k = {r["k"]: r["accs"] for r in rows}
        for k in (2, 3):
            cmp = compare_runs(by_k[k], by_k[1])
            print(f"k={k} vs k=1: gap={cmp.gap:+.4f} t={cmp.t:.4f} p={cmp.p:.4f}")
    return EXIT_OK


def cmd_landscape(args) -> int:
    cfg, out = _resolve(args)
    seed = cfg.seeds[0]
    mcfg = cfg.model()
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    else:
        params = run_training(cfg, seed).params
        save_checkpoint(out / f"checkpoint_seed{seed}.json", params, mcfg)
    _, _, test = load_splits(cfg)
    directions = landscape.sample_directions(params, seed, cfg.direction_norm)
    grid = landscape.evaluate_surface(
        params, directions, cfg.grid_range, cfg.grid_points, lambda p: eval_loss(p, test, mcfg)
    )
    metrics = landscape.write_surface(grid, out, {"seed": seed})
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    err = gradcheck_total_objective(seed=args.seed or 0)
    ok = err < GRADCHECK_TOLERANCE
    print(f"max relative error: {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrdrop", description="Multi-pass dropout consistency experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": (cmd_train, "train one config over its seeds"),
        "ablate": (cmd_ablate, "full objective vs each regularizer removed"),
        "size-study": (cmd_size_study, "accuracy across nested training-set sizes"),
        "kpass": (cmd_kpass, "compare k = 1, 2, 3 dropout passes"),
        "landscape": (cmd_landscape, "2-D loss surface around a trained model"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the seed list with one seed")
        p.add_argument("--out", help="override the output directory")
        if name == "landscape":
            p.add_argument("--checkpoint", help="slice around this checkpoint instead of training")
        p.set_defaults(func=fn)
    g = sub.add_parser("gradcheck", help="finite-difference check of the full objective on a tiny model")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:  # a CLI override broke a constraint
        print(f"error: {format_errors(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def dispatch(argv: Sequence[str]) -> int:
    """Run the CLI on ``argv``, returning the exit code instead of exiting."""
    try:
        return main(argv)
    except SystemExit as exc:  # argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
