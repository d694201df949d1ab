"""Command-line entry point: ``hmtl <command> [options]``.

Exit codes: 0 success, 1 runtime failure (including an aborted run),
2 configuration error, 3 missing input, 4 incompatible checkpoint or data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import (
    DATA_ROOT_ENV,
    RunConfig,
    SyntheticSpec,
    apply_overrides,
    dump_config,
    named_configs,
    read_config_data,
    validate_config,
)
from .datasets import DatasetHandle, filter_extreme, load_dataset, prepare_data, write_manifest
from .errors import CheckpointIncompatibleError, ConfigurationError, DatasetLoadError, HMTLError, InvalidInputError
from .model import model_from_checkpoint
from .reports import plot_flag_sweep, write_rows

log = logging.getLogger("hmtlpose")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4

BENCHMARK_NAMES = {"aflw2000": "AFLW2000", "biwi": "BIWI", "w300lp": "300W-LP", "ethxgaze": "ETH-XGaze"}


def _common(p: argparse.ArgumentParser, config: bool = True):
    if config:
        p.add_argument("--config", help=f"run config: YAML path or one of {', '.join(named_configs())}")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted path)")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true", help="deterministic kernels and data order")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data-root", help=f"dataset root (falls back to ${DATA_ROOT_ENV})")
    p.add_argument("--filter-extreme", action="store_true", help="drop samples with any |angle| > 99 degrees")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmtl", description="Head pose training with self-supervised auxiliary branches.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a pose model")
    _common(p)
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")

    p = sub.add_parser("pretrain-bt", help="Barlow Twins pretraining of the backbone")
    _common(p)
    p.add_argument("--puzzling", action="store_true", help="add the puzzle stage before cutout (BT*)")
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--kind", default="manifest", help="aflw2000, biwi, w300lp, ethxgaze, manifest or synthetic")
    p.add_argument("--manifest", help="manifest CSV (kind manifest)")
    p.add_argument("--count", type=int, default=256, help="synthetic sample count")
    p.add_argument("--synthetic-seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64)
    _common(p, config=False)

    p = sub.add_parser("ablate-flags", help="flag-point sweep; writes a Table-1-shaped report")
    _common(p)

    p = sub.add_parser("convert", help="write a manifest for a native dataset")
    p.add_argument("kind", help="w300lp, aflw2000, biwi, ethxgaze or synthetic")
    p.add_argument("root", nargs="?", help="native dataset root (or --data-root)")
    p.add_argument("--count", type=int, default=512, help="synthetic sample count")
    p.add_argument("--synthetic-seed", type=int, default=0)
    _common(p, config=False)

    p = sub.add_parser("list-presets", help="print the experiment preset catalog")
    p.add_argument("--verbose", "-v", action="store_true")

    p = sub.add_parser("run-preset", help="run every configuration of a preset")
    p.add_argument("name")
    p.add_argument("--desk", action="store_true", help="mini backbone on synthetic data")
    p.add_argument("--epochs", type=int, default=5, help="desk-scale epochs")
    p.add_argument("--images", type=int, default=512, help="desk-scale training images")
    p.add_argument("--input-size", type=int, default=112, help="desk-scale input size")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--dry-run", action="store_true", help="list the runs and exit")
    _common(p, config=False)
    return parser


# -- helpers --------------------------------------------------------------------------------


def resolve_config(args, extra: dict[str, Any] | None = None) -> RunConfig:
    """File, then mode defaults, then ``--set``, then dedicated flags."""
    data: dict[str, Any] = {}
    if args.config:
        data = read_config_data(args.config)
    for key, value in (extra or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node.setdefault(leaf, value)
    data = apply_overrides(data, args.set)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.deterministic:
        data["deterministic"] = True
    if args.out:
        data.setdefault("output", {})["dir"] = args.out
    if getattr(args, "filter_extreme", False):
        for split in ("train", "val"):
            spec = data.get("data", {}).get(split)
            if isinstance(spec, dict):
                spec["filter_extreme"] = True
    return validate_config(data)


def format_metrics(metrics, label: str) -> str:
    names = list(metrics.per_angle_mae)
    head = f"{'dataset':<34}" + "".join(f"{n:>9}" for n in names) + f"{'average':>9}{'N':>7}"
    row = f"{label:<34}" + "".join(f"{metrics.per_angle_mae[n]:>9.3f}" for n in names)
    return head + "\n" + row + f"{metrics.average_mae:>9.3f}{metrics.count:>7d}"


def variant_label(kind: str, filtered: bool, n: int) -> str:
    name = BENCHMARK_NAMES.get(kind, kind)
    return f"{name} (|angle|<=99, N={n})" if filtered else f"{name}* (all samples, N={n})"


def _setup_logging(verbose: bool):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


# -- commands -------------------------------------------------------------------------------


def _run_training(config: RunConfig, args) -> int:
    from .training import train

    train_data, val_data = prepare_data(config.data, args.data_root)
    run_dir = Path(config.output.dir)
    record = train(config, train_data, val_data, run_dir)
    if record.status != "completed":
        print(f"run aborted: {record.diagnostic}", file=sys.stderr)
        print(f"run directory: {run_dir}")
        return EXIT_RUNTIME
    last = record.epochs[-1]
    print(f"run directory: {run_dir}")
    if any(k.startswith("val_") for k in last):
        from .geometry import Metrics

        per = {k[4:]: v for k, v in last.items() if k.startswith("val_") and k not in ("val_average", "val_n")}
        print(format_metrics(Metrics(per, last["val_n"]), "validation"))
    else:
        print(f"final train loss {last['train_loss']:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    if args.dry_run:
        print(dump_config(config), end="")
        return EXIT_OK
    return _run_training(config, args)


def cmd_pretrain_bt(args) -> int:
    defaults = {"mode": "bt_pretrain", "loss.mode": "bt", "model.projector": {}, "schedule.kind": "cosine", "epochs": 64}
    if args.puzzling:
        args.set = [*args.set, "augmentation.bt.puzzling_variant=true"]
    config = resolve_config(args, defaults)
    if config.mode != "bt_pretrain":
        raise ConfigurationError(f"mode: pretrain-bt needs mode bt_pretrain, got {config.mode}")
    if args.dry_run:
        print(dump_config(config), end="")
        return EXIT_OK
    status = _run_training(config, args)
    if status == EXIT_OK:
        print(f"backbone checkpoint: {Path(config.output.dir) / 'checkpoints' / 'backbone.pt'}")
    return status


def load_eval_data(args) -> DatasetHandle:
    import os

    if args.kind == "synthetic":
        return load_dataset("synthetic", SyntheticSpec(count=args.count, seed=args.synthetic_seed))
    if args.kind == "manifest":
        if not args.manifest:
            raise ConfigurationError("--manifest is required for kind manifest")
        return load_dataset("manifest", args.manifest)
    return load_dataset(args.kind, args.data_root or os.environ.get(DATA_ROOT_ENV))


def cmd_eval(args) -> int:
    from .model import strip_ssl_branches
    from .training import evaluate

    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model, manifest = model_from_checkpoint(args.checkpoint)
    data = load_eval_data(args)
    if args.filter_extreme:
        data = filter_extreme(data)
    try:
        metrics = evaluate(strip_ssl_branches(model), data, batch_size=args.batch_size)
    except InvalidInputError as err:
        raise CheckpointIncompatibleError(str(err)) from None
    kind = args.kind if args.kind != "manifest" else (data.samples[0].source or "manifest")
    label = variant_label(kind, args.filter_extreme, metrics.count)
    print(format_metrics(metrics, label))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        row = {"dataset": label, **metrics.as_row()}
        write_rows([row], out / "eval.csv")
    return EXIT_OK


def cmd_ablate_flags(args) -> int:
    from .training import flag_sweep

    config = resolve_config(args)
    sweep = config.sweep
    if sweep is None:
        from .config import SweepConfig

        sweep = SweepConfig()
    train_data, val_data = prepare_data(config.data, args.data_root)
    if val_data is None:
        raise ConfigurationError("data: the flag sweep needs validation data (data.val or data.held_out_subjects)")
    out = Path(config.output.dir)
    rows = flag_sweep(config, train_data, val_data, sweep.flags, sweep.tasks, sweep.grid_n, out, sweep.include_sl)
    write_rows(rows, out / "flag_sweep.csv")
    plot_flag_sweep(rows, out / "flag_sweep.png")
    for row in rows:
        print(f"{row['Method']:<32}{row['Flag']:>4}{row['Yaw (MAE)']:>10.3f}{row['Pitch (MAE)']:>10.3f}{row['Average']:>10.3f}")
    print(f"report: {out / 'flag_sweep.csv'}")
    return EXIT_OK


def cmd_convert(args) -> int:
    import os

    if not args.out:
        raise ConfigurationError("--out is required")
    errors: list = []
    if args.kind == "synthetic":
        handle = load_dataset("synthetic", SyntheticSpec(count=args.count, seed=args.synthetic_seed))
    else:
        root = args.root or args.data_root or os.environ.get(DATA_ROOT_ENV)
        handle = load_dataset(args.kind, root, errors=errors)
    if args.filter_extreme:
        handle = filter_extreme(handle)
    out = Path(args.out)
    if errors:
        write_rows([{"path": p, "error": e} for p, e in errors], out / "errors.csv")
        for p, e in errors:
            print(f"skipped {p}: {e}", file=sys.stderr)
    if not len(handle):
        raise DatasetLoadError(f"no {args.kind} samples could be read", args.root)
    path = write_manifest(handle, out / "manifest.csv")
    print(f"wrote {len(handle)} rows to {path}" + (f" ({len(errors)} files skipped)" if errors else ""))
    return EXIT_OK


def cmd_list_presets(args) -> int:
    from .presets import catalog_rows

    for row in catalog_rows():
        print(f"{row['name']:<17} {row['anchor']:<16} {row['runs']:>3} runs  columns: {row['columns']}")
        if args.verbose:
            print(f"    {row['description']}")
    return EXIT_OK


def cmd_run_preset(args) -> int:
    from .presets import DeskBudget, desk_scale, get_preset, run_preset

    preset = get_preset(args.name)
    if args.desk:
        runs = desk_scale(preset, DeskBudget(epochs=args.epochs, images=args.images, input_size=args.input_size))
    else:
        runs = preset.expand()
    if args.dry_run:
        for r in runs:
            kind = "pretrain" if r.pretrain else "row"
            print(f"{kind:<9}{r.name:<24}{r.config.mode:<14}{json.dumps(r.row, ensure_ascii=False)}")
        return EXIT_OK
    out = Path(args.out or f"runs/{preset.name}")
    rows = run_preset(preset, runs, out, args.data_root, args.deterministic)
    print(f"{len(rows)} rows written to {out / 'report.csv'}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "pretrain-bt": cmd_pretrain_bt,
    "eval": cmd_eval,
    "ablate-flags": cmd_ablate_flags,
    "convert": cmd_convert,
    "list-presets": cmd_list_presets,
    "run-preset": cmd_run_preset,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(getattr(args, "verbose", False))
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as err:
        print(f"configuration error:\n{err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DatasetLoadError) as err:
        print(f"missing input: {err}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointIncompatibleError as err:
        print(f"incompatible: {err}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (HMTLError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
