"""Command line interface: ``spwsd {generate,run,plot,eval,describe}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from spwsd import __version__
from spwsd.data import SyntheticConfig, generate_splits, load, save
from spwsd.experiment import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    demo_config_path,
    eval_checkpoint,
    load_splits,
    plot,
    run,
)
from spwsd.metrics import ap_table_csv
from spwsd.variants import describe_variants

logger = logging.getLogger("spwsd")

# flag -> dotted config key
RUN_FLAGS = {
    "output_dir": "output_dir",
    "variants": "variants",
    "seeds": "seeds",
    "train_path": "train_path",
    "test_path": "test_path",
    "workers": "workers",
    "r1": "protocol.r1",
    "iterations": "protocol.iterations",
    "lr": "protocol.lr",
    "momentum": "protocol.momentum",
    "weight_decay": "protocol.weight_decay",
    "lr_drop_factor": "protocol.lr_drop_factor",
    "images_per_batch": "protocol.images_per_batch",
    "batch_size": "protocol.batch_size",
    "init_scorer": "init.scorer",
    "init_epochs": "init.epochs",
    "oracle_noise": "init.oracle_noise",
}


def _csv_list(kind):
    def parse(text: str):
        return [kind(x) for x in text.split(",") if x.strip()]
    return parse


def _key_value(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spwsd", description="Self-paced weakly supervised detection on proposal bags")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic train/test pair as JSONL")
    gen.add_argument("--config", type=Path, help="experiment config whose 'synthetic' section is used")
    gen.add_argument("--out", type=Path, required=True, help="output directory")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--num-images", type=int)
    gen.add_argument("--num-test-images", type=int)
    gen.add_argument("--num-classes", type=int)
    gen.add_argument("--feature-dim", type=int)

    r = sub.add_parser("run", help="run the configured variants over the configured seeds")
    r.add_argument("--config", type=Path, help="experiment YAML (default: the bundled demo config)")
    r.add_argument("--output-dir")
    r.add_argument("--variants", type=_csv_list(str), help="comma-separated, e.g. SP,MIL,CURRICULUM")
    r.add_argument("--seeds", type=_csv_list(int), help="comma-separated, e.g. 0,1,2")
    r.add_argument("--train-path")
    r.add_argument("--test-path")
    r.add_argument("--workers", type=int)
    r.add_argument("--r1", type=float)
    r.add_argument("--iterations", type=int, help="M")
    r.add_argument("--extra-iteration", action="store_true", default=None, help="also run t = M+1 with r = 1")
    r.add_argument("--lr", type=float)
    r.add_argument("--momentum", type=float)
    r.add_argument("--weight-decay", type=float)
    r.add_argument("--lr-drop-factor", type=float)
    r.add_argument("--images-per-batch", type=int)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--init-scorer", choices=["bag", "oracle"])
    r.add_argument("--init-epochs", type=float)
    r.add_argument("--oracle-noise", type=float)
    r.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[],
                   metavar="KEY=VALUE", help="any config key, e.g. synthetic.noise=2.0 (repeatable)")
    r.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("plot", help="draw SVG trend charts for a run directory")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--out", type=Path)

    e = sub.add_parser("eval", help="re-score a checkpoint")
    e.add_argument("checkpoint", type=Path)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="JSONL dataset with evaluation annotations")
    src.add_argument("--config", type=Path, help="regenerate the test split of this experiment config")
    e.add_argument("--seed", type=int, default=0, help="seed of the test split when using --config")
    e.add_argument("--no-regression", action="store_true")
    e.add_argument("--nms-threshold", type=float, default=0.3)
    e.add_argument("--11-point", dest="eleven_point", action="store_true")
    e.add_argument("--output", type=Path, help="also write the per-class AP table here")

    sub.add_parser("describe", help="print the variant flag table")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config or demo_config_path())
    overrides = {}
    for flag, key in RUN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.extra_iteration:
        overrides["protocol.extra_iteration"] = True
    overrides.update(dict(args.overrides))
    return apply_overrides(config, overrides) if overrides else config


def cmd_generate(args) -> int:
    synthetic = ExperimentConfig.load(args.config).synthetic if args.config else SyntheticConfig()
    changes = {k: getattr(args, k) for k in ("seed", "num_images", "num_test_images", "num_classes", "feature_dim")}
    synthetic = replace(synthetic, **{k: v for k, v in changes.items() if v is not None})
    synthetic.validate()
    train, test = generate_splits(synthetic)
    args.out.mkdir(parents=True, exist_ok=True)
    save(train, args.out / "train.jsonl")
    save(test, args.out / "test.jsonl")
    print(f"wrote {len(train)} training and {len(test)} test images to {args.out}")
    return 0


def cmd_run(args) -> int:
    config = config_from_args(args)
    out = run(config)
    if not args.no_plot:
        plot(out)
    print((out / "summary.csv").read_text(), end="")
    print(f"run written to {out}")
    return 0


def cmd_plot(args) -> int:
    for path in plot(args.run_dir, args.out):
        print(path)
    return 0


def cmd_eval(args) -> int:
    if args.data is not None:
        dataset = load(args.data)
    else:
        _, dataset = load_splits(ExperimentConfig.load(args.config), args.seed)
    report = eval_checkpoint(
        args.checkpoint, dataset, use_regression=not args.no_regression,
        nms_threshold=args.nms_threshold, use_11_point=args.eleven_point,
    )
    table = ap_table_csv([f"class{c}" for c in range(1, len(report.ap) + 1)], [report.ap])
    print(table, end="")
    print(f"mAP {100 * report.mean_ap:.2f}  CorLoc {100 * report.mean_corloc:.2f}  images {report.num_images}")
    if args.output is not None:
        args.output.write_text(table)
    return 0


def cmd_describe(args) -> int:
    print(describe_variants())
    return 0


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "plot": cmd_plot, "eval": cmd_eval, "describe": cmd_describe}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, OSError, ValueError) as exc:
        logger.error("%s", exc)
        return 2
    except FloatingPointError as exc:
        logger.error("training diverged: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
