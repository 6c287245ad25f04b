"""Command-line entry point.

    tcr train        --config run.cfg [--set key=value ...] [--section.key value ...]
    tcr eval         --checkpoint RUN/checkpoint.bin [--data data.bin] [--out DIR]
    tcr compare      --config run.cfg --variants baseline,tcr --seeds 5 --out DIR
    tcr dump-lattice --checkpoint CK --example eval-3 --view-seed 7 --out DIR
    tcr gen-data     --config run.cfg --out data.bin

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
4 file I/O failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, parse_override
from .training import (
    COMPARE_VARIANTS,
    DataError,
    NumericFailure,
    _write_csv,
    compare_variants,
    dump_lattice,
    evaluate,
    find_example,
    format_table,
    load_dataset,
    load_run_checkpoint,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser():
    parser = argparse.ArgumentParser(prog="tcr", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and evaluate it")
    _config_args(p)
    p.add_argument("--out", help="run directory (run.out_dir)")
    p.add_argument("--data", help="dataset file (task.data_path)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file; default regenerates the run's data")
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--beam-size", type=int)
    p.add_argument("--blank-penalty", type=float)
    p.add_argument("--eval-seed", type=int)
    p.add_argument("--out", help="directory for metrics.json and eval_utterances.csv")

    p = sub.add_parser("compare", help="train several variants over several seeds")
    _config_args(p)
    p.add_argument("--variants", default=",".join(COMPARE_VARIANTS))
    p.add_argument("--seeds", default="5", help="a count, or a comma-separated list of seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset file shared by all jobs")

    p = sub.add_parser("dump-lattice", help="write two views' lattices and occupancy heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file; default regenerates the run's data")
    p.add_argument("--example", required=True, help="train-<i> or eval-<i>")
    p.add_argument("--view-seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    _config_args(p)
    p.add_argument("--out", required=True)
    return parser


def _overrides(args, extra):
    over = dict(parse_override(s) for s in args.set)
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"{tok} needs a value")
        over[key] = value
    return over


def _load_config(args, extra):
    over = _overrides(args, extra)
    if getattr(args, "out", None) and args.command == "train":
        over["run.out_dir"] = args.out
    if getattr(args, "data", None):
        over["task.data_path"] = args.data
    if args.config:
        return ExperimentConfig.load(args.config, over)
    return ExperimentConfig().with_overrides(over)


def _checkpoint_and_data(args):
    model, cfg = load_run_checkpoint(args.checkpoint)
    if cfg is None:
        raise ConfigError(f"{args.checkpoint} carries no run config")
    if args.data:
        cfg = cfg.with_overrides({"task.data_path": args.data})
    return model, cfg, load_dataset(cfg)


def cmd_train(args, extra):
    cfg = _load_config(args, extra)
    report, _ = train(cfg)
    print(json.dumps(report.eval, sort_keys=True))
    print(f"run directory: {cfg.run.out_dir}")


def cmd_eval(args, extra):
    if extra:
        raise ConfigError(f"unrecognized arguments {extra}")
    model, cfg, dataset = _checkpoint_and_data(args)
    over = {}
    if args.beam_size is not None:
        over["eval.beam_size"] = args.beam_size
    if args.blank_penalty is not None:
        over["eval.blank_penalty"] = args.blank_penalty
    if args.eval_seed is not None:
        over["eval.seed"] = args.eval_seed
    cfg = cfg.with_overrides(over)
    if model.dims != cfg.model_dims():
        raise ConfigError("checkpoint dimensions do not match its config")
    items = getattr(dataset, args.split)
    metrics, rows = evaluate(model, items, cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        _write_csv(out / "eval_utterances.csv", rows)
    print(json.dumps(metrics, sort_keys=True))


def cmd_compare(args, extra):
    cfg = _load_config(args, extra)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if "," in args.seeds else int(args.seeds)
    table = compare_variants(cfg, variants, seeds, args.out)
    print(format_table(table), end="")


def cmd_dump(args, extra):
    if extra:
        raise ConfigError(f"unrecognized arguments {extra}")
    model, cfg, dataset = _checkpoint_and_data(args)
    try:
        x, y = find_example(dataset, args.example)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    summary = dump_lattice(model, cfg, x, y, args.view_seed, args.out)
    print(json.dumps(summary, sort_keys=True))


def cmd_gen(args, extra):
    cfg = _load_config(args, extra)
    ds = load_dataset(cfg.with_overrides({"task.data_path": ""}))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds.save(args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.eval)} eval examples to {args.out}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "dump-lattice": cmd_dump,
    "gen-data": cmd_gen,
}


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        where = f" (diagnostics in {exc.bundle})" if exc.bundle else ""
        print(f"numeric failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
