"""Command-line entry point: ``acelt {generate,train,evaluate,ablate,inspect}``.

Every :class:`RunConfig` field is available as ``--field-name`` and
overrides the value read from ``--config``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .acemodel import AceModel, load_checkpoint, save_checkpoint
from .aggregate import AGGREGATORS
from .config import RunConfig, dump_config, load_config, parse_value
from .data import SPLIT_NAMES, frequency_splits, save_profile, write_csv_dataset
from .errors import AceError
from .harness import (
    VARIANTS,
    build_datasets,
    build_profile,
    evaluate,
    expert_lrs,
    ic_logit_ratios,
    run_ablation_suite,
    summarize,
    train,
    write_log,
    write_metrics_csv,
)
from .optim import SCHEMES


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat 'key = value' run configuration file")
    group = parser.add_argument_group("configuration overrides")
    for f in dataclasses.fields(RunConfig):
        group.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            metavar="VALUE",
            default=None,
            help=f"(default: {f.default!r})",
        )


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        text = getattr(args, f.name, None)
        if text is not None:
            overrides[f.name] = parse_value(f.name, text)
    return load_config(args.config, overrides)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acelt", description="Long-tailed multi-expert training on desk-scale data"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the train/test split and profile to output_dir")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one model and evaluate it")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    p.add_argument("checkpoint", help="checkpoint written by 'train'")
    p.add_argument("--aggregator", choices=list(AGGREGATORS), default=None)
    p.add_argument("--out", help="write the metrics row to this CSV file")

    p = sub.add_parser("ablate", help="run the variant x scheme x seed grid")
    _add_config_flags(p)
    p.add_argument("--variants", type=_csv_list, default=list(VARIANTS))
    p.add_argument("--schemes", type=_csv_list, default=list(SCHEMES))
    p.add_argument("--aggregators", type=_csv_list, default=None)
    p.add_argument("--seeds", type=_csv_list, default=["0", "1", "2"])
    p.add_argument("--alphas", type=_csv_list, default=None, help="mixup alpha sweep")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("inspect", help="print expert assignments and learning rates")
    _add_config_flags(p)
    return parser


def _print_report(report) -> None:
    print(f"overall  {report.overall:6.2f}")
    for name in SPLIT_NAMES:
        print(f"{name:<8} {report.splits[name]:6.2f}  (n={report.split_sizes[name]})")
    for i, (acc, ic) in enumerate(zip(report.expert_splits, report.expert_ic_logit), 1):
        parts = " ".join(f"{k}={v:.2f}" for k, v in acc.items())
        print(f"expert {i}: {parts} ic_logit={ic:.4f}")


def cmd_generate(config: RunConfig) -> None:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = build_datasets(config)
    write_csv_dataset(train_set, out / "train.csv")
    write_csv_dataset(test_set, out / "test.csv")
    save_profile(train_set.profile, out / "profile.json")
    print(f"wrote {len(train_set)} train / {len(test_set)} test rows to {out}")
    print("counts " + " ".join(map(str, train_set.profile.counts)))


def cmd_train(config: RunConfig) -> None:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    (out / "config.txt").write_text(dump_config(config))
    result = train(config, checkpoint_path=ckpt)
    save_checkpoint(ckpt, result.model, config.to_dict(), config.digest())
    write_log(result.log, out / "train_log.jsonl")
    report = evaluate(result.model, result.test_set, config.aggregator)
    write_metrics_csv([{"seed": config.seed, **report.as_row()}], out / "metrics.csv")
    _print_report(report)
    print(f"artifacts in {out}")


def cmd_evaluate(args: argparse.Namespace) -> None:
    state, meta = load_checkpoint(args.checkpoint)
    config = RunConfig.from_dict(meta["config"])
    if args.aggregator:
        config = config.replace(aggregator=args.aggregator)
    print(f"seed = {config.seed}")
    train_set, test_set = build_datasets(config)
    model = AceModel(
        train_set.dim, train_set.num_classes, config.experts, config.hidden, config.ssc_mode
    )
    model.load_state_dict(state)
    report = evaluate(model, test_set, config.aggregator)
    _print_report(report)
    if args.out:
        write_metrics_csv([{"seed": config.seed, **report.as_row()}], args.out)


def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> None:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation_suite(
        config,
        variants=args.variants,
        schemes=args.schemes,
        aggregators=args.aggregators or [config.aggregator],
        seeds=[int(s) for s in args.seeds],
        alphas=None if args.alphas is None else [float(a) for a in args.alphas],
        out_csv=out / "ablation.csv",
        workers=args.workers,
    )
    keys = ("variant", "scheme", "mixup_alpha", "aggregator", "seeds", "overall") + SPLIT_NAMES
    print("  ".join(keys))
    for entry in summarize(rows):
        print("  ".join(f"{entry[k]:.2f}" if isinstance(entry[k], float) else str(entry[k]) for k in keys))
    for key, ratios in sorted(ic_logit_ratios(rows).items()):
        print(f"ic_logit ratio {key}: " + " ".join(f"{r:.3f}" for r in ratios[1:]))
    print(f"{len(rows)} rows written to {out / 'ablation.csv'}")


def cmd_inspect(config: RunConfig) -> None:
    profile = build_profile(config)
    model = AceModel(2, profile.num_classes, config.experts, hidden=1, ssc_mode=config.ssc_mode)
    lrs = expert_lrs(config, profile, model)
    splits = frequency_splits(profile, config.many_threshold, config.few_threshold)
    print(f"categories {profile.num_classes}, experts {config.experts}, scheme {config.scheme}")
    print("counts " + " ".join(map(str, profile.counts)))
    print("splits " + " ".join(splits.membership))
    print(f"{'expert':<7} {'target':<16} {'interfering':<16} lr")
    for a, lr in zip(model.assignments, lrs):
        tc = f"{{{a.target[0]}..{a.target[-1]}}}"
        ic = f"{{{a.interfering[0]}..{a.interfering[-1]}}}" if a.interfering else "{}"
        print(f"{a.expert_index:<7} {tc:<16} {ic:<16} {lr:.6g}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.command == "evaluate":
            cmd_evaluate(args)
            return 0
        config = _config_from_args(args)
        print(f"seed = {config.seed}")
        if args.command == "generate":
            cmd_generate(config)
        elif args.command == "train":
            cmd_train(config)
        elif args.command == "ablate":
            cmd_ablate(config, args)
        else:
            cmd_inspect(config)
    except (AceError, OSError) as exc:
        print(f"acelt: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
