"""Training loop, stratified evaluation and the ablation grid."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import graphcore as gc
from .acemodel import AceModel, expert_loss, save_checkpoint
from .aggregate import get_aggregator, solo_prediction
from .config import RunConfig
from .data import (
    SPLIT_NAMES,
    Dataset,
    FrequencySplits,
    epoch_batches,
    exponential_profile,
    frequency_splits,
    make_blobs,
    mixup,
    pareto_profile,
    read_csv_dataset,
)
from .errors import ConfigurationError, NonFiniteError
from .optim import expert_lr, scheduled_lr, sgd_step
from .planner import ClassProfile, sub_batch_rows

log = logging.getLogger(__name__)

STREAMS = ("data", "init", "mixup", "shuffle")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one run seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(STREAMS, children)}


def build_profile(config: RunConfig) -> ClassProfile:
    if config.generator == "csv":
        return read_csv_dataset(config.train_csv)[0].profile
    if config.profile == "pareto":
        return pareto_profile(config.n_max, config.n_min, config.num_classes, config.pareto_power)
    return exponential_profile(config.n_max, config.imbalance, config.num_classes)


def build_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    if config.generator == "csv":
        if not config.test_csv:
            raise ConfigurationError("csv runs need test_csv for evaluation")
        return read_csv_dataset(config.train_csv, config.test_csv)
    data_seed = int(rng_streams(config.seed)["data"].integers(2**63))
    return make_blobs(
        build_profile(config),
        config.dim,
        separation=config.separation,
        noise=config.noise,
        seed=data_seed,
        test_per_class=config.test_per_class,
    )


def build_model(config: RunConfig, dataset: Dataset, rng=None) -> AceModel:
    if rng is None:
        rng = rng_streams(config.seed)["init"]
    return AceModel(
        input_dim=dataset.dim,
        num_classes=dataset.num_classes,
        num_experts=config.experts,
        hidden=config.hidden,
        ssc_mode=config.ssc_mode,
        rng=rng,
    )


def expert_lrs(config: RunConfig, profile: ClassProfile, model: AceModel) -> list[float]:
    return [expert_lr(config.scheme, config.base_lr, profile, a) for a in model.assignments]


@dataclass
class TrainResult:
    model: AceModel
    log: list[dict]
    train_set: Dataset
    test_set: Dataset


def train(
    config: RunConfig,
    datasets: Optional[tuple[Dataset, Dataset]] = None,
    checkpoint_path=None,
) -> TrainResult:
    """Train an ACE model end to end.

    Each step runs the trunk once, routes every expert its sub-batch,
    back-propagates the summed expert losses and applies per-expert SGD.
    On a non-finite loss or gradient the parameters are rolled back to the
    start of the epoch, written to ``checkpoint_path`` if given, and
    :class:`NonFiniteError` is raised.
    """
    streams = rng_streams(config.seed)
    train_set, test_set = datasets if datasets is not None else build_datasets(config)
    model = build_model(config, train_set, streams["init"])
    opt = config.optim()
    num_classes = train_set.num_classes
    base_lrs = expert_lrs(config, train_set.profile, model)
    groups = [model.trunk + model.branches[0].parameters()] + [
        b.parameters() for b in model.branches[1:]
    ]
    mixup_epochs = config.epochs - round(config.mixup_off_fraction * config.epochs)
    history: list[dict] = []

    for epoch in range(config.epochs):
        tic = time.perf_counter()
        snapshot = model.state_dict()
        lrs = [scheduled_lr(lr, epoch, opt) for lr in base_lrs]
        alpha = config.mixup_alpha if epoch < mixup_epochs else 0.0
        loss_sums = np.zeros(model.num_experts)
        loss_steps = np.zeros(model.num_experts, dtype=int)

        for idx in epoch_batches(len(train_set), config.batch_size, streams["shuffle"]):
            batch = mixup(train_set.features[idx], train_set.labels[idx], alpha, streams["mixup"])
            with gc.Tape() as tape:
                bundle = model.forward(batch.features)
                losses = []
                for a in model.assignments:
                    if config.mixup_routing == "both":
                        rows = sub_batch_rows(batch.labels_a, a, batch.labels_b)
                    else:
                        rows = sub_batch_rows(batch.dominant_labels(), a)
                    targets = batch.targets(num_classes, rows, first_target=a.start)
                    losses.append(expert_loss(bundle, a, rows, targets, config.lambda_com))
                present = [l for l in losses if l is not None]
                total = present[0]
                for l in present[1:]:
                    total = gc.add(total, l)
            try:
                if not np.isfinite(total.value):
                    raise NonFiniteError("non-finite loss")
                tape.backward(total)
                for i, (loss, params) in enumerate(zip(losses, groups)):
                    if loss is None:
                        for p in params:
                            p.zero_grad()
                        continue
                    sgd_step(params, lrs[i], opt.momentum, opt.weight_decay)
                    loss_sums[i] += float(loss.value)
                    loss_steps[i] += 1
            except NonFiniteError as exc:
                model.load_state_dict(snapshot)
                model.zero_grad()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, config.to_dict(), config.digest())
                raise NonFiniteError(f"{exc} at epoch {epoch}; rolled back to epoch start") from exc

        with np.errstate(invalid="ignore"):
            means = loss_sums / loss_steps
        record = {
            "epoch": epoch,
            "loss": [None if not s else float(m) for m, s in zip(means, loss_steps)],
            "lr": lrs,
            "mixup_alpha": alpha,
            "wall_time": time.perf_counter() - tic,
        }
        history.append(record)
        log.debug("epoch %d losses %s", epoch, record["loss"])

    return TrainResult(model, history, train_set, test_set)


# -------------------------------------------------------------- evaluation


def _accuracy(correct: np.ndarray) -> float:
    return float(100.0 * correct.mean()) if correct.size else float("nan")


@dataclass
class MetricsReport:
    """Top-1 accuracies in percent; NaN where a split holds no test rows."""

    overall: float
    splits: dict[str, float]
    split_sizes: dict[str, int]
    per_category: list[float]
    expert_splits: list[dict[str, float]] = field(default_factory=list)
    expert_ic_logit: list[float] = field(default_factory=list)

    def as_row(self) -> dict[str, float]:
        row = {"overall": self.overall}
        row.update({name: self.splits[name] for name in SPLIT_NAMES})
        for i, acc in enumerate(self.expert_splits, 1):
            for key, value in acc.items():
                row[f"expert{i}_{key}"] = value
        for i, value in enumerate(self.expert_ic_logit, 1):
            row[f"expert{i}_ic_logit"] = value
        return row


def _split_report(correct: np.ndarray, labels: np.ndarray, splits: FrequencySplits) -> dict:
    out = {"overall": _accuracy(correct)}
    tags = np.asarray(splits.membership)[labels - 1]
    for name in SPLIT_NAMES:
        out[name] = _accuracy(correct[tags == name])
    return out


def evaluate(
    model: AceModel,
    test_set: Dataset,
    aggregator: str = "avg_scaled",
    splits: Optional[FrequencySplits] = None,
) -> MetricsReport:
    if test_set.num_classes != model.num_classes:
        raise ConfigurationError(
            f"model has {model.num_classes} categories, dataset {test_set.num_classes}"
        )
    if splits is None:
        splits = frequency_splits(test_set.profile)
    bundle = model.forward(test_set.features)
    labels = test_set.labels
    pred = get_aggregator(aggregator)(bundle)
    correct = pred.predicted_label == labels
    fused = _split_report(correct, labels, splits)
    tags = np.asarray(splits.membership)[labels - 1]

    expert_splits, ic_logits = [], []
    for a in model.assignments:
        solo = solo_prediction(bundle, a.expert_index)
        expert_splits.append(_split_report(solo.predicted_label == labels, labels, splits))
        if not a.interfering:
            ic_logits.append(float("nan"))
        elif model.ssc_mode:
            ic_logits.append(0.0)  # hard-zeroed by construction
        else:
            z = bundle.raw[a.expert_index - 1][:, : a.start - 1]
            ic_logits.append(float(np.abs(z).mean()))

    return MetricsReport(
        overall=fused["overall"],
        splits={name: fused[name] for name in SPLIT_NAMES},
        split_sizes={name: int(np.sum(tags == name)) for name in SPLIT_NAMES},
        per_category=[_accuracy(correct[labels == c]) for c in range(1, model.num_classes + 1)],
        expert_splits=expert_splits,
        expert_ic_logit=ic_logits,
    )


# ---------------------------------------------------------------- ablation

VARIANTS = {
    "ace": {},
    "no_com": {"lambda_com": 0.0},
    "ssc": {"ssc_mode": True},
}

CELL_KEYS = ("variant", "scheme", "mixup_alpha", "aggregator", "seed")


def variant_config(base: RunConfig, variant: str, **changes) -> RunConfig:
    try:
        overrides = VARIANTS[variant]
    except KeyError:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}") from None
    return base.replace(**overrides, **changes)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    columns: list[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def run_ablation_suite(
    base: RunConfig,
    variants: Iterable[str] = ("ace", "no_com", "ssc"),
    schemes: Iterable[str] = ("linear", "sqrt", "uniform"),
    aggregators: Iterable[str] = ("avg_scaled",),
    seeds: Iterable[int] = (0, 1, 2),
    alphas: Optional[Iterable[float]] = None,
    out_csv=None,
    workers: int = 1,
) -> list[dict]:
    """Train every (variant, scheme, alpha, seed) cell and evaluate each aggregator.

    Returns one row per (cell, aggregator) in grid order; rows are also
    written to ``out_csv`` when given.
    """
    aggregators = list(aggregators)
    alphas = [base.mixup_alpha] if alphas is None else [float(a) for a in alphas]
    cells = list(itertools.product(variants, schemes, alphas, seeds))

    def run(cell) -> list[dict]:
        variant, scheme, alpha, seed = cell
        cfg = variant_config(base, variant, scheme=scheme, mixup_alpha=alpha, seed=seed)
        result = train(cfg)
        rows = []
        for agg in aggregators:
            report = evaluate(result.model, result.test_set, agg)
            row = dict(zip(CELL_KEYS, (variant, scheme, alpha, agg, seed)))
            row.update(report.as_row())
            rows.append(row)
        return rows

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            nested = list(pool.map(run, cells))
    else:
        nested = [run(cell) for cell in cells]
    rows = [row for group in nested for row in group]
    if out_csv is not None:
        write_metrics_csv(rows, out_csv)
    return rows


def summarize(rows: Sequence[dict], metrics=("overall",) + SPLIT_NAMES) -> list[dict]:
    """Average metric columns over seeds for each remaining grid key."""
    keys = [k for k in CELL_KEYS if k != "seed"]
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key, members in groups.items():
        entry = dict(zip(keys, key))
        entry["seeds"] = len(members)
        for m in metrics:
            entry[m] = float(np.mean([r[m] for r in members]))
        out.append(entry)
    return out


def ic_logit_ratios(rows: Sequence[dict]) -> dict[tuple, list[float]]:
    """Per-expert ratio of mean |IC logit| with vs without the complement loss.

    Keys are ``(scheme, mixup_alpha, aggregator)``; values hold one ratio per
    expert (NaN for expert 1), using seed means.
    """
    def mean_ic(variant, key):
        sel = [r for r in rows if r["variant"] == variant and (r["scheme"], r["mixup_alpha"], r["aggregator"]) == key]
        if not sel:
            return None
        n = sum(1 for k in sel[0] if k.endswith("_ic_logit"))
        return [float(np.mean([r[f"expert{i}_ic_logit"] for r in sel])) for i in range(1, n + 1)]

    out = {}
    for key in {(r["scheme"], r["mixup_alpha"], r["aggregator"]) for r in rows}:
        with_com, without = mean_ic("ace", key), mean_ic("no_com", key)
        if with_com is None or without is None:
            continue
        out[key] = [a / b if b else float("nan") for a, b in zip(with_com, without)]
    return out


def write_log(history: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")
