"""Optimization and experiment harness.

Adam with decoupled weight decay (decay applied directly to the weights
before the Adam delta; gates, bucket biases and MLP biases are exempt),
full-batch training by default, stratified k-fold cross-validation with
repeats, ablation variants, and the on-disk results layout.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import pipeline, selector
from .classifier import MetricsReport, compute_metrics
from .graphdata import DynamicBrainGraph, labels_array
from .numcore import rng_stream
from .pipeline import Batch, ModelState, VARIANTS
from .selector import GATE_CLAMP

METRIC_NAMES = ("acc", "prec", "sen", "spec")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class ExperimentConfig:
    learning_rate: float = 0.001
    epochs: int = 500
    weight_decay: float = 0.01
    folds: int = 8
    repeats: int = 10
    variant: str = "full"
    seed: int = 0
    batch_size: int | None = None  # None = full batch
    kl_weight: float = 1.0
    tau: float = 0.4
    max_bucket: int = 5
    hidden_dims: tuple[int, ...] = (64, 64, 64)
    mlp_hidden: int | None = None
    activation: str = "tanh"
    readout_activation: str = "sigmoid"
    prior_prob: float = 0.1
    temperature: float = 0.5
    noise_mode: str = "shared"  # "shared": one u per step; "per_sample": u per row
    weight_decay_mode: str = "coupled"  # torch-Adam style L2; "decoupled" available

    def validate(self) -> None:
        if self.noise_mode not in ("shared", "per_sample"):
            raise ValueError(f"unknown noise_mode {self.noise_mode!r}")
        if self.weight_decay_mode not in ("coupled", "decoupled"):
            raise ValueError(f"unknown weight_decay_mode {self.weight_decay_mode!r}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        kwargs = dict(d)
        if "hidden_dims" in kwargs:
            kwargs["hidden_dims"] = tuple(kwargs["hidden_dims"])
        return cls(**kwargs)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_bce: float
    train_kl: float
    val_acc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch numbering must increase")
        self.records.append(record)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "train_bce", "train_kl", "val_acc"])
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(r.train_loss), repr(r.train_bce), repr(r.train_kl), repr(r.val_acc)]
                )


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamMoments":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    moments: AdamMoments,
    lr: float,
    weight_decay: float,
    t: int,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    decay_names: frozenset[str] | None = None,
    frozen_names: frozenset[str] = frozenset(),
    coupled_decay: float = 0.0,
) -> None:
    """One in-place Adam update with bias correction.

    ``weight_decay`` is decoupled: it shrinks the listed parameters directly
    before the Adam delta. ``coupled_decay`` is classic L2 folded into the
    gradient before the moment updates (the semantics of weight_decay in
    stock torch-style Adam). Parameters in ``frozen_names`` stay untouched.
    """
    if t < 1:
        raise ValueError("step count t must be >= 1")
    b1, b2 = betas
    if decay_names is None:
        decay_names = frozenset(params)
    for name, p in params.items():
        if name in frozen_names:
            continue
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if name in decay_names:
            if weight_decay:
                p -= lr * weight_decay * p
            if coupled_decay:
                g = g + coupled_decay * p
        moments.m[name] = b1 * moments.m[name] + (1.0 - b1) * g
        moments.v[name] = b2 * moments.v[name] + (1.0 - b2) * g * g
        m_hat = moments.m[name] / (1.0 - b1**t)
        v_hat = moments.v[name] / (1.0 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _subset_batch(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(
        x=batch.x[idx],
        adjacency=batch.adjacency[idx],
        buckets=batch.buckets[idx],
        labels=batch.labels[idx],
        adjacency_f=batch.adjacency_f[idx],
    )


def _accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean((predictions >= 0.5).astype(np.int64) == labels.astype(np.int64)))


def train_one(
    config: ExperimentConfig,
    train_graphs: Sequence[DynamicBrainGraph],
    val_graphs: Sequence[DynamicBrainGraph],
    seed_path: tuple = (),
) -> tuple[ModelState, TrainHistory]:
    """Train one model on a fixed split; deterministic given config + seed.

    ``seed_path`` namespaces the derived init/noise streams (e.g. per fold).
    One fresh noise vector is drawn per optimization step and shared across
    the minibatch; validation accuracy uses the deterministic mask.
    """
    config.validate()
    if not train_graphs or not val_graphs:
        raise ValueError("train and validation splits must be nonempty")
    train_batch = pipeline.prepare_batch(train_graphs, config.tau, config.max_bucket)
    val_batch = pipeline.prepare_batch(val_graphs, config.tau, config.max_bucket)
    model = pipeline.init_model(
        rng_stream(config.seed, "init", *seed_path),
        n_regions=train_batch.x.shape[1],
        feature_dim=train_batch.x.shape[2],
        hidden_dims=config.hidden_dims,
        max_bucket=config.max_bucket,
        activation=config.activation,
        readout_activation=config.readout_activation,
        prior_prob=config.prior_prob,
        temperature=config.temperature,
        mlp_hidden=config.mlp_hidden,
    )
    params = pipeline.params_dict(model)
    moments = AdamMoments.zeros_like(params)
    decay = pipeline.decayed_param_names(model)
    frozen = pipeline.frozen_param_names(config.variant)
    noise_rng = rng_stream(config.seed, "selector-noise", *seed_path)
    order_rng = rng_stream(config.seed, "batch-order", *seed_path)

    n_train = len(train_batch)
    batch_size = config.batch_size or n_train
    history = TrainHistory()
    t = 0
    for epoch in range(1, config.epochs + 1):
        if batch_size >= n_train:
            step_indices = [np.arange(n_train)]
        else:
            perm = order_rng.permutation(n_train)
            step_indices = [
                perm[s : s + batch_size] for s in range(0, n_train, batch_size)
            ]
        epoch_bce = 0.0
        epoch_kl = 0.0
        for idx in step_indices:
            step_batch = train_batch if len(idx) == n_train else _subset_batch(train_batch, idx)
            if config.variant == "no_selector":
                noise = None
            else:
                shape: tuple[int, ...] = (model.selector.n_regions,)
                if config.noise_mode == "per_sample":
                    shape = (len(idx), model.selector.n_regions)
                noise = np.clip(
                    noise_rng.uniform(size=shape), GATE_CLAMP, 1.0 - GATE_CLAMP
                )
            out = pipeline.loss_and_grads(
                model, step_batch, variant=config.variant, noise=noise, kl_weight=config.kl_weight
            )
            if not np.isfinite(out.loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            epoch_bce += out.bce
            epoch_kl = out.kl
            t += 1
            decoupled = config.weight_decay if config.weight_decay_mode == "decoupled" else 0.0
            coupled = config.weight_decay if config.weight_decay_mode == "coupled" else 0.0
            adam_step(
                params,
                out.grads,
                moments,
                lr=config.learning_rate,
                weight_decay=decoupled,
                t=t,
                decay_names=decay,
                frozen_names=frozen,
                coupled_decay=coupled,
            )
        val_acc = _accuracy(
            pipeline.predict_batch(model, val_batch, config.variant), val_batch.labels
        )
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_bce + config.kl_weight * epoch_kl,
                train_bce=epoch_bce,
                train_kl=epoch_kl,
                val_acc=val_acc,
            )
        )
    return model, history


def evaluate(
    model: ModelState,
    graphs: Sequence[DynamicBrainGraph],
    config: ExperimentConfig,
) -> tuple[MetricsReport, np.ndarray]:
    """Deterministic-mask predictions thresholded at 0.5."""
    batch = pipeline.prepare_batch(graphs, config.tau, config.max_bucket)
    yhat = pipeline.predict_batch(model, batch, config.variant)
    report = compute_metrics((yhat >= 0.5).astype(np.int64), batch.labels.astype(np.int64))
    return report, yhat


def stratified_fold_indices(
    labels: np.ndarray,
    folds: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Class-balanced validation folds partitioning all indices."""
    labels = np.asarray(labels)
    if labels.size < folds:
        raise ValueError("dataset smaller than the number of folds")
    assignments: list[list[int]] = [[] for _ in range(folds)]
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < folds:
            raise ValueError(
                f"class {cls} has {members.size} samples, fewer than {folds} folds"
            )
        members = rng.permutation(members)
        for k in range(folds):
            assignments[k].extend(members[k::folds].tolist())
    return [np.array(sorted(a), dtype=np.int64) for a in assignments]


@dataclass
class FoldOutcome:
    run: int
    repeat: int
    fold: int
    metrics: MetricsReport
    gate_probs: np.ndarray | None
    history: TrainHistory
    model: ModelState


@dataclass
class CvResult:
    outcomes: list[FoldOutcome]
    mean: dict[str, float]
    std: dict[str, float]

    def consensus_gate_probs(self) -> np.ndarray | None:
        probs = [o.gate_probs for o in self.outcomes if o.gate_probs is not None]
        if not probs:
            return None
        return np.mean(np.stack(probs), axis=0)


def _aggregate(outcomes: Sequence[FoldOutcome]) -> tuple[dict, dict]:
    mean, std = {}, {}
    for name in METRIC_NAMES:
        values = np.array([getattr(o.metrics, name) for o in outcomes])
        mean[name] = float(values.mean())
        std[name] = float(values.std())
    return mean, std


def _run_single_fold(
    config: ExperimentConfig,
    graphs: Sequence[DynamicBrainGraph],
    run: int,
    repeat: int,
    fold: int,
    val_idx: np.ndarray,
) -> FoldOutcome:
    all_idx = np.arange(len(graphs))
    train_idx = np.setdiff1d(all_idx, val_idx)
    train_graphs = [graphs[i] for i in train_idx]
    val_graphs = [graphs[i] for i in val_idx]
    model, history = train_one(config, train_graphs, val_graphs, seed_path=(repeat, fold))
    metrics, _ = evaluate(model, val_graphs, config)
    gate = None if config.variant == "no_selector" else model.selector.probabilities()
    return FoldOutcome(
        run=run,
        repeat=repeat,
        fold=fold,
        metrics=metrics,
        gate_probs=gate,
        history=history,
        model=model,
    )


_POOL_CONTEXT: dict = {}


def _pool_task(args: tuple) -> FoldOutcome:
    run, repeat, fold, val_idx = args
    return _run_single_fold(
        _POOL_CONTEXT["config"], _POOL_CONTEXT["graphs"], run, repeat, fold, val_idx
    )


def worker_count(n_tasks: int) -> int:
    """Honor the FGSAN_THREADS cap; default to the available cores."""
    env = os.environ.get("FGSAN_THREADS")
    if env is not None:
        cap = max(1, int(env))
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def cross_validate(config: ExperimentConfig, graphs: Sequence[DynamicBrainGraph]) -> CvResult:
    """Stratified folds x repeats; aggregation is order-independent.

    Fold tasks are independent (derived seeds), so they may run in worker
    processes; results are keyed by run index either way.
    """
    config.validate()
    if len(graphs) < config.folds:
        raise ValueError("dataset smaller than the number of folds")
    labels = labels_array(graphs)
    tasks = []
    run = 0
    for repeat in range(config.repeats):
        fold_rng = rng_stream(config.seed, "folds", repeat)
        for fold, val_idx in enumerate(stratified_fold_indices(labels, config.folds, fold_rng)):
            tasks.append((run, repeat, fold, val_idx))
            run += 1
    workers = worker_count(len(tasks))
    if workers > 1 and hasattr(os, "fork"):
        _POOL_CONTEXT["config"] = config
        _POOL_CONTEXT["graphs"] = graphs
        try:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_pool_task, tasks))
        finally:
            _POOL_CONTEXT.clear()
    else:
        outcomes = [_run_single_fold(config, graphs, *task) for task in tasks]
    outcomes.sort(key=lambda o: o.run)
    mean, std = _aggregate(outcomes)
    return CvResult(outcomes=outcomes, mean=mean, std=std)


def stratified_split(
    graphs: Sequence[DynamicBrainGraph],
    val_fraction: float,
    rng: np.random.Generator,
) -> tuple[list[int], list[int]]:
    """Single class-balanced train/validation split (for the train command)."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0,1)")
    labels = labels_array(graphs)
    val: list[int] = []
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        k = max(1, int(round(val_fraction * members.size)))
        val.extend(members[:k].tolist())
    val_set = set(val)
    train = [i for i in range(len(graphs)) if i not in val_set]
    return train, sorted(val)


# --- results directory layout ---


def write_json(path: str | Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def aggregate_payload(config: ExperimentConfig, result: CvResult) -> dict:
    return {
        "variant": config.variant,
        "folds": config.folds,
        "repeats": config.repeats,
        "seed": config.seed,
        "metrics": {
            name: {"mean": result.mean[name], "std": result.std[name]}
            for name in METRIC_NAMES
        },
        "per_run": [
            {
                "run": o.run,
                "repeat": o.repeat,
                "fold": o.fold,
                **{name: getattr(o.metrics, name) for name in METRIC_NAMES},
            }
            for o in result.outcomes
        ],
    }


def biomarker_payload(
    result: CvResult,
    k: int,
    region_names: Sequence[str] | None = None,
) -> dict | None:
    consensus = result.consensus_gate_probs()
    if consensus is None:
        return None
    k = min(k, consensus.shape[0])
    per_fold = []
    for o in result.outcomes:
        ranked = selector.rank_by_score(o.gate_probs, k, region_names)
        per_fold.append(
            {
                "run": o.run,
                "top": [
                    {
                        "rank": b.rank,
                        "region_index": b.region_index,
                        "region_name": b.region_name,
                        "z_score": b.z_score,
                    }
                    for b in ranked
                ],
            }
        )
    ranked = selector.rank_by_score(consensus, k, region_names)
    return {
        "k": k,
        "consensus": [
            {
                "rank": b.rank,
                "region_index": b.region_index,
                "region_name": b.region_name,
                "z_score": b.z_score,
            }
            for b in ranked
        ],
        "consensus_gate_probs": [float(v) for v in consensus],
        "per_fold": per_fold,
    }


def write_biomarkers_csv(path: str | Path, payload: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "region_index", "region_name", "z_score"])
        for row in payload["consensus"]:
            writer.writerow(
                [row["rank"], row["region_index"], row["region_name"], repr(row["z_score"])]
            )


def run_experiment(
    config: ExperimentConfig,
    graphs: Sequence[DynamicBrainGraph],
    out_dir: str | Path,
    region_names: Sequence[str] | None = None,
    biomarker_k: int = 5,
) -> CvResult:
    """Cross-validate and write the full results layout under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", config.to_dict())
    result = cross_validate(config, graphs)
    folds_dir = out / "folds"
    folds_dir.mkdir(exist_ok=True)
    for o in result.outcomes:
        fold_dir = folds_dir / f"fold_{o.run:03d}"
        fold_dir.mkdir(exist_ok=True)
        o.history.write_csv(fold_dir / "history.csv")
        write_json(
            fold_dir / "metrics.json",
            {"repeat": o.repeat, "fold": o.fold, **o.metrics.to_dict()},
        )
        pipeline.save_checkpoint(
            fold_dir / "checkpoint.bin",
            o.model,
            extra={"variant": config.variant, "repeat": o.repeat, "fold": o.fold},
        )
    write_json(out / "aggregate.json", aggregate_payload(config, result))
    biomarkers = biomarker_payload(result, biomarker_k, region_names)
    if biomarkers is not None:
        write_json(out / "biomarkers.json", biomarkers)
        write_biomarkers_csv(out / "biomarkers.csv", biomarkers)
    return result
