"""Graph-level readout, MLP prediction head, total loss, and metrics.

The readout averages node embeddings and applies an activation (sigmoid by
default, configurable to identity). The head is the smallest nontrivial MLP
(hidden tanh layer, scalar sigmoid output). The training objective is the
summed binary cross entropy plus a weighted Bernoulli KL sparsity penalty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import activation_pair, sigmoid, sorted_sum
from .selector import GATE_CLAMP, bernoulli_kl

DEFAULT_READOUT_ACTIVATION = "sigmoid"


@dataclass
class MlpParams:
    hidden_weight: np.ndarray
    hidden_bias: np.ndarray
    out_weight: np.ndarray
    out_bias: np.ndarray

    def validate(self) -> None:
        d, d_h = self.hidden_weight.shape
        if self.hidden_bias.shape != (d_h,):
            raise ValueError("hidden bias does not match hidden width")
        if self.out_weight.shape != (d_h,):
            raise ValueError("output weight does not match hidden width")
        if self.out_bias.shape != (1,):
            raise ValueError("output bias must have shape (1,)")
        for arr in (self.hidden_weight, self.hidden_bias, self.out_weight, self.out_bias):
            if not np.all(np.isfinite(arr)):
                raise ValueError("MLP parameters contain non-finite entries")


def init_mlp(rng: np.random.Generator, d_in: int, d_hidden: int | None = None) -> MlpParams:
    """Glorot-uniform weights, zero biases; hidden width defaults to d_in // 2."""
    if d_hidden is None:
        d_hidden = max(1, d_in // 2)
    bound_h = np.sqrt(6.0 / (d_in + d_hidden))
    bound_o = np.sqrt(6.0 / (d_hidden + 1))
    params = MlpParams(
        hidden_weight=rng.uniform(-bound_h, bound_h, size=(d_in, d_hidden)),
        hidden_bias=np.zeros(d_hidden),
        out_weight=rng.uniform(-bound_o, bound_o, size=d_hidden),
        out_bias=np.zeros(1),
    )
    params.validate()
    return params


def readout(
    masked_embeddings: np.ndarray,
    activation: str = DEFAULT_READOUT_ACTIVATION,
) -> np.ndarray:
    """Average the node embeddings and apply the readout activation.

    The per-dimension sum runs in canonical order, so the result is invariant
    under node permutations bitwise.
    """
    if masked_embeddings.ndim != 2 or masked_embeddings.shape[0] < 1:
        raise ValueError("readout needs a nonempty (N, d) embedding matrix")
    act, _ = activation_pair(activation)
    mean = sorted_sum(masked_embeddings, axis=0) / masked_embeddings.shape[0]
    return act(mean)


def predict(graph_embedding: np.ndarray, params: MlpParams) -> float:
    """Probability of the positive class for one pooled graph embedding."""
    if graph_embedding.shape != (params.hidden_weight.shape[0],):
        raise ValueError(
            f"embedding of shape {graph_embedding.shape} does not match the head"
        )
    hidden = np.tanh(graph_embedding @ params.hidden_weight + params.hidden_bias)
    return float(sigmoid(hidden @ params.out_weight + params.out_bias[0]))


def total_loss(
    predictions: np.ndarray,
    labels: np.ndarray,
    z: np.ndarray,
    prior: float,
    kl_weight: float = 1.0,
) -> float:
    """Summed binary cross entropy plus the weighted gate KL penalty."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    p = np.clip(predictions, GATE_CLAMP, 1.0 - GATE_CLAMP)
    bce = -np.sum(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    return float(bce + kl_weight * bernoulli_kl(z, prior))


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    prec: float
    sen: float
    spec: float
    tp: int
    fp: int
    tn: int
    fn: int
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "prec": self.prec,
            "sen": self.sen,
            "spec": self.spec,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "degenerate": list(self.degenerate),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv_row(self) -> str:
        """ACC, PREC, SEN, SPEC scaled by 100 (comparison-table layout)."""
        return ",".join(f"{100.0 * v:.2f}" for v in (self.acc, self.prec, self.sen, self.spec))


def compute_metrics(
    predicted_labels: Sequence[int] | np.ndarray,
    true_labels: Sequence[int] | np.ndarray,
) -> MetricsReport:
    """Confusion counts and the four headline metrics.

    Degenerate 0/0 ratios are reported as 0.0 and flagged instead of NaN.
    """
    pred = np.asarray(predicted_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predicted and true labels must be equal-length vectors")
    if pred.size == 0:
        raise ValueError("compute_metrics: empty input")
    for arr, name in ((pred, "predicted"), (true, "true")):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} labels must be binary")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    degenerate = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    return MetricsReport(
        acc=(tp + tn) / pred.size,
        prec=ratio(tp, tp + fp, "prec"),
        sen=ratio(tp, tp + fn, "sen"),
        spec=ratio(tn, tn + fp, "spec"),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        degenerate=tuple(degenerate),
    )
