"""End-to-end model assembly: encoder -> gate mask -> readout -> MLP head.

Holds the flat parameter registry used by the optimizer and the gradient
checker, the batched joint loss with its analytic backward pass, and the
versioned binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import attention, classifier, selector
from .graphdata import (
    DEFAULT_MAX_BUCKET,
    DEFAULT_TAU,
    DynamicBrainGraph,
    build_view,
    labels_array,
)
from .numcore import activation_output_deriv, activation_pair, rng_stream, sigmoid
from .selector import GATE_CLAMP

VARIANTS = ("full", "no_selector", "no_spatial")

CHECKPOINT_MAGIC = b"FGSANCKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelState:
    encoder: attention.EncoderParams
    selector: selector.SelectorState
    mlp: classifier.MlpParams
    readout_activation: str = classifier.DEFAULT_READOUT_ACTIVATION

    def validate(self) -> None:
        self.encoder.validate()
        self.selector.validate()
        self.mlp.validate()
        activation_pair(self.readout_activation)


def init_model(
    rng: np.random.Generator,
    n_regions: int,
    feature_dim: int,
    hidden_dims: Sequence[int] = attention.DEFAULT_HIDDEN_DIMS,
    max_bucket: int = DEFAULT_MAX_BUCKET,
    activation: str = "tanh",
    readout_activation: str = classifier.DEFAULT_READOUT_ACTIVATION,
    prior_prob: float = selector.DEFAULT_PRIOR,
    temperature: float = selector.DEFAULT_TEMPERATURE,
    mlp_hidden: int | None = None,
) -> ModelState:
    dims = [feature_dim, *hidden_dims]
    model = ModelState(
        encoder=attention.init_encoder(rng, dims, max_bucket, activation),
        selector=selector.init_selector(n_regions, prior_prob, temperature),
        mlp=classifier.init_mlp(rng, dims[-1], mlp_hidden),
        readout_activation=readout_activation,
    )
    model.validate()
    return model


def params_dict(model: ModelState) -> dict[str, np.ndarray]:
    """Live references to every trainable array, keyed by a stable name."""
    params: dict[str, np.ndarray] = {}
    for i, layer in enumerate(model.encoder.layers):
        params[f"encoder.layer{i}.weight"] = layer.weight
        params[f"encoder.layer{i}.attn"] = layer.attn
    params["encoder.spatial"] = model.encoder.spatial.bias
    params["selector.gate_logits"] = model.selector.gate_logits
    params["mlp.hidden_weight"] = model.mlp.hidden_weight
    params["mlp.hidden_bias"] = model.mlp.hidden_bias
    params["mlp.out_weight"] = model.mlp.out_weight
    params["mlp.out_bias"] = model.mlp.out_bias
    return params


def set_params(model: ModelState, values: Mapping[str, np.ndarray]) -> None:
    """Copy new values into the model's arrays (shapes must match)."""
    live = params_dict(model)
    for name, arr in live.items():
        arr[...] = values[name]


def decayed_param_names(model: ModelState) -> frozenset[str]:
    """Weight matrices and score vectors decay; biases and gates do not."""
    names = set()
    for i in range(len(model.encoder.layers)):
        names.add(f"encoder.layer{i}.weight")
        names.add(f"encoder.layer{i}.attn")
    names.update({"mlp.hidden_weight", "mlp.out_weight"})
    return frozenset(names)


def frozen_param_names(variant: str) -> frozenset[str]:
    if variant == "no_selector":
        return frozenset({"selector.gate_logits"})
    if variant == "no_spatial":
        return frozenset({"encoder.spatial"})
    if variant == "full":
        return frozenset()
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass(frozen=True)
class Batch:
    """Stacked sample tensors sharing one region count.

    ``adjacency_f`` is the float64 copy of the boolean adjacency, kept so the
    per-step engine does not re-cast it.
    """

    x: np.ndarray
    adjacency: np.ndarray
    buckets: np.ndarray
    labels: np.ndarray
    adjacency_f: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


def prepare_batch(
    graphs: Sequence[DynamicBrainGraph],
    tau: float = DEFAULT_TAU,
    max_bucket: int = DEFAULT_MAX_BUCKET,
) -> Batch:
    """Derive per-sample static views and stack everything for the engine."""
    if not graphs:
        raise ValueError("prepare_batch: empty sample list")
    views = [build_view(g, tau, max_bucket) for g in graphs]
    adjacency = np.stack([v.adjacency for v in views])
    return Batch(
        x=np.stack([g.node_features for g in graphs]),
        adjacency=adjacency,
        buckets=np.stack([v.spd_bucket for v in views]),
        labels=labels_array(graphs).astype(np.float64),
        adjacency_f=adjacency.astype(np.float64),
    )


def training_mask(model: ModelState, variant: str, noise: np.ndarray | None) -> np.ndarray:
    """Mask used in the joint loss.

    ``noise`` may be one vector (N,) shared by the batch or per-sample (B, N);
    None selects the deterministic evaluation mask.
    """
    if variant == "no_selector":
        return np.ones(model.selector.n_regions)
    if noise is None:
        return selector.deterministic_mask(model.selector)
    z = model.selector.probabilities()
    if noise.ndim == 2:
        z = np.broadcast_to(z, noise.shape)
    return selector.relaxed_bernoulli_sample(z, noise, model.selector.temperature)


@dataclass
class LossBreakdown:
    loss: float
    bce: float
    kl: float
    predictions: np.ndarray
    grads: dict[str, np.ndarray]


def loss_and_grads(
    model: ModelState,
    batch: Batch,
    variant: str = "full",
    noise: np.ndarray | None = None,
    kl_weight: float = 1.0,
) -> LossBreakdown:
    """Joint loss over the batch and analytic gradients for every parameter.

    ``noise`` is the uniform draw for the relaxed mask (one vector shared by
    the batch); pass None for the deterministic mask. The KL penalty and the
    gate gradient are dropped for the no_selector variant.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    n = batch.x.shape[1]
    act_r, _ = activation_pair(model.readout_activation)
    dact_r_out = activation_output_deriv(model.readout_activation)

    z_embed, enc_caches = attention.encoder_forward_batch(
        batch.x, batch.adjacency_f, batch.buckets, model.encoder
    )
    mask = training_mask(model, variant, noise)
    mask_rows = mask if mask.ndim == 2 else mask[None, :]
    masked = z_embed * mask_rows[:, :, None]
    mean_pre = masked.sum(axis=1) / n
    pooled = act_r(mean_pre)
    hidden = np.tanh(pooled @ model.mlp.hidden_weight + model.mlp.hidden_bias)
    logits = hidden @ model.mlp.out_weight + model.mlp.out_bias[0]
    yhat = sigmoid(logits)

    y = batch.labels
    p = np.clip(yhat, GATE_CLAMP, 1.0 - GATE_CLAMP)
    bce = float(-np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    if variant == "no_selector":
        kl = 0.0
    else:
        kl = selector.bernoulli_kl(model.selector.probabilities(), model.selector.prior_prob)
    loss = bce + kl_weight * kl

    # backward
    unclamped = (yhat > GATE_CLAMP) & (yhat < 1.0 - GATE_CLAMP)
    dlogits = np.where(unclamped, yhat - y, 0.0)
    d_out_w = hidden.T @ dlogits
    d_out_b = np.array([dlogits.sum()])
    dhidden = dlogits[:, None] * model.mlp.out_weight[None, :]
    dpre_h = dhidden * (1.0 - hidden**2)
    d_hid_w = pooled.T @ dpre_h
    d_hid_b = dpre_h.sum(axis=0)
    dpooled = dpre_h @ model.mlp.hidden_weight.T
    dmean = dpooled * dact_r_out(pooled)
    dmasked = np.broadcast_to((dmean / n)[:, None, :], z_embed.shape)
    dz_embed = dmasked * mask_rows[:, :, None]
    dmask = np.einsum("bnd,bnd->bn", dmasked, z_embed)

    _, layer_grads, d_spatial = attention.encoder_backward_batch(
        dz_embed, enc_caches, batch.buckets, model.encoder
    )

    if variant == "no_selector":
        d_gate = np.zeros(model.selector.n_regions)
    else:
        # Every mask form is sigmoid((gate_logit + const) / r), so one chain
        # rule factor covers the sampled and deterministic masks alike.
        rate = mask * (1.0 - mask) / model.selector.temperature
        if rate.ndim == 2:
            d_gate = (dmask * rate).sum(axis=0)
        else:
            d_gate = dmask.sum(axis=0) * rate
        z = model.selector.probabilities()
        z_unclamped = (z > GATE_CLAMP) & (z < 1.0 - GATE_CLAMP)
        d_gate = np.where(z_unclamped, d_gate, 0.0)
        d_gate = d_gate + kl_weight * selector.bernoulli_kl_grad_logits(
            model.selector.gate_logits, model.selector.prior_prob
        )

    grads: dict[str, np.ndarray] = {}
    for i, (d_weight, d_attn) in enumerate(layer_grads):
        grads[f"encoder.layer{i}.weight"] = d_weight
        grads[f"encoder.layer{i}.attn"] = d_attn
    grads["encoder.spatial"] = d_spatial
    grads["selector.gate_logits"] = d_gate
    grads["mlp.hidden_weight"] = d_hid_w
    grads["mlp.hidden_bias"] = d_hid_b
    grads["mlp.out_weight"] = d_out_w
    grads["mlp.out_bias"] = d_out_b
    return LossBreakdown(loss=loss, bce=bce, kl=float(kl), predictions=yhat, grads=grads)


def predict_batch(model: ModelState, batch: Batch, variant: str = "full") -> np.ndarray:
    """Evaluation-time probabilities using the deterministic mask."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    act_r, _ = activation_pair(model.readout_activation)
    z_embed, _ = attention.encoder_forward_batch(
        batch.x, batch.adjacency_f, batch.buckets, model.encoder
    )
    mask = training_mask(model, variant, noise=None)
    pooled = act_r((z_embed * mask[None, :, None]).sum(axis=1) / batch.x.shape[1])
    hidden = np.tanh(pooled @ model.mlp.hidden_weight + model.mlp.hidden_bias)
    return sigmoid(hidden @ model.mlp.out_weight + model.mlp.out_bias[0])


def make_loss_fn(
    model: ModelState,
    batch: Batch,
    variant: str = "full",
    noise: np.ndarray | None = None,
    kl_weight: float = 1.0,
):
    """Adapter for the finite-difference checker: values -> (loss, grads)."""

    def loss_fn(values: Mapping[str, np.ndarray]):
        set_params(model, values)
        out = loss_and_grads(model, batch, variant=variant, noise=noise, kl_weight=kl_weight)
        return out.loss, out.grads

    return loss_fn


def gradcheck_instance(seed: int = 0):
    """Frozen tiny instance for gradient validation: 5 nodes, 4 dims, 3 samples."""
    from .synth import SynthConfig, generate

    config = SynthConfig(
        n_regions=5,
        feature_dim=4,
        timesteps=2,
        samples_per_class=2,
        informative_regions=(1, 3),
        signal_strength=1.0,
        community_count=1,
        edge_noise=0.05,
        seed=seed,
    )
    graphs = generate(config)[:3]
    batch = prepare_batch(graphs, tau=DEFAULT_TAU, max_bucket=3)
    model = init_model(
        rng_stream(seed, "gradcheck", "init"),
        n_regions=5,
        feature_dim=4,
        hidden_dims=(4, 4, 4),
        max_bucket=3,
        mlp_hidden=2,
    )
    noise = rng_stream(seed, "gradcheck", "noise").uniform(
        GATE_CLAMP, 1.0 - GATE_CLAMP, size=5
    )
    return model, batch, noise


def model_hyper(model: ModelState) -> dict:
    return {
        "activation": model.encoder.activation,
        "readout_activation": model.readout_activation,
        "hidden_dims": [layer.d_out for layer in model.encoder.layers],
        "feature_dim": model.encoder.layers[0].d_in,
        "n_regions": model.selector.n_regions,
        "max_bucket": int(model.encoder.spatial.bias.shape[0] - 1),
        "prior_prob": model.selector.prior_prob,
        "temperature": model.selector.temperature,
    }


def save_checkpoint(path: str | Path, model: ModelState, extra: dict | None = None) -> None:
    """Binary parameter payload plus a JSON manifest of hyperparameters."""
    path = Path(path)
    params = params_dict(model)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {"format_version": CHECKPOINT_VERSION, "hyper": model_hyper(model)}
    if extra:
        manifest.update(extra)
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    path = Path(path)
    with open(str(path) + ".json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    hyper = manifest["hyper"]
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            shapes.append((name, shape))
        values: dict[str, np.ndarray] = {}
        for name, shape in shapes:
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            values[name] = data.astype(np.float64)
    model = init_model(
        np.random.Generator(np.random.Philox(0)),
        n_regions=hyper["n_regions"],
        feature_dim=hyper["feature_dim"],
        hidden_dims=tuple(hyper["hidden_dims"]),
        max_bucket=hyper["max_bucket"],
        activation=hyper["activation"],
        readout_activation=hyper["readout_activation"],
        prior_prob=hyper["prior_prob"],
        temperature=hyper["temperature"],
        mlp_hidden=values["mlp.hidden_bias"].shape[0],
    )
    set_params(model, values)
    return model, manifest
