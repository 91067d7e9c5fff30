"""Dense float64 numerics: stable elementwise ops, masked softmax, a flat
parameter registry for hand-written backward passes, and a central
finite-difference gradient checker that doubles as the correctness oracle.

All arithmetic is 64-bit. Randomness comes from Philox (counter-based)
generators derived from a single seed, so every run is reproducible.
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Mapping

import numpy as np

Array = np.ndarray

EPSILON_RANGE = (1e-6, 1e-3)


class NonDifferentiableError(ValueError):
    """Raised when one-sided finite differences disagree (kink in the loss)."""


def as_matrix(data: Iterable[float], rows: int, cols: int) -> Array:
    """Build a rows x cols float64 matrix from row-major data."""
    arr = np.asarray(data, dtype=np.float64).reshape(rows, cols)
    check_finite("matrix", arr)
    return arr


def check_finite(name: str, arr: Array) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


def sorted_sum(values: Array, axis: int = -1) -> Array:
    """Sum after sorting along ``axis``.

    The summation order then depends only on the multiset of values, not on
    their index labels, which makes node-permutation equivariance of the
    per-sample graph ops hold bitwise instead of merely to rounding.
    """
    return np.sum(np.sort(values, axis=axis), axis=axis)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p):
    """Inverse of sigmoid; caller is responsible for p strictly inside (0,1)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    if out.ndim == 0:
        return float(out)
    return out


def masked_softmax(logits: Array, mask: Array) -> Array:
    """Softmax restricted to the entries where ``mask`` is true.

    Masked-out entries get exactly 0; unmasked entries are positive and sum
    to 1. Overflow-safe via max subtraction. The reduction over the support
    uses a canonical (sorted) order.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape or logits.ndim != 1:
        raise ValueError(
            f"masked_softmax: shape mismatch {logits.shape} vs {mask.shape}"
        )
    if not mask.any():
        raise ValueError("masked_softmax: empty neighborhood (all-false mask)")
    check_finite("masked_softmax logits", logits[mask])
    shifted = logits[mask] - np.max(logits[mask])
    ex = np.exp(shifted)
    out = np.zeros_like(logits)
    out[mask] = ex / sorted_sum(ex)
    return out


# Activations used by the encoder layers and the readout. Each entry maps a
# name to (value, derivative), both taken at the pre-activation input.
ACTIVATIONS: dict[str, tuple[Callable[[Array], Array], Callable[[Array], Array]]] = {
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "relu": (
        lambda x: np.maximum(x, 0.0),
        lambda x: (x > 0.0).astype(np.float64),
    ),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
    "sigmoid": (sigmoid, lambda x: sigmoid(x) * (1.0 - sigmoid(x))),
}

# Derivative expressed through the activation output, so backward passes can
# reuse the cached forward value instead of re-evaluating the nonlinearity.
ACTIVATION_OUTPUT_DERIVS: dict[str, Callable[[Array], Array]] = {
    "tanh": lambda y: 1.0 - y**2,
    "relu": lambda y: (y > 0.0).astype(np.float64),
    "identity": lambda y: np.ones_like(y),
    "sigmoid": lambda y: y * (1.0 - y),
}


def activation_pair(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def activation_output_deriv(name: str):
    try:
        return ACTIVATION_OUTPUT_DERIVS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


class GradientTape:
    """Flat name -> tensor registry with additively accumulated gradients."""

    def __init__(self) -> None:
        self.params: dict[str, Array] = {}
        self.grads: dict[str, Array] = {}

    def register(self, name: str, value: Array) -> Array:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        arr = np.asarray(value, dtype=np.float64)
        check_finite(name, arr)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def zero_grads(self) -> None:
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def accumulate(self, name: str, delta: Array) -> None:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != self.params[name].shape:
            raise ValueError(
                f"gradient shape {delta.shape} does not match parameter "
                f"{name!r} of shape {self.params[name].shape}"
            )
        self.grads[name] = self.grads[name] + delta

    def check_shapes(self) -> None:
        for name, p in self.params.items():
            g = self.grads.get(name)
            if g is None or g.shape != p.shape:
                raise ValueError(f"missing or misshaped gradient for {name!r}")


LossAndGrad = Callable[[Mapping[str, Array]], tuple[float, Mapping[str, Array]]]


def finite_diff_report(
    loss_and_grad: LossAndGrad,
    params: Mapping[str, Array],
    epsilon: float = 1e-4,
    kink_tol: float = 0.25,
) -> dict[str, float]:
    """Per-parameter max relative error between analytic gradients and
    central finite differences.

    ``loss_and_grad`` must be deterministic (any sampling noise frozen by the
    caller). Relative error is |analytic - central| / max(1, |central|).
    A large disagreement between the two one-sided slopes at any coordinate
    signals a kink and raises NonDifferentiableError.
    """
    lo, hi = EPSILON_RANGE
    if not (lo <= epsilon <= hi):
        raise ValueError(f"epsilon {epsilon} outside [{lo}, {hi}]")
    work = {name: np.array(p, dtype=np.float64, copy=True) for name, p in params.items()}
    base_loss, analytic = loss_and_grad(work)
    if not np.isfinite(base_loss):
        raise ValueError("non-finite loss at the evaluation point")
    errors: dict[str, float] = {}
    for name, p in work.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != p.shape:
            raise ValueError(f"analytic gradient for {name!r} has wrong shape")
        worst = 0.0
        flat = p.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            f_plus = loss_and_grad(work)[0]
            flat[idx] = orig - epsilon
            f_minus = loss_and_grad(work)[0]
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(f"non-finite loss while perturbing {name!r}")
            central = (f_plus - f_minus) / (2.0 * epsilon)
            # Second-difference quotient ~ eps*f''/2 for smooth losses but
            # jumps to the slope discontinuity at a kink.
            jump = abs(f_plus + f_minus - 2.0 * base_loss) / (2.0 * epsilon)
            if jump > kink_tol * max(1.0, abs(central)):
                raise NonDifferentiableError(
                    f"{name}[{idx}]: one-sided slopes disagree by {jump:.3g}; "
                    "loss is not differentiable here"
                )
            rel = abs(gflat[idx] - central) / max(1.0, abs(central))
            worst = max(worst, rel)
        errors[name] = worst
    return errors


def finite_diff_check(
    loss_and_grad: LossAndGrad,
    params: Mapping[str, Array],
    epsilon: float = 1e-4,
) -> float:
    """Max relative error over all parameters; see finite_diff_report."""
    report = finite_diff_report(loss_and_grad, params, epsilon)
    return max(report.values()) if report else 0.0


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def rng_stream(seed: int, *path) -> np.random.Generator:
    """Independent Philox stream for one component of the pipeline.

    Streams are keyed by (seed, path) where path elements are ints or
    strings (hashed with crc32), e.g. rng_stream(seed, "selector", fold).
    """
    spawn_key = tuple(_label_to_int(p) for p in path)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))
