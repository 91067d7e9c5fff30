"""Relaxed-Bernoulli feature selector over brain regions.

One global gate per region, parameterized by a logit so the gate probability
z stays inside (0,1). Training draws a continuous mask through the logistic
relaxation of Bernoulli sampling (temperature r); evaluation uses the
deterministic zero-noise mask. The sparsity penalty is the KL divergence
between Bernoulli(z) and a shared sparse prior Bernoulli(s). Gate
probabilities double as the biomarker ranking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import logit, sigmoid

GATE_CLAMP = 1e-6

DEFAULT_PRIOR = 0.1
DEFAULT_TEMPERATURE = 0.5


@dataclass
class SelectorState:
    gate_logits: np.ndarray
    prior_prob: float = DEFAULT_PRIOR
    temperature: float = DEFAULT_TEMPERATURE

    def validate(self) -> None:
        if self.gate_logits.ndim != 1:
            raise ValueError("gate_logits must be a vector")
        if not np.all(np.isfinite(self.gate_logits)):
            raise ValueError("gate_logits contain non-finite entries")
        if not 0.0 < self.prior_prob < 1.0:
            raise ValueError("prior probability must lie in (0,1)")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")

    @property
    def n_regions(self) -> int:
        return self.gate_logits.shape[0]

    def probabilities(self) -> np.ndarray:
        return sigmoid(self.gate_logits)


@dataclass(frozen=True)
class MaskSample:
    """Relaxed mask values plus the uniform noise that produced them."""

    values: np.ndarray
    noise: np.ndarray


def init_selector(
    n_regions: int,
    prior_prob: float = DEFAULT_PRIOR,
    temperature: float = DEFAULT_TEMPERATURE,
) -> SelectorState:
    """Zero logits: every gate starts at probability 0.5."""
    state = SelectorState(
        gate_logits=np.zeros(n_regions),
        prior_prob=prior_prob,
        temperature=temperature,
    )
    state.validate()
    return state


def _clamped(p, name: str):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError(f"{name} must lie strictly inside (0,1)")
    return np.clip(p, GATE_CLAMP, 1.0 - GATE_CLAMP)


def relaxed_bernoulli_sample(z, u, r: float):
    """Logistic relaxation: sigmoid((logit(z) + logit(u)) / r).

    Differentiable in z; strictly increasing in both z and u. Inputs are
    clamped away from {0,1} by GATE_CLAMP before the logs.
    """
    if r <= 0.0:
        raise ValueError("relaxation temperature must be positive")
    z = _clamped(z, "z")
    u = _clamped(u, "u")
    return sigmoid((logit(z) + logit(u)) / r)


def sample_mask(state: SelectorState, rng: np.random.Generator) -> MaskSample:
    """Draw one fresh relaxed mask (one noise vector shared by the batch)."""
    u = rng.uniform(size=state.n_regions)
    u = np.clip(u, GATE_CLAMP, 1.0 - GATE_CLAMP)
    values = relaxed_bernoulli_sample(state.probabilities(), u, state.temperature)
    return MaskSample(values=values, noise=u)


def deterministic_mask(state: SelectorState) -> np.ndarray:
    """Zero-noise mask used at evaluation time: sigmoid(logit(z) / r)."""
    z = _clamped(state.probabilities(), "z")
    return sigmoid(logit(z) / state.temperature)


def apply_mask(embeddings: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Scale region i's embedding row by mask[i]."""
    if embeddings.shape[0] != mask.shape[0]:
        raise ValueError(
            f"mask length {mask.shape[0]} does not match {embeddings.shape[0]} rows"
        )
    return embeddings * mask[:, None]


def bernoulli_kl(z, s: float) -> float:
    """KL(Bernoulli(z) || Bernoulli(s)), summed over regions."""
    z = _clamped(z, "z")
    s_arr = _clamped(s, "s")
    terms = z * (np.log(z) - np.log(s_arr)) + (1.0 - z) * (
        np.log1p(-z) - np.log1p(-s_arr)
    )
    return float(np.sum(terms))


def bernoulli_kl_grad_logits(gate_logits: np.ndarray, s: float) -> np.ndarray:
    """d KL / d gate_logits: (logit(z) - logit(s)) * z * (1 - z)."""
    z = sigmoid(gate_logits)
    clamped = (z <= GATE_CLAMP) | (z >= 1.0 - GATE_CLAMP)
    zc = np.clip(z, GATE_CLAMP, 1.0 - GATE_CLAMP)
    grad = (logit(zc) - logit(np.clip(s, GATE_CLAMP, 1.0 - GATE_CLAMP))) * z * (1.0 - z)
    return np.where(clamped, 0.0, grad)


@dataclass(frozen=True)
class Biomarker:
    rank: int
    region_index: int
    z_score: float
    region_name: str


def rank_by_score(
    z: np.ndarray,
    k: int,
    region_names: Sequence[str] | None = None,
) -> list[Biomarker]:
    """Top-k regions by gate probability, ties broken by lower index."""
    n = z.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds {n} regions")
    order = sorted(range(n), key=lambda i: (-z[i], i))[:k]
    names = region_names if region_names is not None else [f"region_{i}" for i in range(n)]
    return [
        Biomarker(rank=r + 1, region_index=i, z_score=float(z[i]), region_name=str(names[i]))
        for r, i in enumerate(order)
    ]


def top_k_biomarkers(
    state: SelectorState,
    k: int,
    region_names: Sequence[str] | None = None,
) -> list[Biomarker]:
    """Rank regions by the learned gate probabilities."""
    return rank_by_score(state.probabilities(), k, region_names)
