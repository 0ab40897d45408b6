"""Consistency losses between dropout-sampled passes and the combined objective.

For ``k`` passes, each regularizer is averaged over all ``k*(k-1)/2``
unordered pass pairs. Hidden-state and attention terms are averaged over
layers; every term is averaged over the batch. Padded positions are left out
of the hidden-state and attention reductions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ops import cross_entropy, kl_bidirectional
from .tensor import Tensor
from .transformer import ForwardTrace


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1  # hidden states
    beta: float = 0.1  # attention
    gamma: float = 0.1  # output distributions

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class Ablation:
    hsr_on: bool = True
    mhar_on: bool = True
    or_on: bool = True


@dataclass
class LossBreakdown:
    ce: float
    hsr: float
    mhar: float
    or_: float
    total: float
    per_layer_hsr: list[float] = field(default_factory=list)
    per_layer_mhar: list[float] = field(default_factory=list)

    def to_record(self, step: int) -> dict:
        return {"step": step, "ce": self.ce, "hsr": self.hsr, "mhar": self.mhar, "or": self.or_, "total": self.total}


def _pairs(traces: Sequence[ForwardTrace]):
    return list(itertools.combinations(range(len(traces)), 2))


def _check_structure(traces: Sequence[ForwardTrace]) -> None:
    if len(traces) < 2:
        raise ValueError(f"need at least 2 passes, got {len(traces)}")
    ref = traces[0]
    for t in traces[1:]:
        if t.num_layers != ref.num_layers:
            raise ValueError("traces have different layer counts")
        if not np.array_equal(t.valid, ref.valid):
            raise ValueError("traces were computed on different inputs")
        for a, b in zip(t.hidden_states, ref.hidden_states):
            if a.shape != b.shape:
                raise ValueError(f"hidden state shape mismatch: {a.shape} vs {b.shape}")
        for a, b in zip(t.attentions, ref.attentions):
            if a.shape != b.shape:
                raise ValueError(f"attention shape mismatch (head count?): {a.shape} vs {b.shape}")


def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms)) if len(terms) > 1 else total


def dual_cross_entropy(traces: Sequence[ForwardTrace], labels) -> Tensor:
    """Sum over passes of the batch-mean cross-entropy."""
    if len(traces) < 2:
        raise ValueError(f"need at least 2 passes, got {len(traces)}")
    return _sum_ce(traces, labels)


def _sum_ce(traces: Sequence[ForwardTrace], labels) -> Tensor:
    total = cross_entropy(traces[0].logits, labels)
    for t in traces[1:]:
        total = total + cross_entropy(t.logits, labels)
    return total


def hidden_state_reg(traces: Sequence[ForwardTrace], layers: str = "all") -> tuple[Tensor, list[float]]:
    """Mean-squared difference of layer outputs, averaged over layers and pass pairs.

    ``layers="last"`` restricts the term to the final layer.
    """
    _check_structure(traces)
    valid = traces[0].valid
    b, _ = valid.shape
    d = traces[0].hidden_states[0].shape[-1]
    # per-example mean over its own positions, then batch mean
    weight = (valid / (valid.sum(axis=1, keepdims=True) * d * b))[:, :, None]
    chosen = range(traces[0].num_layers) if layers == "all" else [traces[0].num_layers - 1]
    per_layer = []
    for layer in chosen:
        per_pair = []
        for i, j in _pairs(traces):
            diff = traces[i].hidden_states[layer] - traces[j].hidden_states[layer]
            per_pair.append((diff.square() * weight).sum())
        per_layer.append(_mean(per_pair))
    return _mean(per_layer), [t.item() for t in per_layer]


def attention_reg(traces: Sequence[ForwardTrace]) -> tuple[Tensor, list[float]]:
    """Head-averaged attention MSE, averaged over layers and pass pairs."""
    _check_structure(traces)
    valid = traces[0].valid.astype(np.float64)
    b, _ = valid.shape
    heads = traces[0].attentions[0].shape[1]
    lengths = valid.sum(axis=1)
    pair_mask = valid[:, :, None] * valid[:, None, :]
    weight = (pair_mask / (lengths**2 * heads * b)[:, None, None])[:, None, :, :]
    per_layer = []
    for layer in range(traces[0].num_layers):
        per_pair = []
        for i, j in _pairs(traces):
            diff = traces[i].attentions[layer] - traces[j].attentions[layer]
            per_pair.append((diff.square() * weight).sum())
        per_layer.append(_mean(per_pair))
    return _mean(per_layer), [t.item() for t in per_layer]


def output_reg(traces: Sequence[ForwardTrace]) -> Tensor:
    """Bidirectional KL between output distributions, averaged over pass pairs."""
    if len(traces) < 2:
        raise ValueError(f"need at least 2 passes, got {len(traces)}")
    c = traces[0].logits.shape[-1]
    if any(t.logits.shape[-1] != c for t in traces):
        raise ValueError("class-count mismatch between traces")
    probs = [t.logits.softmax(axis=-1) for t in traces]
    return _mean([kl_bidirectional(probs[i], probs[j]) for i, j in _pairs(traces)])


def total_objective(
    traces: Sequence[ForwardTrace],
    labels,
    weights: LossWeights,
    ablation: Ablation = Ablation(),
    hsr_layers: str = "all",
    ce_scale: float = 1.0,
) -> tuple[Tensor, LossBreakdown]:
    """Cross-entropy plus the weighted consistency terms.

    A term that is switched off, or whose weight is zero, is not computed and
    reports exactly 0. With a single trace only the cross-entropy is used.
    Returns the differentiable total and its float breakdown.
    """
    ce = _sum_ce(traces, labels) if len(traces) == 1 else dual_cross_entropy(traces, labels)
    if ce_scale != 1.0:
        ce = ce * ce_scale
    total = ce
    hsr = mhar = orr = 0.0
    per_hsr: list[float] = []
    per_mhar: list[float] = []
    multi = len(traces) >= 2
    if multi and ablation.hsr_on and weights.alpha > 0:
        term, per_hsr = hidden_state_reg(traces, hsr_layers)
        hsr = term.item()
        total = total + term * weights.alpha
    if multi and ablation.mhar_on and weights.beta > 0:
        term, per_mhar = attention_reg(traces)
        mhar = term.item()
        total = total + term * weights.beta
    if multi and ablation.or_on and weights.gamma > 0:
        term = output_reg(traces)
        orr = term.item()
        total = total + term * weights.gamma
    breakdown = LossBreakdown(ce.item(), hsr, mhar, orr, total.item(), per_hsr, per_mhar)
    return total, breakdown
