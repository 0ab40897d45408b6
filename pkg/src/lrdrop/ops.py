"""Numeric kernels shared by the encoder and the consistency losses."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import GradientTape, NonFiniteError, RngStream, Tensor, as_tensor, backward

PROB_FLOOR = 1e-12


def row_softmax(scores) -> Tensor:
    """Softmax over each row of a 2-D tensor, max-shifted for stability."""
    scores = as_tensor(scores)
    if scores.ndim != 2:
        raise ValueError(f"row_softmax expects a 2-D tensor, got shape {scores.shape}")
    return scores.softmax(axis=-1)


def dropout(x, rate: float, rng: RngStream | None) -> tuple[Tensor, np.ndarray]:
    """Inverted dropout. Returns the scaled output and the {0,1} keep mask.

    With ``rate == 0`` the input tensor itself is returned with an all-ones
    mask, so the result is bitwise identical to ``x``.
    """
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return x, np.ones(x.shape)
    if rng is None:
        raise ValueError("dropout with a positive rate needs an RngStream")
    mask = (rng.uniform(x.shape) >= rate).astype(np.float64)
    return x * (mask / (1.0 - rate)), mask


def mse_mean(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return (a - b).square().mean()


def kl_bidirectional(p, q) -> Tensor:
    """Symmetrized KL, ``0.5 * (KL(p||q) + KL(q||p))``.

    Accepts a single distribution ``[C]`` or a batch ``[B, C]`` (the batch
    mean is returned). Written as ``0.5 * sum((p - q) * (log p - log q))`` so
    swapping the arguments gives the same value bit for bit.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    if p.ndim not in (1, 2):
        raise ValueError("kl_bidirectional expects [C] or [B, C] inputs")
    for t in (p, q):
        if (t.data < 0).any():
            raise ValueError("probabilities must be non-negative")
        if np.abs(t.data.sum(axis=-1) - 1.0).max() > 1e-9:
            raise ValueError("probability vectors must sum to 1")
    log_p = p.clamp_min(PROB_FLOOR).log()
    log_q = q.clamp_min(PROB_FLOOR).log()
    per_row = ((p - q) * (log_p - log_q)).sum(axis=-1) * 0.5
    return per_row if p.ndim == 1 else per_row.mean()


def cross_entropy(logits, label) -> Tensor:
    """Negative log-likelihood of ``label`` under softmax(logits).

    ``logits`` is ``[C]`` with an int label, or ``[B, C]`` with ``B`` labels
    (batch mean).
    """
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    num_classes = logits.shape[-1]
    if (labels < 0).any() or (labels >= num_classes).any():
        raise ValueError(f"label out of range for {num_classes} classes: {label}")
    logp = logits.log_softmax(axis=-1)
    if logits.ndim == 1:
        if labels.size != 1:
            raise ValueError("single logit vector needs exactly one label")
        return -logp[int(labels[0])]
    if labels.shape != (logits.shape[0],):
        raise ValueError("one label per logit row required")
    picked = logp[np.arange(labels.size), labels]
    return -picked.mean()


def _constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy()) for k, v in params.items()}


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor | np.ndarray]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` receives a name->Tensor mapping and must return a scalar
    :class:`Tensor`. At least ``max_coords`` coordinates are checked,
    or every coordinate if the model has fewer. The relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = GradientTape()
    loss = loss_fn(tape.watch(params))
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    grads = backward(loss, tape)

    coords = [(name, i) for name, v in params.items() for i in range(v.size)]
    if len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        flat = params[name].reshape(-1)
        original = flat[i]
        flat[i] = original + step
        up = loss_fn(_constants(params)).item()
        flat[i] = original - step
        down = loss_fn(_constants(params)).item()
        flat[i] = original
        numeric = (up - down) / (2.0 * step)
        analytic = grads[name].reshape(-1)[i]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
