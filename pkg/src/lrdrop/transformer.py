"""Post-norm transformer encoder for sequence classification.

Every forward pass returns a :class:`ForwardTrace` holding the per-layer
hidden states, the per-head attention probabilities, the logits and every
dropout mask drawn, which is what the consistency losses compare.

Shapes are batched: hidden states are ``(B, n, d)`` and attentions
``(B, h, n, n)`` where ``n`` is the longest sequence in the batch. Shorter
sequences are right-padded; padded keys get ``-1e9`` added to their scores
and padded positions are left out of pooling.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ops import dropout
from .tensor import RngStream, Tensor, as_tensor

PAD_SCORE = -1e9
CHECKPOINT_FORMAT = "lrdrop-checkpoint"
CHECKPOINT_VERSION = 1

ModelParams = dict[str, np.ndarray]

# dropout site ids, used as rng sub-keys
_SITE_EMB, _SITE_PROBS, _SITE_ATTN_OUT, _SITE_FFN_ACT, _SITE_FFN_OUT = range(5)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int
    hidden_size: int
    num_layers: int
    num_heads: int
    ffn_size: int
    num_classes: int
    dropout_rate: float = 0.1
    attention_capture: str = "pre"  # "pre" or "post" attention-probability dropout

    def __post_init__(self):
        for name in ("vocab_size", "max_len", "hidden_size", "num_layers", "num_heads", "ffn_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.attention_capture not in ("pre", "post"):
            raise ValueError("attention_capture must be 'pre' or 'post'")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads


@dataclass
class ForwardTrace:
    hidden_states: list[Tensor]
    attentions: list[Tensor]
    logits: Tensor
    valid: np.ndarray  # (B, n) bool, False at padded positions
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    pass_id: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.hidden_states)

    def attention(self, layer: int, head: int, example: int = 0) -> np.ndarray:
        """The ``n x n`` attention matrix of one head, trimmed to the example's length."""
        n = int(self.valid[example].sum())
        return self.attentions[layer].data[example, head, :n, :n]

    def hidden_state(self, layer: int, example: int = 0) -> np.ndarray:
        n = int(self.valid[example].sum())
        return self.hidden_states[layer].data[example, :n]


def layer_names(layer: int) -> dict[str, str]:
    prefix = f"layers.{layer}."
    keys = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b")
    return {k: prefix + k for k in keys}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden_size, cfg.ffn_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_len, d),
    }
    for i in range(cfg.num_layers):
        n = layer_names(i)
        shapes.update(
            {
                n["wq"]: (d, d),
                n["wk"]: (d, d),
                n["wv"]: (d, d),
                n["wo"]: (d, d),
                n["w1"]: (d, f),
                n["b1"]: (f,),
                n["w2"]: (f, d),
                n["b2"]: (d,),
                n["ln1_g"]: (d,),
                n["ln1_b"]: (d,),
                n["ln2_g"]: (d,),
                n["ln2_b"]: (d,),
            }
        )
    shapes["head.w"] = (d, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Gaussian fan-in init for matrices, unit gains, zero biases."""
    rng = RngStream(seed, 0)
    params: ModelParams = {}
    for idx, (name, shape) in enumerate(param_shapes(cfg).items()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            params[name] = rng.child(idx).normal(shape)
        else:
            params[name] = rng.child(idx).normal(shape) / math.sqrt(shape[0])
    return params


def encode_batch(sequences: Sequence[Sequence[int]], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences to the batch maximum. Returns ``(ids, valid)``."""
    if len(sequences) == 0:
        raise ValueError("empty batch")
    lengths = [len(s) for s in sequences]
    if min(lengths) == 0:
        raise ValueError("empty sequence")
    n = max(lengths)
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    ids = np.zeros((len(sequences), n), dtype=np.intp)
    valid = np.zeros((len(sequences), n), dtype=bool)
    for b, seq in enumerate(sequences):
        arr = np.asarray(seq, dtype=np.int64)
        if (arr < 0).any() or (arr >= cfg.vocab_size).any():
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        ids[b, : len(arr)] = arr
        valid[b, : len(arr)] = True
    return ids, valid


def _key_bias(valid: np.ndarray) -> np.ndarray:
    # (B, 1, 1, n): additive score mask broadcast over heads and query rows
    return np.where(valid, 0.0, PAD_SCORE)[:, None, None, :]


def _attention_probs(q: Tensor, k: Tensor, score_bias: np.ndarray | None) -> Tensor:
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if score_bias is not None:
        scores = scores + score_bias
    return scores.softmax(axis=-1)


def attention(q, k, v, score_bias: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    Returns ``(A @ V, A)`` with ``A = softmax(Q K^T / sqrt(d_k) + bias)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim < 2 or q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"inconsistent attention shapes {q.shape}, {k.shape}, {v.shape}")
    probs = _attention_probs(q, k, score_bias)
    return probs @ v, probs


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def _mha(
    x: Tensor,
    p: Mapping[str, Tensor],
    num_heads: int,
    rate: float,
    rng: RngStream | None,
    valid: np.ndarray | None,
    capture: str,
    masks: dict | None,
    site: str,
) -> tuple[Tensor, Tensor]:
    # x is (B, n, d); returns the projected output and (B, h, n, n) probabilities
    q = _split_heads(x @ p["wq"], num_heads)
    k = _split_heads(x @ p["wk"], num_heads)
    v = _split_heads(x @ p["wv"], num_heads)
    probs = _attention_probs(q, k, None if valid is None else _key_bias(valid))
    dropped, mask = dropout(probs, rate, None if rng is None else rng.child(_SITE_PROBS))
    if masks is not None:
        masks[f"{site}.probs"] = mask
    captured = probs if capture == "pre" else dropped
    return _merge_heads(dropped @ v) @ p["wo"], captured


def multi_head_attention(
    x,
    layer_params: Mapping[str, Tensor | np.ndarray],
    num_heads: int,
    rate: float = 0.0,
    rng: RngStream | None = None,
    valid: np.ndarray | None = None,
    capture: str = "pre",
) -> tuple[Tensor, list[Tensor]]:
    """Multi-head self-attention on ``x`` of shape ``(n, d)`` or ``(B, n, d)``.

    ``layer_params`` needs ``wq``, ``wk``, ``wv`` and ``wo``. Returns the
    output and a list of ``num_heads`` attention matrices, each ``(n, n)``
    (or ``(B, n, n)`` for batched input).
    """
    x = as_tensor(x)
    if x.ndim not in (2, 3):
        raise ValueError(f"expected (n, d) or (B, n, d) input, got {x.shape}")
    d = x.shape[-1]
    if d % num_heads:
        raise ValueError(f"hidden size {d} is not divisible by {num_heads} heads")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    p = {k: as_tensor(v) for k, v in layer_params.items()}
    out, probs = _mha(x, p, num_heads, rate, rng, valid, capture, None, "attn")
    if squeeze:
        return out.reshape(*out.shape[1:]), [probs[0, i] for i in range(num_heads)]
    return out, [probs[:, i] for i in range(num_heads)]


def feed_forward(
    x,
    layer_params: Mapping[str, Tensor | np.ndarray],
    rate: float = 0.0,
    rng: RngStream | None = None,
    masks: dict | None = None,
    site: str = "ffn",
) -> Tensor:
    """``relu(x W1 + b1) W2 + b2`` with dropout after the activation."""
    x = as_tensor(x)
    p = {k: as_tensor(v) for k, v in layer_params.items()}
    if x.shape[-1] != p["w1"].shape[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match W1 rows {p['w1'].shape[0]}")
    act = (x @ p["w1"] + p["b1"]).relu()
    act, mask = dropout(act, rate, None if rng is None else rng.child(_SITE_FFN_ACT))
    if masks is not None:
        masks[f"{site}.act"] = mask
    return act @ p["w2"] + p["b2"]


def forward_pass(
    tokens: Sequence[int] | Sequence[Sequence[int]],
    params: Mapping[str, Tensor | np.ndarray],
    cfg: ModelConfig,
    rng: RngStream | None = None,
    pass_id: int = 0,
    train: bool = True,
) -> ForwardTrace:
    """Run one dropout-sampled pass and record its trace.

    ``tokens`` is either one sequence or a batch of sequences. With
    ``train=False`` (or a zero dropout rate) no dropout is applied and the
    pass is a deterministic function of (tokens, params).
    """
    if len(tokens) == 0:
        raise ValueError("empty sequence")
    batch = [tokens] if np.isscalar(tokens[0]) else tokens
    ids, valid = encode_batch(batch, cfg)
    rate = cfg.dropout_rate if train else 0.0
    pass_rng = None if rng is None or rate == 0.0 else rng.child(pass_id)
    p = {k: as_tensor(v) for k, v in params.items()}
    masks: dict[str, np.ndarray] = {}

    def site_rng(layer: int) -> RngStream | None:
        return None if pass_rng is None else pass_rng.child(layer)

    n = ids.shape[1]
    x = p["tok_emb"].take_rows(ids) + p["pos_emb"][:n]
    x, masks["emb"] = dropout(x, rate, None if pass_rng is None else pass_rng.child(0, _SITE_EMB))

    hidden, attns = [], []
    for i in range(cfg.num_layers):
        names = layer_names(i)
        lp = {k: p[v] for k, v in names.items()}
        lrng = site_rng(i + 1)
        a, probs = _mha(x, lp, cfg.num_heads, rate, lrng, valid, cfg.attention_capture, masks, f"layers.{i}.attn")
        a, masks[f"layers.{i}.attn.out"] = dropout(a, rate, None if lrng is None else lrng.child(_SITE_ATTN_OUT))
        x = (x + a).layer_norm(lp["ln1_g"], lp["ln1_b"])
        f = feed_forward(x, lp, rate, lrng, masks, f"layers.{i}.ffn")
        f, masks[f"layers.{i}.ffn.out"] = dropout(f, rate, None if lrng is None else lrng.child(_SITE_FFN_OUT))
        x = (x + f).layer_norm(lp["ln2_g"], lp["ln2_b"])
        hidden.append(x)
        attns.append(probs)

    weights = valid / valid.sum(axis=1, keepdims=True)
    pooled = (x * weights[:, :, None]).sum(axis=1)
    logits = pooled @ p["head.w"] + p["head.b"]
    return ForwardTrace(hidden, attns, logits, valid, masks, pass_id)


def predict(sequences: Sequence[Sequence[int]], params: Mapping[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """Inference-mode logits, shape ``(B, C)``."""
    return forward_pass(sequences, params, cfg, train=False).logits.data


# -- checkpoint file ---------------------------------------------------------


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], cfg: ModelConfig | None = None) -> None:
    """Write a versioned JSON map ``name -> {shape, data}`` (row-major).

    Floats are written with ``repr`` precision, so a load reproduces every
    value exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg) if cfg is not None else None,
        "blocks": [
            {"name": name, "shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in params.items()
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an lrdrop checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {}
    for block in doc["blocks"]:
        arr = np.asarray(block["data"], dtype=np.float64)
        shape = tuple(block["shape"])
        if arr.size != math.prod(shape):
            raise ValueError(f"{path}: block {block['name']} has {arr.size} values for shape {shape}")
        params[block["name"]] = arr.reshape(shape)
    cfg = ModelConfig(**doc["config"]) if doc.get("config") else None
    return params, cfg
