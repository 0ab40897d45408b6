"""k-pass training loop, evaluation and the study runners."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .config import ExperimentConfig
from .data import Dataset, batches, generate_task, nested_subset, split
from .losses import Ablation, LossBreakdown, LossWeights, total_objective
from .ops import cross_entropy
from .tensor import GradientTape, NonFiniteError, RngStream, backward
from .transformer import ModelConfig, ModelParams, forward_pass, init_params, save_checkpoint

log = logging.getLogger(__name__)

EVAL_CHUNK = 512


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "OptimizerState":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


def adam_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], opt: OptimizerState) -> ModelParams:
    """One Adam step (decoupled weight decay). Returns new arrays; inputs are untouched."""
    opt.step += 1
    t = opt.step
    new = {}
    for name, p in params.items():
        g = grads[name]
        m = opt.m.get(name, np.zeros_like(p))
        v = opt.v.get(name, np.zeros_like(p))
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        opt.m[name], opt.v[name] = m, v
        m_hat = m / (1.0 - opt.beta1**t)
        v_hat = v / (1.0 - opt.beta2**t)
        update = m_hat / (np.sqrt(v_hat) + opt.eps)
        if opt.weight_decay:
            update = update + opt.weight_decay * p
        new[name] = p - opt.lr * update
    return new


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def train_step(
    batch: Dataset,
    params: ModelParams,
    opt: OptimizerState,
    cfg: ModelConfig,
    weights: LossWeights,
    k: int,
    rng: RngStream,
    ablation: Ablation = Ablation(),
    hsr_layers: str = "all",
    clip_norm: float | None = 1.0,
    ce_scale: float = 1.0,
) -> tuple[ModelParams, LossBreakdown]:
    """Run ``k`` dropout passes, build the objective, backprop once, apply Adam.

    Pass ``j`` draws its dropout masks from ``rng.child(j, ...)``. With
    ``k == 1`` this is plain dropout training (cross-entropy only).
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    tape = GradientTape()
    try:
        # non-finite values surface as NonFiniteError, so numpy's overflow warnings are redundant
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            leaves = tape.watch(params)
            traces = [forward_pass(batch.sequences, leaves, cfg, rng, pass_id=j) for j in range(k)]
            loss, breakdown = total_objective(traces, batch.labels, weights, ablation, hsr_layers, ce_scale)
            grads = backward(loss, tape)
    except NonFiniteError as exc:
        raise NumericFailure(f"step {opt.step + 1}: {exc}") from exc
    clip_by_global_norm(grads, clip_norm)
    new_params = adam_update(params, grads, opt)
    if not all(np.isfinite(p).all() for p in new_params.values()):
        raise NumericFailure(f"step {opt.step}: parameters became non-finite ({breakdown})")
    return new_params, breakdown


def predict_logits(params: Mapping[str, np.ndarray], dataset: Dataset, cfg: ModelConfig) -> np.ndarray:
    seqs = dataset.sequences
    chunks = [
        forward_pass(seqs[i : i + EVAL_CHUNK], params, cfg, train=False).logits.data
        for i in range(0, len(seqs), EVAL_CHUNK)
    ]
    return np.concatenate(chunks, axis=0)


def evaluate(params: Mapping[str, np.ndarray], dataset: Dataset, cfg: ModelConfig) -> float:
    """Argmax accuracy with dropout disabled."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(params, dataset, cfg)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def eval_loss(params: Mapping[str, np.ndarray], dataset: Dataset, cfg: ModelConfig) -> float:
    """Mean cross-entropy with dropout disabled."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(params, dataset, cfg)
    return cross_entropy(logits, dataset.labels).item()


# -- full runs ----------------------------------------------------------------


@dataclass
class RunResult:
    seed: int
    config: dict
    epoch_losses: list[dict]
    test_accuracy: float
    best_test_accuracy: float
    best_epoch: int
    val_accuracy: float
    params: ModelParams | None = field(default=None, repr=False, compare=False)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "test_accuracy": self.test_accuracy,
            "best_test_accuracy": self.best_test_accuracy,
            "best_epoch": self.best_epoch,
            "val_accuracy": self.val_accuracy,
        }


def load_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    pool = generate_task(cfg.task, cfg.task_size, cfg.seq_len, cfg.data_seed)
    train, val, test = split(pool)
    if cfg.train_size is not None:
        train = nested_subset(train, cfg.train_size)
    return train, val, test


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def run_training(
    cfg: ExperimentConfig,
    seed: int | None = None,
    log_file: IO[str] | None = None,
    checkpoint_path: str | Path | None = None,
    keep_params: bool = True,
) -> RunResult:
    """Train one seed end to end.

    Per-step loss records go to ``log_file`` as JSON lines; the parameters
    with the best test accuracy are written to ``checkpoint_path``.
    """
    seed = cfg.seeds[0] if seed is None else seed
    mcfg = cfg.model()
    train, val, test = load_splits(cfg)
    params = init_params(mcfg, seed)
    opt = OptimizerState.from_config(cfg)
    weights, ablation = cfg.weights(), cfg.ablation()

    best_acc = evaluate(params, test, mcfg)
    best_epoch, best_params = 0, params
    epoch_losses: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        sums = {"ce": 0.0, "hsr": 0.0, "mhar": 0.0, "or": 0.0, "total": 0.0}
        batch_list = batches(train, cfg.batch_size, _epoch_seed(seed, epoch))
        for batch in batch_list:
            step_rng = RngStream(seed, opt.step + 1)
            params, br = train_step(
                batch, params, opt, mcfg, weights, cfg.k, step_rng, ablation, cfg.hsr_layers, cfg.clip_norm
            )
            record = br.to_record(opt.step)
            if log_file is not None:
                log_file.write(json.dumps({**record, "seed": seed, "epoch": epoch}) + "\n")
            for key in sums:
                sums[key] += record[key]
        acc = evaluate(params, test, mcfg)
        epoch_losses.append({"epoch": epoch, **{k: v / len(batch_list) for k, v in sums.items()}, "test_accuracy": acc})
        log.debug("seed %d epoch %d: %s", seed, epoch, epoch_losses[-1])
        if acc > best_acc:
            best_acc, best_epoch, best_params = acc, epoch, params

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best_params, mcfg)
    return RunResult(
        seed=seed,
        config=cfg.model_dump(),
        epoch_losses=epoch_losses,
        test_accuracy=evaluate(params, test, mcfg),
        best_test_accuracy=best_acc,
        best_epoch=best_epoch,
        val_accuracy=evaluate(params, val, mcfg),
        params=params if keep_params else None,
    )


def _run_one(args) -> RunResult:
    cfg, seed, keep = args
    return run_training(cfg, seed, keep_params=keep)


def run_seeds(cfg: ExperimentConfig, keep_params: bool = False, workers: int | None = None) -> list[RunResult]:
    """One run per seed in ``cfg.seeds``; results come back in seed order."""
    workers = cfg.workers if workers is None else workers
    jobs = [(cfg, s, keep_params) for s in cfg.seeds]
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def _accuracy_row(label_key: str, label, results: list[RunResult]) -> dict:
    accs = [r.test_accuracy for r in results]
    mean, std = mean_std(accs)
    return {label_key: label, "mean_acc": mean, "std_acc": std, "accs": accs}


# -- studies --------------------------------------------------------------------

ABLATION_ROWS = (
    ("LR-Drop", {}),
    ("w/o HSR", {"hsr_on": False}),
    ("w/o MHAR", {"mhar_on": False}),
    ("w/o OR", {"or_on": False}),
)


def ablation_variants(base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    return [(name, base.variant(k=max(base.k, 2), **flags)) for name, flags in ABLATION_ROWS]


def run_ablation(base: ExperimentConfig) -> list[dict]:
    """Full objective and the three single-term-removed variants, in that order."""
    return [_accuracy_row("method", name, run_seeds(cfg)) for name, cfg in ablation_variants(base)]


def size_variants(base: ExperimentConfig) -> dict[str, ExperimentConfig]:
    return {
        "baseline": base.variant(k=1),
        "rdrop": base.variant(k=2, alpha=0.0, beta=0.0),
        "lrdrop": base.variant(k=max(base.k, 2)),
    }


def run_size_study(base: ExperimentConfig, sizes: Sequence[int] | None = None) -> list[dict]:
    """Mean test accuracy per training-set size for the baseline, R-Drop and LR-Drop."""
    sizes = list(base.study_sizes if sizes is None else sizes)
    train_pool = base.task_size * 8 // 10
    for s in sizes:
        if s > train_pool:
            raise ValueError(f"size {s} exceeds the training pool ({train_pool})")
    rows = []
    for s in sizes:
        row = {"size": s}
        for column, cfg in size_variants(base).items():
            row[column] = mean_std([r.test_accuracy for r in run_seeds(cfg.variant(train_size=s))])[0]
        rows.append(row)
    return rows


def run_kpass(base: ExperimentConfig, ks: Sequence[int] = (1, 2, 3)) -> list[dict]:
    return [_accuracy_row("k", k, run_seeds(base.variant(k=k))) for k in ks]


@dataclass(frozen=True)
class Comparison:
    gap: float  # mean(a) - mean(b)
    t: float
    p: float
    df: float


def compare_runs(a: Sequence[float | RunResult], b: Sequence[float | RunResult]) -> Comparison:
    """Welch two-sample t-test on accuracies.

    When both samples have zero variance the statistic is undefined: equal
    means give ``t = 0, p = 1``; different means give ``t = +/-inf, p = 0``.
    """
    xa = np.array([r.test_accuracy if isinstance(r, RunResult) else r for r in a], dtype=np.float64)
    xb = np.array([r.test_accuracy if isinstance(r, RunResult) else r for r in b], dtype=np.float64)
    if xa.size < 2 or xb.size < 2:
        raise ValueError("need at least 2 runs per side")
    gap = float(xa.mean() - xb.mean())
    va, vb = xa.var(ddof=1) / xa.size, xb.var(ddof=1) / xb.size
    se2 = va + vb
    # constant samples can still show a rounding-level variance, so test the spread directly
    if np.ptp(xa) == 0 and np.ptp(xb) == 0:
        if gap == 0:
            return Comparison(gap, 0.0, 1.0, float("nan"))
        return Comparison(gap, math.copysign(math.inf, gap), 0.0, float("nan"))
    t = gap / math.sqrt(se2)
    df = se2**2 / (va**2 / (xa.size - 1) + vb**2 / (xb.size - 1))
    p = float(2.0 * stats.t.sf(abs(t), df))
    return Comparison(gap, float(t), p, float(df))


# -- gradient validation ------------------------------------------------------------

TINY_MODEL = ModelConfig(
    vocab_size=11, max_len=5, hidden_size=8, num_layers=2, num_heads=2, ffn_size=16, num_classes=2, dropout_rate=0.1
)


def gradcheck_total_objective(
    cfg: ModelConfig = TINY_MODEL,
    weights: LossWeights = LossWeights(0.1, 0.1, 0.1),
    k: int = 2,
    seed: int = 0,
    batch_size: int = 3,
    max_coords: int = 200,
    step: float = 1e-5,
) -> float:
    """Finite-difference check of the full objective on a small random batch.

    The batch mixes full-length and shorter sequences so padding is exercised.
    Dropout masks are fixed by the rng key, so every evaluation sees the same
    sub-models.
    """
    from .ops import finite_diff_check

    gen = np.random.default_rng(seed)
    lengths = [cfg.max_len] + [int(n) for n in gen.integers(1, cfg.max_len + 1, size=batch_size - 1)]
    seqs = [tuple(int(t) for t in gen.integers(0, cfg.vocab_size, size=n)) for n in lengths]
    labels = gen.integers(0, cfg.num_classes, size=batch_size)
    params = init_params(cfg, seed)
    rng = RngStream(seed, 1)

    def loss_fn(p):
        traces = [forward_pass(seqs, p, cfg, rng, pass_id=j) for j in range(k)]
        return total_objective(traces, labels, weights)[0]

    return finite_diff_check(loss_fn, params, step=step, max_coords=max_coords, seed=seed)
