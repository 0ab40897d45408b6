"""Seeded synthetic sequence-classification tasks.

``parity``
    binary tokens; label is the count of token 1, mod 2.
``majority``
    tokens from {0, 1, 2}; label 0 when token 1 occurs at least as often as
    token 2, else label 1 (ties go to class 0).
``first-token``
    tokens from {0..7}; label is the first token mod 4, so the classifier
    has to attend to position 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

TASKS = {
    # name: (vocab_size, num_classes)
    "parity": (2, 2),
    "majority": (3, 2),
    "first-token": (8, 4),
}

Example = tuple[tuple[int, ...], int]


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    vocab_size: int
    num_classes: int
    task_name: str
    seed: int

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def sequences(self) -> list[tuple[int, ...]]:
        return [s for s, _ in self.examples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.examples], dtype=np.int64)

    def _replace(self, examples) -> "Dataset":
        return Dataset(tuple(examples), self.vocab_size, self.num_classes, self.task_name, self.seed)


def label_for(task: str, seq) -> int:
    seq = list(seq)
    if task == "parity":
        return seq.count(1) % 2
    if task == "majority":
        return 0 if seq.count(1) >= seq.count(2) else 1
    if task == "first-token":
        return seq[0] % TASKS["first-token"][1]
    raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")


def generate_task(name: str, size: int, seq_len: int, seed: int) -> Dataset:
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    if size < 1 or seq_len < 1:
        raise ValueError("size and seq_len must be at least 1")
    vocab, classes = TASKS[name]
    rng = np.random.default_rng([seed, size, seq_len, sorted(TASKS).index(name)])
    tokens = rng.integers(0, vocab, size=(size, seq_len))
    examples = tuple((tuple(int(t) for t in row), label_for(name, row.tolist())) for row in tokens)
    return Dataset(examples, vocab, classes, name, seed)


def split(ds: Dataset, ratios=(8, 1, 1)) -> tuple[Dataset, Dataset, Dataset]:
    """Prefix split into train/val/test (examples are already in seeded order)."""
    total = sum(ratios)
    n_train = len(ds) * ratios[0] // total
    n_val = len(ds) * ratios[1] // total
    ex = ds.examples
    return ds._replace(ex[:n_train]), ds._replace(ex[n_train : n_train + n_val]), ds._replace(ex[n_train + n_val :])


def nested_subset(ds: Dataset, size: int) -> Dataset:
    """The first ``size`` examples; smaller subsets are prefixes of larger ones."""
    if size < 1:
        raise ValueError("subset size must be at least 1")
    if size > len(ds):
        raise ValueError(f"subset size {size} exceeds dataset size {len(ds)}")
    return ds._replace(ds.examples[:size])


def batches(ds: Dataset, batch_size: int, epoch_seed: int) -> list[Dataset]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.random.default_rng(epoch_seed).permutation(len(ds))
    ex = ds.examples
    return [ds._replace([ex[i] for i in order[s : s + batch_size]]) for s in range(0, len(ds), batch_size)]


def dump(ds: Dataset, path: str | Path) -> None:
    """Write ``label<TAB>space-separated token ids`` lines."""
    lines = [f"{y}\t{' '.join(map(str, seq))}" for seq, y in ds.examples]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load(path: str | Path, task_name: str, seed: int = 0) -> Dataset:
    vocab, classes = TASKS[task_name]
    examples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        label, _, toks = line.partition("\t")
        seq = tuple(int(t) for t in toks.split())
        y = int(label)
        if not seq or y >= classes or max(seq) >= vocab or min(seq) < 0:
            raise ValueError(f"{path}:{lineno}: invalid example for task {task_name!r}")
        examples.append((seq, y))
    return Dataset(tuple(examples), vocab, classes, task_name, seed)
