"""Cross-validation splits with 6:2:2 train/val/test partitions."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..validation import DataError

PARTITIONS = ("train", "val", "test")


def largest_remainder(total: int, ratio: Sequence[float]) -> List[int]:
    """Apportion ``total`` items by ``ratio``; ties go to the earlier entry."""
    ratio = np.asarray(ratio, dtype=np.float64)
    if total < 0 or ratio.min() < 0 or ratio.sum() <= 0:
        raise ValueError("need non-negative total and ratio with positive sum")
    quotas = total * ratio / ratio.sum()
    sizes = np.floor(quotas).astype(int)
    remainders = quotas - sizes
    order = sorted(range(len(ratio)), key=lambda i: (-remainders[i], i))
    for i in order[: total - sizes.sum()]:
        sizes[i] += 1
    return sizes.tolist()


@dataclass
class DatasetSplit:
    fold_count: int
    ratio: Tuple[int, int, int]
    assignments: List[Dict[str, str]] = field(default_factory=list)

    def partition(self, fold: int, name: str) -> List[str]:
        if name not in PARTITIONS:
            raise KeyError(name)
        return [sid for sid, part in self.assignments[fold].items() if part == name]

    def to_records(self) -> List[Tuple[int, str, str]]:
        return [(f, sid, part) for f, table in enumerate(self.assignments)
                for sid, part in table.items()]

    def write(self, path) -> None:
        lines = [f"{f},{sid},{part}" for f, sid, part in self.to_records()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path, ratio=(6, 2, 2)) -> "DatasetSplit":
        tables: Dict[int, Dict[str, str]] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                f, sid, part = line.split(",")
                fold = int(f)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: expected 'fold,id,partition'") from exc
            if part not in PARTITIONS:
                raise DataError(f"{path}:{lineno}: unknown partition {part!r}")
            tables.setdefault(fold, {})[sid] = part
        folds = [tables[k] for k in sorted(tables)]
        return cls(fold_count=len(folds), ratio=tuple(ratio), assignments=folds)


def split_dataset(samples, ratio=(6, 2, 2), folds: int = 5, seed: int = 0) -> DatasetSplit:
    """Assign every sample to train/val/test for each of ``folds`` folds.

    Samples are shuffled once; fold ``f`` tests on the ``f``-th of ``folds``
    near-equal chunks so test sets are disjoint and cover the data. The
    validation set takes the next samples after the test chunk (cyclically)
    with its size set by largest-remainder apportionment of the ratio.
    """
    ids = [s if isinstance(s, str) else s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataError("sample ids must be unique")
    n = len(ids)
    if folds < 1 or n < folds:
        raise DataError(f"need at least {folds} samples for {folds} folds, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    chunks = np.array_split(np.arange(n), folds)
    n_val = largest_remainder(n, ratio)[1]
    assignments = []
    for f, chunk in enumerate(chunks):
        test = set(chunk.tolist())
        rest = [(chunk[-1] + 1 + k) % n for k in range(n)] if len(chunk) else list(range(n))
        rest = [i for i in rest if i not in test]
        val = set(rest[:min(n_val, len(rest))])
        table = {}
        for i, sid in enumerate(shuffled):
            table[sid] = "test" if i in test else "val" if i in val else "train"
        assignments.append({sid: table[sid] for sid in ids})
    return DatasetSplit(fold_count=folds, ratio=tuple(ratio), assignments=assignments)
