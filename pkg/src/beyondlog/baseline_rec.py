"""Recency-weighted co-occurrence recommender used to score next items."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class EmptyCorpusError(ValueError):
    pass


class EmptyPrefixError(ValueError):
    pass


@dataclass
class CoocModel:
    vocab_size: int
    window: int = 5
    decay: float = 0.8
    alpha: float = 1.0
    counts: dict[int, dict[int, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.window < 1 or self.alpha <= 0:
            raise ValueError("window must be >= 1 and alpha > 0")
        self._rows: dict[int, np.ndarray] = {}

    def row(self, a: int) -> np.ndarray:
        """Dense count row C[a -> .]; cached."""
        r = self._rows.get(a)
        if r is None:
            r = np.zeros(self.vocab_size, dtype=np.float64)
            for b, c in self.counts.get(a, {}).items():
                r[b] = c
            self._rows[a] = r
        return r

    def scores(self, prefix: Sequence[int]) -> np.ndarray:
        if len(prefix) == 0:
            raise EmptyPrefixError("next-item scoring needs a non-empty prefix")
        s = np.zeros(self.vocab_size, dtype=np.float64)
        recent = list(prefix[-self.window:])[::-1]
        for lag, w in enumerate(recent):
            if w in self.counts:
                s += self.decay ** lag * self.row(w)
        return s

    def distribution(self, prefix: Sequence[int]) -> np.ndarray:
        s = self.scores(prefix) + self.alpha
        return s / s.sum()


def fit(sequences: Iterable[Sequence[int]], vocab_size: int, window: int = 5, decay: float = 0.8,
        alpha: float = 1.0) -> CoocModel:
    acc: dict[int, dict[int, float]] = defaultdict(lambda: defaultdict(float))
    n = 0
    for seq in sequences:
        n += 1
        seq = list(seq)
        for u in range(len(seq)):
            for v in range(u + 1, min(len(seq), u + window + 1)):
                acc[seq[u]][seq[v]] += decay ** (v - u - 1)
    if n == 0:
        raise EmptyCorpusError("cannot fit on an empty corpus")
    counts = {a: dict(sorted(row.items())) for a, row in sorted(acc.items())}
    return CoocModel(vocab_size, window, decay, alpha, counts)


def next_prob(model: CoocModel, prefix: Sequence[int], j: int) -> float:
    return float(model.distribution(prefix)[j])


def rank_of(model: CoocModel, prefix: Sequence[int], j: int) -> int:
    """1-based rank; ties go to the smaller item id."""
    p = model.distribution(prefix)
    pj = p[j]
    return 1 + int(np.sum(p > pj)) + int(np.sum(p[:j] == pj))


def save(model: CoocModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"vocab_size": model.vocab_size, "window": model.window,
                            "decay": model.decay, "alpha": model.alpha}) + "\n")
        for a, row in model.counts.items():
            for b, c in row.items():
                f.write(json.dumps({"a": a, "b": b, "c": c}) + "\n")


def load(path: str | Path) -> CoocModel:
    with open(path, encoding="utf-8") as f:
        head = json.loads(f.readline())
        counts: dict[int, dict[int, float]] = {}
        for line in f:
            r = json.loads(line)
            counts.setdefault(r["a"], {})[r["b"]] = r["c"]
    return CoocModel(head["vocab_size"], head["window"], head["decay"], head["alpha"], counts)
