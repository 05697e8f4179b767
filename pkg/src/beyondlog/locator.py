"""Gap location in observed logs and self-supervised label positions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .baseline_rec import CoocModel, rank_of

SCHEMES = ("TD", "CD", "TD_AND_CD", "TD_UNION_CD")

OBS, FILL, MASK = "obs", "fill", "mask"


class OverlapError(ValueError):
    pass


@dataclass
class LocatorConfig:
    tau_time: float = 3600.0
    n_rank: int = 50
    tau_coh: float = 0.1
    scheme: str = "TD_AND_CD"

    def __post_init__(self):
        if self.tau_time <= 0:
            raise ValueError("tau_time must be > 0")
        if self.n_rank < 1:
            raise ValueError("n_rank must be >= 1")
        if self.tau_coh <= 0:
            raise ValueError("tau_coh must be > 0")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")


@dataclass(frozen=True)
class Slot:
    kind: str
    item_id: int | None = None    # observed item, or ground truth for a mask slot

    def to_json(self) -> dict:
        return {"tag": self.kind} if self.item_id is None else {"tag": self.kind, "item_id": self.item_id}

    @classmethod
    def from_json(cls, d: dict) -> "Slot":
        return cls(d["tag"], d.get("item_id"))


@dataclass
class TokenSeq:
    user_id: int
    slots: list[Slot] = field(default_factory=list)

    def count(self, kind: str) -> int:
        return sum(s.kind == kind for s in self.slots)

    def observed_ids(self) -> list[int]:
        return [s.item_id for s in self.slots if s.kind == OBS]


def rule_filter(items: Sequence[int], ts: Sequence[float], primary: Mapping[int, str],
                cfg: LocatorConfig) -> list[int]:
    """Positions t whose transition (t, t+1) passes the scheme."""
    out = []
    for t in range(len(items) - 1):
        td = ts[t + 1] - ts[t] > cfg.tau_time
        cd = primary[items[t]] != primary[items[t + 1]]
        keep = {"TD": td, "CD": cd, "TD_AND_CD": td and cd, "TD_UNION_CD": td or cd}[cfg.scheme]
        if keep:
            out.append(t)
    return out


def model_filter(candidates: Sequence[int], model: CoocModel, items: Sequence[int],
                 cfg: LocatorConfig) -> list[int]:
    """Keep transitions whose next item ranks below ``n_rank``."""
    return [t for t in candidates if rank_of(model, items[:t + 1], items[t + 1]) > cfg.n_rank]


def delta_p(model: CoocModel, items: Sequence[int]) -> np.ndarray:
    """Δp_t for t = 1..len-2 (nan elsewhere)."""
    out = np.full(len(items), np.nan)
    for t in range(1, len(items) - 1):
        nxt = items[t + 1]
        out[t] = model.distribution(items[:t + 1])[nxt] - model.distribution(items[:t])[nxt]
    return out


def label_positions(model: CoocModel, items: Sequence[int], cfg: LocatorConfig,
                    p_u: Sequence[int] = ()) -> list[int]:
    if len(items) < 3:
        return []
    dp = delta_p(model, items)
    blocked = set(p_u)
    return [t for t in range(1, len(items) - 1) if dp[t] > cfg.tau_coh and t not in blocked]


def locate(items: Sequence[int], ts: Sequence[float], primary: Mapping[int, str], model: CoocModel,
           cfg: LocatorConfig) -> tuple[list[int], list[int]]:
    """``(P_U, P_L)`` for one observed sequence."""
    if len(items) < 2:
        return [], []
    p_u = model_filter(rule_filter(items, ts, primary, cfg), model, items, cfg)
    p_l = label_positions(model, items, cfg, p_u)
    return p_u, p_l


def build_token_sequence(user_id: int, items: Sequence[int], p_l: Sequence[int],
                         p_u: Sequence[int]) -> TokenSeq:
    """Replace P_L items by labelled slots; insert a fill after each P_U position."""
    if set(p_l) & set(p_u):
        raise OverlapError(f"labelled and gap positions overlap: {sorted(set(p_l) & set(p_u))}")
    lab, gaps = set(p_l), set(p_u)
    slots = []
    for t, it in enumerate(items):
        slots.append(Slot(MASK, int(it)) if t in lab else Slot(OBS, int(it)))
        if t in gaps:
            slots.append(Slot(FILL))
    return TokenSeq(user_id, slots)


def build_token_sequences(observed: Sequence[Sequence[int]], p_l: Sequence[Sequence[int]],
                          p_u: Sequence[Sequence[int]], user_ids: Sequence[int] | None = None) -> list[TokenSeq]:
    ids = list(user_ids) if user_ids is not None else list(range(len(observed)))
    return [build_token_sequence(u, s, l, g) for u, s, l, g in zip(ids, observed, p_l, p_u)]


def gap_precision_recall(flags: Sequence[Sequence[int]], true_gaps: Sequence[Sequence[int]]) -> tuple[float, float]:
    tp = n_flag = n_true = 0
    for f, g in zip(flags, true_gaps):
        f, g = set(f), set(g)
        tp += len(f & g)
        n_flag += len(f)
        n_true += len(g)
    return (tp / n_flag if n_flag else 0.0), (tp / n_true if n_true else 0.0)


def random_baseline_precision(lengths: Sequence[int], true_gaps: Sequence[Sequence[int]]) -> float:
    """Expected precision of flagging transitions uniformly at random."""
    positions = sum(max(n - 1, 0) for n in lengths)
    hits = sum(len({g for g in gs if 0 <= g}) for gs in true_gaps)
    return hits / positions if positions else 0.0


def save_token_sequences(path: str | Path, seqs: Sequence[TokenSeq]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in seqs:
            f.write(json.dumps({"user_id": s.user_id, "slots": [x.to_json() for x in s.slots]}) + "\n")


def load_token_sequences(path: str | Path) -> list[TokenSeq]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            d = json.loads(line)
            out.append(TokenSeq(d["user_id"], [Slot.from_json(x) for x in d["slots"]]))
    return out
