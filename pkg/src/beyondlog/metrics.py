"""Retrieval, in-batch reasoning and click metrics plus report tables."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .rng import derive_rng


class UndefinedMetricError(ValueError):
    pass


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def _topk(sims: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -sim keeps lower indices first among ties
    return np.argsort(-sims, kind="stable")[:k]


# ------------------------------------------------------------------ retrieval

def hr_at_k(sequences: Sequence[Sequence[int]], targets: Sequence[int], pool_ids: Sequence[int],
            pool: np.ndarray, k: int) -> float:
    """Share of impressions whose target is among the union of each history item's top-k pool neighbours."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(targets) == 0:
        raise UndefinedMetricError("no impressions")
    row = {int(i): r for r, i in enumerate(pool_ids)}
    P = _unit(pool)
    hits = 0
    for seq, target in zip(sequences, targets):
        if len(seq) == 0:
            continue
        found = set()
        for it in seq:
            sims = P @ P[row[int(it)]]
            found.update(int(pool_ids[j]) for j in _topk(sims, k))
        hits += int(int(target) in found)
    return hits / len(targets)


@dataclass
class SpuHitRate:
    rate: float | None
    n_queries: int
    n_singletons: int


def sm_hr_at_k(item_ids: Sequence[int], vectors: np.ndarray, spu: Mapping[int, int], k: int) -> SpuHitRate:
    """Same-SPU hit rate among each query's top-k neighbours (query excluded)."""
    V = _unit(vectors)
    ids = [int(i) for i in item_ids]
    groups: dict[int, int] = {}
    for i in ids:
        groups[spu[i]] = groups.get(spu[i], 0) + 1
    hits = n = singles = 0
    for r, i in enumerate(ids):
        if groups[spu[i]] < 2:
            singles += 1
            continue
        sims = V @ V[r]
        sims[r] = -np.inf
        top = _topk(sims, k)
        n += 1
        hits += int(any(spu[ids[j]] == spu[i] for j in top))
    return SpuHitRate(hits / n if n else None, n, singles)


def macro_recall(group_rates: Mapping[str, float | None]) -> float:
    """Unweighted mean of per-group hit rates; empty groups are skipped."""
    vals = []
    for g, r in group_rates.items():
        if r is None or (isinstance(r, float) and np.isnan(r)):
            warnings.warn(f"group {g!r} is empty and is left out of the macro mean", stacklevel=2)
            continue
        vals.append(float(r))
    if not vals:
        raise UndefinedMetricError("no non-empty groups")
    return float(np.mean(vals))


# ------------------------------------------------------------------ in-batch metrics

@dataclass
class SeqEval:
    """One sequence's predictions and its K sampled negatives (rows are vectors)."""
    mask_pred: np.ndarray
    mask_gt: np.ndarray
    fill_pred: np.ndarray
    negatives: np.ndarray


@dataclass
class IBResult:
    ppl: float
    acc: float
    n_sequences: int
    n_slots: int
    skipped_slots: int = 0


def _slot_scores(pred: np.ndarray, pos: np.ndarray, negs: np.ndarray) -> tuple[float, float]:
    cp = float(pred @ pos)
    cn = negs @ pred
    logits = np.concatenate([[cp], cn])
    m = logits.max()
    logp = cp - (m + np.log(np.exp(logits - m).sum()))
    return logp, float(cp > cn.max())


def ib_metrics(batch: Sequence[SeqEval], slot_kind: str) -> IBResult:
    """In-batch perplexity and accuracy, cosine logits without temperature.

    Per-sequence values are averaged arithmetically. FILL slots take as
    positive the same sequence's masked ground truth closest to the prediction;
    sequences without one are skipped and counted.
    """
    if slot_kind not in ("MASK", "FILL"):
        raise ValueError("slot_kind must be MASK or FILL")
    ppls, accs = [], []
    n_slots = skipped = 0
    for s in batch:
        negs = _unit(s.negatives)
        if negs.ndim != 2 or len(negs) < 1:
            raise ValueError("need K >= 1 negatives per sequence")
        if slot_kind == "MASK":
            preds, gts = _unit(s.mask_pred), _unit(s.mask_gt)
            pairs = list(zip(preds, gts))
        else:
            preds = _unit(s.fill_pred)
            if len(preds) == 0:
                continue
            if len(s.mask_gt) == 0:
                skipped += len(preds)
                continue
            gts = _unit(s.mask_gt)
            pairs = [(p, gts[int(np.argmax(gts @ p))]) for p in preds]
        if not pairs:
            continue
        lp, ac = zip(*(_slot_scores(p, g, negs) for p, g in pairs))
        ppls.append(float(np.exp(-np.mean(lp))))
        accs.append(float(np.mean(ac)))
        n_slots += len(pairs)
    if not ppls:
        return IBResult(float("nan"), float("nan"), 0, 0, skipped)
    return IBResult(float(np.mean(ppls)), float(np.mean(accs)), len(ppls), n_slots, skipped)


def collect_eval(pred: np.ndarray, batch, H: np.ndarray, negatives: np.ndarray) -> list[SeqEval]:
    """Turn one forward pass over a t=1 batch into per-sequence eval records."""
    out = []
    B = batch.size
    for b in range(B):
        m = np.flatnonzero(batch.mask_gt[b] >= 0)
        f = np.flatnonzero(batch.fill[b])
        neg_ids = [negatives[b, c] for c in range(B) if c != b]
        out.append(SeqEval(pred[b, m], H[batch.mask_gt[b, m]], pred[b, f], H[neg_ids]))
    return out


def evaluate_dllm(model, seqs, H: np.ndarray, seed: int = 0) -> dict:
    """IB-PPL / IB-ACC for MASK and FILL slots on held-out token sequences."""
    from . import dllm
    rng = derive_rng(seed, "dllm", "eval")
    recs = []
    for batch in dllm.eval_batches(seqs, model.config):
        neg = dllm.sample_negatives(batch, rng)
        recs.extend(collect_eval(dllm.predict(model, H, batch), batch, H, neg))
    mask = ib_metrics(recs, "MASK")
    fill = ib_metrics(recs, "FILL")
    return {"ib_ppl_mask": mask.ppl, "ib_acc_mask": mask.acc, "ib_ppl_fill": fill.ppl, "ib_acc_fill": fill.acc,
            "n_eval_sequences": mask.n_sequences, "n_fill_slots": fill.n_slots, "skipped_fill_slots": fill.skipped_slots}


# ------------------------------------------------------------------ click metrics

def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_pos > score_neg), ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(users: Sequence[int], scores: Sequence[float], labels: Sequence[int]) -> float:
    """Impression-weighted mean of per-user AUC over users with both classes."""
    users = np.asarray(users)
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    total = weight = 0.0
    for u in np.unique(users):
        m = users == u
        if y[m].min() == y[m].max():
            continue
        w = float(m.sum())
        total += w * auc(s[m], y[m])
        weight += w
    if weight == 0:
        raise UndefinedMetricError("no user has both classes")
    return total / weight


# ------------------------------------------------------------------ reports

@dataclass
class MetricReport:
    name: str
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"name": self.name, **self.values, **self.counts}


def fill_ratio(n_fill: int, n_observed: int) -> float:
    total = n_fill + n_observed
    return n_fill / total if total else 0.0


def table3_report(rows: Sequence[tuple[str, dict, dict]]) -> list[MetricReport]:
    """``rows`` holds (variant name, eval dict from evaluate_dllm, counts with n_fill/n_observed)."""
    out = []
    for name, ev, counts in rows:
        vals = {
            "fill_ratio_pct": 100.0 * fill_ratio(counts["n_fill"], counts["n_observed"]),
            "ib_ppl_mask": ev["ib_ppl_mask"], "ib_acc_mask_pct": 100.0 * ev["ib_acc_mask"],
            "ib_ppl_fill": ev["ib_ppl_fill"], "ib_acc_fill_pct": 100.0 * ev["ib_acc_fill"],
        }
        out.append(MetricReport(name, vals, dict(counts)))
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.4f}"
    return str(v)


def aligned_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def to_jsonl(rows: Sequence[dict]) -> str:
    def clean(v):
        if isinstance(v, (np.floating, float)):
            v = float(v)
            return None if np.isnan(v) else round(v, 10)
        if isinstance(v, np.integer):
            return int(v)
        return v
    return "".join(json.dumps({k: clean(v) for k, v in r.items()}, sort_keys=False) + "\n" for r in rows)
