"""Dual-pathway click-through-rate model.

Pathway one retrieves the N history items most similar to the target (cosine
on semantic vectors) and attends over them with the target as query. Pathway
two compresses the whole history into M learnable interest anchors and lets
the target attend over those. Both outputs, the target representation and the
user/context features feed an MLP with a sigmoid output.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .metrics import auc
from .nn import F
from .rng import derive_rng


@dataclass
class RankerConfig:
    d_e: int = 8            # SID embedding width
    d_f: int = 4            # encoded side features
    d_s: int = 8            # projected semantic vector
    n_heads: int = 2
    n_retrieve: int = 16
    n_anchors: int = 4
    mlp_hidden: tuple = (128, 64)
    max_history: int = 64
    epochs: int = 8
    batch_size: int = 256
    learning_rate: float = 3e-3
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_anchors < 1 or self.n_retrieve < 1:
            raise ValueError("n_anchors and n_retrieve must be >= 1")
        if self.width % self.n_heads:
            raise ValueError(f"representation width {self.width} not divisible by n_heads {self.n_heads}")
        self.mlp_hidden = tuple(self.mlp_hidden)

    @property
    def width(self) -> int:
        return self.d_e + self.d_f + self.d_s


@dataclass
class Catalog:
    """Per-item inputs: 0-based SID codes (V, L), side features (V, n_f), semantic vectors (V, d)."""
    codes: np.ndarray
    features: np.ndarray
    semantic: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.unit = self.semantic / np.maximum(np.linalg.norm(self.semantic, axis=1, keepdims=True), 1e-12)


@dataclass
class Example:
    user_id: int
    item_id: int
    f_u: np.ndarray
    f_c: np.ndarray
    label: int


@dataclass
class Ranker:
    config: RankerConfig
    params: nn.ParamStore
    trace: list[dict] = field(default_factory=list)


class ProjectionCounter:
    def __init__(self):
        self.count = 0


def init_params(cfg: RankerConfig, cat: Catalog, n_user_feats: int, n_ctx_feats: int,
                rng: np.random.Generator | None = None) -> nn.ParamStore:
    rng = rng or derive_rng(cfg.seed, "ranker", "init")
    P = nn.ParamStore()
    w = cfg.width
    for l in range(cat.codes.shape[1]):
        P.add(f"sid.{l}", rng.normal(scale=0.1, size=(cat.codebook_size, cfg.d_e)).astype(np.float32))
    nn.add_linear(P, rng, "feat", cat.features.shape[1], cfg.d_f)
    nn.add_linear(P, rng, "sem", cat.semantic.shape[1], cfg.d_s, bias=False)
    P.add("aug.sid", rng.normal(scale=0.1, size=cfg.d_e).astype(np.float32))
    P.add("aug.feat", rng.normal(scale=0.1, size=cfg.d_f).astype(np.float32))
    nn.add_attention(P, rng, "esu", w)
    nn.add_attention(P, rng, "anc", w)
    nn.add_attention(P, rng, "tgt", w)
    P.add("anchors", rng.normal(scale=0.5, size=(cfg.n_anchors, w)).astype(np.float32))
    P.add("esu.default", np.zeros(w, dtype=np.float32))
    P.add("anc.default", rng.normal(scale=0.1, size=(cfg.n_anchors, w)).astype(np.float32))
    dims = [3 * w + n_user_feats + n_ctx_feats, *cfg.mlp_hidden, 1]
    for i in range(len(dims) - 1):
        nn.add_linear(P, rng, f"mlp.{i}", dims[i], dims[i + 1])
    return P


# ------------------------------------------------------------------ representations

def item_reps(P, cat: Catalog, rows: np.ndarray | None = None) -> nn.Tensor:
    """x_i = [sum of SID embeddings; encoded side features; projected semantic vector]."""
    rows = np.arange(len(cat.codes)) if rows is None else np.asarray(rows)
    sid = None
    for l in range(cat.codes.shape[1]):
        e = F.take(P[f"sid.{l}"], cat.codes[rows, l])
        sid = e if sid is None else sid + e
    feat = nn.linear(cat.features[rows].astype(np.float32), P, "feat")
    sem = nn.linear(cat.unit[rows].astype(np.float32), P, "sem")
    return F.concat([sid, feat, sem], axis=-1)


def fill_reps(P, vecs: np.ndarray) -> nn.Tensor:
    """Gap slots: learned stand-ins for SID and side features plus the projected fill vector."""
    n = len(vecs)
    ones = np.ones((n, 1), dtype=np.float32)
    sem = nn.linear(np.asarray(vecs, dtype=np.float32), P, "sem")
    return F.concat([P["aug.sid"] * ones, P["aug.feat"] * ones, sem], axis=-1)


# ------------------------------------------------------------------ pathways

def gsu_retrieve(target: np.ndarray, seq: np.ndarray, n: int) -> np.ndarray:
    """Positions of the n most cosine-similar history vectors; ties keep earlier positions."""
    if n < 1:
        raise ValueError("N must be >= 1")
    seq = np.asarray(seq, dtype=np.float64)
    if len(seq) == 0:
        return np.zeros(0, dtype=np.int64)
    t = np.asarray(target, dtype=np.float64)
    sims = (seq @ t) / (np.maximum(np.linalg.norm(seq, axis=1), 1e-12) * max(np.linalg.norm(t), 1e-12))
    return np.argsort(-sims, kind="stable")[:n]


def esu_attend(target_x, retrieved_x, P, n_heads: int) -> nn.Tensor:
    retrieved_x = F.tensor(retrieved_x)
    if retrieved_x.shape[0] == 0:
        return P["esu.default"]
    out = nn.multi_head_attention(F.reshape(F.tensor(target_x), (1, -1)), retrieved_x, retrieved_x, P, n_heads,
                                  name="esu")
    return F.reshape(out, (-1,))


def batch_gather_score(cands_x, cands_sem: np.ndarray, seq_x, seq_sem: np.ndarray, P, n_heads: int, n: int,
                       counter: ProjectionCounter | None = None) -> nn.Tensor:
    """ESU for many candidates over one history, projecting each unique retrieved item once."""
    cands_x, seq_x = F.tensor(cands_x), F.tensor(seq_x)
    C = cands_x.shape[0]
    lists = [gsu_retrieve(cands_sem[c], seq_sem, n) for c in range(C)]
    uniq = sorted(set(int(i) for lst in lists for i in lst))
    if not uniq:
        return F.stack([P["esu.default"]] * C)
    where = {i: j for j, i in enumerate(uniq)}
    kv_in = F.take(seq_x, np.asarray(uniq))
    K = nn.linear(kv_in, P, "esu.k")
    V = nn.linear(kv_in, P, "esu.v")
    if counter is not None:
        counter.count += len(uniq)
    Q = nn.linear(cands_x, P, "esu.q")
    outs = []
    for c, lst in enumerate(lists):
        g = np.asarray([where[int(i)] for i in lst])
        ctx, _ = nn.attend(F.reshape(F.take(Q, np.asarray([c])), (1, 1, -1)),
                           F.reshape(F.take(K, g), (1, len(g), -1)),
                           F.reshape(F.take(V, g), (1, len(g), -1)), n_heads)
        outs.append(F.reshape(nn.linear(ctx, P, "esu.o"), (-1,)))
    return F.stack(outs)


def compress_anchors(seq_x, P, n_heads: int) -> nn.Tensor:
    seq_x = F.tensor(seq_x)
    if seq_x.shape[0] == 0:
        return P["anc.default"]
    return nn.multi_head_attention(P["anchors"], seq_x, seq_x, P, n_heads, name="anc")


def target_extract(target_x, anchors, P, n_heads: int) -> nn.Tensor:
    out = nn.multi_head_attention(F.reshape(F.tensor(target_x), (1, -1)), anchors, anchors, P, n_heads, name="tgt")
    return F.reshape(out, (-1,))


def ctr_logit(h_b, h_a, x_t, f_u, f_c, P, n_layers: int) -> nn.Tensor:
    z = F.concat([F.tensor(h_b), F.tensor(h_a), F.tensor(x_t), F.tensor(np.asarray(f_u, dtype=np.float32)),
                  F.tensor(np.asarray(f_c, dtype=np.float32))], axis=-1)
    return nn.mlp(z, P, "mlp", n_layers)


def predict_ctr(h_b, h_a, x_t, f_u, f_c, P, n_layers: int) -> float:
    logit = ctr_logit(h_b, h_a, x_t, f_u, f_c, P, n_layers).data
    return float(1.0 / (1.0 + np.exp(-float(np.ravel(logit)[0]))))


# ------------------------------------------------------------------ batched model

History = Sequence  # list of int item ids and/or np.ndarray fill vectors


def _mlp_layers(cfg: RankerConfig) -> int:
    return len(cfg.mlp_hidden) + 1


def batch_logits(P, cat: Catalog, examples: Sequence[Example], histories: dict, cfg: RankerConfig) -> nn.Tensor:
    B = len(examples)
    X_items = item_reps(P, cat)
    V = X_items.shape[0]
    fills, seq_rows, seq_sem = [], [], []
    for ex in examples:
        hist = list(histories.get(ex.user_id, []))[-cfg.max_history:]
        rows, sems = [], []
        for s in hist:
            if isinstance(s, (int, np.integer)):
                rows.append(int(s))
                sems.append(cat.unit[int(s)])
            else:
                rows.append(V + len(fills))
                v = np.asarray(s, dtype=np.float64)
                fills.append(v)
                sems.append(v / max(np.linalg.norm(v), 1e-12))
        seq_rows.append(rows)
        seq_sem.append(np.asarray(sems).reshape(len(sems), cat.unit.shape[1]))
    table = F.concat([X_items, fill_reps(P, np.stack(fills))], axis=0) if fills else X_items
    T = max(1, max(len(r) for r in seq_rows))
    N = cfg.n_retrieve
    seq_idx = np.zeros((B, T), dtype=np.int64)
    seq_mask = np.zeros((B, T), dtype=bool)
    ret_idx = np.zeros((B, N), dtype=np.int64)
    ret_mask = np.zeros((B, N), dtype=bool)
    for b, ex in enumerate(examples):
        rows = seq_rows[b]
        seq_idx[b, :len(rows)] = rows
        seq_mask[b, :len(rows)] = True
        if rows:
            pick = gsu_retrieve(cat.unit[ex.item_id], seq_sem[b], N)
            ret_idx[b, :len(pick)] = np.asarray(rows)[pick]
            ret_mask[b, :len(pick)] = True
    has = seq_mask.any(axis=1).astype(np.float32)[:, None]
    has = np.where(has > 0, 1.0, 0.0).astype(np.float32)
    ret_mask[~seq_mask.any(axis=1), 0] = True       # keep softmax finite; replaced by defaults below
    seq_mask[~seq_mask.any(axis=1), 0] = True
    targets = np.asarray([ex.item_id for ex in examples])
    x_t = F.take(X_items, targets)                                  # (B, w)
    q = F.reshape(x_t, (B, 1, -1))
    X_ret = F.take(table, ret_idx)
    h_b = F.reshape(nn.multi_head_attention(q, X_ret, X_ret, P, cfg.n_heads, name="esu", key_mask=ret_mask), (B, -1))
    h_b = h_b * has + P["esu.default"] * (1.0 - has)
    X_seq = F.take(table, seq_idx)
    A = P["anchors"] * np.ones((B, 1, 1), dtype=np.float32)
    A_t = nn.multi_head_attention(A, X_seq, X_seq, P, cfg.n_heads, name="anc", key_mask=seq_mask)
    A_t = A_t * has[:, :, None] + P["anc.default"] * (1.0 - has[:, :, None])
    h_a = F.reshape(nn.multi_head_attention(q, A_t, A_t, P, cfg.n_heads, name="tgt"), (B, -1))
    f_u = np.stack([ex.f_u for ex in examples]).astype(np.float32)
    f_c = np.stack([ex.f_c for ex in examples]).astype(np.float32)
    z = F.concat([h_b, h_a, x_t, F.tensor(f_u), F.tensor(f_c)], axis=-1)
    return F.reshape(nn.mlp(z, P, "mlp", _mlp_layers(cfg)), (B,))


def ctr_loss(P, cat, examples, histories, cfg) -> nn.Tensor:
    logits = batch_logits(P, cat, examples, histories, cfg)
    return F.bce_with_logits(logits, np.asarray([ex.label for ex in examples], dtype=np.float32))


def score(model: Ranker, cat: Catalog, examples: Sequence[Example], histories: dict,
          batch_size: int = 512) -> np.ndarray:
    P = model.params.tensors(False)
    out = []
    for s in range(0, len(examples), batch_size):
        logits = batch_logits(P, cat, examples[s:s + batch_size], histories, model.config).data
        out.append(1.0 / (1.0 + np.exp(-logits.astype(np.float64))))
    return np.concatenate(out) if out else np.zeros(0)


def split_examples(examples: Sequence[Example], test_frac: float, seed: int):
    rng = derive_rng(seed, "ranker", "split")
    order = rng.permutation(len(examples))
    n_test = int(round(len(examples) * test_frac))
    test = sorted(order[:n_test].tolist())
    train = sorted(order[n_test:].tolist())
    return [examples[i] for i in train], [examples[i] for i in test]


def train_ctr(examples: Sequence[Example], histories: dict, cat: Catalog, cfg: RankerConfig,
              test: Sequence[Example] | None = None, log=None) -> Ranker:
    if not examples:
        raise ValueError("no training impressions")
    ex0 = examples[0]
    P = init_params(cfg, cat, len(ex0.f_u), len(ex0.f_c))
    model = Ranker(cfg, P)
    rng = derive_rng(cfg.seed, "ranker", "train")
    steps_per_epoch = max(1, int(np.ceil(len(examples) / cfg.batch_size)))
    ocfg = nn.OptimConfig(learning_rate=cfg.learning_rate, warmup_steps=min(50, steps_per_epoch),
                          total_steps=max(cfg.epochs * steps_per_epoch, steps_per_epoch), min_lr_fraction=0.05)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(examples))
        losses = []
        for s in range(steps_per_epoch):
            batch = [examples[i] for i in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
            T = P.tensors(True)
            loss = ctr_loss(T, cat, batch, histories, cfg)
            loss.backward()
            nn.adam_step(P, {n: t.grad if t.grad is not None else np.zeros_like(t.data) for n, t in T.items()},
                         ocfg, step)
            losses.append(loss.item())
            step += 1
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if test:
            rec["test_auc"] = auc(score(model, cat, test, histories), [ex.label for ex in test])
        model.trace.append(rec)
        if log:
            log(rec)
    return model


def save_scores(path: str | Path, examples: Sequence[Example], scores: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex, s in zip(examples, scores):
            f.write(json.dumps({"user_id": ex.user_id, "item_id": ex.item_id, "score": round(float(s), 8)}) + "\n")
