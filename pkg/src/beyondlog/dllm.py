"""Bidirectional masked-diffusion transformer over item-vector sequences.

Training masks a random fraction t of the labelled slots of each sequence,
encodes the whole sequence with unmasked self-attention and scores each
masked prediction against its ground-truth item vector and one item drawn
from every other sequence in the batch. Inference fills gap slots with the
predicted (unit-norm) vectors.
"""
from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .locator import FILL, MASK, OBS, Slot, TokenSeq
from .nn import F
from .rng import derive_rng

INFONCE_COS = "INFONCE_COS"
COS_POINTWISE = "COS_POINTWISE"
MSE_POINTWISE = "MSE_POINTWISE"
LOSS_VARIANTS = (INFONCE_COS, COS_POINTWISE, MSE_POINTWISE)


class DLLMConfigError(ValueError):
    pass


class NoNegativesError(ValueError):
    pass


class NoMaskedSlotError(ValueError):
    pass


@dataclass
class DLLMConfig:
    d: int = 32                  # item vector width
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 2
    max_seq_len: int = 64
    temperature: float = 0.07
    batch_size: int = 64
    steps: int = 2000
    learning_rate: float = 0.0075
    warmup_steps: int = 100
    min_lr_fraction: float = 0.0
    loss_variant: str = INFONCE_COS
    t_conditioning: str = "none"      # or "scalar_embedding"
    loss_normalizer: str = "labeled"  # L' = |P_L| ("labeled") or realised mask count ("masked")
    max_grad_norm: float = 1.0       # global-norm clipping; 0 disables
    eval_every: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise DLLMConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.batch_size < 2 and self.loss_variant == INFONCE_COS:
            raise DLLMConfigError("in-batch negatives need batch_size >= 2")
        if self.loss_variant not in LOSS_VARIANTS:
            raise DLLMConfigError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.t_conditioning not in ("none", "scalar_embedding"):
            raise DLLMConfigError("t_conditioning must be 'none' or 'scalar_embedding'")
        if self.loss_normalizer not in ("labeled", "masked"):
            raise DLLMConfigError("loss_normalizer must be 'labeled' or 'masked'")

    @property
    def k_negatives(self) -> int:
        return self.batch_size - 1

    def optim(self) -> nn.OptimConfig:
        return nn.OptimConfig(learning_rate=self.learning_rate, warmup_steps=min(self.warmup_steps, self.steps),
                              total_steps=max(self.steps, 1), min_lr_fraction=self.min_lr_fraction)


def init_params(cfg: DLLMConfig, rng: np.random.Generator | None = None) -> nn.ParamStore:
    rng = rng or derive_rng(cfg.seed, "dllm", "init")
    P = nn.ParamStore()
    nn.add_linear(P, rng, "adapter", cfg.d, cfg.d_model)
    P.add("fill", rng.normal(scale=0.1, size=cfg.d_model).astype(np.float32))
    P.add("pos", rng.normal(scale=0.02, size=(cfg.max_seq_len, cfg.d_model)).astype(np.float32))
    if cfg.t_conditioning == "scalar_embedding":
        P.add("t_emb.w", rng.normal(scale=0.1, size=cfg.d_model).astype(np.float32))
        P.add("t_emb.b", np.zeros(cfg.d_model, dtype=np.float32))
    for i in range(cfg.n_layers):
        nn.add_layer_norm(P, f"blk{i}.ln1", cfg.d_model)
        nn.add_attention(P, rng, f"blk{i}.attn", cfg.d_model)
        nn.add_layer_norm(P, f"blk{i}.ln2", cfg.d_model)
        nn.add_linear(P, rng, f"blk{i}.ff.fc1", cfg.d_model, cfg.ff_mult * cfg.d_model)
        nn.add_linear(P, rng, f"blk{i}.ff.fc2", cfg.ff_mult * cfg.d_model, cfg.d_model)
    nn.add_layer_norm(P, "ln_f", cfg.d_model)
    nn.add_linear(P, rng, "out", cfg.d_model, cfg.d)
    return P


def unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, 1e-12)


# ------------------------------------------------------------------ masking

def dynamic_mask(tseq: TokenSeq, t: float, rng: np.random.Generator) -> TokenSeq:
    """Keep each labelled slot masked with probability t; reveal the rest."""
    if not 0.0 < t <= 1.0:
        raise ValueError("t must lie in (0, 1]")
    slots = []
    for s in tseq.slots:
        if s.kind == MASK and rng.random() >= t:
            slots.append(Slot(OBS, s.item_id))
        else:
            slots.append(s)
    return TokenSeq(tseq.user_id, slots)


def n_labeled(tseq: TokenSeq) -> int:
    return tseq.count(MASK)


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    ids: np.ndarray        # (B, T) visible item ids, -1 at fill/mask/pad
    valid: np.ndarray      # (B, T) bool
    mask_gt: np.ndarray    # (B, T) ground truth at masked slots, -1 elsewhere
    fill: np.ndarray       # (B, T) bool, gap slots
    t: np.ndarray          # (B,)
    n_labeled: np.ndarray  # (B,) |P_L| per sequence before masking
    obs_pool: list[np.ndarray] = field(default_factory=list)   # observed ids per sequence

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def truncate(tseq: TokenSeq, max_len: int) -> TokenSeq:
    if len(tseq.slots) <= max_len:
        return tseq
    warnings.warn(f"sequence of user {tseq.user_id} truncated to its last {max_len} slots", stacklevel=2)
    return TokenSeq(tseq.user_id, tseq.slots[-max_len:])


def make_batch(masked: Sequence[TokenSeq], t: Sequence[float], labeled: Sequence[int] | None = None,
               pools: Sequence[Sequence[int]] | None = None) -> Batch:
    B = len(masked)
    T = max(len(s.slots) for s in masked)
    ids = np.full((B, T), -1, dtype=np.int64)
    gt = np.full((B, T), -1, dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    fill = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(masked):
        for i, sl in enumerate(s.slots):
            valid[b, i] = True
            if sl.kind == OBS:
                ids[b, i] = sl.item_id
            elif sl.kind == MASK:
                gt[b, i] = sl.item_id
            else:
                fill[b, i] = True
    if labeled is None:
        labeled = [s.count(MASK) for s in masked]
    if pools is None:
        pools = [[sl.item_id for sl in s.slots if sl.kind == OBS] for s in masked]
    return Batch(ids, valid, gt, fill, np.asarray(t, dtype=np.float64), np.asarray(labeled, dtype=np.int64),
                 [np.asarray(p, dtype=np.int64) for p in pools])


def sample_negatives(batch: Batch, rng: np.random.Generator) -> np.ndarray:
    """(B, B) matrix: entry [b, c] is one observed item of sequence c (diagonal unused)."""
    B = batch.size
    out = np.full((B, B), -1, dtype=np.int64)
    for c in range(B):
        pool = batch.obs_pool[c]
        if len(pool) == 0:
            raise NoNegativesError(f"sequence {c} has no observed item to sample a negative from")
        out[:, c] = pool[rng.integers(0, len(pool), size=B)]
    np.fill_diagonal(out, -1)
    return out


# ------------------------------------------------------------------ model

def adapt_input(h, P) -> nn.Tensor:
    return nn.linear(h, P, "adapter")


def forward(P, H: np.ndarray, batch: Batch, cfg: DLLMConfig):
    """Returns (final hidden states, unit predictions, raw predictions), each (B, T, ·)."""
    B, T = batch.ids.shape
    if T > cfg.max_seq_len:
        raise DLLMConfigError(f"batch length {T} exceeds max_seq_len {cfg.max_seq_len}; truncate first")
    is_item = (batch.ids >= 0)
    emb = adapt_input(H[np.where(is_item, batch.ids, 0)], P)
    w_item = is_item[..., None].astype(emb.dtype)
    x = emb * w_item + P["fill"] * (1.0 - w_item) + P["pos"][:T]
    if cfg.t_conditioning == "scalar_embedding":
        tt = batch.t.astype(np.float32)[:, None, None]
        x = x + P["t_emb.w"] * tt + P["t_emb.b"]
    for i in range(cfg.n_layers):
        a = nn.layer_norm(x, P, f"blk{i}.ln1")
        x = x + nn.multi_head_attention(a, a, a, P, cfg.n_heads, name=f"blk{i}.attn", key_mask=batch.valid)
        f = nn.layer_norm(x, P, f"blk{i}.ln2")
        x = x + nn.feed_forward(f, P, f"blk{i}.ff")
    hidden = nn.layer_norm(x, P, "ln_f")
    raw = nn.linear(hidden, P, "out")
    return hidden, F.l2_normalize(raw), raw


def diffusion_loss(P, H: np.ndarray, batch: Batch, cfg: DLLMConfig, negatives: np.ndarray | None = None,
                   rng: np.random.Generator | None = None, variant: str | None = None,
                   per_sequence: bool = False):
    """Masked-slot objective. Returns the batch loss (tape tensor).

    With ``per_sequence`` the (B,) vector of per-sequence losses is returned
    instead of its mean.
    """
    variant = variant or cfg.loss_variant
    mb, mi = np.nonzero(batch.mask_gt >= 0)
    if len(mb) == 0 or len(set(mb.tolist())) < batch.size:
        raise NoMaskedSlotError("every sequence in the batch needs at least one masked slot")
    _, pred, raw = forward(P, H, batch, cfg)
    target = unit(H[batch.mask_gt[mb, mi]].astype(np.float64)).astype(pred.dtype)
    if variant == INFONCE_COS:
        if batch.size < 2:
            raise NoNegativesError("in-batch sampled softmax needs at least two sequences")
        if negatives is None:
            negatives = sample_negatives(batch, rng or np.random.default_rng(0))
        B = batch.size
        others = np.array([[c for c in range(B) if c != b] for b in range(B)])      # (B, B-1)
        neg_ids = negatives[np.arange(B)[:, None], others]                          # (B, K)
        cands = np.concatenate([target[:, None, :], unit(H[neg_ids[mb]].astype(np.float64)).astype(pred.dtype)],
                               axis=1)                                               # (M, K+1, d)
        p = pred[mb, mi]                                                             # (M, d)
        logits = F.matmul(cands, F.reshape(p, (len(mb), -1, 1)))                     # (M, K+1, 1)
        logits = F.reshape(logits, (len(mb), -1)) * (1.0 / cfg.temperature)
        nll = -F.log_softmax(logits, axis=-1)[:, 0]                                  # (M,)
        if cfg.loss_normalizer == "labeled":
            denom = batch.n_labeled.astype(np.float64)
        else:
            denom = np.bincount(mb, minlength=B).astype(np.float64)
        weight = np.zeros((B, len(mb)))
        weight[mb, np.arange(len(mb))] = 1.0 / (batch.t[mb] * denom[mb])
        seq_loss = F.matmul(weight.astype(pred.dtype), nll)                          # (B,)
        return seq_loss if per_sequence else seq_loss.mean()
    if variant == COS_POINTWISE:
        p = pred[mb, mi]
        dist = 1.0 - (p * target).sum(axis=-1)
    elif variant == MSE_POINTWISE:
        r = raw[mb, mi]
        diff = r - target
        dist = (diff * diff).sum(axis=-1)
    else:
        raise DLLMConfigError(f"unknown loss variant {variant!r}")
    if per_sequence:
        B = batch.size
        weight = np.zeros((B, len(mb)))
        counts = np.bincount(mb, minlength=B)
        weight[mb, np.arange(len(mb))] = 1.0 / counts[mb]
        return F.matmul(weight.astype(pred.dtype), dist)
    return dist.mean()


# ------------------------------------------------------------------ training

@dataclass
class DLLM:
    config: DLLMConfig
    params: nn.ParamStore
    trace: list[dict] = field(default_factory=list)


def _prepare(seqs: Sequence[TokenSeq], cfg: DLLMConfig) -> list[TokenSeq]:
    out = []
    for s in seqs:
        s = truncate(s, cfg.max_seq_len)
        if s.count(MASK) >= 1 and s.count(OBS) >= 1:
            out.append(s)
    return out


def sample_training_batch(seqs: Sequence[TokenSeq], cfg: DLLMConfig, rng: np.random.Generator) -> Batch:
    """Draw sequences, t ~ U(0,1] per sequence, mask.

    A draw that masks nothing is redrawn (new t, new mask), so every sequence
    contributes a masked slot without inflating the 1/t weight of small t.
    """
    pick = rng.choice(len(seqs), size=cfg.batch_size, replace=len(seqs) < cfg.batch_size)
    masked, ts, lab, pools = [], [], [], []
    for j in pick:
        s = seqs[j]
        while True:
            t = 1.0 - rng.random()          # (0, 1]
            m = dynamic_mask(s, t, rng)
            if m.count(MASK):
                break
        masked.append(m)
        ts.append(t)
        lab.append(s.count(MASK))
        pools.append([sl.item_id for sl in s.slots if sl.kind == OBS])
    return make_batch(masked, ts, lab, pools)


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most ``max_norm``."""
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def train(seqs: Sequence[TokenSeq], H: np.ndarray, cfg: DLLMConfig,
          heldout: Sequence[TokenSeq] | None = None, log=None) -> DLLM:
    data = _prepare(seqs, cfg)
    if not data:
        raise ValueError("no training sequence has both a labelled slot and an observed item")
    if H.shape[1] != cfg.d:
        raise DLLMConfigError(f"item vectors have width {H.shape[1]}, config expects {cfg.d}")
    H = np.asarray(H, dtype=np.float32)
    rng = derive_rng(cfg.seed, "dllm", "train")
    P = init_params(cfg)
    model = DLLM(cfg, P)
    ocfg = cfg.optim()
    t0 = time.time()
    for step in range(cfg.steps):
        batch = sample_training_batch(data, cfg, rng)
        neg = sample_negatives(batch, rng) if cfg.loss_variant == INFONCE_COS else None
        T = P.tensors(True)
        loss = diffusion_loss(T, H, batch, cfg, neg)
        loss.backward()
        grads = {n: t.grad if t.grad is not None else np.zeros_like(t.data) for n, t in T.items()}
        gnorm = clip_grads(grads, cfg.max_grad_norm)
        nn.adam_step(P, grads, ocfg, step)
        rec = {"step": step, "loss": loss.item(), "grad_norm": gnorm, "lr": nn.lr_schedule(step, ocfg)}
        if heldout is not None and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps):
            from .metrics import evaluate_dllm
            rec.update(evaluate_dllm(model, heldout, H))
            rec["elapsed"] = time.time() - t0
            if log:
                log(rec)
        model.trace.append(rec)
    return model


# ------------------------------------------------------------------ inference

def eval_batches(seqs: Sequence[TokenSeq], cfg: DLLMConfig):
    """Deterministic t=1 batches (every labelled slot masked) in fixed order."""
    data = _prepare(seqs, cfg)
    for start in range(0, len(data) - cfg.batch_size + 1, cfg.batch_size):
        chunk = data[start:start + cfg.batch_size]
        yield make_batch(chunk, [1.0] * len(chunk), [s.count(MASK) for s in chunk],
                         [[sl.item_id for sl in s.slots if sl.kind == OBS] for s in chunk])


def predict(model: DLLM, H: np.ndarray, batch: Batch) -> np.ndarray:
    _, pred, _ = forward(model.params.tensors(False), np.asarray(H, dtype=np.float32), batch, model.config)
    return pred.data


@dataclass
class Completed:
    user_id: int
    slots: list   # int item id, or np.ndarray unit fill vector


def infer_fill(model: DLLM, H: np.ndarray, tseqs: Sequence[TokenSeq], batch_size: int = 64) -> list[Completed]:
    """Replace each gap slot by its predicted unit vector; items pass through."""
    out = []
    cfg = model.config
    for start in range(0, len(tseqs), batch_size):
        chunk = []
        for s in tseqs[start:start + batch_size]:
            # labelled slots are ordinary observations at inference time
            slots = [Slot(OBS, sl.item_id) if sl.kind == MASK else sl for sl in s.slots]
            chunk.append(TokenSeq(s.user_id, slots))
        need = [s for s in chunk if s.count(FILL)]
        preds = {}
        if need:
            trimmed = [truncate(s, cfg.max_seq_len) for s in need]
            batch = make_batch(trimmed, [1.0] * len(trimmed))
            pr = predict(model, H, batch)
            for b, (orig, s) in enumerate(zip(need, trimmed)):
                offset = len(orig.slots) - len(s.slots)
                preds[id(orig)] = {offset + i: pr[b, i].copy() for i in range(len(s.slots)) if batch.fill[b, i]}
        for s in chunk:
            p = preds.get(id(s), {})
            slots = []
            for i, sl in enumerate(s.slots):
                if sl.kind == OBS:
                    slots.append(int(sl.item_id))
                elif i in p:
                    slots.append(p[i])
            out.append(Completed(s.user_id, slots))
    return out


def save_completed(path: str | Path, seqs: Sequence[Completed]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in seqs:
            slots = [{"item_id": x} if isinstance(x, int) else {"aug": [float(v) for v in x]} for x in s.slots]
            f.write(json.dumps({"user_id": s.user_id, "slots": slots}) + "\n")


def load_completed(path: str | Path) -> list[Completed]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            d = json.loads(line)
            out.append(Completed(d["user_id"], [x["item_id"] if "item_id" in x else np.asarray(x["aug"], dtype=np.float32)
                                                 for x in d["slots"]]))
    return out


def with_variant(cfg: DLLMConfig, variant: str) -> DLLMConfig:
    return replace(cfg, loss_variant=variant)
