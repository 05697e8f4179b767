"""Residual-quantization autoencoder that turns item vectors into semantic IDs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .nn import F
from .rng import derive_rng


class TokenizerConfigError(ValueError):
    pass


@dataclass
class RQVAEConfig:
    d: int = 32
    d_prime: int = 8
    levels: int = 3
    codebook_size: int = 64
    beta: float = 0.25
    epochs: int = 60
    batch_size: int = 128
    learning_rate: float = 3e-3
    kmeans_iters: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.d_prime >= self.d:
            raise TokenizerConfigError(f"d_prime ({self.d_prime}) must be smaller than d ({self.d})")
        if self.levels < 1 or self.codebook_size < 2:
            raise TokenizerConfigError("need levels >= 1 and codebook_size >= 2")


@dataclass
class SemanticID:
    item_id: int
    codes: list[int]   # 1-based


@dataclass
class RQVAE:
    config: RQVAEConfig
    params: nn.ParamStore
    loss_curve: list[dict] = field(default_factory=list)

    def codebooks(self) -> list[np.ndarray]:
        return [self.params[f"codebook.{l}"] for l in range(self.config.levels)]


def residual_quantize(z: np.ndarray, codebooks: Sequence[np.ndarray]):
    """Greedy nearest-code decomposition.

    Returns 0-based codes, the quantized vector and the final residual.
    Works on a single vector or a batch (rows). Ties go to the lower index
    because ``argmin`` returns the first minimum.
    """
    z = np.asarray(z)
    single = z.ndim == 1
    r = z[None] if single else z
    codes, zhat = [], np.zeros_like(r)
    for C in codebooks:
        dist = ((r[:, None, :] - C[None, :, :]) ** 2).sum(-1)
        idx = dist.argmin(axis=1)
        q = C[idx]
        codes.append(idx)
        zhat = zhat + q
        r = r - q
    codes = np.stack(codes, axis=1)
    if single:
        return codes[0], zhat[0], r[0]
    return codes, zhat, r


def init_params(cfg: RQVAEConfig, rng: np.random.Generator | None = None) -> nn.ParamStore:
    rng = rng or derive_rng(cfg.seed, "rqvae", "init")
    store = nn.ParamStore()
    nn.add_linear(store, rng, "adapt", cfg.d, cfg.d_prime)
    for l in range(cfg.levels):
        store.add(f"codebook.{l}", rng.normal(scale=0.1, size=(cfg.codebook_size, cfg.d_prime)).astype(np.float32))
    nn.add_linear(store, rng, "dec.0", cfg.d_prime, cfg.d)
    nn.add_linear(store, rng, "dec.1", cfg.d, cfg.d)
    return store


def _adapt(h, P):
    return nn.linear(h, P, "adapt")


def rqvae_terms(h: np.ndarray, P, levels: int, codes: np.ndarray | None = None, sg=None):
    """Reconstruction and commitment terms as tape tensors.

    ``codes`` (0-based, shape (n, L)) pins the code choice, which keeps a
    finite-difference check away from argmin switches. ``sg`` is an optional
    ``nn.StopGradient`` for freezing stop-gradient values.
    """
    sg = sg or nn.StopGradient()
    z = _adapt(h, P)
    r = z
    zhat = None
    commit = None
    picked = []
    for l in range(levels):
        C = P[f"codebook.{l}"]
        if codes is None:
            dist = ((r.data[:, None, :] - C.data[None, :, :]) ** 2).sum(-1)
            idx = dist.argmin(axis=1)
        else:
            idx = codes[:, l]
        picked.append(idx)
        q = F.take(C, idx)
        a = sg(f"r{l}", r) - q
        b = r - sg(f"q{l}", q)
        term = (a * a).sum(axis=-1) + (b * b).sum(axis=-1)
        commit = term if commit is None else commit + term
        zhat = q if zhat is None else zhat + q
        r = r - q
    # straight-through: forward uses zhat, backward passes the decoder gradient to z
    z_st = z + sg("st", zhat - z)
    recon_out = nn.linear(F.gelu(nn.linear(z_st, P, "dec.0")), P, "dec.1")
    diff = recon_out - h
    recon = (diff * diff).sum(axis=-1).mean()
    return recon, commit.mean(), np.stack(picked, axis=1)


def rqvae_loss(h: np.ndarray, P, levels: int, beta: float, codes: np.ndarray | None = None, sg=None):
    recon, commit, _ = rqvae_terms(h, P, levels, codes, sg)
    return recon + commit * beta


def _kmeans(x: np.ndarray, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    cent = x[rng.choice(len(x), size=k, replace=len(x) < k)].copy()
    for _ in range(iters):
        assign = ((x[:, None, :] - cent[None]) ** 2).sum(-1).argmin(1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                cent[j] = members.mean(0)
    return cent


def train_rqvae(h: np.ndarray, cfg: RQVAEConfig) -> RQVAE:
    h = np.asarray(h, dtype=np.float32)
    if len(h) < cfg.codebook_size:
        raise TokenizerConfigError(f"{len(h)} items cannot seed {cfg.codebook_size} codes")
    if h.shape[1] != cfg.d:
        raise TokenizerConfigError(f"item vectors have width {h.shape[1]}, config expects {cfg.d}")
    rng = derive_rng(cfg.seed, "rqvae", "train")
    P = init_params(cfg)
    model = RQVAE(cfg, P)
    if cfg.epochs == 0:
        return model
    first = h[rng.permutation(len(h))[:max(cfg.batch_size, cfg.codebook_size)]]
    r = nn.linear(first, P.tensors(False), "adapt").data
    for l in range(cfg.levels):
        P.params[f"codebook.{l}"][:] = _kmeans(r, cfg.codebook_size, cfg.kmeans_iters, rng)
        r = r - residual_quantize(r, [P[f"codebook.{l}"]])[1]

    def evaluate():
        T = P.tensors(False)
        rec, com, _ = rqvae_terms(h, T, cfg.levels)
        return {"recon": rec.item(), "commit": com.item()}

    model.loss_curve.append({"epoch": 0, **evaluate()})
    steps_per_epoch = max(1, int(np.ceil(len(h) / cfg.batch_size)))
    ocfg = nn.OptimConfig(learning_rate=cfg.learning_rate, warmup_steps=0,
                          total_steps=cfg.epochs * steps_per_epoch, min_lr_fraction=0.1)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(h))
        used = [np.zeros(cfg.codebook_size, dtype=bool) for _ in range(cfg.levels)]
        for s in range(steps_per_epoch):
            batch = h[order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
            T = P.tensors(True)
            recon, commit, picked = rqvae_terms(batch, T, cfg.levels)
            loss = recon + commit * cfg.beta
            loss.backward()
            for l in range(cfg.levels):
                used[l][picked[:, l]] = True
            nn.adam_step(P, {n: t.grad if t.grad is not None else np.zeros_like(t.data) for n, t in T.items()},
                         ocfg, step)
            step += 1
        # re-seed codes nobody chose this epoch from random residuals
        if any((~u).any() for u in used):
            r = nn.linear(h, P.tensors(False), "adapt").data
            for l in range(cfg.levels):
                dead = np.flatnonzero(~used[l])
                if len(dead):
                    P.params[f"codebook.{l}"][dead] = r[rng.choice(len(r), size=len(dead))]
                r = r - residual_quantize(r, [P[f"codebook.{l}"]])[1]
        model.loss_curve.append({"epoch": epoch, **evaluate()})
    return model


def extract_sids(item_ids: Sequence[int], h: np.ndarray, model: RQVAE) -> list[SemanticID]:
    z = nn.linear(np.asarray(h, dtype=np.float32), model.params.tensors(False), "adapt").data
    codes, _, _ = residual_quantize(z, model.codebooks())
    return [SemanticID(int(i), [int(c) + 1 for c in row]) for i, row in zip(item_ids, codes)]


def save_sids(path: str | Path, sids: Sequence[SemanticID]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in sids:
            f.write(json.dumps({"item_id": s.item_id, "codes": s.codes}) + "\n")


def load_sids(path: str | Path) -> list[SemanticID]:
    with open(path, encoding="utf-8") as f:
        return [SemanticID(d["item_id"], d["codes"]) for d in map(json.loads, f)]
