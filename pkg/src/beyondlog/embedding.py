"""Knowledge texts and their dense item representations."""
from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


class KnowledgeWarning(UserWarning):
    pass


class KnowledgeError(ValueError):
    pass


@dataclass(frozen=True)
class KnowledgeEntry:
    dimension: str
    analysis: str = ""
    keywords: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "keywords", tuple(self.keywords))

    def validate(self) -> list[str]:
        """Raise on hard violations; return soft warnings."""
        if not self.dimension.strip():
            raise KnowledgeError("knowledge entry has an empty dimension label")
        n = len(self.keywords)
        if not 1 <= n <= 8:
            raise KnowledgeError(f"dimension {self.dimension!r} has {n} keywords; expected 1..8")
        if not 3 <= n <= 5:
            return [f"dimension {self.dimension!r} has {n} keywords (expected 3-5 key concepts)"]
        return []

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "analysis": self.analysis, "keywords": list(self.keywords)}

    @classmethod
    def from_dict(cls, d: dict) -> "KnowledgeEntry":
        return cls(d["dimension"], d.get("analysis", ""), tuple(d["keywords"]))


@dataclass(frozen=True)
class ItemKnowledge:
    item_id: int
    user_demand: tuple[KnowledgeEntry, ...] = ()
    product_attribute: tuple[KnowledgeEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "user_demand", tuple(self.user_demand))
        object.__setattr__(self, "product_attribute", tuple(self.product_attribute))

    def validate(self) -> list[str]:
        notes = []
        for side, entries in (("user_demand", self.user_demand), ("product_attribute", self.product_attribute)):
            labels = [e.dimension for e in entries]
            if len(set(labels)) != len(labels):
                raise KnowledgeError(f"duplicate dimension labels in {side}: {labels}")
            for e in entries:
                notes.extend(e.validate())
        return notes

    def to_dict(self) -> dict:
        return {
            "user_demand": [e.to_dict() for e in self.user_demand],
            "product_attribute": [e.to_dict() for e in self.product_attribute],
        }

    @classmethod
    def from_dict(cls, item_id: int, d: dict) -> "ItemKnowledge":
        return cls(item_id,
                   tuple(KnowledgeEntry.from_dict(e) for e in d.get("user_demand", [])),
                   tuple(KnowledgeEntry.from_dict(e) for e in d.get("product_attribute", [])))


@dataclass
class ItemRep:
    item_id: int
    vector: np.ndarray = field(repr=False)


class TextEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    return [t.lower() for t in _TOKEN.findall(text)]


class HashEncoder:
    """Signed feature hashing over word tokens, L2-normalised.

    Stands in for a pretrained sentence encoder so that everything runs
    offline. Each token maps (under ``seed``) to one coordinate and a sign.
    """

    def __init__(self, dim: int, seed: int = 0):
        if dim < 2:
            raise ValueError("hash encoder needs dim >= 2")
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)
        self._cache: dict[str, tuple[int, float]] = {}

    def slot(self, token: str) -> tuple[int, float]:
        hit = self._cache.get(token)
        if hit is None:
            h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest()
            v = int.from_bytes(h, "little")
            hit = (v % self.dim, 1.0 if (v >> 63) & 1 else -1.0)
            self._cache[token] = hit
        return hit

    def encode_raw(self, text: str) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float64)
        for tok in tokenize(text):
            i, s = self.slot(tok)
            out[i] += s
        return out

    def encode(self, text: str) -> np.ndarray:
        raw = self.encode_raw(text)
        n = np.linalg.norm(raw)
        if n > 0:
            raw /= n
        return raw.astype(np.float32)


def hash_encoder(d: int, seed: int = 0) -> HashEncoder:
    return HashEncoder(d, seed)


def _perspective_text(entries: Iterable[KnowledgeEntry]) -> str:
    return "; ".join(f"{e.dimension}: {', '.join(e.keywords)}" for e in entries)


def build_knowledge_text(k: ItemKnowledge) -> tuple[str, str]:
    """``"<dim>: <kw1>, <kw2>; <dim>: ..."`` for each perspective, in entry order."""
    return _perspective_text(k.user_demand), _perspective_text(k.product_attribute)


def encode_item(k: ItemKnowledge, enc: TextEncoder, dim: int | None = None) -> ItemRep:
    """Sum of the encodings of the two perspective texts (no renormalisation)."""
    if dim is not None and enc.dim != dim:
        raise KnowledgeError(f"encoder dimension {enc.dim} does not match configured dimension {dim}")
    t_u, t_p = build_knowledge_text(k)
    vec = np.asarray(enc.encode(t_u), dtype=np.float32) + np.asarray(enc.encode(t_p), dtype=np.float32)
    if not np.any(vec):
        warnings.warn(f"item {k.item_id} encodes to the zero vector", KnowledgeWarning, stacklevel=2)
    return ItemRep(k.item_id, vec)


def encode_items(knowledge: Iterable[ItemKnowledge], enc: TextEncoder) -> tuple[list[int], np.ndarray]:
    reps = [encode_item(k, enc) for k in knowledge]
    ids = [r.item_id for r in reps]
    mat = np.stack([r.vector for r in reps]) if reps else np.zeros((0, enc.dim), dtype=np.float32)
    return ids, mat
