from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named parameter arrays plus their Adam moments."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=value.dtype if value.dtype == np.float64 else DEFAULT_DTYPE)
        self.params[name] = value
        self.state[name] = AdamState(np.zeros_like(value), np.zeros_like(value))
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self, requires_grad: bool = True, names=None) -> dict[str, Tensor]:
        """Fresh graph leaves for every parameter (or only ``names``)."""
        chosen = set(self.params) if names is None else set(names)
        return {n: Tensor(v, requires_grad=requires_grad and n in chosen) for n, v in self.params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, v in self.params.items():
            out.params[n] = v.copy()
            s = self.state[n]
            out.state[n] = AdamState(s.m.copy(), s.v.copy(), s.step)
        return out

    def astype(self, dtype) -> "ParamStore":
        out = self.copy()
        for n in out.params:
            out.params[n] = out.params[n].astype(dtype)
        return out

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


def add_linear(store: ParamStore, rng: np.random.Generator, name: str, d_in: int, d_out: int, bias: bool = True) -> None:
    store.add(f"{name}.w", uniform_init(rng, d_in, (d_in, d_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(d_out, dtype=DEFAULT_DTYPE))


def add_attention(store: ParamStore, rng: np.random.Generator, name: str, d: int, d_kv: int | None = None) -> None:
    """Q/K/V/output projections for one multi-head attention block."""
    d_kv = d if d_kv is None else d_kv
    add_linear(store, rng, f"{name}.q", d, d)
    add_linear(store, rng, f"{name}.k", d_kv, d)
    add_linear(store, rng, f"{name}.v", d_kv, d)
    add_linear(store, rng, f"{name}.o", d, d)


def add_layer_norm(store: ParamStore, name: str, d: int) -> None:
    store.add(f"{name}.g", np.ones(d, dtype=DEFAULT_DTYPE))
    store.add(f"{name}.b", np.zeros(d, dtype=DEFAULT_DTYPE))
