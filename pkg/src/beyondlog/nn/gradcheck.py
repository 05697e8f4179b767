from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .params import ParamStore
from .tensor import Tensor

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


class NonFiniteLossError(ValueError):
    pass


def value_and_grad(loss_fn: LossFn, params: ParamStore, names=None) -> tuple[float, dict[str, np.ndarray]]:
    P = params.tensors(requires_grad=True, names=names)
    loss = loss_fn(P)
    loss.backward()
    grads = {}
    for n, t in P.items():
        if t.requires_grad:
            grads[n] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return loss.item(), grads


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.worst < tol


def grad_check(loss_fn: LossFn, params: ParamStore, eps: float = 1e-5, names=None,
               dtype=np.float64, floor: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients to central differences, elementwise.

    The check runs on a copy of ``params`` cast to ``dtype`` (float64 by
    default) so that finite-difference round-off does not swamp the
    comparison. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_entries`` subsamples large tensors.
    """
    work = params.astype(dtype)
    names = list(work.names()) if names is None else list(names)

    def f() -> float:
        val = loss_fn(work.tensors(requires_grad=False)).item()
        if not np.isfinite(val):
            raise NonFiniteLossError(f"loss is not finite: {val}")
        return val

    f()
    _, analytic = value_and_grad(loss_fn, work, names)
    rng = rng or np.random.default_rng(0)
    numeric: dict[str, np.ndarray] = {}
    errors: dict[str, float] = {}
    for n in names:
        p = work.params[n]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.full(flat.size, np.nan)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * eps)
        a = analytic[n].reshape(-1)[idx]
        nv = num[idx]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(nv)), floor)
        errors[n] = float(np.max(np.abs(a - nv) / denom)) if idx.size else 0.0
        numeric[n] = num.reshape(p.shape)
    return GradCheckReport(errors, analytic, numeric)


class StopGradient:
    """Named stop-gradient points that can be frozen for finite differences.

    A stop-gradient makes a value constant for differentiation. Central
    differences only agree with that surrogate gradient if the value also
    stays constant while parameters are nudged, so after one recording pass
    ``freeze()`` replays the recorded values.
    """

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.frozen = False

    def __call__(self, key: str, t: Tensor) -> Tensor:
        if self.frozen:
            return Tensor(self.values[key])
        self.values[key] = np.array(t.data, copy=True)
        return Tensor(t.data)

    def freeze(self) -> "StopGradient":
        self.frozen = True
        return self
