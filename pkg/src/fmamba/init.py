"""Parameter initialisation and hierarchical parameter views."""
from __future__ import annotations

from typing import Iterator, Mapping, MutableMapping

import numpy as np

from .tape import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def prefixed(prefix: str, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class Params(Mapping):
    """Read-only view of a flat name -> array store under a dotted prefix.

    Lookups return tensors, so blocks work unchanged whether the store holds
    plain arrays (inference) or watched tensors (differentiation).
    """

    def __init__(self, store: Mapping, prefix: str = ""):
        self._store = store
        self._prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        value = self._store[self._prefix + name]
        return value if isinstance(value, Tensor) else Tensor(value)

    def __iter__(self) -> Iterator[str]:
        n = len(self._prefix)
        return (k[n:] for k in self._store if k.startswith(self._prefix))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def sub(self, name: str) -> "Params":
        return Params(self._store, f"{self._prefix}{name}.")


def as_params(p) -> Params:
    return p if isinstance(p, Params) else Params(p)
