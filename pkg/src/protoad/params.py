"""Parameter-tree utilities.

Model parts are dataclasses whose fields are Tensors, lists or nested
dataclasses. Walking field-declaration order gives every parameter a
stable dotted name; that order is the contract used by the optimizer,
the momentum update and the checkpoint format.
"""

from __future__ import annotations

import copy
import dataclasses
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, StateError


def named_params(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dotted-name, tensor) pairs in deterministic declaration order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            sub = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_params(child, sub)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_params(child, f"{prefix}.{i}" if prefix else str(i))
    # plain config values (ints, floats, strings) are not parameters


def param_list(obj) -> list[tuple[str, Tensor]]:
    return list(named_params(obj))


def clone(obj, requires_grad: bool | None = None):
    """Deep copy of a parameter tree; optionally override requires_grad."""

    def _clone(o):
        if isinstance(o, Tensor):
            rg = o.requires_grad if requires_grad is None else requires_grad
            return Tensor(o.data.copy(), requires_grad=rg)
        if dataclasses.is_dataclass(o):
            return dataclasses.replace(
                o, **{f.name: _clone(getattr(o, f.name)) for f in dataclasses.fields(o)}
            )
        if isinstance(o, list):
            return [_clone(c) for c in o]
        if isinstance(o, tuple):
            return tuple(_clone(c) for c in o)
        return copy.copy(o)

    return _clone(obj)


def ema_update(online, target, beta: float) -> None:
    """target <- beta * target + (1 - beta) * online, parameter by parameter.

    The target tree never carries gradients; its buffers are updated in
    place so existing references stay valid.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"momentum beta must lie in [0, 1], got {beta}")
    pairs = list(zip(named_params(online), named_params(target)))
    for (name_o, p_o), (name_t, p_t) in pairs:
        if p_o.shape != p_t.shape:
            raise StateError(f"parameter shape mismatch {name_o}: {p_o.shape} vs {name_t}: {p_t.shape}")
        if beta == 1.0:
            continue
        p_t.data *= p_t.data.dtype.type(beta)
        p_t.data += p_t.data.dtype.type(1.0 - beta) * p_o.data


def zero_grads(obj) -> None:
    for _, p in named_params(obj):
        p.grad = None


def set_requires_grad(obj, flag: bool) -> None:
    for _, p in named_params(obj):
        p.requires_grad = flag


def all_finite(obj) -> bool:
    return all(np.isfinite(p.data).all() for _, p in named_params(obj))
