"""Deterministic random streams.

Every stochastic choice in the package flows from a single 64-bit seed
through named Philox streams. Philox is a counter-based generator with a
published output sequence, so runs are reproducible across platforms and
processes.

Stream addressing: the 128-bit Philox key is ``seed * 2**64 + sid`` where
``sid = (domain_id << 32) | index``. Domains are registered below; the
index picks an item within a domain (e.g. the image number inside the
dataset domain), which lets per-item work be generated independently and
in any order.
"""

from __future__ import annotations

import numpy as np

# Domain ids. Appending is fine; renumbering breaks reproducibility.
DOMAINS = {
    "model-init": 0,
    "data-base": 1,
    "data-image": 2,
    "batch-order": 3,
    "test-misc": 4,
}

_MASK64 = (1 << 64) - 1


def stream(seed: int, domain: str, index: int = 0) -> np.random.Generator:
    """Return the named Philox stream for (seed, domain, index)."""
    if domain not in DOMAINS:
        raise KeyError(f"unknown RNG domain {domain!r}")
    if not 0 <= index < (1 << 32):
        raise ValueError(f"stream index {index} out of range")
    sid = (DOMAINS[domain] << 32) | index
    key = ((int(seed) & _MASK64) << 64) | sid
    return np.random.Generator(np.random.Philox(key=key))


def truncated_normal(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    std: float = 0.02,
    bound: float = 2.0,
) -> np.ndarray:
    """Normal draws with |x| <= bound (in units of sigma), scaled by std.

    Out-of-range draws are redrawn, so the output depends only on the
    stream state, not on the acceptance pattern of earlier shapes.
    """
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
