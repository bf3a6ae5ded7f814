"""Seeded random streams and subset sampling.

Streams are numpy ``Generator`` objects over the counter-based Philox bit
generator, keyed by a master seed plus an integer path (``SeedSequence``
spawn keys).  A stream for ``(seed, path)`` is the same on every platform and
does not depend on how many other streams were created before it.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import numpy.typing as npt

from .normal import normal_quantiles

_TWO_NEG_53 = 2.0**-53


def make_stream(seed: int, path: Sequence[int] = ()) -> np.random.Generator:
    """Return an independent Philox stream identified by ``(seed, *path)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def as_stream(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return make_stream(0 if rng is None else rng)


def open_uniforms(rng: np.random.Generator, size) -> npt.NDArray[np.float64]:
    """Uniforms on the open interval (0, 1) built from 53 random bits."""
    bits = rng.integers(0, 2**53, size=size, dtype=np.int64)
    return (bits.astype(np.float64) + 0.5) * _TWO_NEG_53


def standard_normals(rng: np.random.Generator, size) -> npt.NDArray[np.float64]:
    """Standard normal variates by inverse-CDF transform of open uniforms."""
    return normal_quantiles(open_uniforms(rng, size))


def partial_fisher_yates(
    rng: np.random.Generator, n: int, k: int, batch: int = 1
) -> npt.NDArray[np.int64]:
    """Draw ``batch`` independent uniform ``k``-subsets of ``range(n)``.

    Runs the first ``k`` swaps of a Fisher-Yates shuffle on every row at once.
    Returns a ``(batch, k)`` array; row order within a subset is the draw order.
    """
    if not 0 <= k <= n:
        raise ValueError(f"cannot draw {k} of {n}")
    return _swap_prefix(rng, n, k, batch)[:, :k]


def _swap_prefix(rng, n, k, batch):
    perm = np.tile(np.arange(n, dtype=np.int64), (batch, 1))
    rows = np.arange(batch)
    for j in range(k):
        pick = rng.integers(j, n, size=batch)
        chosen = perm[rows, pick].copy()
        perm[rows, pick] = perm[rows, j]
        perm[rows, j] = chosen
    return perm


def shuffle_tags(rng: np.random.Generator, tags: npt.ArrayLike) -> npt.NDArray:
    """Full Fisher-Yates shuffle of a deck of tags (returns a new array)."""
    deck = np.array(tags)
    n = deck.shape[0]
    return deck[_swap_prefix(rng, n, max(n - 1, 0), 1)[0]]
