"""Generators for the fifteen simulation POM cells.

A cell pairs one of five potential-outcome types for ``Y(1)`` with one of three
additivity types that derive ``Y(2), Y(3), Y(4)`` from it:

    I    iid Bernoulli(0.5)
    II   Bernoulli(0.5) constant within each block
    III  independent normals, mean -2 on the first half of each block and +2
         on the rest, half of the units with variance 2 and half degenerate
    IV   block effect plus unit noise, both standard normal
    V    standard normal constant within each block

    strict         Y(k) = Y(1)
    between_block  block means of every Y(k) equal those of Y(1)
    none           Y(k) independent replicates of the Y(1) generator
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import numpy.typing as npt

from .pom import BlockLayout, PotentialOutcomeMatrix
from .rng import make_stream, open_uniforms, shuffle_tags, standard_normals

PO_TYPES = ("I", "II", "III", "IV", "V")
ADDITIVITY_TYPES = ("strict", "between_block", "none")

_ADDITIVITY_ALIASES = {
    "strict": "strict", "i": "strict",
    "between_block": "between_block", "between-block": "between_block", "between": "between_block",
    "ii": "between_block",
    "none": "none", "iii": "none",
}


def parse_po_type(value: str) -> str:
    v = str(value).strip().upper()
    if v not in PO_TYPES:
        raise ValueError(f"unknown potential-outcome type {value!r}; expected one of {PO_TYPES}")
    return v


def parse_additivity(value: str) -> str:
    try:
        return _ADDITIVITY_ALIASES[str(value).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown additivity type {value!r}; expected one of {ADDITIVITY_TYPES}") from None


@dataclass(frozen=True)
class PomRecipe:
    """One simulation cell plus the seed (and optional stream path) that realizes it."""

    po_type: str
    additivity: str
    layout: BlockLayout
    seed: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "po_type", parse_po_type(self.po_type))
        object.__setattr__(self, "additivity", parse_additivity(self.additivity))
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))
        if self.po_type == "III" and self.layout.N % 2:
            raise ValueError("type III needs an even number of units")


def all_cells() -> list[tuple[str, str]]:
    return [(p, a) for p in PO_TYPES for a in ADDITIVITY_TYPES]


def _draw(po_type: str, layout: BlockLayout, rng: np.random.Generator) -> npt.NDArray[np.float64]:
    W, M, N = layout.W, layout.M, layout.N
    if po_type == "I":
        return (open_uniforms(rng, N) < 0.5).astype(np.float64)
    if po_type == "II":
        return np.repeat((open_uniforms(rng, W) < 0.5).astype(np.float64), M)
    if po_type == "III":
        m = np.tile(np.arange(1, M + 1), W)
        mean = np.where(m <= M / 2, -2.0, 2.0)
        var = shuffle_tags(rng, np.repeat([2.0, 0.0], N // 2))
        z = standard_normals(rng, N)
        # degenerate units sit exactly on their mean
        return np.where(var > 0, mean + np.sqrt(var) * z, mean)
    if po_type == "IV":
        eta = standard_normals(rng, W)
        eps = standard_normals(rng, N)
        return np.repeat(eta, M) + eps
    return np.repeat(standard_normals(rng, W), M)


def generate_y1(recipe: PomRecipe, rng: Optional[np.random.Generator] = None) -> npt.NDArray[np.float64]:
    """Draw ``Y(1)`` for the recipe's potential-outcome type."""
    if rng is None:
        rng = make_stream(recipe.seed, recipe.path + (1,))
    return _draw(recipe.po_type, recipe.layout, rng)


def _blockwise_permutation(y: npt.NDArray[np.float64], layout: BlockLayout, rng) -> npt.NDArray[np.float64]:
    blocks = y.reshape(layout.W, layout.M)
    return np.concatenate([shuffle_tags(rng, row) for row in blocks])


def _derive(recipe: PomRecipe, y1: npt.NDArray[np.float64], rng) -> npt.NDArray[np.float64]:
    layout = recipe.layout
    if recipe.additivity == "strict":
        return y1.copy()
    if recipe.additivity == "none":
        return _draw(recipe.po_type, layout, rng)
    if recipe.po_type == "I":
        return _blockwise_permutation(y1, layout, rng)
    if recipe.po_type in ("II", "V"):
        return y1.copy()
    fresh = _draw(recipe.po_type, layout, rng).reshape(layout.W, layout.M)
    shift = fresh.mean(axis=1) - y1.reshape(layout.W, layout.M).mean(axis=1)
    return (fresh - shift[:, None]).ravel()


def build_pom(recipe: PomRecipe, streams: Optional[Sequence[np.random.Generator]] = None) -> PotentialOutcomeMatrix:
    """Realize the POM for a recipe.

    Column ``k`` draws from the stream ``(seed, *path, k)`` unless four
    generators are supplied explicitly.
    """
    if streams is None:
        streams = [make_stream(recipe.seed, recipe.path + (k,)) for k in range(1, 5)]
    if len(streams) != 4:
        raise ValueError("need one stream per treatment")
    y1 = generate_y1(recipe, streams[0])
    cols = [y1] + [_derive(recipe, y1, streams[k]) for k in range(1, 4)]
    return PotentialOutcomeMatrix(recipe.layout, np.column_stack(cols))
