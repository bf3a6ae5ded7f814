"""Monte Carlo coverage of split-plot and completely randomized interval estimates.

Each cell realizes one POM and then repeats split-plot randomizations on it,
analyzing every observed data set with each requested method.  Streams are
keyed by ``(seed, po_index, additivity_index, 0, ...)`` for the POM and
``(seed, po_index, additivity_index, 1, r)`` for replicate ``r``, so results do
not depend on the number of workers or the order cells are run in.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .design import SplitPlotSpec, randomize_sp
from .estimator import confidence_interval, estimate_variance_cr, estimate_variance_sp, observe, point_estimates
from .pom import EFFECTS, BlockLayout, factorial_effects
from .rng import make_stream
from .simgen import ADDITIVITY_TYPES, PO_TYPES, PomRecipe, all_cells, build_pom, parse_additivity, parse_po_type

METHODS = ("SP", "CR")
REPORT_HEADER = ("po_type", "additivity", "effect", "method", "coverage", "mean_width", "tau_true",
                 "reps", "W", "M", "alpha", "seed")


def _split(total: int, ratio: float, name: str) -> int:
    """Number of units on the ``+1`` level when the ``+1 : -1`` ratio is ``ratio``."""
    r = Fraction(ratio).limit_denominator(10_000)
    plus = total * r / (1 + r)
    if plus.denominator != 1:
        raise ValueError(f"{name}={ratio} does not split {total} into whole groups")
    return int(plus)


@dataclass(frozen=True)
class CoverageConfig:
    cells: tuple[tuple[str, str], ...] = field(default_factory=lambda: tuple(all_cells()))
    W: int = 40
    M: int = 40
    r_A: float = 1.0
    r_B: float = 1.0
    reps: int = 1000
    alpha: float = 0.05
    seed: int = 0
    methods: tuple[str, ...] = METHODS
    workers: int = 1

    def __post_init__(self) -> None:
        cells = tuple((parse_po_type(p), parse_additivity(a)) for p, a in self.cells)
        if not cells:
            raise ValueError("at least one cell is required")
        object.__setattr__(self, "cells", cells)
        methods = tuple(m.upper() for m in self.methods)
        unknown = set(methods) - set(METHODS)
        if unknown or not methods:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}")
        object.__setattr__(self, "methods", methods)
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        spec = self.spec()
        if not spec.can_estimate_variance:
            raise ValueError("split-plot variance estimation needs at least two whole-plots per level of A")

    def spec(self) -> SplitPlotSpec:
        layout = BlockLayout(self.W, self.M)
        return SplitPlotSpec(layout, _split(self.W, self.r_A, "r_A"), _split(self.M, self.r_B, "r_B"))


@dataclass(frozen=True)
class CoverageRow:
    po_type: str
    additivity: str
    effect: str
    method: str
    coverage: float
    mean_width: float
    mean_tau_hat: float
    tau_true: float
    reps: int
    W: int
    M: int
    alpha: float
    seed: int


@dataclass(frozen=True)
class CoverageReport:
    rows: tuple[CoverageRow, ...]

    def lookup(self, po_type: str, additivity: str, effect: str, method: str) -> CoverageRow:
        key = (parse_po_type(po_type), parse_additivity(additivity), effect, method.upper())
        for row in self.rows:
            if (row.po_type, row.additivity, row.effect, row.method) == key:
                return row
        raise KeyError(key)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for row in self.rows:
            writer.writerow([getattr(row, name) if not isinstance(getattr(row, name), float)
                             else repr(getattr(row, name)) for name in REPORT_HEADER])
        return buf.getvalue()


def cell_path(po_type: str, additivity: str) -> tuple[int, int]:
    return PO_TYPES.index(po_type), ADDITIVITY_TYPES.index(additivity)


def _run_cell(config: CoverageConfig, po_type: str, additivity: str) -> list[CoverageRow]:
    spec = config.spec()
    path = cell_path(po_type, additivity)
    pom = build_pom(PomRecipe(po_type, additivity, spec.layout, config.seed, path + (0,)))
    tau = factorial_effects(pom).tau

    covered = {m: np.zeros(3, dtype=np.int64) for m in config.methods}
    width = {m: np.zeros(3) for m in config.methods}
    tau_sum = np.zeros(3)
    for r in range(config.reps):
        rng = make_stream(config.seed, path + (1, r))
        data = observe(pom, randomize_sp(spec, rng))
        tau_hat = point_estimates(data)
        tau_sum += tau_hat
        for method in config.methods:
            V = estimate_variance_sp(data, spec) if method == "SP" else estimate_variance_cr(data)
            ci = confidence_interval(tau_hat, V, config.alpha)
            # closed interval: the boundary counts as covered
            covered[method] += (ci[:, 0] <= tau) & (tau <= ci[:, 1])
            width[method] += ci[:, 1] - ci[:, 0]

    rows = []
    for i, effect in enumerate(EFFECTS):
        for method in config.methods:
            rows.append(CoverageRow(
                po_type, additivity, effect, method,
                coverage=float(covered[method][i]) / config.reps,
                mean_width=float(width[method][i]) / config.reps,
                mean_tau_hat=float(tau_sum[i]) / config.reps,
                tau_true=float(tau[i]),
                reps=config.reps, W=config.W, M=config.M, alpha=config.alpha, seed=config.seed,
            ))
    return rows


def run_coverage(config: CoverageConfig, workers: Optional[int] = None) -> CoverageReport:
    """Coverage and mean width of every requested interval over ``config.reps`` randomizations."""
    workers = config.workers if workers is None else workers
    if workers > 1 and len(config.cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(config.cells))) as pool:
            futures = [pool.submit(_run_cell, config, p, a) for p, a in config.cells]
            per_cell = [f.result() for f in futures]
    else:
        per_cell = [_run_cell(config, p, a) for p, a in config.cells]
    return CoverageReport(tuple(row for rows in per_cell for row in rows))
