"""Finite-population science for 2x2 factorial experiments on blocked units.

The potential outcome matrix (POM) holds one row per unit, ordered by
whole-plot then sub-plot, and one column per treatment.  Treatments follow the
lexicographic coding of the two factors:

    treatment  factor A  factor B  AB
        1         -1        -1     +1
        2         -1        +1     -1
        3         +1        -1     -1
        4         +1        +1     +1
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import numpy.typing as npt

EFFECTS = ("A", "B", "AB")

G_A = np.array([-1.0, -1.0, 1.0, 1.0])
G_B = np.array([-1.0, 1.0, -1.0, 1.0])
G_AB = G_A * G_B
#: rows are the contrast vectors for A, B, AB
CONTRASTS = np.vstack([G_A, G_B, G_AB])
#: orthogonal design matrix with columns (1, g_A, g_B, g_AB) / 2
DESIGN_MATRIX = 0.5 * np.column_stack([np.ones(4), G_A, G_B, G_AB])

for _arr in (G_A, G_B, G_AB, CONTRASTS, DESIGN_MATRIX):
    _arr.setflags(write=False)

DEFAULT_TOLERANCE = 1e-9


def _frozen(a: npt.ArrayLike) -> npt.NDArray[np.float64]:
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BlockLayout:
    """``W`` whole-plots of ``M`` sub-plots each."""

    W: int
    M: int

    def __post_init__(self) -> None:
        if int(self.W) != self.W or int(self.M) != self.M:
            raise ValueError("W and M must be integers")
        if self.W < 2 or self.M < 2:
            raise ValueError(f"need W >= 2 and M >= 2, got W={self.W}, M={self.M}")

    @property
    def N(self) -> int:
        return self.W * self.M

    def plot_of(self) -> npt.NDArray[np.int64]:
        """Zero-based whole-plot index of each unit."""
        return np.repeat(np.arange(self.W), self.M)


@dataclass(frozen=True)
class Projections:
    P_N: npt.NDArray[np.float64]
    P_in: npt.NDArray[np.float64]
    P_btw: npt.NDArray[np.float64]


def centering_matrix(p: int) -> npt.NDArray[np.float64]:
    return np.eye(p) - np.full((p, p), 1.0 / p)


def build_projections(layout: BlockLayout) -> Projections:
    """Total, within-block, and between-block centering projections (N x N)."""
    W, M = layout.W, layout.M
    P_N = centering_matrix(layout.N)
    P_in = np.kron(np.eye(W), centering_matrix(M))
    P_btw = np.kron(centering_matrix(W), np.full((M, M), 1.0 / M))
    return Projections(_frozen(P_N), _frozen(P_in), _frozen(P_btw))


@dataclass(frozen=True)
class PotentialOutcomeMatrix:
    layout: BlockLayout
    values: npt.NDArray[np.float64]

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.shape != (self.layout.N, 4):
            raise ValueError(
                f"expected a {self.layout.N}x4 matrix, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("potential outcomes must be finite")
        object.__setattr__(self, "values", values)

    @property
    def N(self) -> int:
        return self.layout.N

    def column(self, k: int) -> npt.NDArray[np.float64]:
        """Potential outcomes under treatment ``k`` (1-based)."""
        return self.values[:, k - 1]

    def by_block(self) -> npt.NDArray[np.float64]:
        """View of the values with shape ``(W, M, 4)``."""
        return self.values.reshape(self.layout.W, self.layout.M, 4)

    @property
    def block_means(self) -> npt.NDArray[np.float64]:
        """``(W, 4)`` block average potential outcomes."""
        return self.by_block().mean(axis=1)

    @property
    def means(self) -> npt.NDArray[np.float64]:
        """Population average potential outcome of each treatment."""
        return self.values.mean(axis=0)

    @classmethod
    def from_blocks(cls, blocks: npt.ArrayLike) -> "PotentialOutcomeMatrix":
        arr = np.asarray(blocks, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 4:
            raise ValueError("blocks must have shape (W, M, 4)")
        layout = BlockLayout(arr.shape[0], arr.shape[1])
        return cls(layout, arr.reshape(layout.N, 4))


@dataclass(frozen=True)
class CovarianceSummary:
    S2: npt.NDArray[np.float64]
    S2_btw: npt.NDArray[np.float64]
    S2_in: npt.NDArray[np.float64]
    S2_w: npt.NDArray[np.float64]  # (W, 4, 4)


def summarize_covariances(pom: PotentialOutcomeMatrix) -> CovarianceSummary:
    W, M, N = pom.layout.W, pom.layout.M, pom.N
    Y = pom.values
    blocks = pom.by_block()
    block_means = blocks.mean(axis=1)

    dev = Y - Y.mean(axis=0)
    S2 = dev.T @ dev / (N - 1)

    bdev = block_means - Y.mean(axis=0)
    S2_btw = bdev.T @ bdev / (W - 1)

    wdev = blocks - block_means[:, None, :]
    S2_w = np.einsum("wmk,wml->wkl", wdev, wdev) / (M - 1)
    S2_in = S2_w.mean(axis=0)
    return CovarianceSummary(_frozen(S2), _frozen(S2_btw), _frozen(S2_in), _frozen(S2_w))


@dataclass(frozen=True)
class FactorialEffectSummary:
    tau: npt.NDArray[np.float64]  # (3,)
    tau_block: npt.NDArray[np.float64]  # (W, 3)
    tau_unit: npt.NDArray[np.float64]  # (N, 3)
    S2_F: npt.NDArray[np.float64]
    S2_F_btw: npt.NDArray[np.float64]
    S2_F_in: npt.NDArray[np.float64]
    mu_unit: npt.NDArray[np.float64]
    S2_mu_btw: float
    S2_mu_in: float


def _between_within(x: npt.NDArray[np.float64], W: int, M: int):
    """Between- and within-block variances of unit-level values (trailing axes kept)."""
    blocks = x.reshape((W, M) + x.shape[1:])
    block_means = blocks.mean(axis=1)
    btw = block_means.var(axis=0, ddof=1)
    within = blocks.var(axis=1, ddof=1).mean(axis=0)
    return block_means, btw, within


def factorial_effects(pom: PotentialOutcomeMatrix) -> FactorialEffectSummary:
    W, M = pom.layout.W, pom.layout.M
    tau_unit = 0.5 * pom.values @ CONTRASTS.T
    tau_block, S2_F_btw, S2_F_in = _between_within(tau_unit, W, M)
    mu_unit = pom.values.mean(axis=1)
    _, S2_mu_btw, S2_mu_in = _between_within(mu_unit, W, M)
    return FactorialEffectSummary(
        tau=_frozen(tau_unit.mean(axis=0)),
        tau_block=_frozen(tau_block),
        tau_unit=_frozen(tau_unit),
        S2_F=_frozen(tau_unit.var(axis=0, ddof=1)),
        S2_F_btw=_frozen(S2_F_btw),
        S2_F_in=_frozen(S2_F_in),
        mu_unit=_frozen(mu_unit),
        S2_mu_btw=float(S2_mu_btw),
        S2_mu_in=float(S2_mu_in),
    )


@dataclass(frozen=True)
class AdditivityReport:
    """Additivity flags with the fitted differential constants.

    ``constants`` is a 4x4 matrix ``C[k, l] = mean(Y(l)) - mean(Y(k))`` when the
    outcomes are strictly or between-block additive.  ``block_constants`` is the
    ``(W, 4, 4)`` analogue per block when within-block additive.
    """

    strict: bool
    between_block: bool
    within_block: bool
    tolerance: float
    constants: Optional[npt.NDArray[np.float64]] = None
    block_constants: Optional[npt.NDArray[np.float64]] = field(default=None, repr=False)


def classify_additivity(
    pom: PotentialOutcomeMatrix, tolerance: float = DEFAULT_TOLERANCE
) -> AdditivityReport:
    """Classify strict, between-block and within-block additivity.

    A flag holds when the relevant factorial effects are constant up to
    ``tolerance`` in absolute value: unit effects around the population
    effect (strict), block-average effects around the population effect
    (between-block), and unit effects around their block average
    (within-block).  In exact arithmetic these are the conditions
    ``S2_F = 0``, ``S2_F_btw = 0`` and ``S2_F_in = 0``.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    fx = factorial_effects(pom)
    W, M = pom.layout.W, pom.layout.M
    unit = fx.tau_unit.reshape(W, M, 3)
    strict = bool(np.max(np.abs(fx.tau_unit - fx.tau)) <= tolerance)
    between = bool(np.max(np.abs(fx.tau_block - fx.tau)) <= tolerance)
    within = bool(np.max(np.abs(unit - fx.tau_block[:, None, :])) <= tolerance)

    constants = None
    if strict or between:
        m = pom.means
        constants = _frozen(m[None, :] - m[:, None])
    block_constants = None
    if within:
        bm = pom.block_means
        block_constants = _frozen(bm[:, None, :] - bm[:, :, None])
    return AdditivityReport(strict, between, within, float(tolerance), constants, block_constants)


POM_HEADER = ("whole_plot", "sub_plot", "y1", "y2", "y3", "y4")


def read_pom_csv(source: str | Path | io.TextIOBase) -> PotentialOutcomeMatrix:
    """Load a POM CSV; rows may come in any order but must form a full W x M grid."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_pom_csv(fh)
    reader = csv.DictReader(source)
    missing = set(POM_HEADER) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"POM CSV missing columns: {sorted(missing)}")
    rows = {}
    for rec in reader:
        key = (int(rec["whole_plot"]), int(rec["sub_plot"]))
        if key in rows:
            raise ValueError(f"duplicate unit {key}")
        rows[key] = [float(rec[f"y{k}"]) for k in range(1, 5)]
    if not rows:
        raise ValueError("POM CSV has no rows")
    plots = sorted({w for w, _ in rows})
    subs = sorted({m for _, m in rows})
    W, M = len(plots), len(subs)
    if plots != list(range(1, W + 1)) or subs != list(range(1, M + 1)):
        raise ValueError("whole_plot and sub_plot must be numbered 1..W and 1..M")
    if len(rows) != W * M:
        raise ValueError("unequal block sizes are not supported")
    values = [rows[(w, m)] for w in plots for m in subs]
    return PotentialOutcomeMatrix(BlockLayout(W, M), np.array(values))


def write_pom_csv(pom: PotentialOutcomeMatrix, sink: io.TextIOBase) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(POM_HEADER)
    for i, row in enumerate(pom.values):
        w, m = divmod(i, pom.layout.M)
        writer.writerow([w + 1, m + 1, *(repr(float(v)) for v in row)])
