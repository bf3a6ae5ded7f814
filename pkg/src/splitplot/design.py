"""Split-plot and completely randomized 2x2 designs.

Both designs are summarized by the assignment vector ``Z*``, the stack of the
four arm indicators each divided by its arm size.  Its covariance has a
Kronecker structure: a 4x4 coefficient matrix times an N x N centering
projection (one term for complete randomization, a between-plot and a
within-plot term for the split-plot design).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import numpy.typing as npt

from .pom import BlockLayout, G_A, G_B, build_projections
from .rng import as_stream, partial_fisher_yates, shuffle_tags


@dataclass(frozen=True)
class SplitPlotSpec:
    """Whole-plot factor A on ``W_plus`` of ``W`` plots, factor B on ``M_plus`` of ``M`` sub-plots."""

    layout: BlockLayout
    W_plus: int
    M_plus: int

    def __post_init__(self) -> None:
        if not 1 <= self.W_plus <= self.layout.W - 1:
            raise ValueError(f"W_plus must be in [1, {self.layout.W - 1}], got {self.W_plus}")
        if not 1 <= self.M_plus <= self.layout.M - 1:
            raise ValueError(f"M_plus must be in [1, {self.layout.M - 1}], got {self.M_plus}")

    @classmethod
    def balanced(cls, W: int, M: int) -> "SplitPlotSpec":
        if W % 2 or M % 2:
            raise ValueError("a balanced split-plot design needs even W and M")
        return cls(BlockLayout(W, M), W // 2, M // 2)

    @property
    def W(self) -> int:
        return self.layout.W

    @property
    def M(self) -> int:
        return self.layout.M

    @property
    def N(self) -> int:
        return self.layout.N

    @property
    def W_minus(self) -> int:
        return self.layout.W - self.W_plus

    @property
    def M_minus(self) -> int:
        return self.layout.M - self.M_plus

    @property
    def r_A(self) -> float:
        return self.W_plus / self.W_minus

    @property
    def r_B(self) -> float:
        return self.M_plus / self.M_minus

    @property
    def gamma_A(self) -> float:
        return self.r_A + 1.0 / self.r_A + 2.0

    @property
    def gamma_B(self) -> float:
        return self.r_B + 1.0 / self.r_B + 2.0

    @property
    def arm_sizes(self) -> tuple[int, int, int, int]:
        return (
            self.W_minus * self.M_minus,
            self.W_minus * self.M_plus,
            self.W_plus * self.M_minus,
            self.W_plus * self.M_plus,
        )

    @property
    def can_estimate_variance(self) -> bool:
        """Both factor-A arms hold at least two whole-plots."""
        return self.W_minus >= 2 and self.W_plus >= 2

    def cr_counterpart(self) -> "CompletelyRandomizedSpec":
        """Complete randomization with the same arm sizes."""
        return CompletelyRandomizedSpec(self.N, self.arm_sizes, self.layout)


@dataclass(frozen=True)
class CompletelyRandomizedSpec:
    N: int
    arm_sizes: tuple[int, int, int, int]
    layout: Optional[BlockLayout] = None

    def __post_init__(self) -> None:
        sizes = tuple(int(n) for n in self.arm_sizes)
        if len(sizes) != 4 or min(sizes) < 1:
            raise ValueError("need four arm sizes, each at least 1")
        if sum(sizes) != self.N:
            raise ValueError(f"arm sizes {sizes} do not sum to N={self.N}")
        if self.layout is not None and self.layout.N != self.N:
            raise ValueError("layout size does not match N")
        object.__setattr__(self, "arm_sizes", sizes)

    @classmethod
    def balanced(cls, N: int, layout: Optional[BlockLayout] = None) -> "CompletelyRandomizedSpec":
        if N % 4:
            raise ValueError("a balanced design needs N divisible by 4")
        return cls(N, (N // 4,) * 4, layout)


DesignSpec = Union[SplitPlotSpec, CompletelyRandomizedSpec]


def _treatment_from_levels(a: npt.ArrayLike, b: npt.ArrayLike) -> npt.NDArray[np.int8]:
    a = np.asarray(a)
    b = np.asarray(b)
    return (1 + 2 * (a > 0) + (b > 0)).astype(np.int8)


@dataclass(frozen=True)
class Assignment:
    """One realized allocation: ``treatment[i]`` in 1..4 for unit ``i`` (row order of the POM)."""

    treatment: npt.NDArray[np.int8]
    layout: Optional[BlockLayout] = None

    def __post_init__(self) -> None:
        t = np.array(self.treatment, dtype=np.int8)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("treatment must be a non-empty vector")
        if np.any((t < 1) | (t > 4)):
            raise ValueError("treatments must be coded 1..4")
        if self.layout is not None and t.size != self.layout.N:
            raise ValueError("treatment vector does not match the layout")
        t.setflags(write=False)
        object.__setattr__(self, "treatment", t)

    @property
    def N(self) -> int:
        return self.treatment.size

    @property
    def arm_sizes(self) -> tuple[int, int, int, int]:
        counts = np.bincount(self.treatment, minlength=5)[1:]
        return tuple(int(c) for c in counts)

    @property
    def indicators(self) -> npt.NDArray[np.float64]:
        """``(4, N)`` matrix whose row ``k-1`` is the indicator of arm ``k``."""
        return (self.treatment[None, :] == np.arange(1, 5)[:, None]).astype(np.float64)

    @property
    def zstar(self) -> npt.NDArray[np.float64]:
        sizes = np.array(self.arm_sizes, dtype=np.float64)
        if np.any(sizes == 0):
            raise ValueError("assignment vector undefined with an empty arm")
        return (self.indicators / sizes[:, None]).ravel()

    @property
    def level_A(self) -> npt.NDArray[np.int8]:
        return G_A.astype(np.int8)[self.treatment - 1]

    @property
    def level_B(self) -> npt.NDArray[np.int8]:
        return G_B.astype(np.int8)[self.treatment - 1]

    def is_split_plot(self) -> bool:
        """Factor A constant within every whole-plot."""
        if self.layout is None:
            return False
        a = self.level_A.reshape(self.layout.W, self.layout.M)
        return bool(np.all(a == a[:, :1]))

    @property
    def whole_plot_levels(self) -> npt.NDArray[np.int8]:
        """Factor-A level of each whole-plot; only defined for split-plot assignments."""
        if not self.is_split_plot():
            raise ValueError("factor A is not constant within whole-plots")
        return self.level_A.reshape(self.layout.W, self.layout.M)[:, 0].copy()

    def satisfies(self, spec: DesignSpec) -> bool:
        """Whether this allocation is in the support of ``spec``."""
        if self.N != spec.N or self.arm_sizes != tuple(spec.arm_sizes):
            return False
        if isinstance(spec, CompletelyRandomizedSpec):
            return True
        if self.layout != spec.layout or not self.is_split_plot():
            return False
        if int(np.sum(self.whole_plot_levels > 0)) != spec.W_plus:
            return False
        b = self.level_B.reshape(spec.W, spec.M)
        return bool(np.all(np.sum(b > 0, axis=1) == spec.M_plus))


def randomize_cr(spec: CompletelyRandomizedSpec, rng=None) -> Assignment:
    """Shuffle a deck of ``N_k`` tags of each treatment onto units ``1..N``."""
    rng = as_stream(rng)
    deck = np.repeat(np.arange(1, 5, dtype=np.int8), spec.arm_sizes)
    return Assignment(shuffle_tags(rng, deck), spec.layout)


def randomize_sp(spec: SplitPlotSpec, rng=None) -> Assignment:
    """Two-stage randomization: plots to levels of A, then sub-plots to levels of B."""
    rng = as_stream(rng)
    W, M = spec.W, spec.M
    a = np.full(W, -1, dtype=np.int8)
    a[partial_fisher_yates(rng, W, spec.W_plus)[0]] = 1
    b = np.full((W, M), -1, dtype=np.int8)
    picks = partial_fisher_yates(rng, M, spec.M_plus, batch=W)
    b[np.arange(W)[:, None], picks] = 1
    t = _treatment_from_levels(np.repeat(a, M), b.ravel())
    return Assignment(t, spec.layout)


def cr_coefficients(N: int, arm_sizes) -> npt.NDArray[np.float64]:
    sizes = np.asarray(arm_sizes, dtype=np.float64)
    return (np.diag(N / sizes) - np.ones((4, 4))) / (N * (N - 1))


def sp_coefficients(spec: SplitPlotSpec) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Between-plot and within-plot coefficient matrices of the split-plot design."""
    W, M, N = spec.W, spec.M, spec.N
    rA, rB = spec.r_A, spec.r_B
    C_btw = np.array(
        [
            [rA, rA, -1, -1],
            [rA, rA, -1, -1],
            [-1, -1, 1 / rA, 1 / rA],
            [-1, -1, 1 / rA, 1 / rA],
        ]
    ) / (N * (W - 1))
    lo, hi = 1 + rA, 1 + 1 / rA
    C_in = np.array(
        [
            [lo * rB, -lo, 0, 0],
            [-lo, lo / rB, 0, 0],
            [0, 0, hi * rB, -hi],
            [0, 0, -hi, hi / rB],
        ]
    ) / (N * W * (M - 1))
    return C_btw, C_in


@dataclass(frozen=True)
class SamplingMoments:
    """Mean and covariance of ``Z*``; the 4N x 4N covariance is built on request."""

    design: str  # "SP" or "CR"
    N: int
    mean: npt.NDArray[np.float64]
    C: Optional[npt.NDArray[np.float64]] = None
    C_btw: Optional[npt.NDArray[np.float64]] = None
    C_in: Optional[npt.NDArray[np.float64]] = None
    layout: Optional[BlockLayout] = None

    def full_cov(self) -> npt.NDArray[np.float64]:
        if self.design == "CR":
            P_N = np.eye(self.N) - 1.0 / self.N
            return np.kron(self.C, P_N)
        proj = build_projections(self.layout)
        return np.kron(self.C_btw, proj.P_btw) + np.kron(self.C_in, proj.P_in)


def theoretical_assignment_moments(spec: DesignSpec) -> SamplingMoments:
    mean = np.full(4 * spec.N, 1.0 / spec.N)
    if isinstance(spec, CompletelyRandomizedSpec):
        return SamplingMoments("CR", spec.N, mean, C=cr_coefficients(spec.N, spec.arm_sizes),
                               layout=spec.layout)
    C_btw, C_in = sp_coefficients(spec)
    return SamplingMoments("SP", spec.N, mean, C_btw=C_btw, C_in=C_in, layout=spec.layout)


ASSIGNMENT_HEADER = ("whole_plot", "sub_plot", "level_A", "level_B", "treatment")


def write_assignment_csv(assignment: Assignment, sink: io.TextIOBase) -> None:
    if assignment.layout is None:
        raise ValueError("assignment needs a block layout to be serialized")
    M = assignment.layout.M
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(ASSIGNMENT_HEADER)
    for i, (a, b, t) in enumerate(zip(assignment.level_A, assignment.level_B, assignment.treatment)):
        w, m = divmod(i, M)
        writer.writerow([w + 1, m + 1, int(a), int(b), int(t)])


def read_grid_csv(source, value_columns: tuple[str, ...]):
    """Read ``whole_plot,sub_plot,...`` rows into a layout and a dict of sorted columns."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_grid_csv(fh, value_columns)
    reader = csv.DictReader(source)
    needed = {"whole_plot", "sub_plot", *value_columns}
    missing = needed - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"CSV missing columns: {sorted(missing)}")
    rows = {}
    for rec in reader:
        key = (int(rec["whole_plot"]), int(rec["sub_plot"]))
        if key in rows:
            raise ValueError(f"duplicate unit {key}")
        rows[key] = rec
    plots = sorted({w for w, _ in rows})
    subs = sorted({m for _, m in rows})
    W, M = len(plots), len(subs)
    if plots != list(range(1, W + 1)) or subs != list(range(1, M + 1)) or len(rows) != W * M:
        raise ValueError("units must form a complete W x M grid numbered from 1")
    ordered = [rows[(w, m)] for w in plots for m in subs]
    return BlockLayout(W, M), {c: [r[c] for r in ordered] for c in value_columns}


def read_assignment_csv(source) -> Assignment:
    layout, cols = read_grid_csv(source, ("treatment",))
    t = np.array([int(v) for v in cols["treatment"]], dtype=np.int8)
    return Assignment(t, layout)
