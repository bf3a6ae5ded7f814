"""Ground truth by exhaustive enumeration of the randomization distribution.

Every assignment in the support of a design is equally likely, so exact
sampling moments are plain averages over the enumerated support.  These are
compared against the closed forms in :mod:`splitplot.design` and
:mod:`splitplot.estimator`, and against the exact residual covariances of the
derived linear model implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
import numpy.typing as npt

from .design import (
    Assignment,
    CompletelyRandomizedSpec,
    DesignSpec,
    SplitPlotSpec,
    theoretical_assignment_moments,
)
from .estimator import _contrast, estimator_bias, sampling_variance_cr, sampling_variance_sp
from .pom import (
    CONTRASTS,
    G_A,
    G_B,
    PotentialOutcomeMatrix,
    build_projections,
    centering_matrix,
    factorial_effects,
    summarize_covariances,
)

DEFAULT_CAP = 1_000_000
CR_MAX_UNITS = 12
_CHUNK = 4096


class EnumerationTooLarge(RuntimeError):
    pass


def colex_subsets(n: int, k: int) -> Iterator[tuple[int, ...]]:
    """All ``k``-subsets of ``range(n)`` in colexicographic order (Gosper's hack)."""
    if k == 0:
        yield ()
        return
    if k > n:
        return
    mask = (1 << k) - 1
    limit = 1 << n
    while mask < limit:
        yield tuple(i for i in range(n) if mask >> i & 1)
        low = mask & -mask
        ripple = mask + low
        mask = (((ripple ^ mask) >> 2) // low) | ripple


def enumeration_size(spec: DesignSpec) -> int:
    if isinstance(spec, SplitPlotSpec):
        return math.comb(spec.W, spec.W_plus) * math.comb(spec.M, spec.M_plus) ** spec.W
    count = math.factorial(spec.N)
    for n_k in spec.arm_sizes:
        count //= math.factorial(n_k)
    return count


def _check_cap(spec: DesignSpec, cap: int) -> int:
    size = enumeration_size(spec)
    if size > cap:
        raise EnumerationTooLarge(f"{size} assignments exceed the cap of {cap}")
    if isinstance(spec, CompletelyRandomizedSpec) and spec.N > CR_MAX_UNITS:
        raise EnumerationTooLarge(f"complete randomization enumerated only for N <= {CR_MAX_UNITS}")
    return size


def _level_rows(n: int, k: int) -> npt.NDArray[np.int8]:
    rows = np.full((math.comb(n, k), n), -1, dtype=np.int8)
    for r, subset in enumerate(colex_subsets(n, k)):
        rows[r, list(subset)] = 1
    return rows


def treatment_table(spec: DesignSpec, cap: int = DEFAULT_CAP) -> npt.NDArray[np.int8]:
    """``(count, N)`` array with one row per assignment in the design's support."""
    size = _check_cap(spec, cap)
    if isinstance(spec, SplitPlotSpec):
        W, M = spec.W, spec.M
        a_rows = _level_rows(W, spec.W_plus)  # (nA, W)
        b_rows = _level_rows(M, spec.M_plus)  # (nB, M)
        nB = b_rows.shape[0]
        combos = np.indices((nB,) * W).reshape(W, -1).T  # (nB**W, W), last plot fastest
        b = b_rows[combos]  # (nB**W, W, M)
        a = (a_rows > 0)[:, None, :, None]
        t = 1 + 2 * a.astype(np.int8) + (b > 0)[None].astype(np.int8)
        table = t.reshape(-1, spec.N).astype(np.int8)
    else:
        table = np.empty((size, spec.N), dtype=np.int8)
        row = 0
        units = tuple(range(spec.N))

        def fill(remaining, arm, current):
            nonlocal row
            if arm == 3:
                current[list(remaining)] = 4
                table[row] = current
                row += 1
                return
            for pick in colex_subsets(len(remaining), spec.arm_sizes[arm]):
                chosen = [remaining[i] for i in pick]
                rest = tuple(u for i, u in enumerate(remaining) if i not in set(pick))
                current[chosen] = arm + 1
                fill(rest, arm + 1, current)

        fill(units, 0, np.zeros(spec.N, dtype=np.int8))
    assert table.shape[0] == size
    return table


def enumerate_assignments(spec: DesignSpec, cap: int = DEFAULT_CAP) -> Iterator[Assignment]:
    """Yield every assignment of the design exactly once, in a fixed order."""
    layout = spec.layout
    for row in treatment_table(spec, cap):
        yield Assignment(row, layout)


class _CompensatedSum:
    """Neumaier summation of equally shaped arrays."""

    def __init__(self):
        self.total = None
        self.comp = None

    def add(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.total is None:
            self.total = x.copy()
            self.comp = np.zeros_like(x)
            return
        t = self.total + x
        big = np.abs(self.total) >= np.abs(x)
        self.comp += np.where(big, (self.total - t) + x, (x - t) + self.total)
        self.total = t

    def value(self):
        return self.total + self.comp


@dataclass(frozen=True)
class ResidualProfile:
    delta_mu: npt.NDArray[np.float64]  # (N,)
    delta_F: npt.NDArray[np.float64]  # (N, 3) columns A, B, AB
    e_A: float
    e_B: float


def residual_profile(pom: PotentialOutcomeMatrix, spec: SplitPlotSpec) -> ResidualProfile:
    fx = factorial_effects(pom)
    rA, rB = spec.r_A, spec.r_B
    return ResidualProfile(
        delta_mu=fx.mu_unit - fx.mu_unit.mean(),
        delta_F=fx.tau_unit - fx.tau,
        e_A=(rA - 1) / (rA + 1),
        e_B=(rB - 1) / (rB + 1),
    )


def residuals(pom: PotentialOutcomeMatrix, assignment: Assignment) -> npt.NDArray[np.float64]:
    """Observed outcome minus the population mean of the assigned treatment."""
    t = assignment.treatment - 1
    return pom.values[np.arange(pom.N), t] - pom.means[t]


def residuals_from_deviations(pom: PotentialOutcomeMatrix, assignment: Assignment) -> npt.NDArray[np.float64]:
    """Same residuals rebuilt from unit deviations of the mean and the factorial effects."""
    fx = factorial_effects(pom)
    d_mu = fx.mu_unit - fx.mu_unit.mean()
    d_F = fx.tau_unit - fx.tau
    levels = CONTRASTS[:, assignment.treatment - 1].T  # (N, 3)
    return d_mu + 0.5 * np.sum(levels * d_F, axis=1)


@dataclass(frozen=True)
class EnumerationReport:
    assignment_count: int
    mean_tau_hat: npt.NDArray[np.float64]
    var_tau_hat: npt.NDArray[np.float64]
    mean_V_hat: Optional[npt.NDArray[np.float64]]
    mean_Zstar: npt.NDArray[np.float64]
    empirical_cov_Zstar: npt.NDArray[np.float64]
    residual_cov: npt.NDArray[np.float64]
    mean_s2_btw: Optional[npt.NDArray[np.float64]] = None  # split-plot only, 4x4 with zero off-blocks


def _chunk_stats(pom, spec, T):
    """Per-assignment quantities for a block of treatment rows ``T`` (n, N)."""
    n, N = T.shape
    Y = pom.values
    sizes = np.array(spec.arm_sizes, dtype=np.float64)
    y_obs = Y[np.arange(N)[None, :], T - 1]
    ind = (T[:, None, :] == np.arange(1, 5)[None, :, None])  # (n, 4, N)
    means = np.einsum("nkj,nj->nk", ind, y_obs) / sizes
    tau_hat = _contrast(means)
    zstar = (ind / sizes[None, :, None]).reshape(n, 4 * N)
    eps = y_obs - pom.means[T - 1]

    V_hat = None
    s2 = None
    if isinstance(spec, SplitPlotSpec):
        if spec.can_estimate_variance:
            V_hat, s2 = _sp_variance_batch(spec, T, y_obs, means)
    elif min(spec.arm_sizes) >= 2:
        dev = y_obs - np.take_along_axis(means, T.astype(np.int64) - 1, axis=1)
        s2_arm = np.einsum("nkj,nj->nk", ind, dev * dev) / (sizes - 1)
        V_hat = np.repeat(0.25 * np.sum(s2_arm / sizes, axis=1, keepdims=True), 3, axis=1)
    return tau_hat, V_hat, zstar, eps, s2


def _sp_variance_batch(spec, T, y_obs, means):
    n = T.shape[0]
    W, M = spec.W, spec.M
    Tb = T.reshape(n, W, M)
    yb = y_obs.reshape(n, W, M)
    a = np.where(Tb[:, :, 0] >= 3, 1, -1)
    plus_b = (Tb == 2) | (Tb == 4)
    y_minus = (yb * ~plus_b).sum(axis=2) / spec.M_minus
    y_plus = (yb * plus_b).sum(axis=2) / spec.M_plus
    g = CONTRASTS
    V = np.zeros((n, 3))
    s2 = np.zeros((n, 4, 4))
    for z, lo, W_z in ((-1, 0, spec.W_minus), (1, 2, spec.W_plus)):
        sel = (a == z).astype(np.float64)
        dm = (y_minus - means[:, lo:lo + 1]) * sel
        dp = (y_plus - means[:, lo + 1:lo + 2]) * sel
        s2[:, lo, lo] = (dm * dm).sum(1) / (W_z - 1)
        s2[:, lo, lo + 1] = s2[:, lo + 1, lo] = (dm * dp).sum(1) / (W_z - 1)
        s2[:, lo + 1, lo + 1] = (dp * dp).sum(1) / (W_z - 1)
        d = g[None, :, lo, None] * dm[:, None, :] + g[None, :, lo + 1, None] * dp[:, None, :]
        V += (d * d).sum(axis=2) / ((W_z - 1) * W_z)
    return 0.25 * V, s2


def exact_moments(pom: PotentialOutcomeMatrix, spec: DesignSpec, cap: int = DEFAULT_CAP) -> EnumerationReport:
    """Exact randomization moments by averaging over every assignment."""
    if spec.N != pom.N:
        raise ValueError("spec and POM sizes differ")
    table = treatment_table(spec, cap)
    count = table.shape[0]
    chunks = [table[i:i + _CHUNK] for i in range(0, count, _CHUNK)]

    sums = {name: _CompensatedSum() for name in ("tau", "V", "z", "eps", "s2")}
    for T in chunks:
        tau_hat, V_hat, zstar, eps, s2 = _chunk_stats(pom, spec, T)
        sums["tau"].add(tau_hat.sum(0))
        sums["z"].add(zstar.sum(0))
        sums["eps"].add(eps.sum(0))
        if V_hat is not None:
            sums["V"].add(V_hat.sum(0))
        if s2 is not None:
            sums["s2"].add(s2.sum(0))
    mean = {k: (s.value() / count if s.total is not None else None) for k, s in sums.items()}

    second = {name: _CompensatedSum() for name in ("tau", "z", "eps")}
    for T in chunks:
        tau_hat, _, zstar, eps, _ = _chunk_stats(pom, spec, T)
        dt = tau_hat - mean["tau"]
        second["tau"].add((dt * dt).sum(0))
        dz = zstar - mean["z"]
        second["z"].add(dz.T @ dz)
        de = eps - mean["eps"]
        second["eps"].add(de.T @ de)

    return EnumerationReport(
        assignment_count=count,
        mean_tau_hat=mean["tau"],
        var_tau_hat=second["tau"].value() / count,
        mean_V_hat=mean["V"],
        mean_Zstar=mean["z"],
        empirical_cov_Zstar=second["z"].value() / count,
        residual_cov=second["eps"].value() / count,
        mean_s2_btw=mean["s2"],
    )


def residual_covariance(pom: PotentialOutcomeMatrix, spec: SplitPlotSpec, mode: str = "finite_formula",
                        cap: int = DEFAULT_CAP) -> npt.NDArray[np.float64]:
    """N x N covariance of the derived-linear-model residuals under a split-plot design.

    ``enumerated`` averages over the support; ``finite_formula`` uses the exact
    closed forms at the given ``(W, M)``; ``asymptotic`` gives the limit as both
    grow with the arm ratios fixed (zero across whole-plots).
    """
    if mode == "enumerated":
        return exact_moments(pom, spec, cap).residual_cov
    if mode not in ("finite_formula", "asymptotic"):
        raise ValueError(f"unknown mode {mode!r}")
    prof = residual_profile(pom, spec)
    rA, rB = spec.r_A, spec.r_B
    kA = rA / (rA + 1) ** 2
    kB = rB / (rB + 1) ** 2
    dA, dB, dAB = prof.delta_F.T
    q = dA + prof.e_B * dAB  # whole-plot driven part
    same_plot_A = kA * np.outer(q, q)
    # (dB, dAB) [[1, e_A], [e_A, 1]] (dB', dAB')'
    bform = np.outer(dB, dB) + prof.e_A * (np.outer(dB, dAB) + np.outer(dAB, dB)) + np.outer(dAB, dAB)

    plot = pom.layout.plot_of()
    same = plot[:, None] == plot[None, :]
    diag = np.eye(pom.N, dtype=bool)
    W, M = spec.W, spec.M
    if mode == "asymptotic":
        out = np.where(same, same_plot_A, 0.0)
    else:
        out = np.where(same, same_plot_A - kB / (M - 1) * bform, -kA / (W - 1) * np.outer(q, q))
    # unit variances: the sub-plot term enters with the full variance of B
    out[diag] = np.diag(same_plot_A) + kB * np.diag(bform)
    return out


def indicator_second_moment(spec: SplitPlotSpec, k: int, l: int) -> npt.NDArray[np.float64]:
    """Closed form of E[Z(l) Z(k)^T] for treatments sharing a level of factor A."""
    if G_A[k - 1] != G_A[l - 1]:
        raise ValueError("treatments must share the level of factor A")
    N, W, M = spec.N, spec.W, spec.M
    W_z = spec.W_plus if G_A[k - 1] > 0 else spec.W_minus
    M_of = {-1.0: spec.M_minus, 1.0: spec.M_plus}
    Mk, Ml = M_of[G_B[k - 1]], M_of[G_B[l - 1]]
    proj = build_projections(spec.layout)
    return (
        spec.W_plus * spec.W_minus * Ml * Mk / (N * (W - 1)) * proj.P_btw
        + G_B[k - 1] * G_B[l - 1] * W_z * spec.M_plus * spec.M_minus / (N * (M - 1)) * proj.P_in
        + W_z**2 * Mk * Ml / N**2 * np.ones((N, N))
    )


def enumerated_indicator_second_moment(spec: SplitPlotSpec, k: int, l: int,
                                       cap: int = DEFAULT_CAP) -> npt.NDArray[np.float64]:
    table = treatment_table(spec, cap)
    zk = (table == k).astype(np.float64)
    zl = (table == l).astype(np.float64)
    return zl.T @ zk / table.shape[0]


def whole_plot_indicator_cov(spec: SplitPlotSpec) -> npt.NDArray[np.float64]:
    """Closed-form covariance of the +1 indicator of the whole-plot randomization."""
    W = spec.W
    return spec.W_plus * spec.W_minus / (W * (W - 1)) * centering_matrix(W)


def enumerated_whole_plot_indicator_cov(spec: SplitPlotSpec) -> npt.NDArray[np.float64]:
    rows = (_level_rows(spec.W, spec.W_plus) > 0).astype(np.float64)
    dev = rows - rows.mean(axis=0)
    return dev.T @ dev / rows.shape[0]


def s2_btw_expectation(pom: PotentialOutcomeMatrix, spec: SplitPlotSpec) -> npt.NDArray[np.float64]:
    """Expected observed between-plot covariances (4x4, zero off the diagonal 2x2 blocks)."""
    cov = summarize_covariances(pom)
    pattern = np.array([[spec.r_B, -1.0], [-1.0, 1.0 / spec.r_B]]) / spec.M
    out = np.zeros((4, 4))
    for lo in (0, 2):
        blk = slice(lo, lo + 2)
        out[blk, blk] = cov.S2_btw[blk, blk] + pattern * cov.S2_in[blk, blk]
    return out


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _max_rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # entries far below the largest one are compared on the largest one's scale
    scale = np.maximum(np.abs(b), max(1e-9 * float(np.max(np.abs(b))), 1e-300))
    return float(np.max(np.abs(a - b) / scale))


def identity_checks(pom: PotentialOutcomeMatrix, spec: DesignSpec, cap: int = DEFAULT_CAP) -> list[IdentityCheck]:
    """Compare every closed form against enumeration for one design and POM."""
    rep = exact_moments(pom, spec, cap)
    theory = theoretical_assignment_moments(spec)
    fx = factorial_effects(pom)
    cov = summarize_covariances(pom)
    W, M = pom.layout.W, pom.layout.M
    checks = [
        IdentityCheck("covariance_decomposition",
                      _max_abs((pom.N - 1) * cov.S2, (W - 1) * M * cov.S2_btw + W * (M - 1) * cov.S2_in), 1e-9),
        IdentityCheck("assignment_mean", _max_abs(rep.mean_Zstar, theory.mean), 1e-12),
        IdentityCheck("assignment_covariance", _max_abs(rep.empirical_cov_Zstar, theory.full_cov()), 1e-12),
        IdentityCheck("unbiasedness", _max_abs(rep.mean_tau_hat, fx.tau), 1e-10),
    ]
    if isinstance(spec, SplitPlotSpec):
        var = sampling_variance_sp(pom, spec)
        checks.append(IdentityCheck("sampling_variance", _max_rel(rep.var_tau_hat, var), 1e-9))
        if rep.mean_V_hat is not None:
            checks.append(IdentityCheck("variance_estimator_bias",
                                        _max_abs(rep.mean_V_hat - rep.var_tau_hat, estimator_bias(pom, spec)),
                                        1e-9))
            checks.append(IdentityCheck("between_plot_sample_covariance",
                                        _max_abs(rep.mean_s2_btw, s2_btw_expectation(pom, spec)), 1e-10))
        checks.append(IdentityCheck("residual_covariance",
                                    _max_abs(rep.residual_cov, residual_covariance(pom, spec, "finite_formula")),
                                    1e-9))
        cr = spec.cr_counterpart()
        C = theoretical_assignment_moments(cr).C
        C_btw, C_in = theory.C_btw, theory.C_in
        checks.append(IdentityCheck("coefficient_identity",
                                    _max_abs((spec.W - 1) * C_btw + spec.W * (spec.M - 1) * C_in,
                                             (spec.N - 1) * C), 1e-14))
        e1 = max(_max_abs(enumerated_indicator_second_moment(spec, k, l, cap), indicator_second_moment(spec, k, l))
                 for k, l in ((1, 1), (1, 2), (2, 2), (3, 3), (3, 4), (4, 4)))
        checks.append(IdentityCheck("indicator_second_moment", e1, 1e-12))
        checks.append(IdentityCheck("whole_plot_indicator_cov",
                                    _max_abs(enumerated_whole_plot_indicator_cov(spec),
                                             whole_plot_indicator_cov(spec)), 1e-12))
    else:
        var = sampling_variance_cr(pom, spec)
        checks.append(IdentityCheck("sampling_variance", _max_rel(rep.var_tau_hat, var), 1e-9))
        if rep.mean_V_hat is not None:
            checks.append(IdentityCheck("variance_estimator_bias",
                                        _max_abs(rep.mean_V_hat - rep.var_tau_hat, fx.S2_F / spec.N), 1e-9))
    return checks

