"""Neymanian estimation for 2x2 split-plot and completely randomized experiments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import numpy.typing as npt

from .design import (
    Assignment,
    CompletelyRandomizedSpec,
    SplitPlotSpec,
    cr_coefficients,
    read_grid_csv,
    sp_coefficients,
)
from .normal import normal_quantile
from .pom import CONTRASTS, EFFECTS, BlockLayout, PotentialOutcomeMatrix, factorial_effects, summarize_covariances


class EstimationError(ValueError):
    """Raised when the data cannot support the requested estimator."""


@dataclass(frozen=True)
class ObservedData:
    layout: Optional[BlockLayout]
    assignment: Assignment
    y_obs: npt.NDArray[np.float64]

    def __post_init__(self) -> None:
        y = np.array(self.y_obs, dtype=np.float64)
        if y.shape != (self.assignment.N,):
            raise ValueError("y_obs must have one entry per unit")
        y.setflags(write=False)
        object.__setattr__(self, "y_obs", y)

    @property
    def arm_means(self) -> npt.NDArray[np.float64]:
        sizes = np.array(self.assignment.arm_sizes, dtype=np.float64)
        if np.any(sizes == 0):
            raise EstimationError("every treatment arm must be non-empty")
        sums = np.bincount(self.assignment.treatment, weights=self.y_obs, minlength=5)[1:]
        return sums / sizes

    def plot_arm_means(self) -> npt.NDArray[np.float64]:
        """``(W, 4)`` observed block means per treatment; NaN where an arm is absent."""
        if self.layout is None:
            raise ValueError("plot means need a block layout")
        W, M = self.layout.W, self.layout.M
        t = self.assignment.treatment.reshape(W, M)
        y = self.y_obs.reshape(W, M)
        out = np.full((W, 4), np.nan)
        for k in range(1, 5):
            mask = t == k
            counts = mask.sum(axis=1)
            present = counts > 0
            out[present, k - 1] = (y * mask).sum(axis=1)[present] / counts[present]
        return out


def observe(pom: PotentialOutcomeMatrix, assignment: Assignment) -> ObservedData:
    """Reveal each unit's potential outcome under its assigned treatment."""
    if assignment.N != pom.N:
        raise ValueError(f"assignment has {assignment.N} units, POM has {pom.N}")
    if assignment.layout is not None and assignment.layout != pom.layout:
        raise ValueError("assignment layout does not match the POM layout")
    y = pom.values[np.arange(pom.N), assignment.treatment - 1]
    return ObservedData(pom.layout, assignment, y)


def _contrast(means: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Factorial contrasts of arm means along the last axis (length 4 -> 3)."""
    # pairs (1,2) and (3,4) summed first so that equal arm means cancel exactly
    g = CONTRASTS
    m = np.asarray(means)[..., None, :]
    return 0.5 * ((g[:, 0] * m[..., 0] + g[:, 1] * m[..., 1]) + (g[:, 2] * m[..., 2] + g[:, 3] * m[..., 3]))


def point_estimates(data: ObservedData) -> npt.NDArray[np.float64]:
    """Plug-in contrasts of observed arm means for A, B, AB."""
    return _contrast(data.arm_means)


def sampling_variance_cr(pom: PotentialOutcomeMatrix, spec: CompletelyRandomizedSpec) -> npt.NDArray[np.float64]:
    if spec.N != pom.N:
        raise ValueError("spec and POM sizes differ")
    S2 = summarize_covariances(pom).S2
    C = cr_coefficients(spec.N, spec.arm_sizes)
    return 0.25 * (spec.N - 1) * np.einsum("fk,kl,fl->f", CONTRASTS, C * S2, CONTRASTS)


def sampling_variance_sp(pom: PotentialOutcomeMatrix, spec: SplitPlotSpec) -> npt.NDArray[np.float64]:
    if spec.layout != pom.layout:
        raise ValueError("spec and POM layouts differ")
    W, M = spec.W, spec.M
    cov = summarize_covariances(pom)
    C_btw, C_in = sp_coefficients(spec)
    g = CONTRASTS
    btw = np.einsum("fk,kl,fl->f", g, C_btw * cov.S2_btw, g)
    within = np.einsum("fk,kl,fl->f", g, C_in * cov.S2_in, g)
    return 0.25 * (W - 1) * M * btw + 0.25 * W * (M - 1) * within


@dataclass(frozen=True)
class SpecialCases:
    """Closed forms for strictly additive outcomes with block variance ``S2_btw`` and within variance ``S2_in``."""

    sp_variances: npt.NDArray[np.float64]  # A, B, AB
    cr_variance: float  # common to A, B, AB
    discriminant: float
    predicted_sign: dict[str, int]  # sign of var_SP - var_CR

    @property
    def differences(self) -> npt.NDArray[np.float64]:
        return self.sp_variances - self.cr_variance


def closed_form_special_cases(spec: SplitPlotSpec, S2_btw: float, S2_in: float) -> SpecialCases:
    if S2_btw < 0 or S2_in < 0:
        raise ValueError("variances must be non-negative")
    W, M, N = spec.W, spec.M, spec.N
    gA, gB = spec.gamma_A, spec.gamma_B
    var_A = gA * S2_btw / W + gA * (gB - 4) * S2_in / (4 * N)
    var_B = gA * gB * S2_in / (4 * N)
    cr = gA * gB / (4 * (N - 1)) * ((W - 1) / W * S2_btw + (M - 1) / M * S2_in)
    disc = S2_btw - S2_in / M
    s = int(np.sign(disc))
    return SpecialCases(np.array([var_A, var_B, var_B]), float(cr), float(disc), {"A": s, "B": -s, "AB": -s})


def balanced_sp_variances(pom: PotentialOutcomeMatrix) -> npt.NDArray[np.float64]:
    """Split-plot sampling variances of a balanced design via effect and mean decompositions."""
    W, N = pom.layout.W, pom.N
    fx = factorial_effects(pom)
    A, B, AB = 0, 1, 2
    btw, within = fx.S2_F_btw, fx.S2_F_in
    var_A = 4 * fx.S2_mu_btw / W + (within[B] + within[AB]) / N
    var_B = btw[AB] / W + (4 * fx.S2_mu_in + within[A]) / N
    var_AB = btw[B] / W + (4 * fx.S2_mu_in + within[A]) / N
    return np.array([var_A, var_B, var_AB])


def _plot_summaries(data: ObservedData, spec: SplitPlotSpec):
    if data.layout != spec.layout:
        raise ValueError("data and spec layouts differ")
    a = data.assignment.whole_plot_levels
    W, M = spec.W, spec.M
    y = data.y_obs.reshape(W, M)
    plus_b = data.assignment.level_B.reshape(W, M) > 0
    n_plus = plus_b.sum(axis=1)
    if np.any(n_plus == 0) or np.any(n_plus == M):
        raise EstimationError("every whole-plot needs both levels of factor B")
    y_minus = (y * ~plus_b).sum(axis=1) / (M - n_plus)
    y_plus = (y * plus_b).sum(axis=1) / n_plus
    return a, y_minus, y_plus


def sample_between_covariances(data: ObservedData, spec: SplitPlotSpec) -> npt.NDArray[np.float64]:
    """4x4 matrix of observed between-plot covariances; the off-diagonal 2x2 blocks are zero."""
    a, y_minus, y_plus = _plot_summaries(data, spec)
    means = data.arm_means
    out = np.zeros((4, 4))
    for z, lo in ((-1, 0), (1, 2)):
        sel = a == z
        if sel.sum() < 2:
            raise EstimationError("need at least two whole-plots at each level of factor A")
        dev = np.column_stack([y_minus[sel] - means[lo], y_plus[sel] - means[lo + 1]])
        out[lo:lo + 2, lo:lo + 2] = dev.T @ dev / (sel.sum() - 1)
    return out


def estimate_variance_sp(data: ObservedData, spec: SplitPlotSpec) -> npt.NDArray[np.float64]:
    """Conservative split-plot variance estimates for A, B, AB.

    Each arm pair sharing a level of A contributes the sample variance, over
    its whole-plots, of the per-plot contrast; written as a sum of squares so
    the result is non-negative in floating point too.
    """
    a, y_minus, y_plus = _plot_summaries(data, spec)
    means = data.arm_means
    g = CONTRASTS
    V = np.zeros(3)
    for z, lo in ((-1, 0), (1, 2)):
        sel = a == z
        W_z = int(sel.sum())
        if W_z < 2:
            raise EstimationError("need at least two whole-plots at each level of factor A")
        d = np.outer(g[:, lo], y_minus[sel] - means[lo]) + np.outer(g[:, lo + 1], y_plus[sel] - means[lo + 1])
        V += (d * d).sum(axis=1) / ((W_z - 1) * W_z)
    return 0.25 * V


def estimator_bias(pom: PotentialOutcomeMatrix, spec: SplitPlotSpec) -> npt.NDArray[np.float64]:
    """Exact randomization bias ``E[V_hat] - var`` of the split-plot variance estimator.

    Equals ``g' S2_btw g / (4W)``, which is ``S2_F_btw / W`` because each
    factorial effect is half of its contrast.  Zero under between-block
    additivity.
    """
    if spec.layout != pom.layout:
        raise ValueError("spec and POM layouts differ")
    S2_btw = summarize_covariances(pom).S2_btw
    return np.einsum("fk,kl,fl->f", CONTRASTS, S2_btw, CONTRASTS) / (4 * spec.W)


def estimate_variance_cr(data: ObservedData) -> npt.NDArray[np.float64]:
    """Completely randomized variance estimate: a quarter of the sum of arm variances over arm sizes."""
    t = data.assignment.treatment
    sizes = np.array(data.assignment.arm_sizes, dtype=np.float64)
    if np.any(sizes < 2):
        raise EstimationError("every treatment arm needs at least two units")
    means = data.arm_means
    dev = data.y_obs - means[t - 1]
    s2 = np.bincount(t, weights=dev * dev, minlength=5)[1:] / (sizes - 1)
    return np.full(3, 0.25 * np.sum(s2 / sizes))


def confidence_interval(tau_hat, V_hat, alpha: float = 0.05) -> npt.NDArray[np.float64]:
    """``(len(tau_hat), 2)`` array of normal-quantile intervals."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    V_hat = np.asarray(V_hat, dtype=np.float64)
    if np.any(V_hat < 0):
        raise ValueError("variance estimates must be non-negative")
    half = normal_quantile(1.0 - alpha / 2.0) * np.sqrt(V_hat)
    return np.column_stack([tau_hat - half, tau_hat + half])


@dataclass(frozen=True)
class EffectEstimate:
    tau_hat: npt.NDArray[np.float64]
    V_hat: npt.NDArray[np.float64]
    ci: npt.NDArray[np.float64]
    method: str
    alpha: float

    def rows(self):
        for i, name in enumerate(EFFECTS):
            yield {
                "effect": name,
                "method": self.method,
                "tau_hat": float(self.tau_hat[i]),
                "v_hat": float(self.V_hat[i]),
                "ci_lo": float(self.ci[i, 0]),
                "ci_hi": float(self.ci[i, 1]),
                "alpha": self.alpha,
            }


def estimate(data: ObservedData, method: str = "SP", spec: Optional[SplitPlotSpec] = None,
             alpha: float = 0.05) -> EffectEstimate:
    """Point estimates, variance estimates and intervals under the chosen analysis."""
    method = method.upper()
    tau_hat = point_estimates(data)
    if method == "SP":
        if spec is None:
            raise ValueError("split-plot analysis needs the design spec")
        V = estimate_variance_sp(data, spec)
    elif method == "CR":
        V = estimate_variance_cr(data)
    else:
        raise ValueError(f"unknown method {method!r}")
    return EffectEstimate(tau_hat, V, confidence_interval(tau_hat, V, alpha), method, alpha)


def read_observed_csv(source) -> ObservedData:
    """Load ``whole_plot,sub_plot,treatment,y_obs`` rows (extra columns ignored)."""
    layout, cols = read_grid_csv(source, ("treatment", "y_obs"))
    t = np.array([int(v) for v in cols["treatment"]], dtype=np.int8)
    y = np.array([float(v) for v in cols["y_obs"]])
    return ObservedData(layout, Assignment(t, layout), y)
