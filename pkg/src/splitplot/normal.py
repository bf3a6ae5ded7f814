"""Standard normal quantile function.

Wichura's PPND16 rational approximation (Applied Statistics algorithm AS 241),
accurate to about 1e-16 relative over the open unit interval.  Kept in-house so
interval widths do not depend on the platform's special-function library.
"""

from __future__ import annotations

import math

import numpy as np
import numpy.typing as npt

_SPLIT1 = 0.425
_SPLIT2 = 5.0
_CONST1 = 0.180625
_CONST2 = 1.6

# central region, |p - 0.5| <= 0.425
_A = (
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
)
_B = (
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
)
# intermediate tail, sqrt(-log(min(p, 1-p))) <= 5
_C = (
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
)
_D = (
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
# far tail
_E = (
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
)
_F = (
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _horner(coefs, x):
    acc = coefs[-1]
    for c in reversed(coefs[:-1]):
        acc = acc * x + c
    return acc


def normal_quantile(p: float) -> float:
    """Return the ``p`` quantile of the standard normal distribution."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p!r}")
    q = p - 0.5
    if abs(q) <= _SPLIT1:
        r = _CONST1 - q * q
        return q * _horner(_A, r) / _horner(_B, r)
    r = math.sqrt(-math.log(min(p, 1.0 - p)))
    if r <= _SPLIT2:
        r -= _CONST2
        val = _horner(_C, r) / _horner(_D, r)
    else:
        r -= _SPLIT2
        val = _horner(_E, r) / _horner(_F, r)
    return -val if q < 0 else val


def normal_quantiles(p: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Vectorized :func:`normal_quantile` for arrays strictly inside (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("all probabilities must lie in (0, 1)")
    q = p - 0.5
    out = np.empty_like(p)

    central = np.abs(q) <= _SPLIT1
    qc = q[central]
    r = _CONST1 - qc * qc
    out[central] = qc * _horner(_A, r) / _horner(_B, r)

    tail = ~central
    r = np.sqrt(-np.log(np.minimum(p[tail], 1.0 - p[tail])))
    near = r <= _SPLIT2
    val = np.empty_like(r)
    rn = r[near] - _CONST2
    val[near] = _horner(_C, rn) / _horner(_D, rn)
    rf = r[~near] - _SPLIT2
    val[~near] = _horner(_E, rf) / _horner(_F, rf)
    out[tail] = np.where(q[tail] < 0, -val, val)
    return out
