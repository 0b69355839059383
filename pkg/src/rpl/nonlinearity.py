"""Model nonlinearities g(s), s = |u|^2, and their derivatives.

The solver family needs g through its fourth derivative: the profile
recursion Taylor-expands g around the squared ground state, and the
growth diagnostic samples |g^{(n)}(s)| / s^{2-n}. Supported forms are
rational functions P(s)/Q(s) with P(0) = 0 (so g(0) = 0, no linear
potential hiding in the nonlinearity) and Q(0) = 1.

The saturated quintic g(s) = -s^2 / (1 + sat * s) is the production
default: it is smooth, matches the quintic at small amplitude, and its
derivatives satisfy the s^{2-n} growth bounds on both ends.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import UnsupportedCase

MAX_DERIVATIVE_ORDER = 4


@dataclass(frozen=True)
class NonlinearitySpec:
    """g(s) = sum_p num[p-1] s^p / (1 + sum_q den[q-1] s^q)."""
    numerator: tuple[float, ...]          # coefficients of s^1, s^2, ...
    denominator: tuple[float, ...] = ()   # coefficients of s^1, s^2, ... (constant term fixed at 1)

    def __post_init__(self):
        if len(self.numerator) == 0 or not any(self.numerator):
            raise UnsupportedCase("numerator must carry at least one nonzero power of s")
        object.__setattr__(self, "numerator", tuple(float(c) for c in self.numerator))
        object.__setattr__(self, "denominator", tuple(float(c) for c in self.denominator))

    def label(self) -> str:
        return f"rational(num={list(self.numerator)}, den=[1]+{list(self.denominator)})"


def saturated_quintic(sat: float = 1.0) -> NonlinearitySpec:
    return NonlinearitySpec(numerator=(0.0, -1.0), denominator=(sat,))


def cubic() -> NonlinearitySpec:
    return NonlinearitySpec(numerator=(-1.0,))


def cubic_quintic(quintic: float) -> NonlinearitySpec:
    """g(s) = -s + quintic * s^2 (quintic > 0 is a defocusing correction)."""
    return NonlinearitySpec(numerator=(-1.0, quintic))


def _poly_derivs(coeffs_from_s1: tuple[float, ...], s: np.ndarray, order: int,
                 constant: float = 0.0) -> list[np.ndarray]:
    """Values and derivatives of constant + sum c_p s^p, p >= 1."""
    full = (constant,) + coeffs_from_s1
    out = []
    for k in range(order + 1):
        acc = np.zeros_like(s, dtype=float)
        for p in range(k, len(full)):
            c = full[p]
            if c == 0.0:
                continue
            fall = 1.0
            for j in range(k):
                fall *= (p - j)
            acc += c * fall * s ** (p - k)
        out.append(acc)
    return out


def evaluate(nl: NonlinearitySpec, s, order: int = 0) -> np.ndarray:
    """Return stacked [g(s), g'(s), ..., g^(order)(s)].

    Derivatives of P/Q via the exact recurrence
    g^{(n)} = (P^{(n)} - sum_{k=1..n} C(n,k) Q^{(k)} g^{(n-k)}) / Q,
    vectorized over s. Orders above four are refused: nothing in the
    laboratory is allowed to depend on higher smoothness.
    """
    if order > MAX_DERIVATIVE_ORDER:
        raise UnsupportedCase(f"derivative order {order} > {MAX_DERIVATIVE_ORDER}")
    s = np.asarray(s, dtype=float)
    scalar = s.ndim == 0
    s = np.atleast_1d(s)
    P = _poly_derivs(nl.numerator, s, order)
    Q = _poly_derivs(nl.denominator, s, order, constant=1.0)
    if np.any(np.abs(Q[0]) < 1e-14):
        raise UnsupportedCase("denominator vanishes on the requested samples")
    g = [P[0] / Q[0]]
    for n in range(1, order + 1):
        acc = P[n].copy()
        for k in range(1, n + 1):
            acc -= comb(n, k) * Q[k] * g[n - k]
        g.append(acc / Q[0])
    out = np.stack(g)
    return out[:, 0] if scalar else out


@dataclass(frozen=True)
class GrowthReport:
    """Advisory scan of |g^{(n)}(s)| <= C_n s^{2-n}, n = 0..4."""
    constants: tuple[float, ...]      # sup of the sampled ratios per n
    flagged_orders: tuple[int, ...]   # orders whose ratio still grows at a sample extreme
    s_range: tuple[float, float]

    @property
    def ok(self) -> bool:
        return not self.flagged_orders


def growth_report(nl: NonlinearitySpec, s_min: float = 1e-6, s_max: float = 1e6,
                  samples_per_decade: int = 8) -> GrowthReport:
    decades = np.log10(s_max / s_min)
    npts = max(16, int(decades * samples_per_decade))
    s = np.logspace(np.log10(s_min), np.log10(s_max), npts)
    derivs = evaluate(nl, s, order=MAX_DERIVATIVE_ORDER)
    constants, flagged = [], []
    tiny = 1e-300
    for n in range(MAX_DERIVATIVE_ORDER + 1):
        ratio = np.abs(derivs[n]) / s ** (2 - n)
        constants.append(float(ratio.max()))
        # log-log slope at the sample extremes; a ratio that behaves like a
        # negative power of s at 0 (or positive at infinity) is unbounded
        logr = np.log(np.maximum(ratio, tiny))
        logs = np.log(s)
        slope_zero = (logr[2] - logr[0]) / (logs[2] - logs[0])
        slope_inf = (logr[-1] - logr[-3]) / (logs[-1] - logs[-3])
        if (slope_zero < -0.05 and ratio[0] > tiny) or (slope_inf > 0.05 and ratio[-1] > tiny):
            flagged.append(n)
    return GrowthReport(tuple(constants), tuple(flagged), (s_min, s_max))
