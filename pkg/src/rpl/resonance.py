"""Multi-index combinatorics for the internal-mode amplitudes.

A multi-index m = (m_+, m_-) tracks the monomial z^{m_+} conj(z)^{m_-}.
Its combination frequency is lam(m) = sum_j lambda_j (m_+j - m_-j).
Indices with |lam(m)| > omega are resonant; the minimal ones (under the
strict domination order) drive radiation, everything they dominate is
ignored, and the rest is the non-resonant set the profile recursion
solves.

Enumeration is finite: every index of norm > K_enum = ceil(omega/min_j
lambda_j) + 1 is dominated by a minimal resonant index. (For a minimal
resonant pure-plus index, removing the smallest present unit must land
at or below omega, which pins its norm below K_enum; an arbitrary index
of larger norm shares its componentwise sums with a resonant pure-plus
index and inherits a dominating minimal element from it.) So the sets
computed from the bounded enumeration are exact, not truncations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ClassificationAmbiguous


@dataclass(frozen=True, order=True)
class MultiIndex:
    mp: tuple[int, ...]
    mm: tuple[int, ...]

    def __post_init__(self):
        if len(self.mp) != len(self.mm):
            raise ValueError("m_+ and m_- must have equal length")
        if any(k < 0 for k in self.mp + self.mm):
            raise ValueError("multi-index components must be nonnegative")

    @property
    def n_modes(self) -> int:
        return len(self.mp)

    @property
    def norm(self) -> int:
        return sum(self.mp) + sum(self.mm)

    @property
    def conj(self) -> "MultiIndex":
        return MultiIndex(self.mm, self.mp)

    @property
    def is_pure_plus(self) -> bool:
        return all(k == 0 for k in self.mm)

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        _require_same_n(self, other)
        return MultiIndex(tuple(a + b for a, b in zip(self.mp, other.mp)),
                          tuple(a + b for a, b in zip(self.mm, other.mm)))

    def __sub__(self, other: "MultiIndex") -> "MultiIndex":
        _require_same_n(self, other)
        return MultiIndex(tuple(a - b for a, b in zip(self.mp, other.mp)),
                          tuple(a - b for a, b in zip(self.mm, other.mm)))

    def key(self) -> str:
        return ",".join(map(str, self.mp)) + "|" + ",".join(map(str, self.mm))

    def as_json(self) -> list:
        return [list(self.mp), list(self.mm)]

    def __repr__(self):
        return f"m({self.mp},{self.mm})"


def zero_index(n: int) -> MultiIndex:
    return MultiIndex((0,) * n, (0,) * n)


def unit_plus(j: int, n: int) -> MultiIndex:
    return MultiIndex(tuple(1 if i == j else 0 for i in range(n)), (0,) * n)


def unit_minus(j: int, n: int) -> MultiIndex:
    return MultiIndex((0,) * n, tuple(1 if i == j else 0 for i in range(n)))


def z_power(z: np.ndarray, m: MultiIndex) -> complex:
    """z^{m_+} conj(z)^{m_-}."""
    out = 1.0 + 0.0j
    for zj, p, q in zip(np.atleast_1d(z), m.mp, m.mm):
        out *= zj ** p * np.conj(zj) ** q
    return complex(out)


def _require_same_n(a: MultiIndex, b: MultiIndex):
    if a.n_modes != b.n_modes:
        raise ValueError(f"multi-index length mismatch: {a.n_modes} vs {b.n_modes}")


def lam(lams, m: MultiIndex) -> float:
    """Combination frequency sum_j lambda_j (m_+j - m_-j)."""
    lams = tuple(lams)
    if len(lams) != m.n_modes:
        raise ValueError(f"expected {m.n_modes} mode frequencies, got {len(lams)}")
    return float(sum(l * (p - q) for l, p, q in zip(lams, m.mp, m.mm)))


def partial_order(m1: MultiIndex, m2: MultiIndex) -> str:
    """Relation of m1 to m2: 'equal', 'prec' (strict domination),
    'preceq' (componentwise sums <=, equal norms), or 'incomparable'.

    m1 preceq m2 iff m1_+j + m1_-j <= m2_+j + m2_-j for every j; strict
    (prec) additionally requires norm(m1) < norm(m2)."""
    _require_same_n(m1, m2)
    if m1 == m2:
        return "equal"
    le = all(p1 + q1 <= p2 + q2
             for p1, q1, p2, q2 in zip(m1.mp, m1.mm, m2.mp, m2.mm))
    if not le:
        return "incomparable"
    return "prec" if m1.norm < m2.norm else "preceq"


def _dominates(small: MultiIndex, big: MultiIndex) -> bool:
    return partial_order(small, big) == "prec"


def _compositions(budget: int, slots: int):
    """All tuples in N_0^slots with sum <= budget."""
    if slots == 0:
        yield ()
        return
    for first in range(budget + 1):
        for rest in _compositions(budget - first, slots - 1):
            yield (first,) + rest


@dataclass
class ResonanceGroup:
    k: int                      # 1-based group index
    r: float                    # threshold r_k > omega
    members: tuple[MultiIndex, ...]   # indices with lam(m) = +r_k

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class ResonanceStructure:
    n_modes: int
    lams: tuple[float, ...]
    omega: float
    tau_cls: float
    k_enum: int
    k_max: int
    r_min: tuple[MultiIndex, ...]
    groups: list[ResonanceGroup]
    nr: tuple[MultiIndex, ...]          # nonresonant indices with norm <= k_max
    lambda0: tuple[MultiIndex, ...]
    lambdaj: tuple[tuple[MultiIndex, ...], ...]
    h6_status: str
    h6_violations: list = field(default_factory=list)
    margin_omega: float = float("inf")   # min over non-ignored of ||lam(m)| - omega|
    margin_modes: float = float("inf")   # min over pure-plus norm>=2 of |lam(m) - lambda_j|

    def in_ignored(self, m: MultiIndex) -> bool:
        return any(_dominates(q, m) for q in self.r_min)

    def membership(self, m: MultiIndex) -> str:
        """'R_min', 'I', or 'NR' — valid for any index, any norm."""
        if m in self.r_min:
            return "R_min"
        return "I" if self.in_ignored(m) else "NR"

    @property
    def omega_stability_margin(self) -> float:
        """Conservative frequency-perturbation budget under which the
        classification cannot flip: the raw margin shrunk by the largest
        enumerated norm (each unit of an index shifts lam(m) at unit
        rate as the mode frequencies drift)."""
        return min(self.margin_omega, self.margin_modes) / (self.k_enum + 1)

    def to_json(self) -> dict:
        return {
            "n_modes": self.n_modes,
            "lambda": list(self.lams),
            "omega": self.omega,
            "tau_cls": self.tau_cls,
            "k_enum": self.k_enum,
            "k_max": self.k_max,
            "r_min": [m.as_json() for m in self.r_min],
            "groups": [{"k": g.k, "r": g.r, "members": [m.as_json() for m in g.members]}
                       for g in self.groups],
            "nr": [m.as_json() for m in self.nr],
            "lambda0": [m.as_json() for m in self.lambda0],
            "lambdaj": [[m.as_json() for m in lj] for lj in self.lambdaj],
            "h6": self.h6_status,
            "h6_violations": self.h6_violations,
            "margin_omega": self.margin_omega,
            "margin_modes": self.margin_modes,
            "omega_stability_margin": self.omega_stability_margin,
        }


def classify(lams, omega: float, tau_cls: float | None = None) -> ResonanceStructure:
    """Full classification of the index lattice for mode frequencies
    lams at gap edge omega. Ties within tau_cls of the resonance
    threshold or of a mode frequency are recorded as H6 violations (the
    profile stage refuses to run on them); the sets themselves are still
    returned, classified by the literal float comparisons."""
    lams = tuple(float(l) for l in lams)
    n = len(lams)
    if tau_cls is None:
        tau_cls = 1e-9 * omega
    if any(not (tau_cls < l < omega - tau_cls) for l in lams):
        raise ClassificationAmbiguous(
            f"mode frequencies {lams} must lie inside (0, omega) separated by tau_cls")

    if n == 0:
        return ResonanceStructure(0, (), omega, tau_cls, 0, 0, (), [], (zero_index(0),),
                                  (), (), "pass")

    k_enum = math.ceil(omega / min(lams)) + 1
    idx = [MultiIndex(c[:n], c[n:]) for c in _compositions(k_enum, 2 * n)]
    idx.sort(key=lambda m: (m.norm, m))
    lamv = {m: lam(lams, m) for m in idx}

    # minimal resonant indices: ascending norm, check against the
    # accumulated minimal list (domination chains descend through norms)
    r_min: list[MultiIndex] = []
    for m in idx:
        if abs(lamv[m]) > omega and not any(_dominates(q, m) for q in r_min):
            r_min.append(m)

    def ignored(m: MultiIndex) -> bool:
        return any(_dominates(q, m) for q in r_min)

    k_max = max((m.norm for m in r_min), default=0)
    nr = tuple(m for m in idx
               if m.norm <= k_max and m not in r_min and not ignored(m))

    lambda0 = tuple(m for m in nr if m.norm > 0 and abs(lamv[m]) <= tau_cls)
    lambdaj = tuple(tuple(m for m in nr if abs(lamv[m] - lams[j]) <= tau_cls)
                    for j in range(n))

    # group R_min by the positive threshold values
    pos = sorted((m for m in r_min if lamv[m] > 0), key=lambda m: lamv[m])
    groups: list[ResonanceGroup] = []
    for m in pos:
        if groups and abs(lamv[m] - groups[-1].r) <= tau_cls:
            groups[-1] = ResonanceGroup(groups[-1].k, groups[-1].r,
                                        groups[-1].members + (m,))
        else:
            groups.append(ResonanceGroup(len(groups) + 1, lamv[m], (m,)))

    # (H6): no non-ignored index may sit at the threshold, and no
    # pure-plus index of norm >= 2 may sit on a mode frequency
    violations = []
    margin_omega = float("inf")
    for m in idx:
        if ignored(m):
            continue
        d = abs(abs(lamv[m]) - omega)
        margin_omega = min(margin_omega, d)
        if d <= tau_cls:
            violations.append({"index": m.as_json(), "kind": "omega_tie",
                               "lam": lamv[m]})
    margin_modes = float("inf")
    for m in idx:
        if not m.is_pure_plus or m.norm < 2:
            continue
        for j in range(n):
            d = abs(lamv[m] - lams[j])
            margin_modes = min(margin_modes, d)
            if d <= tau_cls:
                violations.append({"index": m.as_json(), "kind": "mode_tie",
                                   "j": j, "lam": lamv[m]})

    return ResonanceStructure(
        n_modes=n, lams=lams, omega=omega, tau_cls=tau_cls,
        k_enum=k_enum, k_max=k_max,
        r_min=tuple(r_min), groups=groups, nr=nr,
        lambda0=lambda0, lambdaj=lambdaj,
        h6_status="fail" if violations else "pass",
        h6_violations=violations,
        margin_omega=margin_omega, margin_modes=margin_modes,
    )
