"""Refined profile recursion.

Builds the polynomial ansatz phi[omega, z] = sum_m z^m phi_m over
non-resonant multi-indices, together with the expansions of the flow
scalars (gauge rate, mode rates), degree by degree at a single anchor
frequency. Each index pair (m, conj m) reduces to one linear solve
against the linearized operators; the source fields G_m attached to the
minimal resonant indices fall out of the same bookkeeping and feed the
decay-rate stage.

Everything here is anchored: the frequency-family versions of the
coefficient equations (which would require continuing spectral
projections in omega) are deliberately out of scope, and residual()
measures the cost of that choice directly instead of assuming it.

Conventions. Coefficients are real radial fields. A pair (m, conj m) is
solved jointly in the sum/difference basis p = phi_m + phi_mbar,
q = phi_m - phi_mbar, where the equations decouple into
L_plus p - lam q = (data), L_minus q - lam p = (data) with lam = lam(m).
The gauge scalar of a zero-frequency pair is stored antisymmetrically:
theta_m = s/2 at the representative and -s/2 at its conjugate, so the
symmetric combination vanishes (that combination is absorbed by the
profile itself, L_plus being invertible on the radial even sector).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ConvergenceFailure, NearResonance,
                     RecursionOrderViolation, SingularFrame, UnsupportedCase)
from .grid import RadialField
from .groundstate import GroundState
from .linearization import InternalMode, LinearizedOperators, SpectralReport
from .nonlinearity import MAX_DERIVATIVE_ORDER, NonlinearitySpec, evaluate
from .resonance import (MultiIndex, ResonanceStructure, lam, unit_minus,
                        unit_plus, z_power, zero_index)

DEFAULT_TOL_PROF = 1e-8
DEFAULT_Z_MAX = 0.1


def _try_sub(a: MultiIndex, b: MultiIndex) -> MultiIndex | None:
    """a - b componentwise, or None if any entry would go negative."""
    mp = tuple(x - y for x, y in zip(a.mp, b.mp))
    mm = tuple(x - y for x, y in zip(a.mm, b.mm))
    if any(v < 0 for v in mp + mm):
        return None
    return MultiIndex(mp, mm)


# -- jets ------------------------------------------------------------------


@dataclass
class JetField:
    """Truncated power series in (z, conj z) with radial-field coefficients.

    Arithmetic truncates at total degree kmax. Conjugation in z swaps
    each index with its conjugate and conjugates the field, so jets with
    real coefficients are fixed-point sets of it.
    """
    kmax: int
    n_modes: int
    coeffs: dict[MultiIndex, RadialField]

    def __post_init__(self):
        for m in self.coeffs:
            if m.n_modes != self.n_modes:
                raise ValueError("multi-index arity mismatch in jet")
            if m.norm > self.kmax:
                raise ValueError(f"coefficient {m} beyond truncation degree {self.kmax}")

    def _check(self, other: "JetField"):
        if other.kmax != self.kmax or other.n_modes != self.n_modes:
            raise ValueError("jet mismatch (degree or arity)")

    def coeff(self, m: MultiIndex) -> RadialField | None:
        return self.coeffs.get(m)

    def __add__(self, other: "JetField") -> "JetField":
        self._check(other)
        out = dict(self.coeffs)
        for m, f in other.coeffs.items():
            out[m] = out[m] + f if m in out else f
        return JetField(self.kmax, self.n_modes, out)

    def __mul__(self, other: "JetField") -> "JetField":
        self._check(other)
        vals: dict[MultiIndex, np.ndarray] = {}
        grid = None
        for m1, f1 in self.coeffs.items():
            for m2, f2 in other.coeffs.items():
                if m1.norm + m2.norm > self.kmax:
                    continue
                m = m1 + m2
                v = f1.values * f2.values
                vals[m] = vals[m] + v if m in vals else v
                grid = f1.grid
        return JetField(self.kmax, self.n_modes,
                        {m: RadialField(grid, v) for m, v in vals.items()})

    def scaled(self, a) -> "JetField":
        return JetField(self.kmax, self.n_modes,
                        {m: a * f for m, f in self.coeffs.items()})

    def conj_z(self) -> "JetField":
        return JetField(self.kmax, self.n_modes,
                        {m.conj: f.conj() for m, f in self.coeffs.items()})

    def z_derivative(self, j: int, conjugate: bool = False) -> "JetField":
        """Derivative in z_j (or conj z_j): index m contributes its
        component count at the slot as the combinatorial factor."""
        e = unit_minus(j, self.n_modes) if conjugate else unit_plus(j, self.n_modes)
        out = {}
        for m, f in self.coeffs.items():
            k = m.mm[j] if conjugate else m.mp[j]
            if k > 0:
                out[m - e] = float(k) * f
        return JetField(self.kmax, self.n_modes, out)

    def compose_scalar(self, derivs: list[np.ndarray]) -> "JetField":
        """Taylor-compose a scalar function through this jet around the
        base coefficient: derivs[k] is the k-th derivative at the base,
        sampled on the grid. Horner in the zero-base part of the jet."""
        zero = zero_index(self.n_modes)
        if zero not in self.coeffs:
            raise UnsupportedCase("composition needs a base (zero-index) coefficient")
        grid = self.coeffs[zero].grid
        w = JetField(self.kmax, self.n_modes,
                     {m: f for m, f in self.coeffs.items() if m.norm > 0})
        top = len(derivs) - 1
        out = JetField(self.kmax, self.n_modes,
                       {zero: RadialField(grid, np.asarray(derivs[top]) / math.factorial(top))})
        for k in range(top - 1, -1, -1):
            out = out * w + JetField(
                self.kmax, self.n_modes,
                {zero: RadialField(grid, np.asarray(derivs[k]) / math.factorial(k))})
        return out

    def eval_at(self, z: np.ndarray) -> RadialField:
        """Numeric evaluation: sum of z^m times the coefficients."""
        grid = next(iter(self.coeffs.values())).grid
        acc = np.zeros(grid.n, dtype=complex)
        for m, f in self.coeffs.items():
            acc += z_power(z, m) * f.values
        return RadialField(grid, acc)


def _scalar_jet_times(sjet: dict[MultiIndex, complex], fjet: JetField) -> JetField:
    # scalar series times field series, truncated like jet multiplication
    vals: dict[MultiIndex, np.ndarray] = {}
    grid = None
    for m1, c in sjet.items():
        for m2, f in fjet.coeffs.items():
            if m1.norm + m2.norm > fjet.kmax:
                continue
            m = m1 + m2
            v = c * f.values
            vals[m] = vals[m] + v if m in vals else v
            grid = f.grid
    return JetField(fjet.kmax, fjet.n_modes,
                    {m: RadialField(grid, v) for m, v in vals.items()})


def expand_nonlinearity(phi_jet: JetField, nl: NonlinearitySpec) -> JetField:
    """Jet of g(|phi|^2) phi through the truncation degree.

    The base coefficient must be a strictly positive real profile; the
    scalar Taylor expansion of g is taken around its square. Truncation
    degree K requires the K-th derivative of g.
    """
    zero = zero_index(phi_jet.n_modes)
    base = phi_jet.coeff(zero)
    if base is None:
        raise UnsupportedCase("nonlinearity expansion needs a base coefficient")
    if base.is_complex or float(np.min(base.values)) <= 0.0:
        raise UnsupportedCase("nonlinearity expansion base must be strictly positive")
    if phi_jet.kmax > MAX_DERIVATIVE_ORDER:
        raise UnsupportedCase(
            f"truncation degree {phi_jet.kmax} needs derivative order "
            f"{phi_jet.kmax} of the nonlinearity, above the supported "
            f"{MAX_DERIVATIVE_ORDER}; lower the expansion order or extend "
            "the derivative table")
    sjet = phi_jet * phi_jet.conj_z()
    s0 = sjet.coeff(zero).values
    derivs = evaluate(nl, np.real(s0), order=phi_jet.kmax)
    return sjet.compose_scalar(list(derivs)) * phi_jet


# -- profile coefficients ---------------------------------------------------


@dataclass(frozen=True)
class ProfileCoefficient:
    """One solved coefficient of the profile expansion.

    theta_tilde is the gauge-rate scalar, present only on zero-frequency
    pairs (None elsewhere); lam_tilde maps a mode number k to the rate
    coefficient when the index sits on that mode frequency. residual is
    the verified defect of the coefficient equation, relative to the
    size of its data.
    """
    m: MultiIndex
    phi: RadialField
    theta_tilde: float | None
    lam_tilde: dict[int, float]
    residual: float


@dataclass
class RefinedProfile:
    omega: float
    n_modes: int
    k_max: int
    nl: NonlinearitySpec
    gs: GroundState
    rs: ResonanceStructure
    coeffs: dict[MultiIndex, ProfileCoefficient]
    # minimal resonant index -> (G_m, G_mbar), both real fields
    g_fields: dict[MultiIndex, tuple[RadialField, RadialField]]
    diagnostics: dict = field(default_factory=dict)

    def phi_jet(self) -> JetField:
        return JetField(self.k_max, self.n_modes,
                        {m: c.phi for m, c in self.coeffs.items()})

    def coefficient(self, m: MultiIndex) -> ProfileCoefficient:
        return self.coeffs[m]


@dataclass(frozen=True)
class FlowScalars:
    """Flow scalars of the assembled profile at a concrete (omega, z).

    theta is complex in general (the gauge convention makes the pair
    coefficients antisymmetric); omega_tilde is identically zero in the
    anchored construction and kept for the record.
    """
    theta: complex
    omega_tilde: float
    z_tilde: np.ndarray


@dataclass(frozen=True)
class ProfileResidual:
    total: RadialField          # full stationary defect at (omega, z)
    r1_sigma_norm: float        # defect minus the resonant sources, weighted norm
    defects: dict[str, float]   # tangent pairings after the corrector solve
    correctors: np.ndarray      # solved corrector scalars, for diagnostics


# -- known terms ------------------------------------------------------------


def _lower_order_expansion(coeffs, nl, deg: int, n_modes: int) -> JetField:
    jet = JetField(deg, n_modes,
                   {q: c.phi for q, c in coeffs.items() if q.norm < deg})
    return expand_nonlinearity(jet, nl)


def _known_one(coeffs, rs: ResonanceStructure, m: MultiIndex,
               expansion: JetField) -> RadialField:
    n = rs.n_modes
    grid = coeffs[zero_index(n)].phi.grid
    f = expansion.coeff(m)
    vals = np.zeros(grid.n) if f is None else np.array(np.real(f.values))
    # gauge-scalar cross terms: both split parts nonzero, the linear
    # occurrence (split with the base) belongs to the left side
    for m1, c1 in coeffs.items():
        if c1.theta_tilde is None or m1.norm == 0 or m1.norm >= m.norm:
            continue
        m2 = _try_sub(m, m1)
        if m2 is not None and m2 in coeffs:
            vals += c1.theta_tilde * coeffs[m2].phi.values
    # mode-scalar cross terms; the norm window keeps out the linear
    # occurrences that sit on the left side of the coefficient equation
    for m2, c2 in coeffs.items():
        for k, lt in c2.lam_tilde.items():
            m1 = _try_sub(m + unit_plus(k, n), m2)
            if (m1 is not None and 2 <= m1.norm < m.norm and m1 in coeffs):
                vals -= m1.mp[k] * lt * coeffs[m1].phi.values
            m1 = _try_sub(m + unit_minus(k, n), m2.conj)
            if (m1 is not None and 2 <= m1.norm < m.norm and m1 in coeffs):
                vals += m1.mm[k] * lt * coeffs[m1].phi.values
    return RadialField(grid, vals)


def known_terms(coeffs: dict[MultiIndex, ProfileCoefficient],
                nl: NonlinearitySpec, rs: ResonanceStructure, m: MultiIndex,
                _expansion: JetField | None = None
                ) -> tuple[RadialField, RadialField]:
    """Source pair (K_m, K_mbar) for the coefficient equation at m.

    Everything is assembled from strictly lower-order data: the z^m
    coefficient of the expanded nonlinearity (the linear terms are
    absent because the jet does not contain the unknown), plus the
    gauge- and mode-scalar cross terms.
    """
    missing = [q for q in rs.nr if q.norm < m.norm and q not in coeffs]
    if missing:
        raise RecursionOrderViolation(
            f"coefficients {missing} must be solved before {m}")
    if _expansion is None:
        _expansion = _lower_order_expansion(coeffs, nl, m.norm, rs.n_modes)
    return (_known_one(coeffs, rs, m, _expansion),
            _known_one(coeffs, rs, m.conj, _expansion))


# -- per-index solves --------------------------------------------------------


def _pair_rows(ops: LinearizedOperators, modes: list[InternalMode],
               lam_m: float, pair, thetas, lts, kpair):
    """Residual rows of the coefficient equation in the sum/difference
    basis; both should vanish for a solved coefficient."""
    phi = ops.gs.phi
    phi_m, phi_mb = pair
    th_m, th_mb = thetas
    lt_m, lt_mb = lts
    km, kmb = kpair
    p = phi_m + phi_mb
    q = phi_m - phi_mb
    row_p = ops.lplus.matvec_field(p) - lam_m * q + (th_m + th_mb) * phi + (km + kmb)
    row_q = ops.lminus.matvec_field(q) - lam_m * p + (th_m - th_mb) * phi + (km - kmb)
    for k, mode in enumerate(modes):
        ap = lt_m.get(k, 0.0) + lt_mb.get(k, 0.0)
        am = lt_m.get(k, 0.0) - lt_mb.get(k, 0.0)
        if ap:
            row_p = row_p - ap * (mode.xi_plus - mode.xi_minus)
        if am:
            row_q = row_q - am * (mode.xi_plus + mode.xi_minus)
    return row_p, row_q


def _block_matrix(ops: LinearizedOperators, lam_m: float) -> sp.csc_matrix:
    n = ops.gs.grid.n
    lp = ops.lplus.op.to_sparse()
    lmn = ops.lminus.op.to_sparse()
    shift = -lam_m * sp.identity(n, format="csr")
    return sp.bmat([[lp, shift], [shift, lmn]], format="csc")


def solve_coefficient(m: MultiIndex, kpair, ops: LinearizedOperators,
                      modes: list[InternalMode], rs: ResonanceStructure,
                      tol_prof: float = DEFAULT_TOL_PROF,
                      tau_res: float | None = None
                      ) -> tuple[ProfileCoefficient, ProfileCoefficient]:
    """Solve the coefficient equation for the pair (m, conj m).

    Returns the entries for m and for conj m, in that order. Dispatch:
    zero-frequency pairs get the bordered gauge solve, pairs on a mode
    frequency get the rate extraction plus the projected solve, and the
    rest is a direct block solve. A frequency close to the spectrum but
    outside those cases refuses with a near-resonance error.
    """
    omega = ops.gs.omega
    if tau_res is None:
        tau_res = 1e-6 * omega
    if m.norm < 2:
        raise UnsupportedCase(f"{m} is a root coefficient, fixed by the inputs")
    if rs.membership(m) != "NR":
        raise UnsupportedCase(f"{m} is resonant or dominated; no coefficient exists")
    lam_m = lam(rs.lams, m)
    if lam_m < -rs.tau_cls:
        a, b = solve_coefficient(m.conj, (kpair[1], kpair[0]), ops, modes,
                                 rs, tol_prof, tau_res)
        return b, a

    grid = ops.gs.grid
    n = grid.n
    km, kmb = kpair
    kp = km + kmb
    kq = km - kmb
    phi = ops.gs.phi
    cphi = grid.to_coeffs(phi.values)
    in_lambda0 = m in rs.lambda0
    on_modes = [k for k in range(rs.n_modes) if m in rs.lambdaj[k]]
    theta_m = theta_mb = None
    lt_m: dict[int, float] = {}

    if in_lambda0:
        # gauge branch: the symmetric part solves directly (the plus
        # operator is invertible on the even sector), the antisymmetric
        # part carries the gauge scalar and a kernel constraint
        p_c = ops.lplus.op.solve(-grid.to_coeffs(kp.values))
        bord = sp.bmat([[ops.lminus.op.to_sparse(), cphi[:, None]],
                        [cphi[None, :], None]], format="csc")
        rhs = np.concatenate([-grid.to_coeffs(kq.values), [0.0]])
        sol = spla.splu(bord).solve(rhs)
        q_c, s = sol[:n], float(sol[n])
        theta_m, theta_mb = 0.5 * s, -0.5 * s
    elif on_modes:
        for k in on_modes:
            lt_m[k] = float(km.inner(modes[k].xi_plus) + kmb.inner(modes[k].xi_minus))
        rp_vals = -kp.values
        rq_vals = -kq.values
        cols = []
        rows = []
        for k in on_modes:
            su = modes[k].xi_plus + modes[k].xi_minus
            di = modes[k].xi_plus - modes[k].xi_minus
            rp_vals = rp_vals + lt_m[k] * di.values
            rq_vals = rq_vals + lt_m[k] * su.values
            cs, cd = grid.to_coeffs(su.values), grid.to_coeffs(di.values)
            cols.append(np.concatenate([cs, cd]))
            rows.append(np.concatenate([cd, cs]))
        border_c = np.stack(cols, axis=1)
        border_r = np.stack(rows, axis=0)
        big = sp.bmat([[_block_matrix(ops, lam_m), border_c],
                       [border_r, None]], format="csc")
        rhs = np.concatenate([grid.to_coeffs(rp_vals), grid.to_coeffs(rq_vals),
                              np.zeros(len(on_modes))])
        sol = spla.splu(big).solve(rhs)
        p_c, q_c = sol[:n], sol[n:2 * n]
    else:
        gap = min([abs(lam_m), abs(omega - abs(lam_m))]
                  + [abs(abs(lam_m) - l) for l in rs.lams])
        if gap < tau_res:
            raise NearResonance(
                f"lam(m) = {lam_m:.9g} for {m} is within {tau_res:.3g} of the "
                "spectrum but the index is classified generic; refusing the solve")
        big = _block_matrix(ops, lam_m).tocsc()
        rhs = np.concatenate([-grid.to_coeffs(kp.values), -grid.to_coeffs(kq.values)])
        sol = spla.splu(big).solve(rhs)
        p_c, q_c = sol[:n], sol[n:]

    p_f = RadialField(grid, grid.from_coeffs(p_c))
    q_f = RadialField(grid, grid.from_coeffs(q_c))
    phi_m = 0.5 * (p_f + q_f)
    phi_mb = 0.5 * (p_f - q_f)

    row_p, row_q = _pair_rows(ops, modes, lam_m, (phi_m, phi_mb),
                              (theta_m or 0.0, theta_mb or 0.0),
                              (lt_m, {}), (km, kmb))
    scale = max(1.0, kp.norm(), kq.norm())
    resid = max(row_p.norm(), row_q.norm()) / scale
    if resid > tol_prof:
        raise ConvergenceFailure(
            f"coefficient equation at {m} solved with residual {resid:.3e} "
            f"> tol_prof = {tol_prof:.1e}")
    cm = ProfileCoefficient(m, phi_m, theta_m, dict(lt_m), resid)
    cmb = ProfileCoefficient(m.conj, phi_mb, theta_mb, {}, resid)
    return cm, cmb


# -- source projection -------------------------------------------------------


def _tangent_pairs(gs: GroundState, modes: list[InternalMode]):
    """Test pairs (orthogonality directions) and corrector pairs for the
    two-component source projection, in the (m, conj m) component basis."""
    phi, dphi = gs.phi, gs.dphi_domega
    tests = [(phi, -1.0 * phi), (dphi, dphi)]
    dirs = [(phi, phi), (dphi, -1.0 * dphi)]
    for mode in modes:
        su = mode.xi_plus + mode.xi_minus
        di = mode.xi_plus - mode.xi_minus
        tests.append((su, su))
        tests.append((di, -1.0 * di))
        dirs.append((mode.xi_plus, -1.0 * mode.xi_minus))
        dirs.append((-1.0 * mode.xi_minus, mode.xi_plus))
    return tests, dirs


def _pair_inner(a, b) -> float:
    return a[0].inner(b[0]) + a[1].inner(b[1])


def _project_source(km: RadialField, kmb: RadialField, gs: GroundState,
                    modes: list[InternalMode]):
    """Spend the corrector freedoms (gauge, frequency, mode rates) to
    make the raw source pair orthogonal to the soliton tangent
    directions. Returns the corrected pair, the worst remaining defect
    relative to the pair size, and the frame condition number."""
    tests, dirs = _tangent_pairs(gs, modes)
    a = np.array([[_pair_inner(t, d) for d in dirs] for t in tests])
    b = np.array([-_pair_inner(t, (km, kmb)) for t in tests])
    cond = float(np.linalg.cond(a))
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularFrame(f"source projection frame has condition {cond:.3e}")
    c = np.linalg.solve(a, b)
    gm, gmb = km, kmb
    for ck, (d0, d1) in zip(c, dirs):
        gm = gm + float(ck) * d0
        gmb = gmb + float(ck) * d1
    scale = max(1.0, gm.norm(), gmb.norm())
    defect = max(abs(_pair_inner(t, (gm, gmb))) for t in tests) / scale
    return (gm, gmb), defect, cond


# -- builder -----------------------------------------------------------------


def build_refined_profile(ops: LinearizedOperators, report: SpectralReport,
                          rs: ResonanceStructure,
                          tol_prof: float = DEFAULT_TOL_PROF,
                          tau_res: float | None = None) -> RefinedProfile:
    """Run the full recursion: degree-by-degree coefficient solves over
    the non-resonant indices, then extraction and projection of the
    source fields at the minimal resonant indices.

    Requires a spectral report that passes the Morse-index/kernel
    assumption and a resonance structure that passes the separation
    assumption; refuses otherwise rather than building on sand.
    """
    gs = ops.gs
    nl = ops.nl
    if report.statuses.get("H1") != "pass":
        raise UnsupportedCase(
            f"spectral report does not pass H1 (got {report.statuses.get('H1')!r})")
    if rs.h6_status != "pass":
        raise UnsupportedCase(
            f"resonance structure does not pass H6 (got {rs.h6_status!r}): "
            f"{rs.h6_violations}")
    modes = sorted(report.modes, key=lambda mo: mo.lam)
    if len(modes) != rs.n_modes:
        raise UnsupportedCase(
            f"mode count {len(modes)} does not match classification arity {rs.n_modes}")
    for k, mo in enumerate(modes):
        if abs(mo.lam - rs.lams[k]) > rs.tau_cls:
            raise UnsupportedCase(
                f"mode {k} frequency {mo.lam} drifted from classified {rs.lams[k]}")

    n_modes = rs.n_modes
    zero = zero_index(n_modes)
    coeffs: dict[MultiIndex, ProfileCoefficient] = {
        zero: ProfileCoefficient(zero, gs.phi, None, {}, gs.residual)}
    for j, mo in enumerate(modes):
        coeffs[unit_plus(j, n_modes)] = ProfileCoefficient(
            unit_plus(j, n_modes), mo.xi_plus, None, {j: mo.lam}, mo.residual)
        coeffs[unit_minus(j, n_modes)] = ProfileCoefficient(
            unit_minus(j, n_modes), mo.xi_minus, None, {}, mo.residual)

    for deg in range(2, rs.k_max + 1):
        todo = [q for q in rs.nr if q.norm == deg]
        if not todo:
            continue
        expansion = _lower_order_expansion(coeffs, nl, deg, n_modes)
        seen: set[MultiIndex] = set()
        for m in todo:
            if m in seen:
                continue
            seen.add(m)
            seen.add(m.conj)
            lm = lam(rs.lams, m)
            if lm > rs.tau_cls:
                rep = m
            elif lm < -rs.tau_cls:
                rep = m.conj
            else:
                rep = max(m, m.conj)
            kpair = known_terms(coeffs, nl, rs, rep, _expansion=expansion)
            cm, cmb = solve_coefficient(rep, kpair, ops, modes, rs,
                                        tol_prof, tau_res)
            coeffs[rep] = cm
            coeffs[rep.conj] = cmb

    g_fields: dict[MultiIndex, tuple[RadialField, RadialField]] = {}
    worst_defect = 0.0
    worst_cond = 1.0
    by_degree: dict[int, JetField] = {}
    for m in rs.r_min:
        if lam(rs.lams, m) <= 0:
            continue
        if m.norm not in by_degree:
            by_degree[m.norm] = _lower_order_expansion(coeffs, nl, m.norm, n_modes)
        km, kmb = known_terms(coeffs, nl, rs, m, _expansion=by_degree[m.norm])
        (gm, gmb), defect, cond = _project_source(km, kmb, gs, modes)
        if defect > tol_prof:
            raise ConvergenceFailure(
                f"source projection at {m} left defect {defect:.3e} > {tol_prof:.1e}")
        g_fields[m] = (gm, gmb)
        g_fields[m.conj] = (gmb, gm)
        worst_defect = max(worst_defect, defect)
        worst_cond = max(worst_cond, cond)

    rp = RefinedProfile(
        omega=gs.omega, n_modes=n_modes, k_max=rs.k_max, nl=nl, gs=gs, rs=rs,
        coeffs=coeffs, g_fields=g_fields,
        diagnostics={
            "tol_prof": tol_prof,
            "max_coeff_residual": max(c.residual for c in coeffs.values()),
            "source_defect": worst_defect,
            "source_frame_condition": worst_cond,
            "n_solved": len(coeffs),
        })
    rp.diagnostics["series_check"] = _series_check(rp, ops)
    return rp


def _series_check(rp: RefinedProfile, ops: LinearizedOperators) -> float:
    """Independent reassembly: max norm over non-resonant indices of the
    coefficient-wise stationary defect, relative to the profile size."""
    res = series_residual(rp, ops)
    worst = 0.0
    for m in rp.rs.nr:
        f = res.coeff(m)
        if f is not None:
            worst = max(worst, f.norm())
    return worst


# -- series-level verification ------------------------------------------------


def series_residual(rp: RefinedProfile, ops: LinearizedOperators) -> JetField:
    """Coefficient-wise residual of the stationary expansion, assembled
    through jet arithmetic only (no per-index solves). Nonresonant
    coefficients vanish to solver accuracy; minimal resonant ones equal
    the raw source fields before projection.

    This is the independent route used to cross-check the recursion: it
    exercises the expansion machinery against the per-index linear
    algebra.
    """
    n_modes = rp.n_modes
    pj = rp.phi_jet()
    out = expand_nonlinearity(pj, rp.nl)
    kin = {m: -1.0 * c.phi.laplacian() for m, c in rp.coeffs.items()}
    out = out + JetField(rp.k_max, n_modes, kin)

    theta_jet: dict[MultiIndex, complex] = {zero_index(n_modes): complex(rp.omega)}
    for m, c in rp.coeffs.items():
        if c.theta_tilde is not None:
            theta_jet[m] = theta_jet.get(m, 0.0) + complex(c.theta_tilde)
    out = out + _scalar_jet_times(theta_jet, pj)

    for j in range(n_modes):
        zjet: dict[MultiIndex, complex] = {}
        for m, c in rp.coeffs.items():
            if j in c.lam_tilde:
                zjet[m] = -1j * c.lam_tilde[j]
        if not zjet:
            continue
        czjet = {m.conj: np.conj(v) for m, v in zjet.items()}
        term = _scalar_jet_times(zjet, pj.z_derivative(j))
        term = term + _scalar_jet_times(czjet, pj.z_derivative(j, conjugate=True))
        out = out + term.scaled(-1j)
    return out


# -- assembly and pointwise residual ------------------------------------------


def assemble(rp: RefinedProfile, omega: float, z,
             z_max: float = DEFAULT_Z_MAX) -> tuple[RadialField, FlowScalars]:
    """Evaluate the profile and its flow scalars at a concrete (omega, z).

    The construction is anchored, so omega must be the anchor frequency;
    rebuilding at a nearby frequency is the supported way to move in
    omega. Amplitudes beyond the configured validity radius only warn:
    the caller may be probing the breakdown on purpose.
    """
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    if z.shape != (rp.n_modes,):
        raise ValueError(f"expected {rp.n_modes} mode amplitudes, got {z.shape}")
    if abs(omega - rp.omega) > 1e-12 * max(1.0, abs(rp.omega)):
        raise UnsupportedCase(
            f"profile is anchored at omega = {rp.omega}; rebuild at omega = {omega} "
            "instead of extrapolating")
    if float(np.linalg.norm(z)) > z_max:
        warnings.warn(f"|z| = {np.linalg.norm(z):.3g} exceeds the validity "
                      f"radius {z_max:.3g}", RuntimeWarning, stacklevel=2)

    grid = rp.gs.grid
    acc = np.zeros(grid.n, dtype=complex)
    theta = complex(omega)
    ztil = np.zeros(rp.n_modes, dtype=complex)
    for m, c in rp.coeffs.items():
        zp = z_power(z, m)
        acc += zp * c.phi.values
        if c.theta_tilde is not None:
            theta += zp * c.theta_tilde
        for k, lt in c.lam_tilde.items():
            ztil[k] += -1j * zp * lt
    return RadialField(grid, acc), FlowScalars(theta, 0.0, ztil)


def residual(rp: RefinedProfile, omega: float, z, sigma: float = 4.0,
             z_max: float = DEFAULT_Z_MAX) -> ProfileResidual:
    """Stationary defect of the assembled profile at (omega, z).

    Direct evaluation of the gauge-rotated stationary equation with the
    assembled field and flow scalars, followed by the corrector solve
    that spends the remainder scalars (gauge, frequency, mode rates) to
    restore the tangent orthogonality conditions. The returned weighted
    norm excludes the resonant sources: what is left should shrink one
    power faster than the sources themselves.
    """
    phi_f, fs = assemble(rp, omega, z, z_max=z_max)
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    grid = rp.gs.grid
    pj = rp.phi_jet()

    s = np.abs(phi_f.values) ** 2
    gval = evaluate(rp.nl, s, order=0)[0]
    vals = -phi_f.laplacian().values + gval * phi_f.values + fs.theta * phi_f.values

    dz = [pj.z_derivative(j).eval_at(z) for j in range(rp.n_modes)]
    dzb = [pj.z_derivative(j, conjugate=True).eval_at(z) for j in range(rp.n_modes)]
    for j in range(rp.n_modes):
        vals += -1j * (dz[j].values * fs.z_tilde[j]
                       + dzb[j].values * np.conj(fs.z_tilde[j]))
    raw = RadialField(grid, vals)

    # corrector solve: one scalar per tangent condition
    dphi = rp.gs.dphi_domega
    tests = [RadialField(grid, 1j * phi_f.values), dphi]
    dirs = [phi_f, RadialField(grid, -1j * dphi.values)]
    names = ["gauge", "frequency"]
    for j in range(rp.n_modes):
        re_dir = RadialField(grid, dz[j].values + dzb[j].values)
        im_dir = RadialField(grid, 1j * (dz[j].values - dzb[j].values))
        tests.extend([re_dir, im_dir])
        dirs.append(RadialField(grid, -1j * (dz[j].values + dzb[j].values)))
        dirs.append(RadialField(grid, dz[j].values - dzb[j].values))
        names.extend([f"mode{j + 1}_re", f"mode{j + 1}_im"])

    a = np.array([[d.inner(t) for d in dirs] for t in tests])
    b = np.array([-raw.inner(t) for t in tests])
    try:
        c = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularFrame(f"corrector frame is singular at |z| = "
                            f"{np.linalg.norm(z):.3g}: {exc}") from exc
    out_vals = raw.values.copy()
    for ck, d in zip(c, dirs):
        out_vals = out_vals + ck * d.values
    total = RadialField(grid, out_vals)
    defects = {nm: float(total.inner(t)) for nm, t in zip(names, tests)}

    r1_vals = total.values.copy()
    for m in rp.rs.r_min:
        r1_vals = r1_vals - z_power(z, m) * rp.g_fields[m][0].values
    r1 = RadialField(grid, r1_vals)
    return ProfileResidual(total, r1.sigma_norm(sigma), defects, c)
