"""Linearization at the ground state: scalar operators L+/L-, the block
Hamiltonian, internal modes, and the spectral-assumption report.

Operator conventions (radial, even sector, coefficient space):

    L_plus  = -Delta + omega + g(phi^2) + 2 g'(phi^2) phi^2
    L_minus = -Delta + omega + g(phi^2)
    H = [[A, B], [-B, -A]],  A = -Delta + omega + g + g' phi^2,  B = g' phi^2

so L_plus = A + B and L_minus = A - B. Eigenpairs of H in the spectral
gap come in pairs +/-lambda with real vectors xi = (xi_plus, xi_minus).
The substitution u = xi_plus + xi_minus, v = xi_plus - xi_minus turns
H xi = lambda xi into the scalar pair

    L_plus u = lambda v,    L_minus v = lambda u,

whose composed form L_minus L_plus u = lambda^2 u is a nonsymmetric but
moderately sized problem. The gap spectrum is found in two stages: an
exhaustive dense eigensolve of the composed operator on a coarsened
copy of the grid (the modes are smooth O(1) objects, so coarsening
shifts them by O(h_c^4) only), then inverse-iteration refinement of
each candidate on the fine-grid 2n block matrix. Products of operators
appear only inside residual checks, never inside the eigensolve itself;
forming L- L+ L- at fine h and solving the symmetric pencil looks
attractive but its norm (~1/h^6) pushes gap-sized eigenvalues below
machine precision relative to the matrix scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from ._banded import Banded
from .errors import ConvergenceFailure, InstabilityDetected, NegativeKreinSignature
from .grid import RadialField, RadialGrid
from .groundstate import GroundState, solve_ground_state
from .nonlinearity import NonlinearitySpec, evaluate


@dataclass
class ScalarOperator:
    op: Banded
    potential: np.ndarray      # full node-space potential incl. omega
    omega: float
    tag: str                   # "Lplus" | "Lminus" | "A"
    grid: RadialGrid
    parity: int = +1

    def matvec_field(self, f: RadialField) -> RadialField:
        c = self.grid.to_coeffs(f.values)
        return RadialField(self.grid, self.grid.from_coeffs(self.op.matvec(c)), f.parity)


@dataclass
class MatrixHamiltonian:
    """Block operator [[A, B], [-B, -A]] with A banded symmetric and B
    a multiplication operator, both in the even coefficient sector."""
    a_op: Banded
    b_diag: np.ndarray
    omega: float
    grid: RadialGrid

    def apply(self, xp: np.ndarray, xm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (self.a_op.matvec(xp) + self.b_diag * xm,
                -self.b_diag * xp - self.a_op.matvec(xm))

    def to_sparse(self) -> scipy.sparse.csc_matrix:
        a = self.a_op.to_sparse()
        b = scipy.sparse.diags(self.b_diag)
        return scipy.sparse.bmat([[a, b], [-b, -a]], format="csc")

    def sigma1_anticommutator(self, xp: np.ndarray, xm: np.ndarray) -> float:
        """max |(sigma_1 H + H sigma_1) x|; zero exactly by block structure."""
        hp, hm = self.apply(xp, xm)
        gp, gm = self.apply(xm, xp)
        return float(max(np.max(np.abs(hm + gp)), np.max(np.abs(hp + gm))))


@dataclass
class InternalMode:
    index: int
    lam: float
    xi_plus: RadialField
    xi_minus: RadialField
    krein: float               # (sigma_3 xi, xi) before normalization
    residual: float            # ||H xi - lam xi|| / ||xi||
    cross_check: float         # |lam_composed - lam| / lam, composed-form quotient

    def u(self) -> np.ndarray:
        return self.xi_plus.values + self.xi_minus.values

    def v(self) -> np.ndarray:
        return self.xi_plus.values - self.xi_minus.values


@dataclass
class SpectralReport:
    omega: float
    morse_index: int
    ker_lplus_radial: int
    ker_lminus: int
    modes: list[InternalMode]
    lplus_low: list[float]         # eigenvalues of L+ below the edge (radial sector)
    lplus_low_odd: list[float]     # d=1 only: odd-sector eigenvalues (translation)
    lminus_low: list[float]
    dist_to_zero: list[float]
    dist_to_edge: list[float]
    edge_indicator: float          # |beta| R / (|alpha| + |beta| R) for the zero-energy solution
    kernel_checks: dict = field(default_factory=dict)
    statuses: dict = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def to_json(self) -> dict:
        out = {
            "omega": self.omega,
            "morse_index": self.morse_index,
            "ker_lplus_radial": self.ker_lplus_radial,
            "ker_lminus": self.ker_lminus,
            "n_modes": self.n_modes,
            "lambda": [m.lam for m in self.modes],
            "mode_residuals": [m.residual for m in self.modes],
            "dist_to_zero": self.dist_to_zero,
            "dist_to_edge": self.dist_to_edge,
            "edge_indicator": self.edge_indicator,
            "kernel_checks": self.kernel_checks,
        }
        for k in ("H1", "H3", "H4", "H5"):
            out[k] = self.statuses.get(k, "unchecked")
        return out


@dataclass
class LinearizedOperators:
    nl: NonlinearitySpec
    gs: GroundState
    lplus: ScalarOperator
    lminus: ScalarOperator
    hamiltonian: MatrixHamiltonian
    kernel_checks: dict

    @property
    def grid(self) -> RadialGrid:
        return self.gs.grid

    @property
    def omega(self) -> float:
        return self.gs.omega


def _potentials(nl: NonlinearitySpec, omega: float, phi: np.ndarray):
    derivs = evaluate(nl, phi * phi, 1)
    g, gp = derivs[0], derivs[1]
    return omega + g + 2.0 * gp * phi * phi, omega + g, gp * phi * phi


def build_operators(gs: GroundState, nl: NonlinearitySpec) -> LinearizedOperators:
    """Assemble L+, L-, and the block Hamiltonian; verify the kernel
    identities that the ground state equation imposes."""
    grid = gs.grid
    omega = gs.omega
    phi = gs.phi.values
    vp, vm, b = _potentials(nl, omega, phi)
    lap = grid.minus_laplacian(+1)
    lplus = ScalarOperator(lap.add_diag(vp), vp, omega, "Lplus", grid)
    lminus = ScalarOperator(lap.add_diag(vm), vm, omega, "Lminus", grid)
    va = omega + evaluate(nl, phi * phi)[0] + b  # A = -Delta + (vm + b)
    ham = MatrixHamiltonian(lap.add_diag(va), b.copy(), omega, grid)

    cphi = grid.to_coeffs(phi)
    nphi = np.linalg.norm(cphi)
    checks = {
        "lminus_phi": float(np.linalg.norm(lminus.op.matvec(cphi)) / nphi),
    }
    cdphi = grid.to_coeffs(gs.dphi_domega.values)
    checks["lplus_dphi"] = float(
        np.linalg.norm(lplus.op.matvec(cdphi) + cphi) / nphi)
    if grid.dimension == 1:
        # translation mode: phi' spans ker L+ in the odd sector
        dphi = RadialField(grid, phi, +1).radial_derivative()
        lap_odd = grid.minus_laplacian(-1)
        codd = grid.to_coeffs(dphi.values)
        checks["lplus_translation"] = float(
            np.linalg.norm(lap_odd.add_diag(vp).matvec(codd)) / max(np.linalg.norm(codd), 1e-300))
    return LinearizedOperators(nl, gs, lplus, lminus, ham, checks)


def free_operators(grid: RadialGrid, omega: float) -> MatrixHamiltonian:
    """Potential-free Hamiltonian (g = 0): A = -Delta + omega, B = 0.
    Reference object for resolvent tests."""
    lap = grid.minus_laplacian(+1)
    return MatrixHamiltonian(lap.add_diag(np.full(grid.n, omega)), np.zeros(grid.n), omega, grid)


def _coarse_factor(n: int, target: int = 768) -> int:
    """Smallest coarsening factor that divides n and brings the node
    count to <= target, subject to the >= 16 grid floor."""
    f0 = -(-n // target)
    if f0 <= 1:
        return 1
    for f in range(f0, n // 16 + 1):
        if n % f == 0:
            return f
    return 1


def _coarse_operators(ops: LinearizedOperators) -> LinearizedOperators:
    """Rebuild the linearization on a coarsened copy of the grid (same
    rmax, h multiplied by an integer factor). The ground state is
    re-solved there, warm-started from the fine profile."""
    grid = ops.grid
    f = _coarse_factor(grid.n)
    if f == 1:
        return ops
    coarse = RadialGrid(grid.dimension, grid.rmax, grid.h * f, grid.order)
    init = np.interp(coarse.r, grid.r, ops.gs.phi.values)
    gs_c = solve_ground_state(ops.nl, ops.omega, coarse, init=init)
    return build_operators(gs_c, ops.nl)


def _composed_candidates(ops_c: LinearizedOperators, lo: float, hi_eff: float,
                         tau_zero: float) -> tuple[list, list]:
    """Exhaustive dense eigensolve of the composed operator L- L+ on the
    (coarsened) grid.

    Returns (candidates, suspicious): candidates are (lam, u_values,
    v_values) on the coarse grid for real lambda^2 inside the gap window;
    suspicious are negative or complex lambda^2 values that need a
    fine-grid instability check before anyone trusts the mode list.
    """
    omega = ops_c.omega
    lp = ops_c.lplus.op
    lm = ops_c.lminus.op
    c = np.asarray((lm.to_sparse() @ lp.to_sparse()).todense())
    w, vecs = np.linalg.eig(c)
    cands, suspicious = [], []
    for mu, vec in zip(w, vecs.T):
        if abs(mu.imag) > 1e-6 * omega ** 2:
            # complex pairs from the near-degenerate continuum cluster are
            # harmless; inside the gap window they signal a quartet
            if mu.real < hi_eff ** 2:
                suspicious.append(complex(mu))
            continue
        mur = float(mu.real)
        if mur < -(tau_zero ** 2):
            suspicious.append(complex(mur))
            continue
        if mur <= max(tau_zero, lo) ** 2 or mur >= hi_eff ** 2:
            continue
        lam = float(np.sqrt(mur))
        u = np.real(vec)
        nu = np.linalg.norm(u)
        if nu < 1e-12:
            continue
        u = u / nu
        v = lp.matvec(u) / lam
        cands.append((lam, ops_c.grid.from_coeffs(u), ops_c.grid.from_coeffs(v)))
    cands.sort(key=lambda t: t[0])
    return cands, suspicious


def _nearest_composed_eig(ops: LinearizedOperators, sigma: complex) -> complex | None:
    """Fine-grid eigenvalue of L- L+ nearest to sigma via shift-invert.
    None when the iteration does not converge."""
    lp = ops.lplus.op.to_sparse()
    lm = ops.lminus.op.to_sparse()
    c = (lm @ lp).tocsc()
    if abs(sigma.imag) > 0:
        c = c.astype(complex)
    v0 = np.ones(c.shape[0], dtype=c.dtype)
    try:
        w = scipy.sparse.linalg.eigs(c, k=2, sigma=sigma, which="LM",
                                     v0=v0, return_eigenvectors=False)
    except scipy.sparse.linalg.ArpackNoConvergence:
        return None
    return complex(w[int(np.argmin(np.abs(w - sigma)))])


def _refine_block_mode(h_sparse, lam0: float, x0: np.ndarray, omega: float,
                       tol_abs: float) -> tuple[float, np.ndarray, float] | None:
    """Inverse iteration with Rayleigh restarts on the fine 2n block
    matrix, seeded by the coarse-grid eigenpair. Returns (lam, x, resid)
    with x normalized, or None when nothing converged."""
    ident = scipy.sparse.identity(h_sparse.shape[0], format="csc", dtype=float)
    x = x0 / np.linalg.norm(x0)
    sigma = lam0 * (1.0 + 1e-4) + 1e-9 * omega
    best = None
    for _ in range(3):
        try:
            lu = scipy.sparse.linalg.splu((h_sparse - sigma * ident).tocsc())
        except RuntimeError:
            sigma = sigma * (1.0 + 1e-7) + 1e-12 * omega
            continue
        for _ in range(5):
            y = lu.solve(x)
            ny = float(np.linalg.norm(y))
            if not np.isfinite(ny) or ny == 0.0:
                break
            x = y / ny
        hx = h_sparse @ x
        lam = float(x @ hx)
        resid = float(np.linalg.norm(hx - lam * x))
        if best is None or resid < best[2]:
            best = (lam, x.copy(), resid)
        if resid <= tol_abs:
            break
        sigma = lam + 1e-9 * omega
    return best


def _scalar_spectrum_below(op: Banded, cutoff: float) -> np.ndarray:
    lo = op.lower_form()
    vals = scipy.linalg.eig_banded(lo, lower=True, eigvals_only=True,
                                   select="v", select_range=(-1e30, cutoff))
    return np.asarray(vals)


def _edge_resonance_indicator(nl: NonlinearitySpec, gs: GroundState) -> float:
    """Integrate the zero-energy equation for the upper channel at the
    edge, (-Delta + g + g' phi^2) u = 0, outward from regularity and fit
    the similarity variable v = r^{(d-1)/2} u to alpha + beta r on a far
    window. Growth (|beta| R dominating) means the edge is not a
    resonance; indicator near 0 flags a threshold solution.

    d = 2 is not covered (the similarity reduction leaves a 1/r^2 term);
    callers report indeterminate there.
    """
    grid = gs.grid
    d = grid.dimension
    if d == 2:
        return float("nan")
    phi = gs.phi.values
    derivs = evaluate(nl, phi * phi, 1)
    vpot = derivs[0] + derivs[1] * phi * phi   # A - omega at the edge
    r = grid.r
    # v'' = V v with V sampled on the grid (linear interpolation)
    def vfun(x):
        return float(np.interp(x, r, vpot))
    h = grid.h
    if d == 1:
        x, v, vp = r[0], 1.0, 0.0
    else:
        x, v, vp = r[0], r[0], 1.0
    step = h
    while x < grid.rmax - step:
        def f(x, v, vp):
            return vp, vfun(x) * v
        k1v, k1p = f(x, v, vp)
        k2v, k2p = f(x + step / 2, v + step / 2 * k1v, vp + step / 2 * k1p)
        k3v, k3p = f(x + step / 2, v + step / 2 * k2v, vp + step / 2 * k2p)
        k4v, k4p = f(x + step, v + step * k3v, vp + step * k3p)
        v += step / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        vp += step / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
        x += step
        scale = abs(v) + abs(vp)
        if scale > 1e280:
            v, vp = v / scale, vp / scale
    # far-field of the zero-energy equation: v ~ alpha + beta r
    alpha = v - vp * x
    beta = vp
    return float(abs(beta) * grid.rmax / (abs(alpha) + abs(beta) * grid.rmax + 1e-300))


def discrete_spectrum(ops: LinearizedOperators, gap: tuple[float, float] | None = None,
                      tau_edge: float = 1e-3, tol_eig: float = 1e-8,
                      tau_zero: float | None = None) -> SpectralReport:
    """Find the internal modes of H in the spectral gap and assemble the
    spectral report.

    Two stages. First an exhaustive dense eigensolve of the composed
    operator L- L+ on a coarsened copy of the grid; gap modes are smooth
    O(1) objects, so coarsening moves them by O(h_c^4) only, far less
    than the spacing the refinement needs. Then each candidate is
    refined on the fine grid by shift-inverted inverse iteration on the
    2n block matrix and cross-checked through the fine composed residual.
    Negative or complex lambda^2 from the coarse scan is re-examined on
    the fine grid and raises InstabilityDetected when confirmed. Modes
    closer to zero than tau_zero (default 3e-3 omega) are not resolvable
    against the generalized kernel and are treated as absent.
    """
    grid = ops.grid
    omega = ops.omega
    if gap is None:
        gap = (0.0, omega)
    lo, hi = gap
    hi_eff = min(hi, omega) * (1.0 - tau_edge)
    if tau_zero is None:
        tau_zero = 3e-3 * omega

    ops_c = _coarse_operators(ops)
    # scan slightly past the fine acceptance edge so the O(h_c^4) coarse
    # shift cannot push a borderline mode out of the window
    hi_coarse = min(hi, omega) * (1.0 - 0.5 * tau_edge)
    cands, suspicious = _composed_candidates(ops_c, lo, hi_coarse, tau_zero)

    for mu in suspicious:
        conf = _nearest_composed_eig(ops, mu)
        if conf is None:
            raise ConvergenceFailure(
                f"could not confirm or refute suspicious lambda^2 = {mu:.6e}")
        if abs(conf.imag) > 1e-6 * omega ** 2 and conf.real < hi_eff ** 2:
            raise InstabilityDetected(
                f"composed operator has complex eigenvalue lambda^2 = {conf:.6e}")
        if conf.real < -(tau_zero ** 2):
            raise InstabilityDetected(
                f"composed operator has negative eigenvalue lambda^2 = {conf.real:.6e}")

    h_sparse = ops.hamiltonian.to_sparse()
    lm = ops.lminus.op
    lp = ops.lplus.op
    grid_c = ops_c.grid
    modes: list[InternalMode] = []
    for lam_c, u_vals, v_vals in cands:
        cu = grid.to_coeffs(np.interp(grid.r, grid_c.r, u_vals))
        cv = grid.to_coeffs(np.interp(grid.r, grid_c.r, v_vals))
        x0 = np.concatenate([0.5 * (cu + cv), 0.5 * (cu - cv)])
        got = _refine_block_mode(h_sparse, lam_c, x0, omega, 0.1 * tol_eig * omega)
        if got is None:
            raise ConvergenceFailure(
                f"refinement of gap candidate lambda = {lam_c:.6f} failed")
        lam, x, resid = got
        if not (max(lo, 0.5 * tau_zero) < lam < hi_eff):
            continue
        if resid > tol_eig * omega:
            raise ConvergenceFailure(
                f"gap mode at lambda = {lam:.6f} stalled with residual {resid:.3e}")
        xp, xm = x[:grid.n], x[grid.n:]
        # independent route: the composed problem L- L+ u = lambda^2 u,
        # evaluated through quadratic forms so that eigenvector noise
        # enters quadratically instead of multiplied by ||L||
        u = xp + xm
        w = lp.matvec(u)
        den = float(np.dot(u, w))
        if den <= 0:
            raise NegativeKreinSignature(
                f"mode at lambda = {lam:.6f} has <u, L+ u> = {den:.3e} <= 0")
        lam2_cross = float(np.dot(w, lm.matvec(w)) / den)
        comp = float(abs(np.sqrt(max(lam2_cross, 0.0)) - lam) / lam)
        modes.append(InternalMode(0, lam, RadialField(grid, grid.from_coeffs(xp), +1),
                                  RadialField(grid, grid.from_coeffs(xm), +1),
                                  0.0, float(resid), comp))

    # two coarse candidates may refine into the same fine mode
    modes.sort(key=lambda m: m.lam)
    dedup: list[InternalMode] = []
    for m in modes:
        if dedup and abs(m.lam - dedup[-1].lam) < 1e-8 * omega:
            continue
        dedup.append(m)
    modes = dedup
    for j, m in enumerate(modes):
        m.index = j

    modes = [krein_normalize(m) for m in modes]

    tau_ker = 1e-6 * omega
    lplus_low = _scalar_spectrum_below(lp, omega * 0.999)
    lminus_low = _scalar_spectrum_below(lm, omega * 0.999)
    lplus_odd: list[float] = []
    if grid.dimension == 1:
        lap_odd = grid.minus_laplacian(-1)
        lplus_odd = list(_scalar_spectrum_below(
            lap_odd.add_diag(ops.lplus.potential), omega * 0.999))
    morse = int(np.sum(lplus_low < -tau_ker) + np.sum(np.asarray(lplus_odd) < -tau_ker))
    ker_p = int(np.sum(np.abs(lplus_low) <= tau_ker))
    ker_m = int(np.sum(np.abs(lminus_low) <= tau_ker))

    report = SpectralReport(
        omega=omega,
        morse_index=morse,
        ker_lplus_radial=ker_p,
        ker_lminus=ker_m,
        modes=modes,
        lplus_low=[float(x) for x in lplus_low],
        lplus_low_odd=[float(x) for x in lplus_odd],
        lminus_low=[float(x) for x in lminus_low],
        dist_to_zero=[m.lam for m in modes],
        dist_to_edge=[omega - m.lam for m in modes],
        edge_indicator=_edge_resonance_indicator(ops.nl, ops.gs),
        kernel_checks=dict(ops.kernel_checks),
    )
    return report


def krein_normalize(mode: InternalMode) -> InternalMode:
    """Scale so that (sigma_3 xi, xi) = ||xi_+||^2 - ||xi_-||^2 = 1 and
    fix the overall sign by making the largest entry of xi_+ positive."""
    grid = mode.xi_plus.grid
    cp = grid.to_coeffs(mode.xi_plus.values)
    cm = grid.to_coeffs(mode.xi_minus.values)
    k = float(np.dot(cp, cp) - np.dot(cm, cm))
    if k <= 0:
        raise NegativeKreinSignature(
            f"mode lambda = {mode.lam:.6f} has (sigma_3 xi, xi) = {k:.3e} <= 0")
    s = 1.0 / np.sqrt(k)
    vp = mode.xi_plus.values * s
    vm = mode.xi_minus.values * s
    if vp[int(np.argmax(np.abs(vp)))] < 0:
        vp, vm = -vp, -vm
    return InternalMode(mode.index, mode.lam,
                        RadialField(grid, vp, +1), RadialField(grid, vm, +1),
                        k, mode.residual, mode.cross_check)


def check_assumptions(report: SpectralReport, sweep: list[tuple[float, list[float]]] | None = None,
                      tau_edge: float = 0.02, tau_cont: float = 0.2,
                      edge_indicator_min: float = 0.1) -> dict:
    """Fill in the H1/H3/H4/H5 statuses from the evidence already in the
    report (plus an optional omega sweep of mode frequencies for H5).
    Each status is "pass", "fail", or "indeterminate"."""
    st = {}
    st["H1"] = "pass" if (report.morse_index == 1 and report.ker_lplus_radial == 0) else "fail"

    edge_ok = all(d >= tau_edge * report.omega for d in report.dist_to_edge)
    zero_ok = all(d >= tau_edge * report.omega for d in report.dist_to_zero)
    ind = report.edge_indicator
    if not (edge_ok and zero_ok):
        st["H3"] = "fail"
    elif np.isnan(ind):
        st["H3"] = "indeterminate"
    else:
        st["H3"] = "pass" if ind >= edge_indicator_min else "indeterminate"

    # embedded eigenvalues are not certifiable on a truncated domain;
    # report the advisory scan outcome but never claim a pass
    st["H4"] = "indeterminate"

    if sweep is None or len(sweep) < 3:
        st["H5"] = "indeterminate"
    else:
        ok = True
        counts = {len(lams) for _, lams in sweep}
        if len(counts) != 1:
            ok = False
        else:
            arr = np.array([lams for _, lams in sweep])
            if arr.size:
                jumps = np.abs(np.diff(arr, axis=0)) / np.maximum(arr.max(axis=0), 1e-300)
                ok = bool(np.all(jumps <= tau_cont))
        st["H5"] = "pass" if ok else "fail"

    report.statuses.update(st)
    return st
