"""Fermi-golden-rule Gram matrices from the resonant source fields.

For each threshold r_k = lambda(m) > omega carried by the minimal
resonant indices, the damping form is the Gram matrix

    Gamma_{nn'} = lim_{eps -> 0+} Im <(H - r_k - i eps)^{-1} s3 G_n, s3 G_n'>

over the group's generators G_n = (G_m, G_mbar). With the unitary
Fourier convention this limit *is* the paper-normalized sphere
restriction pi/(2 rho) * integral_{|xi|=rho} of the transformed
generators (rho = sqrt(r_k - omega)); the constant is pinned by the
zero-potential oracle in the test suite rather than re-derived here.

Two independent numerical routes:

1. Limiting absorption: solve (H - r_k - i eps) u = s3 G on a domain
   large enough that the wall reflection e^{-eps R / rho} is below 1e-4
   for the smallest eps, then Richardson-extrapolate eps -> 0 (the
   resolvent quadratic form is smooth in eps off the real axis). The
   extension reuses the pipeline fields zero-padded onto an integer
   coarsening of the grid; the modes this resolves have wavelength
   2 pi / rho >> h, so coarsening costs O((rho h)^4) only.

2. Far field: solve (H - r_k) u = -s3 G on the pipeline domain with a
   reflectionless outgoing condition built from the *discrete* lattice
   wavenumber kappa (the stencil's dispersion relation at r_k), read
   off the outgoing amplitude a_n of the upper component, and form
   Gamma^ff = rho |S^{d-1}| Re(a_n conj(a_n')). The equality of the two
   routes is the Plemelj identity; their disagreement is reported as
   the resolution of the computed Gamma.

In coefficient space c = sqrt(w) u the outgoing wave is an exact plane
wave  c_j ~ sqrt(|S^{d-1}| h) * a * e^{i kappa r_j}  for d in {1, 3}
(the r^{(d-1)/2} spreading factor is absorbed by sqrt(w)), which is
what makes both the boundary condition and the amplitude fit clean.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConvergenceFailure, FgrUnresolved, UnsupportedCase
from .grid import SPHERE_AREA, RadialField, RadialGrid
from .linearization import LinearizedOperators, MatrixHamiltonian, build_operators
from .nonlinearity import evaluate
from .resonance import MultiIndex, lam as index_lam

EPS0_FACTOR = 0.1          # eps_0 = 0.1 (r_k - omega)
EPS_STEPS = 6              # eps_i = eps_0 2^{-i}, i = 0..5
REFLECTION_LOG = 9.2       # ln(1e4): wall reflection suppressed to 1e-4
DEFAULT_TAU_FGR = 1e-2
_EIG_RESOLUTION = 1e-9     # |min eig| below this (x trace/M) reads as zero


@dataclass(frozen=True)
class ResolventQuery:
    """One application of (H - (lam + i eps))^{-1} to a two-component field."""
    ham: MatrixHamiltonian
    lam: float
    eps: float
    rhs_plus: RadialField
    rhs_minus: RadialField


@dataclass
class FgrGram:
    k: int
    r_k: float
    m_list: list[MultiIndex]
    gamma: np.ndarray                  # Hermitian (real symmetric) M x M
    min_eig: float
    route_error: float                 # relative disagreement of the two routes
    status: str                        # per-group H7 verdict
    la_matrix: np.ndarray | None = None
    ff_matrix: np.ndarray | None = None
    eps_values: list[float] = field(default_factory=list)
    extrapolants: list[float] = field(default_factory=list)   # trace of successive Richardson stages
    extrapolation_error: float = 0.0

    @property
    def size(self) -> int:
        return len(self.m_list)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "r_k": self.r_k,
            "m_list": [[list(m.mp), list(m.mm)] for m in self.m_list],
            "gamma": self.gamma.tolist(),
            "min_eig": self.min_eig,
            "route_error": self.route_error,
            "status": self.status,
            "la_matrix": None if self.la_matrix is None else self.la_matrix.tolist(),
            "ff_matrix": None if self.ff_matrix is None else self.ff_matrix.tolist(),
            "eps_values": list(self.eps_values),
            "extrapolants": list(self.extrapolants),
            "extrapolation_error": self.extrapolation_error,
        }


def _shifted_sparse(ham: MatrixHamiltonian, z: complex) -> scipy.sparse.csc_matrix:
    n = ham.grid.n
    m = ham.to_sparse().astype(complex)
    return (m - z * scipy.sparse.identity(2 * n, format="csc")).tocsc()


def _interleave(n: int) -> np.ndarray:
    """Permutation putting (upper_i, lower_i) adjacent: restores bandedness."""
    perm = np.empty(2 * n, dtype=np.intp)
    perm[0::2] = np.arange(n)
    perm[1::2] = np.arange(n) + n
    return perm


def _banded_splu(mat: scipy.sparse.csc_matrix, n: int):
    perm = _interleave(n)
    mat_i = mat[perm][:, perm].tocsc()
    lu = scipy.sparse.linalg.splu(mat_i, permc_spec="NATURAL",
                                  options={"SymmetricMode": False})
    inv = np.empty_like(perm)
    inv[perm] = np.arange(2 * n)

    def solve(rhs: np.ndarray) -> np.ndarray:
        return lu.solve(rhs[perm])[inv]

    return solve


def resolvent_apply(q: ResolventQuery, tol_lin: float = 1e-10
                    ) -> tuple[RadialField, RadialField]:
    """Solve (H - (lam + i eps)) u = f for a two-component field f.

    eps may be zero when lam lies in the resolvent set (e.g. the
    spectral gap); on the continuous spectrum eps must be positive.
    """
    grid = q.ham.grid
    z = q.lam + 1j * q.eps
    mat = _shifted_sparse(q.ham, z)
    f = np.concatenate([grid.to_coeffs(np.asarray(q.rhs_plus.values, dtype=complex)),
                        grid.to_coeffs(np.asarray(q.rhs_minus.values, dtype=complex))])
    solve = _banded_splu(mat, grid.n)
    u = solve(f)
    defect = np.linalg.norm(mat @ u - f) / max(np.linalg.norm(f), 1e-300)
    if not np.isfinite(defect) or defect > tol_lin:
        raise ConvergenceFailure(
            f"resolvent solve at z = {z:.6g} is ill-conditioned "
            f"(relative defect {defect:.3e}); the shift is likely too close "
            "to a discrete eigenvalue")
    return (RadialField(grid, u[:grid.n] / grid.sqrt_w),
            RadialField(grid, u[grid.n:] / grid.sqrt_w))


# -- domain extension -------------------------------------------------------

def _coarsen_factor(h: float, rho: float) -> int:
    """Largest odd factor keeping rho * h_ext <= 0.03 (so the stencil
    dispersion error (rho h)^4 stays far below the route tolerances)."""
    k = int(0.03 / (rho * h))
    if k < 1:
        return 1
    return k if k % 2 == 1 else k - 1


def extended_hamiltonian(ops: LinearizedOperators, rmax_ext: float,
                         coarsen: int = 1) -> tuple[MatrixHamiltonian, np.ndarray]:
    """The linearized operator on a zero-padded extension of the domain.

    Returns the extended Hamiltonian and the index map taking a fine-grid
    field to its samples on the coarse extended grid (exact decimation:
    for odd coarsening the offset nodes of the coarse grid are a subset
    of the fine nodes).
    """
    grid = ops.grid
    if coarsen % 2 != 1 or coarsen < 1:
        raise UnsupportedCase(f"coarsening factor {coarsen} must be odd and >= 1")
    h_ext = coarsen * grid.h
    n_in = int(round(grid.rmax / h_ext))
    if abs(n_in * h_ext - grid.rmax) > 1e-9:
        raise UnsupportedCase(
            f"rmax {grid.rmax} is not a multiple of the coarsened step {h_ext}")
    n_ext = max(int(np.ceil(rmax_ext / h_ext)), n_in)
    grid_ext = RadialGrid(grid.dimension, n_ext * h_ext, h_ext, grid.order)
    idx = coarsen * np.arange(n_in) + (coarsen - 1) // 2

    phi_ext = np.zeros(grid_ext.n)
    phi_ext[:n_in] = ops.gs.phi.values[idx]
    s = phi_ext ** 2
    dv = evaluate(ops.nl, s, order=1)
    gval, gprime = dv[0], dv[1]
    a_op = grid_ext.minus_laplacian(+1).add_diag(
        ops.gs.omega + gval + gprime * s)
    return MatrixHamiltonian(a_op, gprime * s, ops.gs.omega, grid_ext), idx


def _pad_pair(grid_ext: RadialGrid, idx: np.ndarray,
              pair: tuple[RadialField, RadialField],
              flip: bool = True) -> np.ndarray:
    """(G_m, +/-G_mbar) zero-padded, stacked in coefficient space.

    flip=True applies sigma_3 (the resolvent right-hand side); flip=False
    keeps the plain pair (the pairing slot)."""
    out = np.zeros(2 * grid_ext.n)
    n_in = len(idx)
    sign = -1.0 if flip else 1.0
    out[:n_in] = pair[0].values[idx]
    out[grid_ext.n:grid_ext.n + n_in] = sign * pair[1].values[idx]
    sw = grid_ext.sqrt_w
    out[:grid_ext.n] *= sw
    out[grid_ext.n:] *= sw
    return out


# -- route 1: limiting absorption ------------------------------------------

def _la_gram(ops: LinearizedOperators, r_k: float,
             gens: list[tuple[RadialField, RadialField]],
             eps0: float | None = None
             ) -> tuple[np.ndarray, list[float], float, list[float]]:
    omega = ops.gs.omega
    rho = np.sqrt(r_k - omega)
    eps0 = EPS0_FACTOR * (r_k - omega) if eps0 is None else eps0
    eps_list = [eps0 * 2.0 ** (-i) for i in range(EPS_STEPS)]
    coarsen = _coarsen_factor(ops.grid.h, rho)
    rmax_need = REFLECTION_LOG * rho / eps_list[-1]
    ham_ext, idx = extended_hamiltonian(ops, rmax_need, coarsen)
    grid_ext = ham_ext.grid

    rhs = np.column_stack([_pad_pair(grid_ext, idx, g) for g in gens])
    # The pairing slot carries the plain pair, not sigma_3 of it: for the
    # sigma_3-self-adjoint block operator the Plemelj-positive form is
    # Im <(H-z)^{-1} s3 G, G> = eps (s3 v, v), v the resolvent vector,
    # whose sign at an upper-channel threshold is the (positive) Krein
    # signature of the radiating channel. The double-s3 variant is
    # indefinite and wrong off the zero-potential oracle (where the two
    # coincide because the lower component vanishes).
    slot = np.column_stack([_pad_pair(grid_ext, idx, g, flip=False)
                            for g in gens])
    raw = []
    for eps in eps_list:
        mat = _shifted_sparse(ham_ext, r_k + 1j * eps)
        solve = _banded_splu(mat, grid_ext.n)
        u = np.column_stack([solve(rhs[:, j].astype(complex))
                             for j in range(rhs.shape[1])])
        raw.append(np.imag(u.T @ slot))

    # two Richardson stages on the halving sequence: kill eps, then eps^2
    stage1 = [2.0 * raw[i + 1] - raw[i] for i in range(len(raw) - 1)]
    stage2 = [(4.0 * stage1[i + 1] - stage1[i]) / 3.0
              for i in range(len(stage1) - 1)]
    gamma = stage2[-1]
    scale = max(np.max(np.abs(gamma)), 1e-300)
    extrap_err = float(np.max(np.abs(stage2[-1] - stage2[-2])) / scale)
    traces = [float(np.trace(np.atleast_2d(m))) for m in stage2]
    return gamma, eps_list, extrap_err, traces


# -- route 2: far field -----------------------------------------------------

def _lattice_wavenumber(rho: float, h: float, order: int) -> float:
    """kappa with  stencil(-d^2/dr^2) e^{i kappa r} = rho^2 e^{i kappa r}."""
    if order == 2:
        arg = rho * h / 2.0
        if arg >= 1.0:
            raise UnsupportedCase(f"wavenumber {rho} unresolvable at step {h}")
        return 2.0 / h * np.arcsin(arg)
    th = rho * h
    for _ in range(60):
        f = (30.0 - 32.0 * np.cos(th) + 2.0 * np.cos(2 * th)) / 12.0 - (rho * h) ** 2
        df = (32.0 * np.sin(th) - 4.0 * np.sin(2 * th)) / 12.0
        step = f / df
        th -= step
        if abs(step) < 1e-15:
            break
    if not (0.0 < th < np.pi):
        raise UnsupportedCase(f"lattice wavenumber out of range at rho h = {rho * h}")
    return th / h


def _outgoing_matrix(ham: MatrixHamiltonian, r: float, kappa: float
                     ) -> scipy.sparse.csc_matrix:
    """(H - r) with the upper channel's Dirichlet wall replaced by the
    reflectionless fold  v_ghost = e^{i kappa h (ghost - (n-1))} v_{n-1}."""
    grid = ham.grid
    n, h = grid.n, grid.h
    mat = _shifted_sparse(ham, complex(r)).tolil()
    q = np.exp(1j * kappa * h)
    inv = 1.0 / (h * h)
    if grid.order == 2:
        # remove Dirichlet fold (ghost v_n = -v_{n-1} added +1*inv to d0[-1])
        mat[n - 1, n - 1] += -1.0 * inv - q * inv
    else:
        c1, c2 = 16.0 / 12.0 * inv, 1.0 / 12.0 * inv
        # row n-1: Dirichlet put +c1 at (n-1,n-1) and -c2 at (n-1,n-2)
        mat[n - 1, n - 1] += -c1 - c1 * q + c2 * q * q
        mat[n - 1, n - 2] += c2
        # row n-2: Dirichlet put -c2 at (n-2,n-1)
        mat[n - 2, n - 1] += c2 + c2 * q
    return mat.tocsc()


def farfield_amplitude(ham: MatrixHamiltonian, r: float,
                       g_pair: tuple[RadialField, RadialField],
                       window: float | None = None,
                       match_tol: float = 1e-2) -> complex:
    """Outgoing amplitude a of the upper component of (H - r) u = -s3 G,
    normalized so u ~ a e^{i kappa r} / r^{(d-1)/2} at the wall."""
    grid = ham.grid
    omega = ham.omega
    if r <= omega:
        raise UnsupportedCase(f"spectral point {r} is not above the edge {omega}")
    rho = np.sqrt(r - omega)
    kappa = _lattice_wavenumber(rho, grid.h, grid.order)
    mat = _outgoing_matrix(ham, r, kappa)
    sw = grid.sqrt_w
    rhs = np.concatenate([-g_pair[0].values * sw, g_pair[1].values * sw]
                         ).astype(complex)
    solve = _banded_splu(mat, grid.n)
    u = solve(rhs)
    defect = np.linalg.norm(mat @ u - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if np.linalg.norm(rhs) > 0 and (not np.isfinite(defect) or defect > 1e-8):
        raise ConvergenceFailure(
            f"outgoing solve at r = {r:.6g} has relative defect {defect:.3e}")

    if window is None:
        window = max(2.0, 3.0 / rho)
    lo = max(0, grid.n - 2 - int(round(window / grid.h)))
    sl = slice(lo, grid.n - 2)
    c_win = u[:grid.n][sl]
    phase = np.exp(1j * kappa * grid.r[sl])
    alpha = np.sum(c_win * np.conj(phase)) / len(c_win)
    scale = np.linalg.norm(c_win)
    if scale < 1e-280 * max(np.linalg.norm(rhs), 1.0) or scale == 0.0:
        return 0.0 + 0.0j
    resid = np.linalg.norm(c_win - alpha * phase) / scale
    if resid > match_tol:
        raise FgrUnresolved(
            f"outgoing wave fit at r = {r:.6g} has relative residual "
            f"{resid:.3e} > {match_tol:.0e}; the window is not a clean "
            "single outgoing wave")
    return complex(alpha / np.sqrt(SPHERE_AREA[grid.dimension] * grid.h))


def _ff_gram(ops: LinearizedOperators, r_k: float,
             gens: list[tuple[RadialField, RadialField]],
             domain_factor: float = 1.0) -> np.ndarray:
    omega = ops.gs.omega
    rho = np.sqrt(r_k - omega)
    if domain_factor == 1.0:
        ham = ops.hamiltonian
        amps = [farfield_amplitude(ham, r_k, g) for g in gens]
    else:
        ham, idx = extended_hamiltonian(ops, domain_factor * ops.grid.rmax, 1)
        grid_ext = ham.grid
        amps = []
        for gp, gm in gens:
            pp = np.zeros(grid_ext.n)
            mm = np.zeros(grid_ext.n)
            pp[:len(idx)] = gp.values[idx]
            mm[:len(idx)] = gm.values[idx]
            amps.append(farfield_amplitude(
                ham, r_k, (RadialField(grid_ext, pp), RadialField(grid_ext, mm))))
    a = np.array(amps)
    return rho * SPHERE_AREA[ops.grid.dimension] * np.real(np.outer(a, np.conj(a)))


# -- groups and the public gram --------------------------------------------

def threshold_groups(rs) -> list[tuple[float, list[MultiIndex]]]:
    """Distinct thresholds r_k > omega among lambda(m), m in R_min, with
    their (sorted) positive-side generators."""
    pos = [(index_lam(rs.lams, m), m) for m in rs.r_min]
    pos = [(v, m) for v, m in pos if v > 0]
    pos.sort(key=lambda t: (t[0], t[1].mp, t[1].mm))
    groups: list[tuple[float, list[MultiIndex]]] = []
    for v, m in pos:
        if groups and abs(v - groups[-1][0]) <= rs.tau_cls:
            groups[-1][1].append(m)
        else:
            groups.append((v, [m]))
    return groups


def _status_for(gamma: np.ndarray, min_eig: float, tau_fgr: float,
                resolved: bool) -> str:
    m = gamma.shape[0]
    tr = float(np.trace(gamma))
    if not resolved or tr <= 0:
        return "indeterminate"
    if min_eig > tau_fgr * tr / m:
        return "pass"
    if min_eig <= _EIG_RESOLUTION * tr / m:
        return "fail"
    return "indeterminate"


def fgr_gram(rp, k: int, ops: LinearizedOperators | None = None,
             tau_fgr: float = DEFAULT_TAU_FGR) -> FgrGram:
    """Gram matrix of group k of the profile's resonant source fields.

    Both routes run; the limiting-absorption value is reported as Gamma
    and the far-field value as its cross-check. Non-convergent
    extrapolation or route disagreement above 5% downgrades the status
    to indeterminate rather than raising: the quantity exists, the
    computation merely failed to resolve it.
    """
    groups = threshold_groups(rp.rs)
    if not 0 <= k < len(groups):
        raise UnsupportedCase(f"group index {k} out of range ({len(groups)} groups)")
    r_k, ms = groups[k]
    if r_k <= rp.omega:
        raise UnsupportedCase(f"threshold {r_k} not above the edge {rp.omega}")
    if ops is None:
        ops = build_operators(rp.gs, rp.nl)
    gens = [rp.g_fields[m] for m in ms]

    la, eps_list, extrap_err, traces = _la_gram(ops, r_k, gens)
    la = 0.5 * (la + la.T)
    try:
        ff = _ff_gram(ops, r_k, gens)
        ff = 0.5 * (ff + ff.T)
        scale = max(np.max(np.abs(la)), np.max(np.abs(ff)), 1e-300)
        route_err = float(np.max(np.abs(la - ff)) / scale)
    except (FgrUnresolved, ConvergenceFailure):
        ff = None
        route_err = float("inf")

    eigs = np.linalg.eigvalsh(la)
    min_eig = float(eigs[0])
    resolved = extrap_err <= 0.05 and route_err <= 0.05
    status = _status_for(la, min_eig, tau_fgr, resolved)
    return FgrGram(k=k, r_k=float(r_k), m_list=ms, gamma=la, min_eig=min_eig,
                   route_error=route_err, status=status, la_matrix=la,
                   ff_matrix=ff, eps_values=eps_list, extrapolants=traces,
                   extrapolation_error=extrap_err)


def all_grams(rp, ops: LinearizedOperators | None = None,
              tau_fgr: float = DEFAULT_TAU_FGR) -> list[FgrGram]:
    if ops is None:
        ops = build_operators(rp.gs, rp.nl)
    return [fgr_gram(rp, k, ops=ops, tau_fgr=tau_fgr)
            for k in range(len(threshold_groups(rp.rs)))]


def check_H7(grams: list[FgrGram]) -> str:
    """Aggregate verdict: fail dominates, then indeterminate, then pass.

    An empty list is vacuously a pass (no resonant radiation channels)."""
    statuses = [g.status for g in grams]
    if any(s == "fail" for s in statuses):
        return "fail"
    if any(s == "indeterminate" for s in statuses):
        return "indeterminate"
    return "pass"
