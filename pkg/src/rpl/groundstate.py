"""Ground-state solver: positive radial decaying solutions of

    -Delta phi + omega phi + g(phi^2) phi = 0,   phi > 0, phi'(0) = 0.

Strategy: a shooting pass on the radial ODE brackets the central
amplitude by bisection (overshoot = sign change, undershoot = the
unstable e^{+sqrt(omega) r} branch takes over and the solution turns
upward), then a damped Newton iteration on the discretized boundary
value problem polishes to solver precision. The Newton Jacobian is
exactly the scalar operator L_plus = -Delta + omega + g + 2 g' phi^2
evaluated at the iterate, so the converged factorization doubles as the
d(phi)/d(omega) solve: L_plus (d phi / d omega) = -phi.

The frequency derivative, mass, and Vakhitov-Kolokolov slope all come
out of the same machinery; vk_check wraps a small omega sweep around it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, InstabilityDetected, NoGroundState
from .grid import RadialField, RadialGrid
from .nonlinearity import NonlinearitySpec, evaluate


@dataclass
class GroundState:
    omega: float
    phi: RadialField
    dphi_domega: RadialField
    mass: float                 # ||phi||_{L^2}^2
    residual: float             # relative l2 residual of the discrete equation
    tail_slope: float           # fitted log-derivative of the far tail, ~ -sqrt(omega)
    newton_iterations: int

    @property
    def grid(self) -> RadialGrid:
        return self.phi.grid

    def summary(self) -> dict:
        return {
            "omega": self.omega,
            "amplitude": float(self.phi.values[0]),
            "mass": self.mass,
            "residual": self.residual,
            "tail_slope": self.tail_slope,
            "newton_iterations": self.newton_iterations,
        }


def _scalar_g(nl: NonlinearitySpec):
    """Fast float-in/float-out g(s), for the shooting inner loop."""
    num, den = nl.numerator, nl.denominator

    def g(s: float) -> float:
        p = 0.0
        for c in reversed(num):
            p = p * s + c
        q = 0.0
        for c in reversed(den):
            q = q * s + c
        return p * s / (1.0 + q * s)

    return g


def _rk4_step(g, omega, d, r, u, up, step):
    def f(r, u, up):
        return up, (omega + g(u * u)) * u - ((d - 1) / r * up if d > 1 else 0.0)

    k1u, k1p = f(r, u, up)
    k2u, k2p = f(r + step / 2, u + step / 2 * k1u, up + step / 2 * k1p)
    k3u, k3p = f(r + step / 2, u + step / 2 * k2u, up + step / 2 * k2p)
    k4u, k4p = f(r + step, u + step * k3u, up + step * k3p)
    return (u + step / 6 * (k1u + 2 * k2u + 2 * k3u + k4u),
            up + step / 6 * (k1p + 2 * k2p + 2 * k3p + k4p))


def _shoot_classify(nl: NonlinearitySpec, omega: float, d: int, a: float,
                    rmax: float, h: float) -> int:
    """Integrate outward from r ~ 0. Returns +1 overshoot (phi crosses 0),
    -1 undershoot (phi turns upward while positive), 0 decayed to the wall."""
    g = _scalar_g(nl)
    # series start: u ~ a + a (omega + g(a^2)) r^2 / (2d)
    r = h * 0.25
    c0 = a * (omega + g(a * a)) / (2 * d)
    u = a + c0 * r * r
    up = 2 * c0 * r
    step = h
    nsteps = int((rmax - r) / step)
    for _ in range(nsteps):
        u, up = _rk4_step(g, omega, d, r, u, up, step)
        r += step
        if not (np.isfinite(u) and np.isfinite(up)):
            return -1
        if u < 0.0:
            return +1
        if u > 1.5 * a or (up > 0.0 and u > 1e-4 * a):
            return -1
        if u < 1e-12 * a:
            return 0
    # reached the wall: genuine decay only if the solution got small;
    # otherwise we are sitting near a constant equilibrium (omega + g = 0),
    # which lies inside the undershoot basin
    return 0 if u < 1e-6 * a else -1


def _shoot_profile(nl: NonlinearitySpec, omega: float, grid: RadialGrid, a: float) -> np.ndarray:
    """Re-integrate at amplitude a, sampling on the grid; exponential tail
    once the integration stops being trustworthy."""
    g = _scalar_g(nl)
    d, h = grid.dimension, grid.h
    r = h * 0.25
    c0 = a * (omega + g(a * a)) / (2 * d)
    u = a + c0 * r * r
    up = 2 * c0 * r

    out = np.zeros(grid.n)
    step = h * 0.25
    kappa = np.sqrt(omega)
    idx = 0
    tail_from = None
    while idx < grid.n:
        target = grid.r[idx]
        while r < target - 1e-12:
            u, up = _rk4_step(g, omega, d, r, u, up, step)
            r += step
        if u <= 0 or up > 0 or u < 1e-10 * a:
            tail_from = idx
            break
        out[idx] = u
        idx += 1
    if tail_from is not None:
        i0 = max(tail_from - 1, 0)
        base = out[i0] if out[i0] > 0 else 1e-10 * a
        geom = (grid.r[i0] / grid.r[i0:]) ** ((d - 1) / 2.0)
        out[i0:] = base * geom * np.exp(-kappa * (grid.r[i0:] - grid.r[i0]))
    return out


def solve_ground_state(nl: NonlinearitySpec, omega: float, grid: RadialGrid,
                       init: np.ndarray | None = None, tol: float = 1e-10,
                       max_newton: int = 60) -> GroundState:
    if omega <= 0:
        raise NoGroundState(f"omega = {omega} must be positive")
    if init is None:
        init = _initial_guess(nl, omega, grid)
    phi, iters, rel = _newton_polish(nl, omega, grid, init, tol, max_newton)
    if np.any(phi <= 0):
        raise NoGroundState("Newton converged to a sign-changing profile")
    field = RadialField(grid, phi, +1)
    # the converged Jacobian is L_plus; reuse it for the omega derivative
    lplus = _lplus_banded(nl, omega, grid, phi)
    dphi = grid.from_coeffs(lplus.solve(-grid.to_coeffs(phi)))
    mass = field.inner(field)
    tail = _tail_slope(grid, phi)
    gs = GroundState(omega, field, RadialField(grid, dphi, +1), mass, rel, tail, iters)
    _check_profile(gs)
    return gs


def _initial_guess(nl: NonlinearitySpec, omega: float, grid: RadialGrid) -> np.ndarray:
    d, h = grid.dimension, grid.h
    shoot_rmax = min(grid.rmax, 25.0 / np.sqrt(omega))
    a_lo, a_hi = None, None
    # amplitude scale of order sqrt(omega) for cubic-like g; the odd factor
    # keeps the seed off any constant equilibrium omega + g(a^2) = 0
    a = 1.19 * np.sqrt(omega)
    for _ in range(60):
        cls = _shoot_classify(nl, omega, d, a, shoot_rmax, h)
        if cls >= 0:
            a_hi = a
            a /= 1.7
        else:
            a_lo = a
            break
    if a_lo is None:
        raise NoGroundState("no undershoot found while scanning amplitudes downward")
    if a_hi is None:
        a = a_lo
        for _ in range(80):
            a *= 1.6
            if _shoot_classify(nl, omega, d, a, shoot_rmax, h) >= 0:
                a_hi = a
                break
            a_lo = a
        if a_hi is None:
            raise NoGroundState("no overshoot found while scanning amplitudes upward")
    for _ in range(46):
        mid = 0.5 * (a_lo + a_hi)
        if _shoot_classify(nl, omega, d, mid, shoot_rmax, h) >= 0:
            a_hi = mid
        else:
            a_lo = mid
    return _shoot_profile(nl, omega, grid, 0.5 * (a_lo + a_hi))


def _lplus_banded(nl, omega, grid, phi):
    derivs = evaluate(nl, phi * phi, 1)
    pot = omega + derivs[0] + 2.0 * derivs[1] * phi * phi
    return grid.minus_laplacian(+1).add_diag(pot)


def _newton_polish(nl, omega, grid, phi0, tol, max_newton):
    phi = phi0.copy()
    sw = grid.sqrt_w
    scale = None
    for it in range(1, max_newton + 1):
        gval = evaluate(nl, phi * phi)[0]
        F = grid.minus_laplacian(+1).matvec(sw * phi) + sw * (omega + gval) * phi
        if scale is None:
            scale = max(np.linalg.norm(sw * omega * phi), 1e-30)
        rel = np.linalg.norm(F) / scale
        if rel <= tol:
            return phi, it - 1, rel
        J = _lplus_banded(nl, omega, grid, phi)
        step = grid.from_coeffs(J.solve(-F))
        # damped update: backtrack on the residual norm
        t = 1.0
        for _ in range(30):
            trial = phi + t * step
            gt = evaluate(nl, trial * trial)[0]
            Ft = grid.minus_laplacian(+1).matvec(sw * trial) + sw * (omega + gt) * trial
            if np.linalg.norm(Ft) < (1 - 0.25 * t) * np.linalg.norm(F):
                phi = trial
                break
            t /= 2
        else:
            raise ConvergenceFailure("ground-state Newton: line search stalled")
    raise ConvergenceFailure(f"ground-state Newton: no convergence in {max_newton} iterations "
                             f"(residual {rel:.3e})")


def _tail_slope(grid, phi):
    """Log-derivative of r^{(d-1)/2} phi over the last decayed stretch."""
    v = grid.r ** ((grid.dimension - 1) / 2.0) * phi
    good = v > 1e-13 * v.max()
    i1 = int(np.max(np.nonzero(good))) if np.any(good) else grid.n - 1
    # stay away from the outer wall: the Dirichlet image contaminates the
    # last stretch of the decay
    i1 = min(i1, int(0.8 * grid.n))
    i0 = max(int(0.7 * i1), 2)
    if i1 - i0 < 4:
        return float("nan")
    x = grid.r[i0:i1]
    y = np.log(v[i0:i1])
    return float(np.polyfit(x, y, 1)[0])


def _check_profile(gs: GroundState):
    phi = gs.phi.values
    if np.any(np.diff(phi[: int(0.8 * gs.grid.n)]) > 1e-8 * phi[0]):
        raise NoGroundState("profile is not monotone decreasing on the core region")
    kappa = np.sqrt(gs.omega)
    if np.isfinite(gs.tail_slope) and abs(gs.tail_slope + kappa) > 0.2 * kappa:
        raise NoGroundState(
            f"tail decay rate {gs.tail_slope:.4f} is not close to -sqrt(omega) = {-kappa:.4f}")


# -- Vakhitov-Kolokolov ---------------------------------------------------

@dataclass
class VKPoint:
    omega: float
    mass: float
    slope: float | None      # centered difference; None at sweep endpoints
    passes: bool | None


@dataclass
class VKReport:
    points: list[VKPoint]
    tau_vk: float

    @property
    def all_pass(self) -> bool:
        inner = [p.passes for p in self.points if p.passes is not None]
        return bool(inner) and all(inner)


def slopes_from_masses(omegas: np.ndarray, masses: np.ndarray, tau_vk: float) -> VKReport:
    """Pure slope/status computation, separated so tests can feed synthetic
    mass curves (e.g. an exactly flat one) without a solver in the loop."""
    omegas = np.asarray(omegas, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if omegas.size < 3:
        raise ValueError("need at least 3 omega samples for centered slopes")
    if np.any(np.diff(omegas) <= 0):
        raise ValueError("omega samples must be strictly increasing")
    pts = []
    for i in range(omegas.size):
        if i == 0 or i == omegas.size - 1:
            pts.append(VKPoint(float(omegas[i]), float(masses[i]), None, None))
            continue
        slope = float((masses[i + 1] - masses[i - 1]) / (omegas[i + 1] - omegas[i - 1]))
        pts.append(VKPoint(float(omegas[i]), float(masses[i]), slope, slope > tau_vk))
    return VKReport(pts, tau_vk)


def vk_check(nl: NonlinearitySpec, omegas, grid: RadialGrid, tol: float = 1e-10,
             tau_vk: float = 1e-8) -> VKReport:
    """Solve the ground state along an omega sweep (warm-started) and report
    centered-difference mass slopes. Endpoints carry no slope."""
    omegas = np.sort(np.asarray(omegas, dtype=float))
    masses = []
    init = None
    for om in omegas:
        gs = solve_ground_state(nl, float(om), grid, init=init, tol=tol)
        masses.append(gs.mass)
        init = gs.phi.values
    return slopes_from_masses(omegas, np.array(masses), tau_vk)


def require_vk(report: VKReport):
    if not report.all_pass:
        bad = [p.omega for p in report.points if p.passes is False]
        raise InstabilityDetected(f"Vakhitov-Kolokolov slope fails at omega = {bad}")
