"""
Service for the layer dynamics ODEs

    parabolic:   h' = P*(h)
    hyperbolic:  τ h'' + γ_τ h' = P*(h),

with P*_j = ε D∞⁻¹ (α^{j+1/2} − α^{j−1/2}), its potential W, the Hessian B,
the equilibrium h^e and the spectrum of the linearisation at h^e.
"""
import math
from typing import Callable, Dict, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import solve_ivp, trapezoid
from scipy.linalg import eigh_tridiagonal, eigvals
from scipy.optimize import brentq

from metastable.domain.models import (
    AsymptoticConstants,
    ComparisonRun,
    ComparisonSeries,
    LayerVector,
    ReducedTrajectory,
    SpectrumReport,
)
from metastable.services.event_bus import EventBus, Events
from metastable.services.exceptions import EquilibriumError, LayerDomainError, StructuralError
from metastable.services.manifold_service import interval_branch
from metastable.services.model_service import ModelService
from metastable.services.profile_service import ProfileService
from metastable.utils.quadrature import composite_rule
from metastable.utils.sexy_logger import get_logger

Mode = Literal["exact", "asymptotic"]
GammaMap = Union[Callable[[float], float], Mapping[float, float]]

ADMISSIBLE_MARGIN = 1.05
PARABOLIC_RTOL = 1e-10
HYPERBOLIC_RTOL = 1e-10
EQUILIBRIUM_PSTAR_TOL = 1e-14
EQUILIBRIUM_PSI_TOL = 1e-25
# cota relativa a max α: el redondeo de r en la caché de amplitudes deja ~1e-11 relativo en α
EQUILIBRIUM_ALPHA_RTOL = 1e-10


class ReducedService:
    """Reduced layer dynamics for one potential; ε and ρ travel with each LayerVector."""

    def __init__(self, profiles: ProfileService, bus: Optional[EventBus] = None):
        self.profiles = profiles
        self.potential = profiles.potential
        self.bus = bus or EventBus()
        self.logger = get_logger(__name__)
        self._d_inf: Optional[float] = None
        self._constants: Optional[AsymptoticConstants] = None

    @property
    def d_infinity(self) -> float:
        if self._d_inf is None:
            self._d_inf = ModelService.d_infinity(self.potential)
        return self._d_inf

    @property
    def constants(self) -> AsymptoticConstants:
        if self._constants is None:
            self._constants = self.profiles.calibrate_asymptotics()
        return self._constants

    # --- α and P* ---

    def _alpha(self, r: float, branch: str, mode: Mode) -> float:
        if mode == "asymptotic":
            return float(self.profiles.alpha_asymptotic(r, branch, self.constants))
        return self.profiles.amplitude(r, branch)[1]

    def min_spacing(self, eps: float, rho: float) -> float:
        """Smallest spacing the reduced flow may reach: ε/ρ, or the shortest profile interval if larger."""
        L0 = max(self.profiles.minimal_period("plus"), self.profiles.minimal_period("minus"))
        return max(eps / rho, ADMISSIBLE_MARGIN * eps * L0)

    @staticmethod
    def _spacings(h: np.ndarray) -> np.ndarray:
        ext = np.concatenate(([-h[0]], h, [2.0 - h[-1]]))
        return np.diff(ext)

    def alphas(self, h: np.ndarray, eps: float, mode: Mode = "exact", floor: float = 0.0) -> np.ndarray:
        """α^{j−1/2} for raw positions; spacings are clamped from below at `floor`."""
        ell = np.maximum(self._spacings(np.asarray(h, dtype=float)), floor)
        return np.array([self._alpha(eps / l, interval_branch(i), mode) for i, l in enumerate(ell)])

    def pstar(self, lv: LayerVector, mode: Mode = "exact") -> np.ndarray:
        """P*_j = ε D∞⁻¹ (α^{j+1/2} − α^{j−1/2})."""
        return self._pstar_raw(lv.h, lv.eps, mode)

    def _pstar_raw(self, h, eps, mode: Mode = "exact", floor: float = 0.0) -> np.ndarray:
        return eps / self.d_infinity * np.diff(self.alphas(h, eps, mode, floor))

    # --- Potential W ---

    def _W_branch(self, s: float, s_ref: float, branch: str) -> float:
        """
        W_±(s) anchored at W_±(s_ref) = 0, from W' = D∞⁻¹ α(1/s).

        With s = L(β) and α = P(β), integration by parts gives
        sα(1/s) − s_ref α(1/s_ref) − ∫ L(b) P'(b) db between the two amplitudes.
        """
        beta_s, alpha_s = self.profiles.amplitude(1.0 / s, branch)
        beta_ref, alpha_ref = self.profiles.amplitude(1.0 / s_ref, branch)
        y0, y1 = math.log(beta_ref), math.log(beta_s)
        panels = max(2, int(math.ceil(abs(y1 - y0) / 0.5)))
        nodes, weights = composite_rule(panels)
        y = y0 + (y1 - y0) * nodes
        b = np.exp(y)
        dP = Polynomial(self.profiles.taylor_at_well(branch)).deriv()
        integral = (y1 - y0) * np.dot(weights, self.profiles.period_beta(b, branch) * dP(b) * b)
        return (s * alpha_s - s_ref * alpha_ref - integral) / self.d_infinity

    def potential_W(self, lv: LayerVector) -> float:
        """W = ε²[½W_1(ℓ_1/ε) + Σ W_j(ℓ_j/ε) + ½W_{N+1}(ℓ_{N+1}/ε)], anchored at s_ref = 1/(Nε)."""
        eps = lv.eps
        s_ref = 1.0 / (lv.N * eps)
        ell = lv.spacings
        weights = np.ones(ell.size)
        weights[0] = weights[-1] = 0.5
        return float(eps * eps * sum(
            wgt * self._W_branch(l / eps, s_ref, interval_branch(i))
            for i, (wgt, l) in enumerate(zip(weights, ell))
        ))

    def grad_W(self, lv: LayerVector) -> np.ndarray:
        """∇W = −P*."""
        return -self.pstar(lv)

    def reduced_energy(self, lv: LayerVector, eta, tau: float) -> float:
        """½τ|η|² + W(h)."""
        eta = np.asarray(eta, dtype=float)
        return 0.5 * tau * float(np.dot(eta, eta)) + self.potential_W(lv)

    # --- Hessian ---

    def _alpha_prime(self, r: float, branch: str) -> float:
        step = max(1e-8, 1e-4 * r)
        return (self.profiles.amplitude(r + step, branch)[1]
                - self.profiles.amplitude(r - step, branch)[1]) / (2.0 * step)

    def omegas(self, lv: LayerVector) -> np.ndarray:
        """ω_j = W''_j(ℓ_j/ε) = −D∞⁻¹ α'(r_j) r_j²."""
        r = lv.eps / lv.spacings
        return np.array([-self._alpha_prime(rj, interval_branch(i)) * rj * rj
                         for i, rj in enumerate(r)]) / self.d_infinity

    @staticmethod
    def assemble_B(omega: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Diagonal and off-diagonal of the tridiagonal Hessian for ω_1..ω_{N+1}."""
        diag = omega[:-1] + omega[1:]
        diag[0] += omega[0]
        diag[-1] += omega[-1]
        return diag, -omega[1:-1]

    def hessian_B(self, lv: LayerVector) -> np.ndarray:
        """Symmetric tridiagonal Hessian of W."""
        diag, off = self.assemble_B(self.omegas(lv))
        return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)

    def hessian_fd(self, lv: LayerVector, step: float = 1e-6) -> np.ndarray:
        """Central-difference Jacobian of ∇W, a check on hessian_B."""
        H = np.empty((lv.N, lv.N))
        for j in range(lv.N):
            e = np.zeros(lv.N)
            e[j] = step
            H[:, j] = (self.grad_W(lv.replace(lv.h + e)) - self.grad_W(lv.replace(lv.h - e))) / (2.0 * step)
        return 0.5 * (H + H.T)

    # --- Equilibrium ---

    @staticmethod
    def positions_from_spacings(N: int, ell_minus: float, ell_plus: float) -> np.ndarray:
        """h_1 = ℓ_−/2, then alternating ℓ_+, ℓ_−, ..."""
        steps = [ell_plus if j % 2 == 1 else ell_minus for j in range(1, N)]
        return 0.5 * ell_minus + np.concatenate(([0.0], np.cumsum(steps)))

    def stationarity(self, lv: LayerVector) -> Tuple[float, float, Tuple[float, float]]:
        """
        (max|P*|, Ψ, (tol_P*, tol_Ψ)) at lv, with Ψ = Σ (α^{j+1/2} − α^{j−1/2})².

        Tolerances are 1e-14 and 1e-25, relaxed to 1e-10 relative to max α
        when the amplitudes are too large for the absolute bounds.
        """
        alphas = self.alphas(lv.h, lv.eps)
        jumps = np.diff(alphas)
        floor = EQUILIBRIUM_ALPHA_RTOL * float(np.max(alphas))
        pstar_tol = max(EQUILIBRIUM_PSTAR_TOL, lv.eps / self.d_infinity * floor)
        psi_tol = max(EQUILIBRIUM_PSI_TOL, lv.N * floor * floor)
        residual = lv.eps / self.d_infinity * float(np.max(np.abs(jumps)))
        return residual, float(np.sum(jumps ** 2)), (pstar_tol, psi_tol)

    def _polish(self, lv: LayerVector, iterations: int) -> LayerVector:
        """Newton on P*(h) = 0 with the assembled Hessian."""
        for _ in range(iterations):
            P = self.pstar(lv)
            if np.max(np.abs(P)) <= EQUILIBRIUM_PSTAR_TOL:
                break
            try:
                lv = lv.replace(lv.h + np.linalg.solve(self.hessian_B(lv), P))
            except LayerDomainError as e:
                raise EquilibriumError(f"Newton polish left Omega_rho: {e}")
        return lv

    def _require_stationary(self, lv: LayerVector, label: str):
        residual, psi, (pstar_tol, psi_tol) = self.stationarity(lv)
        if residual > pstar_tol or psi > psi_tol:
            raise EquilibriumError(
                f"polish did not reach a stationary point for {label}: "
                f"|P*|={residual:.3e} (tol {pstar_tol:.1e}), Psi={psi:.3e} (tol {psi_tol:.1e})"
            )

    def equilibrium(self, N: int, eps: float, rho: float, polish: int = 5) -> LayerVector:
        """
        h^e from α_−(ε/ℓ_−) = α_+(ε/ℓ_+) with ℓ_− + ℓ_+ = 2/N, then Newton on P*(h) = 0.

        Raises:
            EquilibriumError: no sign change of the balance on the admissible range,
                or the solution is outside Ω_ρ,
                or the polished h^e misses the P* and Ψ tolerances of stationarity()
        """
        total = 2.0 / N
        lo = ADMISSIBLE_MARGIN * eps * self.profiles.minimal_period("minus")
        hi = total - ADMISSIBLE_MARGIN * eps * self.profiles.minimal_period("plus")
        if not lo < hi:
            raise EquilibriumError(f"no admissible spacings for N={N}, eps={eps}")

        def balance(ell_minus):
            a_minus = self.profiles.amplitude(eps / ell_minus, "minus")[1]
            a_plus = self.profiles.amplitude(eps / (total - ell_minus), "plus")[1]
            return math.log(a_minus) - math.log(a_plus)

        try:
            ell_minus = brentq(balance, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
        except ValueError as e:
            raise EquilibriumError(f"no equilibrium in Omega_rho for N={N}, eps={eps}: {e}")

        h = self.positions_from_spacings(N, ell_minus, total - ell_minus)
        try:
            lv = LayerVector(h, eps, rho)
        except LayerDomainError as e:
            raise EquilibriumError(f"equilibrium spacing outside Omega_rho: {e}")

        lv = self._polish(lv, polish)
        self._require_stationary(lv, f"N={N}, eps={eps}")
        self.logger.success(f"h^e (N={N}, eps={eps}) = {np.array2string(lv.h, precision=12)}")
        return lv

    def equilibrium_from(self, lv0: LayerVector, T: float = 400.0, polish: int = 8) -> LayerVector:
        """
        Critical point of W reached from lv0: the ascent flow h' = −P*(h) up to T,
        then the same Newton polish and tolerances as equilibrium().

        Raises:
            EquilibriumError: the flow leaves Ω_ρ or the polish misses the tolerances
        """
        traj = self.integrate_parabolic(lv0, T, t_eval=np.array([0.0, T]), reverse=True)
        if traj.event is not None:
            raise EquilibriumError(f"W-ascent flow from h={lv0.h} stopped at t={traj.t[-1]:.6g} ({traj.event})")
        try:
            lv = lv0.replace(traj.h[-1])
        except LayerDomainError as e:
            raise EquilibriumError(f"W-ascent flow ended outside Omega_rho: {e}")
        lv = self._polish(lv, polish)
        self._require_stationary(lv, f"start h0={lv0.h}")
        self.logger.solver("equilibrium_from", h0=np.array2string(lv0.h, precision=4),
                           h=np.array2string(lv.h, precision=12))
        return lv

    def equilibrium_asymptotic_spacings(self, N: int, eps: float) -> Tuple[float, float]:
        """(ℓ_−, ℓ_+) from ℓ_+ + ℓ_− = 2/N and A_+ℓ_+ − A_−ℓ_− = ε log(K_+²A_+² / K_−²A_−²)."""
        c = self.constants
        rhs = eps * math.log((c.K_plus * c.A_plus) ** 2 / (c.K_minus * c.A_minus) ** 2)
        total = 2.0 / N
        ell_plus = (rhs + c.A_minus * total) / (c.A_plus + c.A_minus)
        return total - ell_plus, ell_plus

    # --- Spectrum ---

    @staticmethod
    def spectrum_from_hessian(diag: np.ndarray, off: np.ndarray, tau: float, gamma_tau: float,
                              omega: Optional[np.ndarray] = None) -> SpectrumReport:
        """
        μ² = eig(−B) and λ^± = (−γ_τ ± √(γ_τ² + 4τμ²)) / (2τ), checked on the dense Jacobian.

        Raises:
            StructuralError: B not negative definite, or the dense check fails
        """
        if tau <= 0.0:
            raise StructuralError("spectrum of the hyperbolic linearisation needs tau > 0")
        mu_sq = eigh_tridiagonal(-np.asarray(diag), -np.asarray(off), eigvals_only=True)
        if np.any(mu_sq <= 0.0):
            raise StructuralError(f"Hessian is not negative definite: mu^2 = {mu_sq}")
        root = np.sqrt(gamma_tau * gamma_tau + 4.0 * tau * mu_sq)
        lam_plus = 2.0 * mu_sq / (gamma_tau + root)
        lam_minus = -(gamma_tau + root) / (2.0 * tau)

        N = mu_sq.size
        B = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
        J = np.block([[np.zeros((N, N)), np.eye(N)], [-B / tau, -(gamma_tau / tau) * np.eye(N)]])
        dense = np.sort(eigvals(J).real)
        closed = np.sort(np.concatenate((lam_minus, lam_plus)))
        error = float(np.max(np.abs(dense - closed)))
        if error > 1e-8 * max(1.0, np.linalg.norm(J, np.inf)):
            raise StructuralError(f"dense Jacobian eigenvalues disagree with the closed form by {error:.3e}")
        return SpectrumReport(
            omega=np.asarray(omega) if omega is not None else np.array([]),
            B=B, mu_sq=mu_sq, lambda_plus=lam_plus, lambda_minus=lam_minus, dense_max_error=error,
        )

    def spectrum(self, lv: LayerVector, tau: float, gamma_tau: float) -> SpectrumReport:
        omega = self.omegas(lv)
        diag, off = self.assemble_B(omega)
        return self.spectrum_from_hessian(diag, off, tau, gamma_tau, omega)

    # --- Trajectories ---

    def _exit_event(self, eps: float, rho: float, N: int):
        limit = self.min_spacing(eps, rho)

        def event(t, y):
            return float(self._spacings(y[:N]).min() - limit)

        event.terminal = True
        event.direction = -1
        return event, limit

    def _finish(self, sol, N: int, label: str) -> Optional[str]:
        if sol.status == -1:
            raise StructuralError(f"{label} integration failed: {sol.message}")
        if sol.status == 1:
            t_exit = float(sol.t_events[0][0])
            self.bus.emit(Events.DOMAIN_EXIT, {"t": t_exit, "system": label})
            self.logger.event(f"{label}: salida de Ω_ρ en t={t_exit:.6g}")
            return Events.DOMAIN_EXIT.value
        return None

    def integrate_parabolic(self, lv0: LayerVector, T: float, mode: Mode = "exact",
                            t_eval: Optional[np.ndarray] = None, reverse: bool = False) -> ReducedTrajectory:
        """
        h' = P*(h) (or −P* with reverse) by adaptive RK45, stopping at the Ω_ρ boundary.
        """
        eps, rho, N = lv0.eps, lv0.rho, lv0.N
        event, floor = self._exit_event(eps, rho, N)
        sign = -1.0 if reverse else 1.0

        def rhs(t, h):
            return sign * self._pstar_raw(h, eps, mode, floor)

        if t_eval is None:
            t_eval = np.linspace(0.0, T, 1001)
        sol = solve_ivp(rhs, (0.0, T), lv0.h, method="RK45", t_eval=t_eval, events=event,
                        rtol=PARABOLIC_RTOL, atol=1e-14)
        flag = self._finish(sol, N, "parabolic")
        self.logger.solver("parabolic", nfev=sol.nfev, t_final=float(sol.t[-1]))
        return ReducedTrajectory(t=sol.t, h=sol.y.T.copy(), event=flag)

    def integrate_hyperbolic(self, lv0: LayerVector, eta0, tau: float, gamma_tau: float, T: float,
                             mode: Mode = "exact", t_eval: Optional[np.ndarray] = None,
                             with_energy: bool = True) -> ReducedTrajectory:
        """
        τh'' + γ_τh' = P*(h) as (h, η) by LSODA; E_τ = ½τ|η|² + W(h) at each sample.
        """
        eps, rho, N = lv0.eps, lv0.rho, lv0.N
        event, floor = self._exit_event(eps, rho, N)

        def rhs(t, y):
            h, eta = y[:N], y[N:]
            return np.concatenate((eta, (self._pstar_raw(h, eps, mode, floor) - gamma_tau * eta) / tau))

        if t_eval is None:
            t_eval = np.linspace(0.0, T, 1001)
        y0 = np.concatenate((lv0.h, np.asarray(eta0, dtype=float)))
        sol = solve_ivp(rhs, (0.0, T), y0, method="LSODA", t_eval=t_eval, events=event,
                        rtol=HYPERBOLIC_RTOL, atol=1e-14)
        flag = self._finish(sol, N, "hyperbolic")
        h, eta = sol.y[:N].T.copy(), sol.y[N:].T.copy()
        energy = None
        if with_energy:
            energy = np.array([self.reduced_energy(lv0.replace(hk), ek, tau) for hk, ek in zip(h, eta)])
        self.logger.solver("hyperbolic", tau=tau, nfev=sol.nfev, t_final=float(sol.t[-1]))
        return ReducedTrajectory(t=sol.t, h=h, eta=eta, energy=energy, event=flag)

    @staticmethod
    def dissipation_residual(traj: ReducedTrajectory, gamma_tau: float) -> float:
        """|E(T) − E(0) + γ_τ∫|η|²| relative to γ_τ∫|η|²."""
        dissipated = gamma_tau * trapezoid(np.sum(traj.eta ** 2, axis=1), traj.t)
        change = traj.energy[-1] - traj.energy[0]
        return float(abs(change + dissipated) / max(dissipated, np.finfo(float).tiny))

    # --- τ → 0 comparison ---

    @staticmethod
    def _gamma_of(gamma_map: GammaMap, tau: float) -> float:
        if callable(gamma_map):
            return float(gamma_map(tau))
        return float(gamma_map[tau])

    def compare_relaxation(self, lv0: LayerVector, eta0, taus: Sequence[float], T: float,
                           gamma_map: GammaMap, t1: float, samples: int = 2001) -> ComparisonSeries:
        """
        E_τ(t) = γ_τ|h − h_p| + τ|η − η_p| against the parabolic trajectory h_p, η_p = P*(h_p).
        """
        t_eval = np.linspace(0.0, T, samples)
        para = self.integrate_parabolic(lv0, T, t_eval=t_eval)
        floor = self.min_spacing(lv0.eps, lv0.rho)
        eta_p = np.array([self._pstar_raw(h, lv0.eps, "exact", floor) for h in para.h])

        runs = []
        for tau in taus:
            gamma = self._gamma_of(gamma_map, tau)
            hyp = self.integrate_hyperbolic(lv0, eta0, tau, gamma, T, t_eval=t_eval, with_energy=False)
            n = min(hyp.t.size, para.t.size)
            t = hyp.t[:n]
            dh = hyp.h[:n] - para.h[:n]
            de = hyp.eta[:n] - eta_p[:n]
            E = gamma * np.linalg.norm(dh, axis=1) + tau * np.linalg.norm(de, axis=1)
            eta_err = np.max(np.abs(de), axis=1)
            after = eta_err[t >= t1]
            before = eta_err[t < t1]
            runs.append(ComparisonRun(
                tau=float(tau), gamma_tau=gamma, t=t,
                h_err=np.max(np.abs(dh), axis=1), eta_err=eta_err, E=E,
                sup_E=float(E.max()),
                eta_err_integral=float(trapezoid(eta_err, t)),
                eta_err_after_t1=float(after.max()) if after.size else float("nan"),
                eta_err_before_t1=float(before.max()) if before.size else float("nan"),
                bound_reference=float(E[0] + 1.0 - gamma + tau),
            ))
            self.logger.sweep(f"tau={tau:g}: sup E={runs[-1].sup_E:.3e}")
        return ComparisonSeries(t1=float(t1), runs=tuple(runs))

    def summary(self, lv: LayerVector, tau: float, gamma_tau: float) -> Dict:
        """Equilibrium diagnostics as a JSON-ready dict."""
        report = self.spectrum(lv, tau, gamma_tau)
        return {
            "h": lv.h.tolist(),
            "spacings": lv.spacings.tolist(),
            "pstar_residual": float(np.max(np.abs(self.pstar(lv)))),
            "spectrum": report.as_dict(),
        }
