"""
Service for the finite-interval steady profiles φ(·, ℓ, ±1).

The unknown amplitude is carried as β = 1 − |φ(0)|, the distance of the
profile maximum from the well, and solved in log β: at small ε/ℓ the
amplitude is closer to 1 than double precision can resolve, while β itself
is perfectly representable.
"""
import threading
from typing import Dict, Literal, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from metastable.domain.models import AsymptoticConstants, PotentialSpec, ProfileSolution
from metastable.services.exceptions import CalibrationError, ProfileDomainError
from metastable.services.model_service import ModelService
from metastable.utils.persistence import write_csv
from metastable.utils.quadrature import composite_rule, interval_gauss
from metastable.utils.sexy_logger import get_logger

Branch = Literal["plus", "minus"]

LOG_BETA_MIN = -700.0
TABLE_NODES = 2048
EXTENSION_NODES = 256
EXTENSION_MARGIN = 2.2          # en unidades de ε más allá del cero
PANEL_WIDTH = 0.5
CALIBRATION_RATIOS = (0.05, 0.04, 0.03, 0.02)
CACHE_LIMIT = 4096


def _bounded_insert(cache: Dict, key, value):
    """Insert unless present; the oldest entries go first once the cache is full."""
    if key in cache:
        return cache[key]
    while len(cache) >= CACHE_LIMIT:
        cache.pop(next(iter(cache)))
    cache[key] = value
    return value


def _lobatto(a: float, b: float, n: int) -> np.ndarray:
    """Chebyshev-Lobatto points on [a, b], increasing, endpoints included."""
    k = np.arange(n)
    return a + 0.5 * (b - a) * (1.0 - np.cos(np.pi * k / (n - 1)))


class ProfileService:
    """
    Amplitudes, period map and profile tables for one potential.

    Solutions are memoised in class-level caches keyed by
    (potential, branch, r rounded to 1e-12): lookups are lock-free reads,
    insertions happen under a lock with a second check.
    """

    _solutions: Dict[Tuple, ProfileSolution] = {}
    _amplitudes: Dict[Tuple, Tuple[float, float]] = {}
    _floors: Dict[Tuple, Tuple[float, float]] = {}
    _constants: Dict[Tuple, AsymptoticConstants] = {}
    _lock = threading.Lock()

    def __init__(self, potential: PotentialSpec):
        self.potential = potential
        self.key = potential.cache_key()
        self.logger = get_logger(__name__)
        F = ModelService.polynomials(potential)[0]
        self._coeffs: Dict[str, np.ndarray] = {}
        self._P: Dict[str, Polynomial] = {}
        for branch, w in (("plus", 1.0), ("minus", -1.0)):
            P = F(Polynomial([w, -w]))
            c = np.zeros(max(3, P.coef.size))
            c[:P.coef.size] = P.coef
            # pozo doble: P(0) = P'(0) = 0 exactamente
            c[0] = c[1] = 0.0
            self._coeffs[branch] = c
            self._P[branch] = Polynomial(c)

    # --- Polynomial pieces ---

    def taylor_at_well(self, branch: Branch) -> np.ndarray:
        """Coefficients of P(x) = F(w(1 − x)), x the distance from the well w = ±1."""
        return self._coeffs[branch].copy()

    def _divided_difference(self, x, beta, branch: Branch):
        """Q(x, β) = (P(x) − P(β)) / (x − β) without cancellation."""
        c = self._coeffs[branch]
        h = np.ones_like(x * beta)
        bpow = np.ones_like(h)
        total = c[1] * h
        for k in range(2, c.size):
            bpow = bpow * beta
            h = x * h + bpow
            total = total + c[k] * h
        return total

    def _integrand(self, t, beta, branch: Branch):
        """dξ/dt = 2√β cosh t / √Q(x(t), β) with x = β + 2β sinh²t."""
        sh = np.sinh(t)
        x = beta + 2.0 * beta * sh * sh
        q = self._divided_difference(x, beta, branch)
        return 2.0 * np.sqrt(beta) * np.cosh(t) / np.sqrt(q)

    @staticmethod
    def _t_of_x(x, beta):
        return np.arcsinh(np.sqrt(np.maximum(x - beta, 0.0) / (2.0 * beta)))

    # --- Period map ---

    def period_beta(self, beta, branch: Branch) -> np.ndarray:
        """
        Period map L(β) = ℓ/ε for an array of β, by composite Gauss-Legendre in t.

        The substitution x = β + 2β sinh²t removes the inverse square root
        at the amplitude end and leaves an integrand close to 2/A.
        """
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        T = self._t_of_x(1.0, beta)
        panels = max(4, int(np.ceil(T.max() / PANEL_WIDTH)))
        nodes, weights = composite_rule(panels)
        t = T[:, None] * nodes[None, :]
        g = self._integrand(t, beta[:, None], branch)
        return 2.0 * T * (g @ weights)

    def period_length(self, M: float, branch: Branch) -> float:
        """
        L(M) for an amplitude M = |φ(0)|.

        Raises:
            ProfileDomainError: if M ≥ 1 or M ≤ M_floor
        """
        beta_floor, _ = self._floor(branch)
        if not (1.0 - beta_floor < M < 1.0):
            raise ProfileDomainError(
                f"amplitude M={M!r} outside ({1.0 - beta_floor:.6g}, 1) for branch {branch}"
            )
        return float(self.period_beta(1.0 - M, branch)[0])

    def _admissible_cap(self, branch: Branch) -> float:
        """Largest β with P'(β) > 0 and P(x) > P(β) on (β, 1], by scanning."""
        P = self._P[branch]
        dP = P.deriv()
        xs = np.linspace(0.0, 1.0, 2001)
        betas = np.linspace(1e-3, 0.999, 999)
        diff = P(xs)[None, :] - P(betas)[:, None]
        diff = np.where(xs[None, :] > betas[:, None] + 1e-9, diff, np.inf)
        ok = (diff.min(axis=1) > 0.0) & (dP(betas) > 0.0)
        bad = np.flatnonzero(~ok)
        if bad.size == 0:
            return float(betas[-1])
        if bad[0] == 0:
            raise ProfileDomainError(f"branch {branch} has no admissible amplitudes")
        return float(betas[bad[0] - 1])

    def _floor(self, branch: Branch) -> Tuple[float, float]:
        """(β_floor, L_0): the monotone range of the period map ends at β_floor with value L_0."""
        key = (self.key, branch)
        cached = self._floors.get(key)
        if cached is not None:
            return cached
        with self._lock:
            if key in self._floors:
                return self._floors[key]
            cap = self._admissible_cap(branch)
            betas = np.geomspace(1e-12, 0.99 * cap, 240)
            periods = self.period_beta(betas, branch)
            j = int(np.argmin(periods))
            result = (float(betas[j]), float(periods[j]))
            self._floors[key] = result
            self.logger.solver(f"{branch}: L_0={result[1]:.6g} at beta={result[0]:.3g}")
            return result

    def minimal_period(self, branch: Branch) -> float:
        """L_0, the smallest admissible interval length in units of ε."""
        return self._floor(branch)[1]

    def r_max(self, branch: Branch) -> float:
        return 1.0 / self.minimal_period(branch)

    # --- Amplitudes ---

    def amplitude(self, r: float, branch: Branch) -> Tuple[float, float]:
        """
        (β, α) for the ratio r = ε/ℓ, without building the inversion table.

        Raises:
            ProfileDomainError: "below minimal length" when 1/r < L_0
        """
        key = (self.key, branch, round(float(r), 12))
        cached = self._amplitudes.get(key)
        if cached is not None:
            return cached

        beta_floor, L0 = self._floor(branch)
        target = 1.0 / r
        if not r > 0.0 or target <= L0:
            raise ProfileDomainError(
                f"interval below minimal length: 1/r={target:.6g} <= L_0={L0:.6g} ({branch})"
            )

        def residual(s):
            return self.period_beta(np.exp(s), branch)[0] - target

        s_hi = np.log(beta_floor)
        if residual(LOG_BETA_MIN) < 0.0:
            raise ProfileDomainError(f"ratio r={r!r} too small for double precision amplitudes")
        try:
            s, info = brentq(residual, LOG_BETA_MIN, s_hi, xtol=1e-14, rtol=4 * np.finfo(float).eps,
                             maxiter=200, full_output=True)
        except ValueError as e:
            raise ProfileDomainError(f"no amplitude bracket for r={r!r} ({branch}): {e}")
        beta = float(np.exp(s))
        alpha = float(self._P[branch](beta))
        self.logger.solver(f"{branch} r={r:.6g}: beta={beta:.6e} alpha={alpha:.6e} ({info.iterations} it)")

        with self._lock:
            _bounded_insert(self._amplitudes, key, (beta, alpha))
        return beta, alpha

    def alpha_beta(self, r: float, branch: Branch) -> Tuple[float, float]:
        """(α, β) for the ratio r."""
        beta, alpha = self.amplitude(r, branch)
        return alpha, beta

    def amplitude_for_ratio(self, r: float, branch: Branch) -> ProfileSolution:
        """Full profile solution, including the extended inversion table."""
        key = (self.key, branch, round(float(r), 12))
        cached = self._solutions.get(key)
        if cached is not None:
            return cached
        solution = self._build_solution(r, branch)
        with self._lock:
            return _bounded_insert(self._solutions, key, solution)

    def _build_solution(self, r: float, branch: Branch) -> ProfileSolution:
        beta, alpha = self.amplitude(r, branch)
        P = self._P[branch]

        T = float(self._t_of_x(1.0, beta))
        # punto de retorno más allá del cero: P(x_turn) = α con x_turn en (1, 2)
        x_turn = brentq(lambda x: P(x) - alpha, 1.0, 2.0, xtol=1e-15)
        x_cap = 1.0 + 0.98 * (x_turn - 1.0)
        t_cap = float(self._t_of_x(x_cap, beta))

        t_nodes = np.concatenate((_lobatto(0.0, T, TABLE_NODES),
                                  _lobatto(T, t_cap, EXTENSION_NODES)[1:]))
        tq, wq = interval_gauss(t_nodes[:-1], t_nodes[1:])
        pieces = np.sum(self._integrand(tq, beta, branch) * wq, axis=1)
        xi_nodes = np.concatenate(([0.0], np.cumsum(pieces)))
        xi_half = float(xi_nodes[TABLE_NODES - 1])
        xi_max = float(xi_nodes[-1])

        if abs(2.0 * xi_half * r - 1.0) > 1e-10:
            self.logger.warning(f"profile table half-length {xi_half!r} vs 1/(2r)={0.5 / r!r}")
        if xi_max - xi_half < EXTENSION_MARGIN:
            self.logger.warning(
                f"{branch} r={r:.4g}: extension covers only {xi_max - xi_half:.3f} eps beyond the zero"
            )

        return ProfileSolution(
            branch=branch, r=float(r), beta=beta, alpha=alpha,
            xi_half=xi_half, xi_max=xi_max, t_nodes=t_nodes, xi_nodes=xi_nodes,
        )

    # --- Evaluation ---

    def _invert(self, sol: ProfileSolution, xi: np.ndarray) -> np.ndarray:
        """t with ξ(t) = xi: monotone cubic guess refined by Newton on the exact ξ(t)."""
        t = PchipInterpolator(sol.xi_nodes, sol.t_nodes)(xi)
        n = sol.t_nodes.size
        for _ in range(3):
            idx = np.clip(np.searchsorted(sol.t_nodes, t) - 1, 0, n - 2)
            left = sol.t_nodes[idx]
            tq, wq = interval_gauss(left, t)
            xi_t = sol.xi_nodes[idx] + np.sum(self._integrand(tq, sol.beta, sol.branch) * wq, axis=-1)
            t = t - (xi_t - xi) / self._integrand(t, sol.beta, sol.branch)
            t = np.clip(t, 0.0, sol.t_nodes[-1])
        return t

    def evaluate(self, sol: ProfileSolution, X, ell: float, eps: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        φ and φ_x at positions X measured from the interval center.

        Raises:
            ProfileDomainError: if |X| lies beyond the extended table
        """
        X = np.asarray(X, dtype=float)
        half = 0.5 * ell
        xi = sol.xi_half - (half - np.abs(X)) / eps
        xi = np.maximum(xi, 0.0)
        if np.any(xi > sol.xi_max * (1.0 + 1e-13)):
            raise ProfileDomainError(
                f"evaluation at |x|={np.abs(X).max():.6g} beyond extended domain {half + (sol.xi_max - sol.xi_half) * eps:.6g}"
            )
        t = self._invert(sol, xi)
        sh = np.sinh(t)
        x = sol.beta + 2.0 * sol.beta * sh * sh
        q = self._divided_difference(x, sol.beta, sol.branch)
        w = sol.sign
        phi = w * (1.0 - x)
        phi_x = -w * np.sign(X) * 2.0 * np.sqrt(sol.beta) * sh * np.sqrt(q) / eps
        on_boundary = np.abs(np.abs(X) - half) <= 1e-14 * ell
        phi = np.where(on_boundary, 0.0, phi)
        return phi, phi_x

    def profile_eval(self, X, ell: float, eps: float, branch: Branch) -> Tuple[np.ndarray, np.ndarray]:
        """(φ, φ_x) of φ(·, ℓ, ±1) at X ∈ [−ℓ/2 − 2ε, ℓ/2 + 2ε]."""
        sol = self.amplitude_for_ratio(eps / ell, branch)
        X = np.asarray(X, dtype=float)
        if np.any(np.abs(X) > 0.5 * ell + 2.0 * eps * (1.0 + 1e-12)):
            raise ProfileDomainError(f"x outside [-l/2 - 2eps, l/2 + 2eps] for l={ell}, eps={eps}")
        return self.evaluate(sol, X, ell, eps)

    # --- Asymptotics ---

    def calibrate_asymptotics(self) -> AsymptoticConstants:
        """
        A_± = √F''(±1) and K_± from β(r)·e^{A/(2r)} extrapolated to β → 0.

        Raises:
            CalibrationError: if the raw estimates spread by more than 1% around the limit
        """
        cached = self._constants.get(self.key)
        if cached is not None:
            return cached

        A_plus, A_minus = ModelService.well_curvatures(self.potential)
        K = {}
        residual = 0.0
        for branch, A in (("plus", A_plus), ("minus", A_minus)):
            betas = np.array([self.amplitude(r, branch)[0] for r in CALIBRATION_RATIOS])
            raw = betas * np.exp(A / (2.0 * np.array(CALIBRATION_RATIOS)))
            slope, intercept = np.polyfit(betas, raw, 1)
            if not intercept > 0.0:
                raise CalibrationError(f"non-positive K estimate for branch {branch}: {intercept!r}")
            spread = float(np.max(np.abs(raw / intercept - 1.0)))
            if spread > 0.01:
                raise CalibrationError(f"K_{branch} extrapolation residual {spread:.3%} exceeds 1%")
            K[branch] = float(intercept)
            residual = max(residual, spread)

        constants = AsymptoticConstants(
            A_plus=A_plus, A_minus=A_minus, K_plus=K["plus"], K_minus=K["minus"],
            calibration_r=CALIBRATION_RATIOS, residual=residual,
        )
        with self._lock:
            self._constants.setdefault(self.key, constants)
        self.logger.success(f"K_+={constants.K_plus:.8g}, K_-={constants.K_minus:.8g} (residual {residual:.2e})")
        return constants

    def alpha_asymptotic(self, r, branch: Branch, constants: AsymptoticConstants):
        """½K²A² e^{−A/r}."""
        A, K = constants.A(branch), constants.K(branch)
        return 0.5 * K * K * A * A * np.exp(-A / np.asarray(r, dtype=float))

    def export_profile_csv(self, sol: ProfileSolution, eps: float, path, config_hash: str, points: int = 401):
        """Write (x, φ, φ_x) on [−ℓ/2, ℓ/2] for ℓ = ε/r."""
        ell = eps / sol.r
        x = np.linspace(-0.5 * ell, 0.5 * ell, points)
        phi, phi_x = self.evaluate(sol, x, ell, eps)
        return write_csv(path, ["x", "phi", "phi_x"], zip(x, phi, phi_x), config_hash)
