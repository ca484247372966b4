"""
Service for the base manifold {u^h}: gluing of steady profiles, approximate
tangent vectors, barrier function, the matrix D(h), the Newton projection
onto (h, w) coordinates and the energy/coercivity diagnostics.
"""
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import simpson
from scipy.linalg import eigh, null_space

from metastable.domain.models import Grid, GridField, LayerVector, ManifoldCoords
from metastable.services.event_bus import EventBus, Events
from metastable.services.exceptions import DegenerateConfigurationError, ProjectionError
from metastable.services.model_service import ModelService
from metastable.services.profile_service import ProfileService
from metastable.utils.sexy_logger import get_logger

Rule = Literal["trapezoid", "simpson"]
PsiMode = Literal["alpha_formula", "inner_product"]

FD_STEP = 1e-6            # paso relativo a ε para u^h_j
SECOND_FD_STEP = 1e-4
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
NEWTON_HALVINGS = 8
WINDOW_NODES = 64


def smooth_step(s):
    """Quintic C² step: 0 for s ≤ −1, 1 for s ≥ 1, χ(s) + χ(−s) = 1."""
    return smooth_step_derivatives(s)[0]


def smooth_step_derivatives(s) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """χ, χ' and χ'' with respect to s."""
    y = 0.5 * (np.clip(np.asarray(s, dtype=float), -1.0, 1.0) + 1.0)
    chi = y * y * y * (10.0 - 15.0 * y + 6.0 * y * y)
    dchi = 15.0 * y * y * (1.0 - y) ** 2
    ddchi = 15.0 * y * (1.0 - y) * (1.0 - 2.0 * y)
    return chi, dchi, ddchi


def zero_crossings(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Crossing abscissae of u by sign change and linear interpolation; exact zeros count once."""
    u = np.asarray(u, dtype=float)
    sgn = np.sign(u)
    # un cero exacto hereda el signo del nodo anterior para no contarse dos veces
    for i in range(1, sgn.size):
        if sgn[i] == 0.0:
            sgn[i] = sgn[i - 1]
    if sgn[0] == 0.0:
        nz = np.flatnonzero(sgn)
        sgn[0] = sgn[nz[0]] if nz.size else 0.0
    idx = np.flatnonzero(sgn[:-1] * sgn[1:] < 0.0)
    u0, u1 = u[idx], u[idx + 1]
    return x[idx] + (x[idx + 1] - x[idx]) * u0 / (u0 - u1)


@dataclass(frozen=True, eq=False)
class GluedProfile:
    """u^h, u^h_x and the pieces of the convex combination at a set of points."""
    u: np.ndarray
    ux: np.ndarray
    chi: np.ndarray
    dchi: np.ndarray
    ddchi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    left_x: np.ndarray
    right_x: np.ndarray


def interval_branch(i: int) -> str:
    """Branch of the i-th interval (0-based): the first one is negative."""
    return "minus" if i % 2 == 0 else "plus"


class ManifoldService:
    """
    Operations on the glued-profile manifold for one potential and grid.

    Inner products on the grid use the configured rule; the barrier function
    in inner-product mode integrates over the ε-windows around each layer,
    where L(u^h) is supported.
    """

    def __init__(self, profiles: ProfileService, grid: Grid, bus: Optional[EventBus] = None,
                 rule: Rule = "trapezoid"):
        self.profiles = profiles
        self.potential = profiles.potential
        self.grid = grid
        self.bus = bus
        self.rule = rule
        self.logger = get_logger(__name__)

    # --- Quadrature ---

    def inner(self, a: np.ndarray, b: np.ndarray, rule: Optional[Rule] = None) -> float:
        """⟨a, b⟩ on the grid."""
        rule = rule or self.rule
        if rule == "simpson":
            return float(simpson(a * b, x=self.grid.x))
        return float(np.dot(self.grid.weights, a * b))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a, "trapezoid"), 0.0)))

    # --- Gluing ---

    def _glue(self, x, lv: LayerVector) -> GluedProfile:
        x = np.asarray(x, dtype=float)
        eps = lv.eps
        half, ell, h = lv.half_points, lv.spacings, lv.h
        region = np.clip(np.searchsorted(half, x, side="right") - 1, 0, lv.N - 1)

        chi, dchi, ddchi = (np.zeros_like(x) for _ in range(3))
        left, right, left_x, right_x = (np.zeros_like(x) for _ in range(4))
        for j in range(lv.N):
            m = region == j
            if not np.any(m):
                continue
            xs = x[m]
            c0, c1, c2 = smooth_step_derivatives((xs - h[j]) / eps)
            a, ax, b, bx = (np.zeros_like(xs) for _ in range(4))
            need_a = c0 < 1.0
            need_b = c0 > 0.0
            if np.any(need_a):
                a[need_a], ax[need_a] = self.profiles.profile_eval(
                    xs[need_a] - half[j], ell[j], eps, interval_branch(j))
            if np.any(need_b):
                b[need_b], bx[need_b] = self.profiles.profile_eval(
                    xs[need_b] - half[j + 1], ell[j + 1], eps, interval_branch(j + 1))
            chi[m], dchi[m], ddchi[m] = c0, c1, c2
            left[m], left_x[m], right[m], right_x[m] = a, ax, b, bx

        u = (1.0 - chi) * left + chi * right
        ux = (1.0 - chi) * left_x + chi * right_x + dchi / eps * (right - left)
        return GluedProfile(u, ux, chi, dchi, ddchi, left, right, left_x, right_x)

    def build_uh(self, lv: LayerVector) -> GridField:
        """u^h on the grid."""
        return GridField(self._glue(self.grid.x, lv).u, self.grid)

    def uh_with_derivative(self, lv: LayerVector, x=None) -> Tuple[np.ndarray, np.ndarray]:
        g = self._glue(self.grid.x if x is None else x, lv)
        return g.u, g.ux

    def _residual_from_glue(self, g: GluedProfile, eps: float) -> np.ndarray:
        f = ModelService.polynomials(self.potential)[1]
        delta = g.right - g.left
        delta_x = g.right_x - g.left_x
        return (f(g.u) - (1.0 - g.chi) * f(g.left) - g.chi * f(g.right)
                - g.ddchi * delta - 2.0 * eps * g.dchi * delta_x)

    def uh_residual(self, lv: LayerVector, x=None) -> np.ndarray:
        """
        L(u^h) from the gluing identity, using that each profile solves ε²φ'' = f(φ).

        Vanishes identically outside the windows |x − h_j| < ε.
        """
        g = self._glue(self.grid.x if x is None else x, lv)
        return self._residual_from_glue(g, lv.eps)

    def residual_L(self, u: np.ndarray, eps: float) -> np.ndarray:
        """−ε²u_xx + f(u) with the fourth-order stencil and reflecting ghost nodes."""
        u = np.asarray(u, dtype=float)
        p = np.pad(u, 2, mode="reflect")
        lap = (-p[:-4] + 16.0 * p[1:-3] - 30.0 * p[2:-2] + 16.0 * p[3:-1] - p[4:]) / (12.0 * self.grid.dx ** 2)
        f = ModelService.polynomials(self.potential)[1]
        return -eps * eps * lap + f(u)

    # --- Tangent vectors ---

    @staticmethod
    def cutoff(x, lv: LayerVector, j: int) -> np.ndarray:
        """γ^j: 0 outside I_j, 1 on [h_{j−1/2} + 2ε, h_{j+1/2} − 2ε] (j 0-based)."""
        eps = lv.eps
        half = lv.half_points
        return smooth_step((x - half[j] - eps) / eps) * (1.0 - smooth_step((x - half[j + 1] + eps) / eps))

    def tangent_vectors(self, lv: LayerVector, x=None) -> List[np.ndarray]:
        """k^h_j = −γ^j u^h_x."""
        x = self.grid.x if x is None else np.asarray(x, dtype=float)
        ux = self._glue(x, lv).ux
        return [-self.cutoff(x, lv, j) * ux for j in range(lv.N)]

    # --- Barrier function ---

    def alphas(self, lv: LayerVector) -> np.ndarray:
        """α^{j−1/2}, j = 1..N+1, one per interval with its branch."""
        return np.array([
            self.profiles.amplitude(lv.eps / ell, interval_branch(i))[1]
            for i, ell in enumerate(lv.spacings)
        ])

    def residual_projections(self, lv: LayerVector, rule: Optional[str] = "gauss") -> np.ndarray:
        """⟨L(u^h), k^h_j⟩ for each layer."""
        if rule == "gauss":
            z, w = leggauss(WINDOW_NODES)
            out = np.empty(lv.N)
            for j, hj in enumerate(lv.h):
                xs = hj + lv.eps * z
                g = self._glue(xs, lv)
                k = -self.cutoff(xs, lv, j) * g.ux
                out[j] = lv.eps * np.dot(w, self._residual_from_glue(g, lv.eps) * k)
            return out
        g = self._glue(self.grid.x, lv)
        res = self._residual_from_glue(g, lv.eps)
        return np.array([self.inner(res, -self.cutoff(self.grid.x, lv, j) * g.ux, rule)
                         for j in range(lv.N)])

    def barrier_psi(self, lv: LayerVector, mode: PsiMode = "alpha_formula", rule: str = "gauss") -> float:
        """Ψ(h) = Σ_j ⟨L(u^h), k^h_j⟩² = Σ_j (α^{j−1/2} − α^{j+1/2})²."""
        if mode == "alpha_formula":
            return float(np.sum(np.diff(self.alphas(lv)) ** 2))
        return float(np.sum(self.residual_projections(lv, rule) ** 2))

    # --- D(h) and projection ---

    def _shifted(self, lv: LayerVector, j: int, step: float) -> LayerVector:
        h = lv.h.copy()
        h[j] += step
        return lv.replace(h)

    def uh_partials(self, lv: LayerVector) -> List[np.ndarray]:
        """∂u^h/∂h_j by central differences with step 1e-6·ε."""
        eta = FD_STEP * lv.eps
        out = []
        for j in range(lv.N):
            up = self.build_uh(self._shifted(lv, j, eta)).values
            down = self.build_uh(self._shifted(lv, j, -eta)).values
            out.append((up - down) / (2.0 * eta))
        return out

    def uh_second_partial(self, lv: LayerVector, j: int) -> np.ndarray:
        """∂²u^h/∂h_j² by a second difference."""
        eta = SECOND_FD_STEP * lv.eps
        up = self.build_uh(self._shifted(lv, j, eta)).values
        mid = self.build_uh(lv).values
        down = self.build_uh(self._shifted(lv, j, -eta)).values
        return (up - 2.0 * mid + down) / (eta * eta)

    def curvature_projections(self, lv: LayerVector) -> np.ndarray:
        """
        ε/D∞ · ⟨∂²u^h/∂h_j², k^h_j⟩ per layer.

        These weigh the quadratic term in h' that the layer ODE leaves out;
        they stay below 1e-3 once ℓ^h/ε ≥ 12.
        """
        k = self.tangent_vectors(lv)
        scale = lv.eps / ModelService.d_infinity(self.potential)
        return np.array([scale * self.inner(self.uh_second_partial(lv, j), k[j]) for j in range(lv.N)])

    def matrix_D(self, lv: LayerVector, tangents: Optional[List[np.ndarray]] = None) -> np.ndarray:
        """
        D_ij = ⟨u^h_j, k^h_i⟩.

        Raises:
            DegenerateConfigurationError: if D is not strictly diagonally dominant
        """
        k = tangents if tangents is not None else self.tangent_vectors(lv)
        partials = self.uh_partials(lv)
        D = np.array([[self.inner(partials[j], k[i]) for j in range(lv.N)] for i in range(lv.N)])
        off = np.sum(np.abs(D), axis=1) - np.abs(np.diag(D))
        if np.any(np.diag(D) - off <= 0.0):
            raise DegenerateConfigurationError(f"D(h) is not diagonally dominant at h={lv.h}")
        return D

    def project(self, u: np.ndarray, h_guess: Optional[LayerVector] = None,
                eps: Optional[float] = None, rho: Optional[float] = None) -> ManifoldCoords:
        """
        Damped Newton for ⟨u − u^h, k^h_j⟩ = 0.

        Raises:
            ProjectionError: wrong crossing count, no convergence in 50 iterations,
                or no step reduces the residual after 8 halvings (h is left unchanged)
            LayerDomainError: an iterate leaves Ω_ρ
        """
        u = np.asarray(u, dtype=float)
        if h_guess is None:
            if eps is None or rho is None:
                raise ProjectionError("projection needs h_guess or (eps, rho)")
            crossings = zero_crossings(self.grid.x, u)
            h_guess = LayerVector(crossings, eps, rho)
        n_cross = zero_crossings(self.grid.x, u).size
        if n_cross != h_guess.N:
            raise ProjectionError(f"u has {n_cross} zero crossings, expected {h_guess.N}")

        def residual(lv):
            uh = self.build_uh(lv).values
            k = self.tangent_vectors(lv)
            return np.array([self.inner(u - uh, kj) for kj in k]), uh, k

        lv = h_guess
        R, uh, k = residual(lv)
        iterations = 0
        while np.max(np.abs(R)) > NEWTON_TOL:
            if iterations >= NEWTON_MAX_ITER:
                raise ProjectionError(f"Newton stagnated after {iterations} iterations, |R|={np.max(np.abs(R)):.3e}")
            D = self.matrix_D(lv, k)
            delta = np.linalg.solve(D, R)
            step = 1.0
            for _ in range(NEWTON_HALVINGS + 1):
                trial = lv.replace(lv.h + step * delta)
                R_new, uh_new, k_new = residual(trial)
                if np.max(np.abs(R_new)) < np.max(np.abs(R)):
                    break
                step *= 0.5
            else:
                raise ProjectionError(
                    f"no descent after {NEWTON_HALVINGS} halvings at h={lv.h}, |R|={np.max(np.abs(R)):.3e}"
                )
            lv, R, uh, k = trial, R_new, uh_new, k_new
            iterations += 1

        self.logger.solver(f"projection converged in {iterations} it, |R|={np.max(np.abs(R)):.2e}")
        zeros = np.zeros(self.grid.M)
        return ManifoldCoords(lv, GridField(u - uh, self.grid), GridField(zeros, self.grid), iterations)

    # --- Energy and coercivity ---

    def energy(self, coords: ManifoldCoords, tau: float, uh: Optional[np.ndarray] = None) -> float:
        """E^h[w, v] = ½∫(ε²w_x² + f'(u^h)w²) + ½τ‖v‖² + ετ⟨w, v⟩."""
        lv = coords.h
        eps = lv.eps
        w, v = coords.w.values, coords.v.values
        if uh is None:
            uh = self.build_uh(lv).values
        fp = ModelService.polynomials(self.potential)[2]
        dx = self.grid.dx
        gradient = np.sum(np.diff(w) ** 2) / dx
        quad = self.inner(fp(uh) * w, w, "trapezoid")
        return float(0.5 * (eps * eps * gradient + quad)
                     + 0.5 * tau * self.inner(v, v, "trapezoid")
                     + eps * tau * self.inner(w, v, "trapezoid"))

    def _symmetric_operator(self, lv: LayerVector, curvature=None) -> Tuple[np.ndarray, np.ndarray]:
        """W^{1/2}(−ε²Δ + f'(u^h))W^{−1/2} with the reflecting Laplacian; returns (matrix, W^{1/2})."""
        M, dx, eps = self.grid.M, self.grid.dx, lv.eps
        if curvature is None:
            fp = ModelService.polynomials(self.potential)[2]
            curvature = fp(self.build_uh(lv).values)
        curvature = np.broadcast_to(np.asarray(curvature, dtype=float), (M,))
        lap = (np.diag(np.full(M, -2.0)) + np.diag(np.ones(M - 1), 1) + np.diag(np.ones(M - 1), -1))
        lap[0, 1] = lap[-1, -2] = 2.0
        A = -eps * eps * lap / dx ** 2 + np.diag(curvature)
        sqrt_w = np.sqrt(self.grid.weights)
        S = (sqrt_w[:, None] * A) / sqrt_w[None, :]
        return 0.5 * (S + S.T), sqrt_w

    def coercivity_lambda(self, lv: LayerVector, curvature=None) -> float:
        """
        Smallest eigenvalue of −ε²Δ + f'(u^h) on {w : ⟨w, k^h_j⟩ = 0}.

        A non-positive value is reported on the bus, not raised.
        """
        S, sqrt_w = self._symmetric_operator(lv, curvature)
        K = np.array([sqrt_w * k for k in self.tangent_vectors(lv)])
        Q = null_space(K)
        value = float(eigh(Q.T @ S @ Q, eigvals_only=True, subset_by_index=[0, 0])[0])
        if value <= 0.0:
            self.logger.warning(f"coercivity lost: Λ̂={value:.4g} at h={lv.h}")
            if self.bus:
                self.bus.emit(Events.COERCIVITY_LOST, {"h": lv.h.tolist(), "lambda": value})
        return value

    def linearized_min_eigenvalue(self, lv: LayerVector, curvature=None) -> float:
        """Smallest eigenvalue of the same operator without the orthogonality constraint."""
        S, _ = self._symmetric_operator(lv, curvature)
        return float(eigh(S, eigvals_only=True, subset_by_index=[0, 0])[0])

    def calibrate_gamma(self, lv: LayerVector, tau: float, modes=(2, 3, 4, 5),
                        scales=(0.5, 1.0, 2.0)) -> float:
        """Γ as 4× the median of E^h/Ψ over projected states u^h + s√Ψ cos(kπx)."""
        psi = self.barrier_psi(lv)
        if psi <= 0.0:
            raise DegenerateConfigurationError("Γ calibration needs Ψ(h) > 0 (h is an equilibrium)")
        uh = self.build_uh(lv).values
        ratios = []
        for k in modes:
            for s in scales:
                u = uh + s * np.sqrt(psi) * np.cos(k * np.pi * self.grid.x)
                coords = self.project(u, lv)
                ratios.append(self.energy(coords, tau) / self.barrier_psi(coords.h))
        gamma = 4.0 * float(np.median(ratios))
        self.logger.success(f"Γ calibrado: {gamma:.4g} (mediana de {len(ratios)} estados)")
        return gamma
