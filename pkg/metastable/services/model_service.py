"""
Service for the potential F, the reaction f = F', the damping g and the
scalar constants derived from them by quadrature (D∞, ḡ, γ_τ, c_g).
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Tuple, Union

import numpy as np
from numpy.polynomial import Polynomial

from metastable.domain.models import (
    DampingSpec,
    ModelConfig,
    PotentialSpec,
    ValidationCheck,
    ValidationReport,
)
from metastable.services.exceptions import ModelError, QuadratureError
from metastable.utils.quadrature import integrate
from metastable.utils.sexy_logger import get_logger

logger = get_logger(__name__)

DampingLike = Union[DampingSpec, Callable[[np.ndarray, float], np.ndarray]]

WELL_TOL = 1e-12
DAMPING_SAMPLES = 10_000
DOUBLE_WELL = Polynomial([1.0, 0.0, -2.0, 0.0, 1.0])  # (1 − u²)²


@dataclass(frozen=True)
class ModelSpec:
    """A validated potential/damping pair at a fixed τ, with its measured floor c_g."""
    potential: PotentialSpec
    damping: DampingSpec
    tau: float
    c_g: float


@lru_cache(maxsize=64)
def _derivatives(key: Tuple) -> Tuple[Polynomial, Polynomial, Polynomial, Polynomial]:
    spec = PotentialSpec(family=key[0], a=key[1], coeffs=list(key[2]) or None)
    F = spec.polynomial()
    return F, F.deriv(1), F.deriv(2), F.deriv(3)


@lru_cache(maxsize=64)
def _well_factor(key: Tuple) -> Optional[Polynomial]:
    """q with F = (1 − u²)² q, or None when F is not divisible (not a double well)."""
    F = _derivatives(key)[0]
    q, rem = divmod(F, DOUBLE_WELL)
    scale = max(1.0, float(np.max(np.abs(F.coef))))
    if np.max(np.abs(rem.coef)) > 1e-12 * scale:
        return None
    return q


class ModelService:
    """
    Evaluation of the model functions and of the quadrature constants.

    All methods are static: the service holds no state and its results are
    immutable, so it can be shared between concurrent tasks.
    """

    @staticmethod
    def polynomials(spec: PotentialSpec) -> Tuple[Polynomial, Polynomial, Polynomial, Polynomial]:
        """(F, f, f', f'') as polynomials in u."""
        return _derivatives(spec.cache_key())

    @staticmethod
    def eval_model(spec: PotentialSpec, u):
        """
        Evaluate F, f, f' and f'' at u (scalar or array).

        Returns:
            Tuple (F, f, f', f'')
        """
        F, f, fp, fpp = ModelService.polynomials(spec)
        u = np.asarray(u, dtype=float)
        return F(u), f(u), fp(u), fpp(u)

    @staticmethod
    def validate_double_well(spec: PotentialSpec) -> ValidationReport:
        """Check the double-well conditions; a failing report is returned, never raised."""
        F, f, fp, _ = ModelService.polynomials(spec)
        checks = [
            ValidationCheck("F(-1)=0", abs(F(-1.0)) <= WELL_TOL, float(abs(F(-1.0)))),
            ValidationCheck("F(1)=0", abs(F(1.0)) <= WELL_TOL, float(abs(F(1.0)))),
            ValidationCheck("F'(-1)=0", abs(f(-1.0)) <= WELL_TOL, float(abs(f(-1.0)))),
            ValidationCheck("F'(1)=0", abs(f(1.0)) <= WELL_TOL, float(abs(f(1.0)))),
            ValidationCheck("F''(-1)>0", fp(-1.0) > 0.0, float(fp(-1.0))),
            ValidationCheck("F''(1)>0", fp(1.0) > 0.0, float(fp(1.0))),
        ]
        interior = np.linspace(-1.0, 1.0, DAMPING_SAMPLES + 2)[1:-1]
        q = _well_factor(spec.cache_key())
        # con la factorización se evita la cancelación cerca de ±1
        values = q(interior) if q is not None else F(interior)
        min_val = float(values.min())
        checks.append(ValidationCheck("F>0 on (-1,1)", min_val > 0.0, min_val))
        return ValidationReport(tuple(checks))

    @staticmethod
    def well_curvatures(spec: PotentialSpec) -> Tuple[float, float]:
        """A_+ = √F''(1), A_− = √F''(−1)."""
        _, _, fp, _ = ModelService.polynomials(spec)
        return float(np.sqrt(fp(1.0))), float(np.sqrt(fp(-1.0)))

    @staticmethod
    def damping(damping: DampingSpec, potential: PotentialSpec, u, tau: float) -> np.ndarray:
        """g(u, τ) for the given damping family."""
        u = np.asarray(u, dtype=float)
        if damping.family == "one":
            return np.ones_like(u)
        if damping.family == "relaxation":
            _, _, fp, _ = ModelService.polynomials(potential)
            return 1.0 + tau * fp(u)
        return np.interp(u, damping.u, damping.g)

    @staticmethod
    def damping_floor(damping: DampingSpec, potential: PotentialSpec, tau: float) -> float:
        """Measured c_g: min of g over 1e4 samples of [−1.5, 1.5]."""
        u = np.linspace(-1.5, 1.5, DAMPING_SAMPLES)
        return float(ModelService.damping(damping, potential, u, tau).min())

    @staticmethod
    def damping_max(damping: DampingSpec, potential: PotentialSpec, tau: float) -> float:
        u = np.linspace(-1.5, 1.5, DAMPING_SAMPLES)
        return float(ModelService.damping(damping, potential, u, tau).max())

    @staticmethod
    def build(config: ModelConfig) -> ModelSpec:
        """
        Validate a model configuration and measure its damping floor.

        Raises:
            ModelError: if F is not a double well or c_g ≤ 0
        """
        report = ModelService.validate_double_well(config.potential)
        if not report.passed:
            raise ModelError(f"potential is not a double well: failed {report.failures()}")
        c_g = ModelService.damping_floor(config.damping, config.potential, config.tau)
        if c_g <= 0.0:
            raise ModelError(f"damping floor c_g={c_g:.6g} is not positive at tau={config.tau}")
        logger.success(f"Modelo {config.potential.family}/{config.damping.family} válido, c_g={c_g:.6g}")
        return ModelSpec(config.potential, config.damping, config.tau, c_g)

    # --- Quadrature constants ---

    @staticmethod
    def sqrt_F(spec: PotentialSpec, s):
        """√F(s) on [−1, 1], evaluated as |1 − s²|√q(s) when F factorises."""
        s = np.asarray(s, dtype=float)
        q = _well_factor(spec.cache_key())
        if q is not None:
            return np.abs(1.0 - s * s) * np.sqrt(np.maximum(q(s), 0.0))
        F = ModelService.polynomials(spec)[0]
        return np.sqrt(np.maximum(F(s), 0.0))

    @staticmethod
    def d_infinity(spec: PotentialSpec, rtol: float = 1e-13) -> float:
        """D∞ = ∫_{−1}^{1} √(2F(s)) ds."""
        return integrate(lambda s: np.sqrt(2.0) * ModelService.sqrt_F(spec, s), -1.0, 1.0, rtol=rtol)

    @staticmethod
    def _g_callable(g: DampingLike, spec: PotentialSpec) -> Callable:
        if isinstance(g, DampingSpec):
            return lambda s, tau: ModelService.damping(g, spec, s, tau)
        return g

    @staticmethod
    def weighted_average(spec: PotentialSpec, g: DampingLike, tau: float, rtol: float = 1e-13) -> float:
        """
        ḡ = ∫ √F g(s, τ) ds / ∫ √F ds.

        Args:
            spec: Potential
            g: DampingSpec or any elementwise callable g(u, τ)
            tau: Relaxation time
        """
        gfun = ModelService._g_callable(g, spec)
        norm = integrate(lambda s: ModelService.sqrt_F(spec, s), -1.0, 1.0, rtol=rtol)
        num = integrate(
            lambda s: ModelService.sqrt_F(spec, s) * gfun(s, tau), -1.0, 1.0,
            rtol=rtol, atol=1e-15 * norm,
        )
        return num / norm

    @staticmethod
    def gamma_tau(spec: PotentialSpec, g: DampingLike, tau: float, rtol: float = 1e-13) -> float:
        """
        γ_τ = ∫√(2F) g / ∫√(2F), computed by the direct ratio and through ḡ.

        For relaxation damping the integrated-by-parts form
        1 − (τ/D∞) ∫ (F')²/√(2F) is checked as well.

        Raises:
            QuadratureError: if the routes disagree by more than 1e-10
        """
        gfun = ModelService._g_callable(g, spec)
        d_inf = ModelService.d_infinity(spec, rtol=rtol)
        direct = integrate(
            lambda s: np.sqrt(2.0) * ModelService.sqrt_F(spec, s) * gfun(s, tau), -1.0, 1.0,
            rtol=rtol, atol=1e-15 * d_inf,
        ) / d_inf
        norm_sqrt_f = integrate(lambda s: ModelService.sqrt_F(spec, s), -1.0, 1.0, rtol=rtol)
        via_average = ModelService.weighted_average(spec, g, tau, rtol=rtol) * norm_sqrt_f * np.sqrt(2.0) / d_inf

        if abs(direct - via_average) > 1e-10 * max(1.0, abs(direct)):
            raise QuadratureError(
                f"gamma_tau routes disagree: {direct!r} vs {via_average!r}",
                achieved=abs(direct - via_average),
            )

        if isinstance(g, DampingSpec) and g.family == "relaxation" and tau > 0.0:
            by_parts = 1.0 - tau * ModelService.relaxation_integral(spec, rtol=rtol) / d_inf
            if abs(by_parts - direct) > 1e-10:
                raise QuadratureError(
                    f"gamma_tau by-parts check failed: {by_parts!r} vs {direct!r}",
                    achieved=abs(by_parts - direct),
                )
        return direct

    @staticmethod
    def relaxation_integral(spec: PotentialSpec, rtol: float = 1e-13) -> float:
        """∫_{−1}^{1} (F')²/√(2F) ds."""
        q = _well_factor(spec.cache_key())
        if q is None:
            raise ModelError("relaxation integral needs a double-well potential")
        dq = q.deriv()

        def integrand(s):
            # F' = (1 − s²)[(1 − s²) q' − 4 s q]
            one_minus = 1.0 - s * s
            inner = one_minus * dq(s) - 4.0 * s * q(s)
            return np.abs(one_minus) * inner * inner / np.sqrt(2.0 * q(s))

        return integrate(integrand, -1.0, 1.0, rtol=rtol)
