"""
Quadrature helpers: adaptive tanh-sinh for the model constants and fixed
composite Gauss-Legendre rules for the vectorised integrals of the profile
and reduced services.
"""
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import tanhsinh

from metastable.services.exceptions import QuadratureError
from metastable.utils.sexy_logger import get_logger

logger = get_logger(__name__)


def integrate(f: Callable, a: float, b: float, rtol: float = 1e-13, atol: float = 0.0,
              maxlevel: int = 12, args: Tuple = ()) -> float:
    """
    Double-exponential quadrature of an elementwise function over [a, b].

    Raises:
        QuadratureError: when the requested tolerance is not reached
    """
    res = tanhsinh(f, a, b, args=args, rtol=rtol, atol=atol, maxlevel=maxlevel)
    if not np.all(res.success):
        achieved = float(np.max(np.abs(res.error)))
        raise QuadratureError(
            f"tanh-sinh did not converge on [{a}, {b}] (status {res.status}, error estimate {achieved:.3e})",
            achieved=achieved,
        )
    logger.solver(f"tanh-sinh [{a:.4g}, {b:.4g}] nfev={int(np.max(res.nfev))}")
    return float(res.integral)


@lru_cache(maxsize=32)
def gauss_rule(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to [0, 1]."""
    z, w = leggauss(order)
    return 0.5 * (z + 1.0), 0.5 * w


@lru_cache(maxsize=64)
def composite_rule(panels: int, order: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule with equal panels on [0, 1]."""
    z, w = gauss_rule(order)
    starts = np.arange(panels) / panels
    nodes = (starts[:, None] + z[None, :] / panels).ravel()
    weights = np.tile(w / panels, panels)
    return nodes, weights


def interval_gauss(a: np.ndarray, b: np.ndarray, order: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss nodes/weights for a batch of intervals [a_i, b_i]; shapes (n, order)."""
    z, w = gauss_rule(order)
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    return a + (b - a) * z, (b - a) * w
