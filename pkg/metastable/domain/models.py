"""
Domain types shared by every service.

JSON-facing specifications are pydantic models; array-carrying results are
frozen dataclasses over numpy arrays.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from metastable.services.exceptions import ConfigError, LayerDomainError


# --- Specifications (JSON) ---

class PotentialSpec(BaseModel):
    """Double-well potential F with wells at ±1."""
    model_config = ConfigDict(frozen=True)

    family: Literal["quartic", "asymmetric", "custom"] = "quartic"
    a: float = 0.0
    coeffs: Optional[List[float]] = None  # ascending powers of u, custom family only

    @model_validator(mode="after")
    def check_family(self):
        if self.family == "asymmetric" and not abs(self.a) < 1.0:
            raise ValueError("asymmetric family requires |a| < 1")
        if self.family == "custom" and not self.coeffs:
            raise ValueError("custom family requires polynomial coeffs")
        return self

    def polynomial(self) -> Polynomial:
        """F as a numpy Polynomial in u."""
        quartic = Polynomial([0.25, 0.0, -0.5, 0.0, 0.25])
        if self.family == "quartic":
            return quartic
        if self.family == "asymmetric":
            return quartic * Polynomial([1.0, self.a])
        return Polynomial(list(self.coeffs))

    def cache_key(self) -> Tuple:
        return (self.family, float(self.a), tuple(self.coeffs or ()))


class DampingSpec(BaseModel):
    """Damping g(u, τ): constant one, relaxation 1 + τ f'(u), or a tabulated u → g."""
    model_config = ConfigDict(frozen=True)

    family: Literal["one", "relaxation", "table"] = "one"
    u: Optional[List[float]] = None
    g: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_table(self):
        if self.family == "table":
            if not self.u or not self.g or len(self.u) != len(self.g) or len(self.u) < 2:
                raise ValueError("table damping needs matching u and g lists with at least two entries")
            if np.any(np.diff(self.u) <= 0):
                raise ValueError("table damping abscissae must be strictly increasing")
        return self


class ModelConfig(BaseModel):
    potential: PotentialSpec = Field(default_factory=PotentialSpec)
    damping: DampingSpec = Field(default_factory=DampingSpec)
    tau: float = Field(default=0.0, ge=0.0)


class ModelParams(BaseModel):
    """ε, τ, N and the spacing parameters of the admissible set Ω_ρ."""
    model_config = ConfigDict(frozen=True)

    eps: float = Field(gt=0.0)
    tau: float = Field(default=0.1, ge=0.0)
    N: int = Field(default=1, ge=1)
    delta: float = Field(gt=0.0)
    rho: float = Field(gt=0.0)
    Gamma: Optional[float] = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def triangle(self):
        if not self.delta < 1.0 / self.N:
            raise ValueError(f"delta={self.delta} must lie in (0, 1/N)")
        ratio = self.eps / self.rho
        if not (self.delta < ratio < 1.0 / self.N):
            raise ValueError(f"need delta < eps/rho < 1/N, got eps/rho={ratio:.6g}")
        return self

    @property
    def min_spacing(self) -> float:
        return self.eps / self.rho


class SimConfig(BaseModel):
    params: ModelParams
    grid_points: int = Field(default=257, ge=5)
    t_end: float = Field(default=10.0, gt=0.0)
    cfl_factor: float = Field(default=0.9, gt=0.0, le=1.0)
    observer_stride: int = Field(default=100, ge=1)
    snapshot_stride: int = Field(default=0, ge=0)
    integrator: Literal["rk4_explicit", "semi_implicit_theta"] = "rk4_explicit"
    theta: float = Field(default=0.5, gt=0.0, le=1.0)
    stencil: Literal["second_order", "fourth_order"] = "second_order"
    diagnostics: bool = True

    @model_validator(mode="after")
    def check_resolution(self):
        dx = 1.0 / (self.grid_points - 1)
        if dx > self.params.eps / 8.0:
            raise ValueError(f"grid too coarse: dx={dx:.4g} > eps/8={self.params.eps / 8.0:.4g}")
        if self.integrator == "semi_implicit_theta" and self.stencil != "second_order":
            raise ValueError("semi_implicit_theta requires the second_order stencil")
        return self


class InitialCondition(BaseModel):
    """u0 = u^h(h0) + amplitude·cos(mode·πx), v0 ≡ velocity."""
    h0: List[float]
    amplitude: float = 0.0
    mode: int = Field(default=3, ge=1)
    velocity: float = 0.0


class RunConfig(BaseModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    sim: SimConfig
    initial: InitialCondition
    seed: int = 0

    @model_validator(mode="after")
    def check_layers(self):
        if len(self.initial.h0) != self.sim.params.N:
            raise ValueError(f"initial.h0 has {len(self.initial.h0)} entries, N={self.sim.params.N}")
        return self


class AcceptanceThresholds(BaseModel):
    slope_rel_dev: Optional[float] = None
    max_displacement: Optional[float] = None
    max_sup_error_ratio: Optional[float] = None
    max_equilibrium_residual: Optional[float] = None


class ExperimentPlan(BaseModel):
    kind: Literal["single_sim", "epsilon_sweep", "tau_compare", "equilibrium_study"]
    base: RunConfig
    sweep_values: List[float] = Field(default_factory=list)
    engine: Literal["pde", "reduced"] = "pde"
    output_dir: str = "runs/plan"
    seed: int = 0
    t1: float = Field(default=1.0, gt=0.0)
    acceptance: AcceptanceThresholds = Field(default_factory=AcceptanceThresholds)

    @field_validator("sweep_values")
    @classmethod
    def monotone(cls, v):
        if len(v) > 1:
            steps = np.diff(v)
            if not (np.all(steps > 0) or np.all(steps < 0)):
                raise ValueError("sweep values must be strictly monotone")
        return v

    @model_validator(mode="after")
    def sweep_present(self):
        if self.kind in ("epsilon_sweep", "tau_compare") and not self.sweep_values:
            raise ValueError(f"{self.kind} needs a non-empty sweep_values list")
        return self


# --- Model results ---

@dataclass(frozen=True)
class ValidationCheck:
    name: str
    passed: bool
    residual: float

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.passed))
        object.__setattr__(self, "residual", float(self.residual))


@dataclass(frozen=True)
class ValidationReport:
    checks: Tuple[ValidationCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed]

    def as_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "checks": [{"name": c.name, "passed": c.passed, "residual": c.residual} for c in self.checks],
        }


# --- Profiles ---

@dataclass(frozen=True, eq=False)
class ProfileSolution:
    """
    Steady profile on an interval of length ℓ = ε/r.

    The profile is parametrised by t, with the distance to the nearest well
    x(t) = β + 2β sinh²t, and ξ(t) the distance to the center in units of ε.
    """
    branch: Literal["plus", "minus"]
    r: float
    beta: float
    alpha: float
    xi_half: float                    # ξ at the zero crossing, ≈ 1/(2r)
    xi_max: float                     # largest ξ covered by the extended table
    t_nodes: np.ndarray = field(repr=False)
    xi_nodes: np.ndarray = field(repr=False)

    @property
    def M(self) -> float:
        return 1.0 - self.beta

    @property
    def sign(self) -> float:
        return 1.0 if self.branch == "plus" else -1.0

    @property
    def xtable(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.xi_nodes, self.t_nodes


@dataclass(frozen=True)
class AsymptoticConstants:
    A_plus: float
    A_minus: float
    K_plus: float
    K_minus: float
    calibration_r: Tuple[float, ...]
    residual: float

    def A(self, branch: str) -> float:
        return self.A_plus if branch == "plus" else self.A_minus

    def K(self, branch: str) -> float:
        return self.K_plus if branch == "plus" else self.K_minus


# --- Manifold ---

@dataclass(frozen=True)
class Grid:
    M: int

    def __post_init__(self):
        if self.M < 5:
            raise ConfigError(f"grid needs at least 5 nodes, got {self.M}")

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.M)

    @property
    def dx(self) -> float:
        return 1.0 / (self.M - 1)

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid weights including Δx."""
        w = np.full(self.M, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    def check_resolution(self, eps: float):
        if self.dx > eps / 8.0 * (1.0 + 1e-12):
            raise ConfigError(f"grid resolution dx={self.dx:.4g} exceeds eps/8={eps / 8.0:.4g}")


@dataclass(frozen=True, eq=False)
class GridField:
    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        if self.values.shape != (self.grid.M,):
            raise ConfigError(f"field has shape {self.values.shape}, grid has {self.grid.M} nodes")


@dataclass(frozen=True, eq=False)
class LayerVector:
    """Ordered layer positions in (0,1) with the reflected end points h_0 = −h_1, h_{N+1} = 2 − h_N."""
    h: np.ndarray
    eps: float
    rho: float

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).copy()
        h.setflags(write=False)
        object.__setattr__(self, "h", h)
        if h.ndim != 1 or h.size == 0:
            raise LayerDomainError("layer vector must be a non-empty 1-D array")
        if not (h[0] > 0.0 and h[-1] < 1.0 and np.all(np.diff(h) > 0)):
            raise LayerDomainError(f"layers must satisfy 0 < h_1 < ... < h_N < 1, got {h}")
        if self.ell_min <= self.eps / self.rho:
            raise LayerDomainError(
                f"spacing {self.ell_min:.6g} not above eps/rho={self.eps / self.rho:.6g}"
            )

    @property
    def N(self) -> int:
        return self.h.size

    @property
    def extended(self) -> np.ndarray:
        """h_0, h_1, ..., h_N, h_{N+1}."""
        return np.concatenate(([-self.h[0]], self.h, [2.0 - self.h[-1]]))

    @property
    def spacings(self) -> np.ndarray:
        """ℓ_1 .. ℓ_{N+1}."""
        ell = np.diff(self.extended)
        ell[0] = 2.0 * self.h[0]
        ell[-1] = 2.0 * (1.0 - self.h[-1])
        return ell

    @property
    def half_points(self) -> np.ndarray:
        """h_{1/2} = 0, ..., h_{N+1/2} = 1."""
        ext = self.extended
        mids = 0.5 * (ext[:-1] + ext[1:])
        mids[0] = 0.0
        mids[-1] = 1.0
        return mids

    @property
    def ell_min(self) -> float:
        return float(self.spacings.min())

    def replace(self, h: np.ndarray) -> "LayerVector":
        return LayerVector(np.asarray(h, dtype=float), self.eps, self.rho)


@dataclass(frozen=True, eq=False)
class ManifoldCoords:
    h: LayerVector
    w: GridField
    v: GridField
    iterations: int = 0


# --- PDE ---

@dataclass(frozen=True, eq=False)
class SimState:
    t: float
    u: np.ndarray
    v: np.ndarray


@dataclass
class ObservableSeries:
    """Time-stamped observables; columns follow the series.csv layout."""
    N: int
    rows: List[Dict[str, float]] = field(default_factory=list)
    events: List[Dict] = field(default_factory=list)
    snapshots: List[SimState] = field(default_factory=list)

    @property
    def columns(self) -> List[str]:
        return (["t"] + [f"h_{j + 1}" for j in range(self.N)]
                + ["ell_min", "psi", "energy_Eh", "lyapunov", "w_l2", "w_linf", "v_l2",
                   "inside_channel", "gamma_psi", "umenouh"])

    def append(self, row: Dict[str, float]):
        if self.rows and not row["t"] > self.rows[-1]["t"]:
            raise ValueError("observable timestamps must be strictly increasing")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)

    def positions(self) -> np.ndarray:
        return np.array([[r[f"h_{j + 1}"] for j in range(self.N)] for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)


# --- Reduced dynamics ---

@dataclass(frozen=True, eq=False)
class SpectrumReport:
    omega: np.ndarray
    B: np.ndarray
    mu_sq: np.ndarray
    lambda_plus: np.ndarray
    lambda_minus: np.ndarray
    dense_max_error: float

    def as_dict(self) -> Dict:
        return {
            "omega": self.omega.tolist(),
            "B": self.B.tolist(),
            "mu_sq": self.mu_sq.tolist(),
            "lambda_plus": self.lambda_plus.tolist(),
            "lambda_minus": self.lambda_minus.tolist(),
            "dense_max_error": self.dense_max_error,
        }


@dataclass(frozen=True, eq=False)
class ReducedTrajectory:
    t: np.ndarray
    h: np.ndarray                    # shape (len(t), N)
    eta: Optional[np.ndarray] = None
    energy: Optional[np.ndarray] = None
    event: Optional[str] = None


@dataclass(frozen=True, eq=False)
class ComparisonRun:
    tau: float
    gamma_tau: float
    t: np.ndarray
    h_err: np.ndarray                # |h − h_p|_∞
    eta_err: np.ndarray              # |η − η_p|_∞
    E: np.ndarray                    # γ_τ|h − h_p| + τ|η − η_p| (euclidean)
    sup_E: float
    eta_err_integral: float
    eta_err_after_t1: float
    eta_err_before_t1: float
    bound_reference: float


@dataclass(frozen=True)
class ComparisonSeries:
    t1: float
    runs: Tuple[ComparisonRun, ...]

    @property
    def taus(self) -> List[float]:
        return [r.tau for r in self.runs]


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    predicted_slope: Optional[float]
    relative_deviation: Optional[float]
    n_points: int
    non_exponential: bool

    def as_dict(self) -> Dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "predicted_slope": self.predicted_slope,
            "relative_deviation": self.relative_deviation,
            "n_points": self.n_points,
            "non_exponential": self.non_exponential,
        }
