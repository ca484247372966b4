from typing import Optional

from metastable.domain.models import DampingSpec, Grid, ModelConfig, PotentialSpec, SimConfig
from metastable.services.event_bus import EventBus
from metastable.services.manifold_service import ManifoldService, Rule
from metastable.services.model_service import ModelService, ModelSpec
from metastable.services.pde_service import PdeService
from metastable.services.profile_service import ProfileService
from metastable.services.reduced_service import ReducedService


class ServiceContainer:
    """Contenedor de Inyección de Dependencias para los servicios numéricos."""

    def __init__(self, potential: PotentialSpec, damping: Optional[DampingSpec] = None,
                 tau: float = 0.0, grid: Optional[Grid] = None, rule: Rule = "trapezoid"):
        # 1. Modelo validado (lanza ModelError si F no es un pozo doble)
        self._model = ModelService.build(ModelConfig(
            potential=potential, damping=damping or DampingSpec(), tau=tau,
        ))
        self._grid = grid or Grid(257)

        # 2. Servicios core; comparten el bus y la caché de perfiles
        self._event_bus = EventBus()
        self._profile_service = ProfileService(potential)
        self._manifold_service = ManifoldService(self._profile_service, self._grid, self._event_bus, rule)
        self._pde_service = PdeService(self._model, self._manifold_service, self._event_bus)
        self._reduced_service = ReducedService(self._profile_service, self._event_bus)

    @classmethod
    def for_simulation(cls, model: ModelConfig, sim: SimConfig) -> "ServiceContainer":
        """Container for a run: the grid and τ come from the simulation config."""
        return cls(model.potential, model.damping, sim.params.tau, Grid(sim.grid_points))

    # --- Propiedades de Acceso Rápido ---

    @property
    def model(self) -> ModelSpec:
        """Modelo validado (F, g, τ, c_g)."""
        return self._model

    @property
    def grid(self) -> Grid:
        return self._grid

    @property
    def profiles(self) -> ProfileService:
        """Acceso al servicio de perfiles estacionarios (amplitudes, α, K)."""
        return self._profile_service

    @property
    def manifold(self) -> ManifoldService:
        """Acceso al servicio de la variedad base (u^h, k_j, Ψ, proyección)."""
        return self._manifold_service

    @property
    def pde(self) -> PdeService:
        """Acceso al integrador del sistema hiperbólico completo."""
        return self._pde_service

    @property
    def reduced(self) -> ReducedService:
        """Acceso a la dinámica reducida de capas."""
        return self._reduced_service

    @property
    def bus(self) -> EventBus:
        """Acceso al servicio de Event Bus (Comunicación desacoplada)."""
        return self._event_bus
