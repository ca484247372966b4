import numpy as np
import pytest

from metastable.domain.models import (
    DampingSpec,
    Grid,
    InitialCondition,
    LayerVector,
    ModelConfig,
    ModelParams,
    PotentialSpec,
    RunConfig,
    SimConfig,
)
from metastable.services.dependency_injection import ServiceContainer
from metastable.services.event_bus import EventBus


@pytest.fixture
def quartic():
    """F(u) = (1 − u²)²/4, odd reaction term, A_± = √2."""
    return PotentialSpec()


@pytest.fixture
def asymmetric():
    """Quartic times (1 + a u): wells at ±1 with different curvatures."""
    return PotentialSpec(family="asymmetric", a=0.2)


@pytest.fixture
def relaxation():
    return DampingSpec(family="relaxation")


@pytest.fixture
def make_container(quartic):
    """Factory of service containers over the quartic model; grid and τ per test."""
    def factory(M: int = 257, tau: float = 0.1, damping: DampingSpec = None, potential: PotentialSpec = None):
        return ServiceContainer(potential or quartic, damping or DampingSpec(), tau, Grid(M))
    return factory


@pytest.fixture
def services(make_container):
    """Default container: quartic F, g ≡ 1, τ = 0.1, 257 nodes."""
    return make_container()


@pytest.fixture
def single_layer():
    """One layer at 0.4 with ε = 0.1: the cutoff is ≡ 1 on the whole window."""
    return LayerVector(np.array([0.4]), 0.1, 0.5)


@pytest.fixture
def bus():
    return EventBus()


@pytest.fixture
def recorded_events(bus):
    """Collects (event, data) pairs emitted on the shared bus."""
    seen = []
    for name in ("annihilation", "ends_exit", "sides_exit", "projection_failure", "blow_up",
                 "domain_exit", "coercivity_lost"):
        bus.subscribe(name, lambda event, data: seen.append((event, data)))
    return seen


@pytest.fixture
def make_run():
    """Factory of small RunConfig objects (ε = 0.1, 129 nodes, no diagnostics by default)."""
    def factory(h0=(0.3,), eps: float = 0.1, rho: float = 0.2, t_end: float = 1.0, grid_points: int = 129,
                diagnostics: bool = False, Gamma: float = None, **sim_kwargs):
        params = ModelParams(eps=eps, tau=0.1, N=len(h0), delta=0.05, rho=rho, Gamma=Gamma)
        sim = SimConfig(params=params, grid_points=grid_points, t_end=t_end,
                        diagnostics=diagnostics, **sim_kwargs)
        return RunConfig(model=ModelConfig(), sim=sim, initial=InitialCondition(h0=list(h0)))
    return factory
