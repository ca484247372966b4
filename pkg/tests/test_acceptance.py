"""
Corridas a escala de aceptación (minutos). Se ejecutan con `python run_tests.py --slow`.
"""
import math

import numpy as np
import pytest

from metastable.domain.models import AcceptanceThresholds, ExperimentPlan, LayerVector
from metastable.services.dependency_injection import ServiceContainer
from metastable.services.harness_service import run_plan

pytestmark = pytest.mark.slow


def test_equilibrium_is_stationary(make_run):
    """
    Caso 1: Estacionariedad de u^{h^e}
    * Escenario: N = 2, ε = 0.03, τ = 0.1, M = 1025, estencil de cuarto orden hasta t = 10.
    * Validación:
      * ‖u(t) − u(0)‖_∞ ≤ 1e-6.
      * |h(t) − h^e|_∞ ≤ 1e-6.
    """
    run = make_run(h0=(0.25, 0.75), eps=0.03, rho=0.1, t_end=10.0, grid_points=1025,
                   stencil="fourth_order", observer_stride=2000, snapshot_stride=1)
    container = ServiceContainer.for_simulation(run.model, run.sim)
    initial = container.pde.initial_state(run.initial, 0.03, 0.1)
    series = container.pde.simulate(run.sim, initial)

    drift = max(float(np.max(np.abs(s.u - initial.u))) for s in series.snapshots)
    assert drift <= 1e-6, f"sup-norm drift {drift}"
    positions = series.positions()
    assert np.max(np.abs(positions - np.array([0.25, 0.75]))) <= 1e-6


def test_pde_follows_reduced_dynamics(make_run):
    """
    Caso 2: Fidelidad del modelo reducido
    * Escenario: N = 2, h0 = (0.3, 0.75), ε = 0.03, τ = 0.1, g ≡ 1, reposo inicial.
    * Validación: posiciones de la EDP y de τh'' + h' = P*(h) a menos de ε/2.
    """
    run = make_run(h0=(0.3, 0.75), eps=0.03, rho=0.1, t_end=20.0, grid_points=513, observer_stride=500)
    container = ServiceContainer.for_simulation(run.model, run.sim)
    initial = container.pde.initial_state(run.initial, 0.03, 0.1)
    series = container.pde.simulate(run.sim, initial)

    t = np.minimum(series.column("t"), 20.0)
    lv = LayerVector(np.array([0.3, 0.75]), 0.03, 0.1)
    traj = container.reduced.integrate_hyperbolic(lv, np.zeros(2), 0.1, 1.0, 20.0, t_eval=t, with_energy=False)
    assert traj.t.size == t.size
    gap = float(np.max(np.abs(series.positions() - traj.h)))
    assert gap < 0.5 * 0.03, f"PDE vs reduced positions differ by {gap}"


def test_metastable_displacement(make_run):
    """
    Caso 3: Movimiento exponencialmente lento
    * Escenario: h0 = (0.3, 0.75), ε = 0.03, t ∈ [0, 50].
    * Validación: desplazamiento de las capas < 1e-2, sin eventos.
    """
    run = make_run(h0=(0.3, 0.75), eps=0.03, rho=0.1, t_end=50.0, grid_points=513, observer_stride=1000)
    container = ServiceContainer.for_simulation(run.model, run.sim)
    initial = container.pde.initial_state(run.initial, 0.03, 0.1)
    series = container.pde.simulate(run.sim, initial)

    positions = series.positions()
    assert np.max(np.abs(positions - positions[0])) < 1e-2
    assert not series.events, f"unexpected events {series.events}"


@pytest.mark.asyncio
async def test_epsilon_sweep_slope(make_run, tmp_path):
    """
    Caso 4: Ley de velocidad en ε
    * Escenario: barrido ε ∈ {0.05, 0.04, 0.03, 0.025} con el sistema reducido, h0 = (0.3, 0.75).
    * Validación: pendiente de log|h'| contra 1/ε a menos de 15% de −√2·ℓ^h (ℓ^h = 0.45).
    """
    base = make_run(h0=(0.3, 0.75), eps=0.05, rho=0.2, t_end=10.0, grid_points=257)
    plan = ExperimentPlan(kind="epsilon_sweep", base=base, engine="reduced",
                          sweep_values=[0.05, 0.04, 0.03, 0.025],
                          acceptance=AcceptanceThresholds(slope_rel_dev=0.15))
    summary = await run_plan(plan, output_dir=str(tmp_path), workers=1)

    assert summary["failed_points"] == 0, f"summary: {summary}"
    fit = summary["fit"]
    assert fit["predicted_slope"] == pytest.approx(-math.sqrt(2.0) * 0.45, rel=1e-12)
    assert fit["relative_deviation"] < 0.15, f"fit: {fit}"
    assert not fit["non_exponential"]
    assert summary["passed"]


def test_dissipation_identity_tight(services):
    """
    Caso 5: Identidad de disipación a 1e-6
    * Escenario: N = 1, h0 = 0.3, ε = 0.1, τ ∈ {0.2, 0.1, 0.05, 0.025}, inicio compatible, 2001 muestras.
    """
    reduced = services.reduced
    lv = LayerVector(np.array([0.3]), 0.1, 0.5)
    eta0 = reduced.pstar(lv)
    t_eval = np.linspace(0.0, 5.0, 2001)
    for tau in (0.2, 0.1, 0.05, 0.025):
        traj = reduced.integrate_hyperbolic(lv, eta0, tau, 1.0, 5.0, t_eval=t_eval)
        residual = reduced.dissipation_residual(traj, 1.0)
        assert residual < 1e-6, f"tau={tau}: dissipation residual {residual}"


def test_relaxation_comparison_four_taus(services):
    """
    Caso 6: Límite singular con cuatro valores de τ
    * Validación: sup|h − h_p| estrictamente decreciente en τ.
    """
    reduced = services.reduced
    lv = LayerVector(np.array([0.3]), 0.1, 0.5)
    series = reduced.compare_relaxation(lv, reduced.pstar(lv), [0.2, 0.1, 0.05, 0.025], 10.0,
                                        lambda tau: 1.0, t1=1.0)
    sups = [float(run.h_err.max()) for run in series.runs]
    assert all(a > b for a, b in zip(sups, sups[1:])), f"sup errors {sups}"
