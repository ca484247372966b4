import numpy as np
import pytest

from metastable.domain.models import LayerVector, ModelParams, ObservableSeries, SimConfig, SimState
from metastable.services.dependency_injection import ServiceContainer
from metastable.services.event_bus import Events
from metastable.services.exceptions import BlowUpError, ConfigError, ProjectionError, ResampleError
from metastable.services.pde_service import PdeService, boundary_weights, lap_neumann


def _container(run):
    return ServiceContainer.for_simulation(run.model, run.sim)


@pytest.mark.parametrize("stencil, tol", [("second_order", 1e-3), ("fourth_order", 1e-6)])
def test_neumann_laplacian_on_cosine(stencil, tol):
    """
    Caso 1: Laplaciano con nodos fantasma reflejados
    * Escenario: u = cos(πx), que cumple u_x(0) = u_x(1) = 0.
    * Validación: Δu ≈ −π² cos(πx) con el orden esperado (M = 129).
    """
    x = np.linspace(0.0, 1.0, 129)
    lap = lap_neumann(np.cos(np.pi * x), x[1] - x[0], stencil)
    error = np.max(np.abs(lap + np.pi ** 2 * np.cos(np.pi * x)))
    assert error < tol, f"{stencil}: max error {error}"


def test_boundary_weights():
    """
    Caso 2: Pesos de frontera
    """
    np.testing.assert_array_equal(boundary_weights(4), [0.5, 1.0, 1.0, 0.5])


def test_stable_dt_rules(make_run):
    """
    Caso 3: Paso de tiempo
    * Validación:
      * Esquema explícito: el límite difusivo ½Δx²/ε² domina para ε = 0.1, M = 129.
      * Esquema θ: sólo límites de reacción y amortiguamiento.
      * τ = 0 lanza ConfigError.
    """
    run = make_run()
    container = _container(run)
    dx = 1.0 / 128
    assert container.pde.stable_dt(run.sim) == pytest.approx(0.9 * 0.5 * dx * dx / 0.01, rel=1e-12)

    theta = SimConfig(params=run.sim.params, grid_points=129, integrator="semi_implicit_theta")
    assert container.pde.stable_dt(theta) == pytest.approx(0.9 * 0.1, rel=1e-12)

    params = ModelParams(eps=0.1, tau=0.0, N=1, delta=0.05, rho=0.2)
    with pytest.raises(ConfigError):
        container.pde.stable_dt(SimConfig(params=params, grid_points=129))


def test_sim_config_rejects_coarse_grid():
    """
    Caso 4: Resolución mínima Δx ≤ ε/8
    """
    params = ModelParams(eps=0.02, tau=0.1, N=1, delta=0.01, rho=0.1)
    with pytest.raises(ValueError):
        SimConfig(params=params, grid_points=257)


def test_lyapunov_decreases(make_run):
    """
    Caso 5: Funcional de Lyapunov discreto
    * Escenario: u^h(0.3) + 0.05 cos(3πx), RK4 hasta t = 1.
    * Validación: no crece entre registros (tolerancia 1e-9).
    """
    run = make_run(t_end=1.0, observer_stride=10)
    run.initial.amplitude = 0.05
    container = _container(run)
    initial = container.pde.initial_state(run.initial, 0.1, 0.2)
    series = container.pde.simulate(run.sim, initial)

    energy = series.column("lyapunov")
    assert energy.size > 10
    increments = np.diff(energy)
    assert np.max(increments) <= 1e-9, f"largest Lyapunov increase {np.max(increments)}"
    assert energy[-1] < energy[0], "the perturbation must be dissipated"


def test_theta_scheme_tracks_rk4(make_run):
    """
    Caso 6: Esquema θ contra RK4
    * Escenario: 100 pasos con dt = 1e-4 desde un estado perturbado.
    * Validación: ‖u_θ − u_RK4‖_∞ < 1e-3.
    """
    run = make_run()
    run.initial.amplitude = 0.05
    run.initial.velocity = 0.1
    container = _container(run)
    pde = container.pde
    initial = pde.initial_state(run.initial, 0.1, 0.2)
    theta_cfg = SimConfig(params=run.sim.params, grid_points=129, integrator="semi_implicit_theta", theta=0.5)

    rk, th = initial, initial
    for _ in range(100):
        rk = pde.step(rk, 1e-4, run.sim)
        th = pde.step(th, 1e-4, theta_cfg)
    diff = np.max(np.abs(rk.u - th.u))
    assert diff < 1e-3, f"theta vs rk4 max difference {diff}"
    assert th.t == pytest.approx(0.01, abs=1e-14)


def test_symmetric_layer_stays_centered(make_run):
    """
    Caso 7: Capa centrada con F par
    * Escenario: N = 1, h0 = 0.5, diagnósticos activos con Γ fijo.
    * Validación:
      * La posición se mantiene en 0.5 (error < 1e-8).
      * La serie incluye Ψ, E^h y la bandera del canal.
    """
    run = make_run(h0=(0.5,), t_end=2.0, diagnostics=True, Gamma=1.0)
    container = _container(run)
    initial = container.pde.initial_state(run.initial, 0.1, 0.2)
    series = container.pde.simulate(run.sim, initial)

    positions = series.positions()[:, 0]
    assert np.max(np.abs(positions - 0.5)) < 1e-8, f"positions drifted: {positions}"
    assert np.all(np.isfinite(series.column("psi")))
    assert np.all(np.isfinite(series.column("energy_Eh")))
    assert set(np.unique(series.column("inside_channel"))) <= {0.0, 1.0}
    assert not [e for e in series.events if e["event"] == Events.PROJECTION_FAILURE.value]


def test_layer_drifts_towards_wall(make_run):
    """
    Caso 8: Movimiento metaestable
    * Escenario: h0 = 0.3, el intervalo reflejado [−0.3, 0.3] es el más corto.
    * Validación: la capa se acerca a la pared x = 0 en forma monótona.
    """
    run = make_run(t_end=40.0, observer_stride=400)
    container = _container(run)
    initial = container.pde.initial_state(run.initial, 0.1, 0.2)
    series = container.pde.simulate(run.sim, initial)

    h = series.positions()[:, 0]
    assert h[-1] < h[0] - 5e-3, f"layer should move towards x=0: {h[0]} -> {h[-1]}"
    assert np.all(np.diff(h[2:]) < 0.0), "drift after the initial transient must be monotone"


def test_ends_exit_stops_run(make_run, bus, recorded_events):
    """
    Caso 9: Salida por los extremos del canal
    * Escenario: ε/ρ apenas menor que ℓ_1 = 0.6.
    * Validación:
      * Se registra ENDS_EXIT y la corrida termina antes de t_end.
      * El evento se publica en el bus.
    """
    run = make_run(rho=0.1 / 0.598, t_end=20.0, observer_stride=20)
    container = _container(run)
    container.pde.bus = bus
    initial = container.pde.initial_state(run.initial, 0.1, 0.1 / 0.598)
    series = container.pde.simulate(run.sim, initial)

    events = [e["event"] for e in series.events]
    assert Events.ENDS_EXIT.value in events, f"events: {events}"
    assert series.rows[-1]["t"] < 20.0
    assert series.rows[-1]["ell_min"] <= 0.598
    assert any(name == Events.ENDS_EXIT.value for name, _ in recorded_events)


def test_wrong_initial_layer_count(make_run):
    """
    Caso 10: Estado inicial con un número de capas distinto de N
    * Validación: con diagnósticos, simulate lanza ProjectionError.
    """
    run = make_run(diagnostics=True, Gamma=1.0)
    container = _container(run)
    state = SimState(0.0, -np.ones(129), np.zeros(129))
    with pytest.raises(ProjectionError):
        container.pde.simulate(run.sim, state)


def test_blow_up_detected(make_run, bus, recorded_events):
    """
    Caso 11: Estado no finito
    * Escenario: u = 1e200, f(u) desborda.
    * Validación: BlowUpError con el último tiempo válido y evento BLOW_UP.
    """
    run = make_run()
    container = _container(run)
    container.pde.bus = bus
    state = SimState(0.5, np.full(129, 1e200), np.zeros(129))
    with np.errstate(all="ignore"):
        with pytest.raises(BlowUpError) as exc:
            container.pde.step(state, 1e-3, run.sim)
    assert exc.value.last_valid_time == 0.5
    assert recorded_events and recorded_events[0][0] == Events.BLOW_UP.value


def test_regular_timestamps_and_velocity(make_run):
    """
    Caso 12: Serie regular y estimación de velocidad
    * Validación:
      * Los tiempos son múltiplos exactos del paso de registro.
      * velocity_estimate devuelve los puntos interiores.
    """
    run = make_run(t_end=1.0, observer_stride=20)
    container = _container(run)
    initial = container.pde.initial_state(run.initial, 0.1, 0.2)
    series = container.pde.simulate(run.sim, initial)

    t = series.column("t")
    steps = np.diff(t)
    assert np.max(np.abs(steps - steps[0])) < 1e-12
    assert t[-1] == pytest.approx(1.0, abs=1e-12)

    velocity = container.pde.velocity_estimate(series)
    assert velocity["t"].size == t.size - 2
    assert np.all(velocity["speed"] >= 0.0)


def test_velocity_estimate_rejects_short_or_irregular_series():
    """
    Caso 13: ResampleError
    """
    short = ObservableSeries(N=1, rows=[{"t": 0.0, "h_1": 0.3}, {"t": 1.0, "h_1": 0.29}])
    with pytest.raises(ResampleError):
        PdeService.velocity_estimate(short)

    irregular = ObservableSeries(N=1, rows=[{"t": t, "h_1": 0.3, "ell_min": 0.6} for t in (0.0, 1.0, 3.0, 4.0)])
    with pytest.raises(ResampleError):
        PdeService.velocity_estimate(irregular)


def test_track_layers_count(services):
    """
    Caso 14: Seguimiento de capas
    * Validación: None cuando el número de cruces no es N.
    """
    x = services.grid.x
    u = np.tanh((x - 0.4) / 0.1)
    crossings = services.pde.track_layers(u, 1)
    assert crossings is not None and abs(crossings[0] - 0.4) < 1e-4, f"crossings: {crossings}"
    assert services.pde.track_layers(u, 2) is None


def test_channel_monitor_on_the_manifold(services):
    """
    Caso 15: Canal con w = 0, v = 0
    * Escenario: u = u^h(0.3), fuera del equilibrio.
    * Validación: E^h = 0 < ΓΨ, el estado está dentro del canal.
    """
    lv = LayerVector(np.array([0.3]), 0.1, 0.2)
    u = services.manifold.build_uh(lv).values
    state = SimState(0.0, u, np.zeros(services.grid.M))
    record = services.pde.channel_monitor(state, lv, 1.0, 0.1)

    assert record["E_h"] == 0.0, f"E^h = {record['E_h']}"
    assert record["psi"] > 0.0
    assert record["inside"] is True
    assert record["ends_margin"] == pytest.approx(0.6 - 0.5, abs=1e-9)


def test_channel_is_pinched_at_equilibrium(services):
    """
    Caso 16: Canal estrangulado en h^e
    * Escenario: h = h^e = (0.25, 0.75) y w = 1e-2 cos(2πx), ortogonal a k^h_j por simetría.
    * Validación: Ψ(h^e) = 0, E^h > 0, el estado queda fuera para cualquier Γ.
    """
    lv = LayerVector(np.array([0.25, 0.75]), 0.1, 0.5)
    x = services.grid.x
    u = services.manifold.build_uh(lv).values + 1e-2 * np.cos(2.0 * np.pi * x)
    state = SimState(0.0, u, np.zeros(services.grid.M))
    record = services.pde.channel_monitor(state, lv, 1e6, 0.1)

    assert record["psi"] == 0.0, f"Psi(h^e) = {record['psi']}"
    assert record["E_h"] > 0.0
    assert record["inside"] is False
    np.testing.assert_array_equal(record["coords"].h.h, lv.h)


def test_well_prepared_run_stays_in_channel(make_run, bus, recorded_events):
    """
    Caso 17: Corrida bien preparada
    * Escenario: u0 = u^h(0.3), v0 = 0, Γ = 1, stencil de cuarto orden hasta t = 4.
    * Validación:
      * E^h ≤ ΓΨ en cada registro y ninguna salida lateral.
      * ε^{1/2}‖w‖_∞ + ‖w‖ + τ^{1/2}‖v‖ ≤ 100·exp(−√2 ℓ^h/ε).
    """
    run = make_run(t_end=4.0, observer_stride=150, diagnostics=True, Gamma=1.0, stencil="fourth_order")
    container = _container(run)
    container.pde.bus = bus
    initial = container.pde.initial_state(run.initial, 0.1, 0.2)
    series = container.pde.simulate(run.sim, initial)

    assert len(series) > 5
    assert not series.events, f"events: {series.events}"
    assert not recorded_events
    energy, bound = series.column("energy_Eh"), series.column("gamma_psi")
    assert np.all(energy <= bound), f"E^h = {energy}\nGamma*Psi = {bound}"
    assert np.all(series.column("inside_channel") == 1.0)

    scale = np.exp(-np.sqrt(2.0) * series.column("ell_min") / 0.1)
    fitted = np.max(series.column("umenouh") / scale)
    assert fitted <= 100.0, f"fitted constant C = {fitted}"


@pytest.mark.parametrize("diagnostics", [False, True])
def test_initial_spacing_below_eps_over_rho(make_run, diagnostics):
    """
    Caso 18: Capas iniciales fuera de Ω_ρ
    * Escenario: ℓ_1 = 0.6 con ε/ρ = 0.65.
    * Validación:
      * initial_state construye u^h de todos modos.
      * simulate registra ENDS_EXIT en t = 0 y se detiene, con y sin diagnósticos.
    """
    run = make_run(rho=0.1 / 0.65, t_end=5.0, diagnostics=diagnostics, Gamma=1.0)
    container = _container(run)
    initial = container.pde.initial_state(run.initial, 0.1, 0.1 / 0.65)
    series = container.pde.simulate(run.sim, initial)

    assert len(series) == 1
    assert series.rows[0]["t"] == 0.0
    assert series.rows[0]["ell_min"] < 0.65
    assert [e["event"] for e in series.events] == [Events.ENDS_EXIT.value]
    assert series.events[0]["t"] == 0.0


def test_grid_refinement_order(make_run):
    """
    Caso 19: Convergencia en la malla
    * Escenario: el mismo dato inicial en 129, 257 y 513 nodos, RK4 con un dt común hasta t = 0.5.
    * Validación: en los nodos comunes, el orden observado log2(e_129/e_257) ≥ 1.8.
    """
    finals = []
    for M in (129, 257, 513):
        run = make_run(grid_points=M)
        run.initial.amplitude = 0.05
        pde = _container(run).pde
        state = pde.initial_state(run.initial, 0.1, 0.2)
        for _ in range(3000):
            state = pde.step(state, 0.5 / 3000, run.sim)
        finals.append(state.u)

    coarse, mid, fine = finals
    e1 = np.max(np.abs(coarse - mid[::2]))
    e2 = np.max(np.abs(mid - fine[::2]))
    order = np.log2(e1 / e2)
    assert order >= 1.8, f"observed order {order} (e1={e1}, e2={e2})"
