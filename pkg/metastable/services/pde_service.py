"""
Service for the damped hyperbolic Allen-Cahn system

    u_t = v,    τ v_t = ε² u_xx − f(u) − g(u, τ) v,    u_x(0) = u_x(1) = 0,

on a uniform grid: Laplacians, time steppers, the discrete Lyapunov
functional, layer tracking and the channel diagnostics along a run.
"""
import math
from typing import Dict, Optional

import numpy as np
from scipy.linalg import solveh_banded

from metastable.domain.models import (
    GridField,
    InitialCondition,
    LayerVector,
    ManifoldCoords,
    ObservableSeries,
    SimConfig,
    SimState,
)
from metastable.services.event_bus import EventBus, Events
from metastable.services.exceptions import (
    BlowUpError,
    ConfigError,
    DegenerateConfigurationError,
    LayerDomainError,
    ProfileDomainError,
    ProjectionError,
    ResampleError,
)
from metastable.services.manifold_service import ManifoldService, zero_crossings
from metastable.services.model_service import ModelService, ModelSpec
from metastable.utils.sexy_logger import get_logger


def lap_neumann(u: np.ndarray, dx: float, stencil: str = "second_order") -> np.ndarray:
    """Laplacian with reflecting ghost nodes (u_{−1} = u_1, u_M = u_{M−2})."""
    if stencil == "fourth_order":
        p = np.pad(u, 2, mode="reflect")
        return (-p[:-4] + 16.0 * p[1:-3] - 30.0 * p[2:-2] + 16.0 * p[3:-1] - p[4:]) / (12.0 * dx * dx)
    p = np.pad(u, 1, mode="reflect")
    return (p[:-2] - 2.0 * p[1:-1] + p[2:]) / (dx * dx)


def boundary_weights(M: int) -> np.ndarray:
    """1 inside, ½ at the two end nodes."""
    w = np.ones(M)
    w[0] = w[-1] = 0.5
    return w


class PdeService:
    """
    Time integration and diagnostics for one model.

    A simulation owns its arrays; the service itself only holds immutable
    configuration, so independent runs may share it.
    """

    def __init__(self, model: ModelSpec, manifold: ManifoldService, bus: Optional[EventBus] = None):
        self.model = model
        self.manifold = manifold
        self.grid = manifold.grid
        self.bus = bus or EventBus()
        self.logger = get_logger(__name__)
        _, self._f, self._fp, _ = ModelService.polynomials(model.potential)
        self._F = ModelService.polynomials(model.potential)[0]

    def damping(self, u: np.ndarray, tau: float) -> np.ndarray:
        return ModelService.damping(self.model.damping, self.model.potential, u, tau)

    # --- Time step ---

    def stable_dt(self, config: SimConfig) -> float:
        """
        dt = cfl · min(√τ Δx/ε, τ/max g, ½Δx²/ε²) for the explicit scheme.

        The θ scheme treats the Laplacian implicitly and keeps only the
        reaction and damping limits, cfl · min(τ/max g, √τ).

        Raises:
            ConfigError: τ = 0 or cfl_factor outside (0, 1]
        """
        tau, eps = config.params.tau, config.params.eps
        dx = 1.0 / (config.grid_points - 1)
        if not 0.0 < config.cfl_factor <= 1.0:
            raise ConfigError(f"cfl_factor={config.cfl_factor} outside (0, 1]")
        if tau <= 0.0:
            raise ConfigError("tau=0 has no hyperbolic time step; use the reduced parabolic system")
        g_max = ModelService.damping_max(self.model.damping, self.model.potential, tau)
        if config.integrator == "semi_implicit_theta":
            return config.cfl_factor * min(tau / g_max, math.sqrt(tau))
        return config.cfl_factor * min(math.sqrt(tau) * dx / eps, tau / g_max, 0.5 * dx * dx / (eps * eps))

    # --- Steppers ---

    def _rhs(self, u, v, eps, tau, stencil):
        dx = self.grid.dx
        return v, (eps * eps * lap_neumann(u, dx, stencil) - self._f(u) - self.damping(u, tau) * v) / tau

    def _rk4(self, state: SimState, dt: float, config: SimConfig) -> SimState:
        eps, tau, st = config.params.eps, config.params.tau, config.stencil
        u, v = state.u, state.v
        k1u, k1v = self._rhs(u, v, eps, tau, st)
        k2u, k2v = self._rhs(u + 0.5 * dt * k1u, v + 0.5 * dt * k1v, eps, tau, st)
        k3u, k3v = self._rhs(u + 0.5 * dt * k2u, v + 0.5 * dt * k2v, eps, tau, st)
        k4u, k4v = self._rhs(u + dt * k3u, v + dt * k3v, eps, tau, st)
        return SimState(
            state.t + dt,
            u + dt / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u),
            v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
        )

    def _theta(self, state: SimState, dt: float, config: SimConfig) -> SimState:
        """
        θ scheme for the Laplacian with implicit damping.

        Solves [(τ + dt g) − θ²dt²ε²Δ]δ = dt[(τ + dt g)(1 − θ) + θτ]vⁿ + θdt²(ε²Δuⁿ − f(uⁿ))
        for δ = u^{n+1} − uⁿ, symmetrised with the boundary half-weights.
        """
        eps, tau, theta = config.params.eps, config.params.tau, config.theta
        u, v = state.u, state.v
        M, dx = u.size, self.grid.dx
        g = self.damping(u, tau)
        c = tau + dt * g
        W = boundary_weights(M)
        k = theta * theta * dt * dt * eps * eps / (dx * dx)

        ab = np.empty((2, M))
        ab[0, 0] = 0.0
        ab[0, 1:] = -k
        ab[1] = W * c + 2.0 * W * k
        rhs = dt * (c * (1.0 - theta) + theta * tau) * v \
            + theta * dt * dt * (eps * eps * lap_neumann(u, dx) - self._f(u))
        delta = solveh_banded(ab, W * rhs)
        v_new = (delta / dt - (1.0 - theta) * v) / theta
        return SimState(state.t + dt, u + delta, v_new)

    def step(self, state: SimState, dt: float, config: SimConfig) -> SimState:
        """
        One step of the configured integrator.

        Raises:
            BlowUpError: non-finite values after the step
        """
        if config.integrator == "semi_implicit_theta":
            new = self._theta(state, dt, config)
        else:
            new = self._rk4(state, dt, config)
        if not (np.all(np.isfinite(new.u)) and np.all(np.isfinite(new.v))):
            self.bus.emit(Events.BLOW_UP, {"t": new.t, "last_valid_time": state.t})
            raise BlowUpError(f"non-finite state after t={state.t:.6g}", last_valid_time=state.t)
        return new

    # --- Observables ---

    def lyapunov(self, state: SimState, tau: float, eps: float) -> float:
        """Σ W_i Δx (½τv² + F(u)) + Σ ½ε²(D⁺u)² Δx."""
        dx = self.grid.dx
        W = boundary_weights(state.u.size)
        bulk = np.sum(W * dx * (0.5 * tau * state.v ** 2 + self._F(state.u)))
        gradient = 0.5 * eps * eps * np.sum(np.diff(state.u) ** 2) / dx
        return float(bulk + gradient)

    def track_layers(self, u: np.ndarray, N: int) -> Optional[np.ndarray]:
        """Zero crossings of u, or None when there are not exactly N of them."""
        crossings = zero_crossings(self.grid.x, u)
        if crossings.size != N:
            return None
        return crossings

    @staticmethod
    def spacing_min(positions: np.ndarray) -> float:
        """ℓ^h for raw positions, with the reflected end intervals."""
        ell = np.diff(np.concatenate(([-positions[0]], positions, [2.0 - positions[-1]])))
        return float(ell.min())

    def umenouh_norm(self, coords: ManifoldCoords, tau: float) -> float:
        """ε^{1/2}‖w‖_∞ + ‖w‖ + τ^{1/2}‖v‖."""
        w, v = coords.w.values, coords.v.values
        eps = coords.h.eps
        return float(math.sqrt(eps) * np.max(np.abs(w)) + self.manifold.norm(w)
                     + math.sqrt(tau) * self.manifold.norm(v))

    def channel_monitor(self, state: SimState, h_guess: LayerVector, gamma: float, tau: float) -> Dict:
        """
        E^h against ΓΨ at the projection of u.

        Raises:
            ProjectionError: propagated from the projection
        """
        coords = self.manifold.project(state.u, h_guess)
        coords = ManifoldCoords(coords.h, coords.w, GridField(state.v, self.grid), coords.iterations)
        energy = self.manifold.energy(coords, tau)
        psi = self.manifold.barrier_psi(coords.h)
        return {
            "coords": coords,
            "E_h": energy,
            "psi": psi,
            "gamma_psi": gamma * psi,
            "inside": bool(energy <= gamma * psi),
            "ends_margin": coords.h.ell_min - coords.h.eps / coords.h.rho,
        }

    def initial_state(self, initial: InitialCondition, eps: float, rho: float) -> SimState:
        """
        u0 = u^h(h0) + a·cos(kπx), v0 ≡ velocity.

        h0 may already be outside Ω_ρ: u^h does not depend on ρ, and simulate
        records the ends exit at t = 0.
        """
        h0 = np.asarray(initial.h0, dtype=float)
        ell_min = self.spacing_min(h0)
        build_rho = rho if ell_min > eps / rho else 2.0 * eps / max(ell_min, np.finfo(float).tiny)
        lv = LayerVector(h0, eps, build_rho)
        u = self.manifold.build_uh(lv).values + initial.amplitude * np.cos(initial.mode * np.pi * self.grid.x)
        return SimState(0.0, u, np.full(self.grid.M, float(initial.velocity)))

    # --- Runs ---

    def _event(self, series: ObservableSeries, event: Events, t: float, **data):
        record = {"t": t, "event": event.value, **data}
        series.events.append(record)
        self.bus.emit(event, record)
        self.logger.event(event.value, t=t, **data)

    def _gamma(self, config: SimConfig, lv: LayerVector) -> float:
        if config.params.Gamma is not None:
            return config.params.Gamma
        try:
            return self.manifold.calibrate_gamma(lv, config.params.tau)
        except (DegenerateConfigurationError, ProjectionError, LayerDomainError) as e:
            self.logger.warning(f"Γ calibration failed ({e}); using Γ=1")
            return 1.0

    def simulate(self, config: SimConfig, initial: SimState, diagnostics: Optional[bool] = None) -> ObservableSeries:
        """
        Fixed-step run to t_end, recording every observer_stride steps.

        Stops early on an ends exit. Annihilation and projection failures
        suspend the diagnostics but not the run.

        Raises:
            BlowUpError: non-finite state
            ProjectionError: diagnostics requested and the initial projection fails
        """
        params = config.params
        eps, tau, N, rho = params.eps, params.tau, params.N, params.rho
        diagnostics = config.diagnostics if diagnostics is None else diagnostics
        if initial.u.shape != (self.grid.M,):
            raise ConfigError(f"initial state has {initial.u.size} nodes, grid has {self.grid.M}")

        stride = config.observer_stride
        dt_max = self.stable_dt(config)
        n_steps = stride * max(1, math.ceil(config.t_end / (dt_max * stride)))
        dt = config.t_end / n_steps
        self.logger.startup(f"simulate: N={N} eps={eps} tau={tau} M={self.grid.M} dt={dt:.3e} steps={n_steps}")

        series = ObservableSeries(N=N)
        state = initial
        lv: Optional[LayerVector] = None
        gamma = float("nan")
        if diagnostics:
            positions = self.track_layers(state.u, N)
            if positions is None:
                raise ProjectionError(f"initial state does not have {N} layers")
            # fuera de Ω_ρ desde el inicio: el primer registro marca ends_exit y corta
            if self.spacing_min(positions) > eps / rho:
                lv = self.manifold.project(state.u, LayerVector(positions, eps, rho)).h
                gamma = self._gamma(config, lv)
        was_inside: Optional[bool] = None
        n_records = 0

        for n in range(n_steps + 1):
            if n > 0:
                state = self.step(state, dt, config)
                state = SimState(n * dt, state.u, state.v)
            if n % stride:
                continue

            row = {"t": state.t, **{f"h_{j + 1}": float("nan") for j in range(N)}}
            row.update({name: float("nan") for name in ("ell_min", "psi", "energy_Eh", "w_l2", "w_linf",
                                                         "v_l2", "inside_channel", "gamma_psi", "umenouh")})
            row["lyapunov"] = self.lyapunov(state, tau, eps)
            row["v_l2"] = self.manifold.norm(state.v)

            positions = self.track_layers(state.u, N)
            stop = False
            if positions is None:
                if diagnostics or lv is not None:
                    self._event(series, Events.ANNIHILATION, state.t,
                                crossings=int(zero_crossings(self.grid.x, state.u).size))
                diagnostics, lv = False, None
            else:
                row.update({f"h_{j + 1}": float(p) for j, p in enumerate(positions)})
                row["ell_min"] = self.spacing_min(positions)
                if row["ell_min"] <= eps / rho:
                    self._event(series, Events.ENDS_EXIT, state.t, ell_min=row["ell_min"])
                    stop = True

            if diagnostics and not stop:
                try:
                    record = self.channel_monitor(state, lv, gamma, tau)
                except (ProjectionError, LayerDomainError, ProfileDomainError, DegenerateConfigurationError) as e:
                    self._event(series, Events.PROJECTION_FAILURE, state.t, reason=str(e))
                    diagnostics, lv = False, None
                else:
                    coords = record["coords"]
                    lv = coords.h
                    row.update({
                        "psi": record["psi"], "energy_Eh": record["E_h"], "gamma_psi": record["gamma_psi"],
                        "inside_channel": float(record["inside"]),
                        "w_l2": self.manifold.norm(coords.w.values),
                        "w_linf": float(np.max(np.abs(coords.w.values))),
                        "umenouh": self.umenouh_norm(coords, tau),
                    })
                    if was_inside and not record["inside"] and record["ends_margin"] > 0.0:
                        self._event(series, Events.SIDES_EXIT, state.t, ends_margin=record["ends_margin"])
                    was_inside = record["inside"]

            series.append(row)
            self.bus.emit(Events.SAMPLE_RECORDED, row)
            if config.snapshot_stride and n_records % config.snapshot_stride == 0:
                series.snapshots.append(SimState(state.t, state.u.copy(), state.v.copy()))
            n_records += 1
            if n and n % (stride * 50) == 0:
                self.logger.step("avance", t=state.t, t_end=config.t_end, registros=n_records)
            if stop:
                break

        self.logger.shutdown(f"simulate: {len(series)} registros, {len(series.events)} eventos")
        return series

    @staticmethod
    def velocity_estimate(series: ObservableSeries) -> Dict[str, np.ndarray]:
        """
        Central differences of tracked positions: (t, |h'|_∞, ℓ^h) at interior records.

        Raises:
            ResampleError: fewer than 3 records or irregular timestamps
        """
        t = series.column("t")
        if t.size < 3:
            raise ResampleError(f"velocity estimate needs at least 3 records, got {t.size}")
        steps = np.diff(t)
        if np.max(np.abs(steps - np.median(steps))) > 1e-9 * np.median(steps):
            raise ResampleError("observable timestamps are not uniformly spaced")
        h = series.positions()
        rate = (h[2:] - h[:-2]) / (t[2:] - t[:-2])[:, None]
        return {
            "t": t[1:-1],
            "speed": np.max(np.abs(rate), axis=1),
            "ell_min": series.column("ell_min")[1:-1],
        }
