"""
Service for experiment plans: single runs, ε-sweeps of the slow-motion
law, τ-comparisons with the parabolic limit and equilibrium studies.

Each sweep point is executed in isolation by `run_point` (picklable, so it
can go to a process pool); `run_plan` fans the points out, aggregates the
results in order and evaluates the declared acceptance thresholds.
"""
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import linregress

from metastable.config import Settings, config_hash as hash_config
from metastable.domain.models import (
    ComparisonSeries,
    ExperimentPlan,
    FitResult,
    Grid,
    GridField,
    LayerVector,
    ObservableSeries,
    ReducedTrajectory,
    RunConfig,
    SpectrumReport,
)
from metastable.services.dependency_injection import ServiceContainer
from metastable.services.event_bus import Events
from metastable.services.exceptions import ConfigError, FitError, ResampleError, ServiceError
from metastable.services.model_service import ModelService
from metastable.services.pde_service import PdeService
from metastable.utils.persistence import (
    format_value,
    read_csv,
    write_csv,
    write_json,
    write_snapshot_json,
    write_text,
)
from metastable.utils.sexy_logger import get_logger

logger = get_logger(__name__)

PLOT_KINDS = ("layers", "channel", "spectrum")


# --- Fits ---

def fit_exponential(xs: Sequence[float], ys: Sequence[float],
                    predicted_slope: Optional[float] = None) -> FitResult:
    """
    Least squares of ys (log rates) against xs (1/ε).

    Raises:
        FitError: fewer than 3 finite points or constant xs
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = np.isfinite(xs) & np.isfinite(ys)
    if not np.all(keep):
        logger.warning(f"fit: {int(np.sum(~keep))} puntos no finitos descartados")
    xs, ys = xs[keep], ys[keep]
    if xs.size < 3:
        raise FitError(f"exponential fit needs at least 3 points, got {xs.size}")
    try:
        res = linregress(xs, ys)
    except ValueError as e:
        raise FitError(f"regression failed: {e}")

    slope = float(res.slope)
    r_squared = float(res.rvalue ** 2)
    deviation = None
    if predicted_slope is not None and predicted_slope != 0.0:
        deviation = abs(slope / predicted_slope - 1.0)
    scale = max(1.0, float(np.max(np.abs(ys))))
    return FitResult(
        slope=slope,
        intercept=float(res.intercept),
        r_squared=r_squared,
        predicted_slope=predicted_slope,
        relative_deviation=deviation,
        n_points=int(xs.size),
        non_exponential=bool(slope >= -1e-12 * scale or r_squared < 0.9),
    )


def fit_rates(xs: Sequence[float], rates: Sequence[float],
              predicted_slope: Optional[float] = None) -> FitResult:
    """fit_exponential on log(rate); non-positive rates are dropped with a warning."""
    xs = np.asarray(xs, dtype=float)
    rates = np.asarray(rates, dtype=float)
    positive = rates > 0.0
    if not np.all(positive):
        logger.warning(f"fit: {int(np.sum(~positive))} tasas no positivas descartadas")
    return fit_exponential(xs[positive], np.log(rates[positive]), predicted_slope)


# --- Plot data ---

def _columns_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    lines = ["# " + " ".join(header)]
    lines.extend(" ".join(format_value(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def emit_plot_data(data, kind: str) -> str:
    """
    Whitespace-separated columns with a '#' header line.

    layers:   t h_1 ... h_N          (ObservableSeries or ReducedTrajectory)
    channel:  t E_h Gamma_Psi inside (ObservableSeries)
    spectrum: i mu_sq lambda_plus lambda_minus (SpectrumReport)
    """
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}, expected one of {PLOT_KINDS}")
    if kind == "spectrum":
        if not isinstance(data, SpectrumReport) or data.mu_sq.size == 0:
            raise ConfigError("spectrum plot needs a non-empty SpectrumReport")
        rows = [(i + 1, m, lp, lm) for i, (m, lp, lm)
                in enumerate(zip(data.mu_sq, data.lambda_plus, data.lambda_minus))]
        return _columns_text(["i", "mu_sq", "lambda_plus", "lambda_minus"], rows)

    if isinstance(data, ReducedTrajectory):
        if kind != "layers" or data.t.size == 0:
            raise ConfigError("reduced trajectories only provide non-empty layer plots")
        N = data.h.shape[1]
        return _columns_text(["t"] + [f"h_{j + 1}" for j in range(N)],
                             [(t, *h) for t, h in zip(data.t, data.h)])

    if not isinstance(data, ObservableSeries) or len(data) == 0:
        raise ConfigError(f"{kind} plot needs a non-empty observable series")
    t = data.column("t")
    if kind == "layers":
        return _columns_text(["t"] + [f"h_{j + 1}" for j in range(data.N)],
                             [(ti, *h) for ti, h in zip(t, data.positions())])
    inside = data.column("inside_channel")
    return _columns_text(["t", "E_h", "Gamma_Psi", "inside"],
                         list(zip(t, data.column("energy_Eh"), data.column("gamma_psi"), inside)))


# --- Single runs ---

def series_rows(series: ObservableSeries):
    return ([row.get(c, float("nan")) for c in series.columns] for row in series.rows)


def max_displacement(positions: np.ndarray) -> float:
    finite = np.all(np.isfinite(positions), axis=1)
    if not np.any(finite):
        return float("nan")
    p = positions[finite]
    return float(np.max(np.abs(p - p[0])))


def write_series(series: ObservableSeries, grid: Grid, digest: str, path,
                 snapshot_dir: Optional[Path] = None) -> Path:
    """series.csv plus one snapshot JSON per recorded snapshot."""
    path = write_csv(path, series.columns, series_rows(series), digest)
    if snapshot_dir is not None:
        for i, snap in enumerate(series.snapshots):
            write_snapshot_json(Path(snapshot_dir) / f"snapshot_{i:04d}.json",
                                GridField(snap.u, grid), snap.t, snap.v)
    return path


def simulation_record(series: ObservableSeries) -> Dict:
    record = {
        "records": len(series),
        "events": series.events,
        "displacement": max_displacement(series.positions()),
        "sides_exits": sum(1 for e in series.events if e["event"] == Events.SIDES_EXIT.value),
    }
    try:
        vel = PdeService.velocity_estimate(series)
        speed = vel["speed"][np.isfinite(vel["speed"])]
        record["rate"] = float(np.median(speed)) if speed.size else float("nan")
    except ResampleError as e:
        logger.warning(f"velocity estimate unavailable: {e}")
        record["rate"] = float("nan")
    return record


def run_simulation(run: RunConfig, out_dir: Path, digest: str, container: Optional[ServiceContainer] = None) -> Dict:
    """Full PDE run: series.csv, snapshots/ and a per-run record."""
    container = container or ServiceContainer.for_simulation(run.model, run.sim)
    params = run.sim.params
    initial = container.pde.initial_state(run.initial, params.eps, params.rho)
    series = container.pde.simulate(run.sim, initial)
    write_series(series, container.grid, digest, out_dir / "series.csv", out_dir / "snapshots")
    return simulation_record(series)


def trajectory_columns(traj: ReducedTrajectory) -> List[str]:
    N = traj.h.shape[1]
    columns = ["t"] + [f"h_{j + 1}" for j in range(N)]
    if traj.eta is not None:
        columns += [f"eta_{j + 1}" for j in range(N)]
    if traj.energy is not None:
        columns.append("energy")
    return columns


def trajectory_rows(traj: ReducedTrajectory):
    for k, t in enumerate(traj.t):
        row = [t, *traj.h[k]]
        if traj.eta is not None:
            row.extend(traj.eta[k])
        if traj.energy is not None:
            row.append(traj.energy[k])
        yield row


def write_trajectory(traj: ReducedTrajectory, path, digest: str) -> Path:
    return write_csv(path, trajectory_columns(traj), trajectory_rows(traj), digest)


def run_reduced(run: RunConfig, out_dir: Path, digest: str) -> Dict:
    """Hyperbolic reduced run from the run's h0 with η0 ≡ initial velocity."""
    container = ServiceContainer(run.model.potential, run.model.damping, run.sim.params.tau)
    params = run.sim.params
    gamma = ModelService.gamma_tau(run.model.potential, run.model.damping, params.tau)
    lv = LayerVector(np.asarray(run.initial.h0, dtype=float), params.eps, params.rho)
    eta0 = np.full(params.N, float(run.initial.velocity))
    traj = container.reduced.integrate_hyperbolic(lv, eta0, params.tau, gamma, run.sim.t_end, with_energy=False)
    write_trajectory(traj, out_dir / "traj.csv", digest)
    speed = np.max(np.abs(traj.eta), axis=1)
    return {
        "records": int(traj.t.size),
        "events": [{"t": float(traj.t[-1]), "event": traj.event}] if traj.event else [],
        "displacement": max_displacement(traj.h),
        "rate": float(np.median(speed[1:])) if speed.size > 1 else float("nan"),
        "gamma_tau": gamma,
    }


def comparison_series(container: ServiceContainer, lv: LayerVector, taus: Sequence[float],
                      T: float, t1: float) -> ComparisonSeries:
    """Compatible start η0 = P*(h0); γ_τ is measured for each τ of the list."""
    model = container.model
    eta0 = container.reduced.pstar(lv)
    return container.reduced.compare_relaxation(
        lv, eta0, taus, T, lambda tau: ModelService.gamma_tau(model.potential, model.damping, tau), t1,
    )


def write_comparison(series: ComparisonSeries, path, digest: str) -> Path:
    rows = []
    for r in series.runs:
        rows.extend((r.tau, t, he, ee, E) for t, he, ee, E in zip(r.t, r.h_err, r.eta_err, r.E))
    return write_csv(path, ["tau", "t", "h_err", "eta_err", "E_tau"], rows, digest)


def comparison_record(series: ComparisonSeries) -> Dict:
    return {
        "t1": series.t1,
        "runs": [{
            "tau": r.tau, "gamma_tau": r.gamma_tau, "sup_E": r.sup_E,
            "sup_h_err": float(r.h_err.max()),
            "eta_err_integral": r.eta_err_integral,
            "eta_err_after_t1": r.eta_err_after_t1, "eta_err_before_t1": r.eta_err_before_t1,
            "bound_reference": r.bound_reference,
            "sup_error_ratio": r.sup_E / r.bound_reference if r.bound_reference > 0 else float("inf"),
        } for r in series.runs],
    }


def run_comparison(run: RunConfig, taus: Sequence[float], t1: float, out_dir: Path, digest: str) -> Dict:
    """τ-comparison against the parabolic trajectory from the same h0."""
    container = ServiceContainer(run.model.potential, run.model.damping, max(taus))
    params = run.sim.params
    lv = LayerVector(np.asarray(run.initial.h0, dtype=float), params.eps, params.rho)
    series = comparison_series(container, lv, taus, run.sim.t_end, t1)
    write_comparison(series, out_dir / "comparison.csv", digest)
    return comparison_record(series)


def equilibrium_report(container: ServiceContainer, N: int, eps: float, rho: float) -> Dict:
    """h^e, spacing residual, spectrum at τ of the container and the leading-order ℓ_± check."""
    reduced = container.reduced
    model = container.model
    lv = reduced.equilibrium(N, eps, rho)
    gamma = ModelService.gamma_tau(model.potential, model.damping, model.tau)
    payload = reduced.summary(lv, model.tau, gamma)
    payload["gamma_tau"] = gamma
    payload["psi"] = container.manifold.barrier_psi(lv)
    try:
        ell_minus, ell_plus = reduced.equilibrium_asymptotic_spacings(N, eps)
        payload["asymptotic_spacings"] = {"ell_minus": ell_minus, "ell_plus": ell_plus}
    except ServiceError as e:
        logger.warning(f"asymptotic spacing check skipped: {e}")
    return payload


def run_equilibrium_study(run: RunConfig, out_dir: Path, digest: str) -> Dict:
    """equilibrium.json for the run's N, ε, ρ and τ."""
    params = run.sim.params
    container = ServiceContainer(run.model.potential, run.model.damping, params.tau)
    payload = equilibrium_report(container, params.N, params.eps, params.rho)
    write_json(out_dir / "equilibrium.json", payload, digest)
    return {"equilibrium_residual": payload["pstar_residual"], "h": payload["h"]}


# --- Plans ---

def plan_points(plan: ExperimentPlan) -> List[Dict]:
    """One payload per sweep point; payloads are plain data so they pickle."""
    base = plan.base.model_dump(mode="json")
    if plan.kind == "epsilon_sweep":
        points = []
        for i, eps in enumerate(plan.sweep_values):
            data = plan.base.model_dump(mode="json")
            data["sim"]["params"]["eps"] = eps
            data["sim"]["grid_points"] = max(data["sim"]["grid_points"], int(math.ceil(8.0 / eps)) + 1)
            points.append({"index": i, "value": eps, "run": data})
        return points
    return [{"index": 0, "value": None, "run": base}]


def run_point(kind: str, engine: str, payload: Dict, output_dir: str, digest: str,
              taus: Sequence[float] = (), t1: float = 1.0) -> Dict:
    """Execute one plan point; raises ServiceError subclasses on failure."""
    run = RunConfig.model_validate(payload["run"])
    label = "point" if payload["value"] is None else f"point_{payload['index']:03d}"
    out_dir = Path(output_dir) / label
    logger.sweep(f"{kind}/{engine} {label} (valor={payload['value']})")
    if kind == "tau_compare":
        return run_comparison(run, taus, t1, out_dir, digest)
    if kind == "equilibrium_study":
        return run_equilibrium_study(run, out_dir, digest)
    if engine == "reduced":
        return run_reduced(run, out_dir, digest)
    return run_simulation(run, out_dir, digest)


def evaluate_acceptance(plan: ExperimentPlan, points: List[Dict], fit: Optional[FitResult]) -> Dict[str, Dict]:
    thresholds = plan.acceptance
    checks: Dict[str, Dict] = {}

    def add(name, value, limit):
        passed = value is not None and np.isfinite(value) and value <= limit
        checks[name] = {"value": value, "threshold": limit, "passed": bool(passed)}

    ok = [p["result"] for p in points if p["ok"]]
    if thresholds.slope_rel_dev is not None:
        add("slope_rel_dev", fit.relative_deviation if fit else None, thresholds.slope_rel_dev)
    if thresholds.max_displacement is not None:
        values = [r["displacement"] for r in ok if "displacement" in r]
        add("max_displacement", max(values) if values else None, thresholds.max_displacement)
    if thresholds.max_sup_error_ratio is not None:
        values = [run["sup_error_ratio"] for r in ok for run in r.get("runs", [])]
        add("max_sup_error_ratio", max(values) if values else None, thresholds.max_sup_error_ratio)
    if thresholds.max_equilibrium_residual is not None:
        values = [r["equilibrium_residual"] for r in ok if "equilibrium_residual" in r]
        add("max_equilibrium_residual", max(values) if values else None, thresholds.max_equilibrium_residual)
    return checks


def sweep_fit(plan: ExperimentPlan, points: List[Dict]) -> Optional[FitResult]:
    """Rate fit of an ε-sweep against −A·ℓ^h of the initial configuration."""
    if plan.kind != "epsilon_sweep":
        return None
    ok = [p for p in points if p["ok"] and np.isfinite(p["result"].get("rate", np.nan))]
    if len(ok) < 3:
        logger.warning(f"epsilon sweep: only {len(ok)} usable points, no fit")
        return None
    if plan.engine == "reduced":
        logger.warning("epsilon sweep: ajuste sobre el motor reducido, sin control PDE")
    h0 = np.asarray(plan.base.initial.h0, dtype=float)
    ell = np.diff(np.concatenate(([-h0[0]], h0, [2.0 - h0[-1]])))
    A = min(ModelService.well_curvatures(plan.base.model.potential))
    predicted = -A * float(ell.min())
    return fit_rates([1.0 / p["value"] for p in ok], [p["result"]["rate"] for p in ok], predicted)


async def run_plan(plan: ExperimentPlan, output_dir: Optional[str] = None,
                   workers: Optional[int] = None) -> Dict:
    """
    Run every point of a plan and write summary.json.

    Points that fail are recorded in the summary with their exit code; the
    remaining points still run.
    """
    from metastable.tasks import SweepTaskManager

    settings = Settings()
    digest = hash_config(plan)
    out = Path(output_dir or plan.output_dir)
    payloads = plan_points(plan)
    logger.startup(f"plan {plan.kind} ({plan.engine}): {len(payloads)} punto(s) -> {out}")

    manager = SweepTaskManager(workers or settings.WORKERS)
    await manager.start()
    try:
        results = await manager.run([
            (plan.kind, plan.engine, p, str(out), digest, tuple(plan.sweep_values), plan.t1)
            for p in payloads
        ])
    finally:
        await manager.stop()

    points = [{"index": p["index"], "value": p["value"], **res} for p, res in zip(payloads, results)]
    fit = sweep_fit(plan, points)
    acceptance = evaluate_acceptance(plan, points, fit)
    failures = [p for p in points if not p["ok"]]
    summary = {
        "kind": plan.kind,
        "engine": plan.engine,
        "seed": plan.seed,
        "points": points,
        "fit": fit.as_dict() if fit else None,
        "fit_engine": plan.engine if fit else None,
        "acceptance": acceptance,
        "failed_points": len(failures),
        "passed": not failures and all(c["passed"] for c in acceptance.values()),
    }
    write_json(out / "summary.json", summary, digest)
    if fit:
        write_json(out / "fit.json", fit.as_dict(), digest)
    logger.shutdown(f"plan terminado: passed={summary['passed']}, fallos={len(failures)}")
    return summary


def write_plot_data(data, kind: str, path) -> Path:
    return write_text(path, emit_plot_data(data, kind))


def load_plot_data(path, kind: str):
    """
    Rebuild the plottable object from an artifact: series.csv or traj.csv for
    layers/channel, a JSON carrying a SpectrumReport for spectrum.

    Raises:
        ConfigError: unreadable file or a file that does not fit the kind
    """
    path = Path(path)
    if kind == "spectrum":
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read spectrum file {path}: {e}")
        report = payload.get("spectrum", payload)
        try:
            return SpectrumReport(
                omega=np.asarray(report.get("omega", []), dtype=float),
                B=np.asarray(report["B"], dtype=float),
                mu_sq=np.asarray(report["mu_sq"], dtype=float),
                lambda_plus=np.asarray(report["lambda_plus"], dtype=float),
                lambda_minus=np.asarray(report["lambda_minus"], dtype=float),
                dense_max_error=float(report.get("dense_max_error", float("nan"))),
            )
        except KeyError as e:
            raise ConfigError(f"{path}: missing spectrum field {e}")

    try:
        _, columns, data = read_csv(path)
    except (OSError, StopIteration, ValueError) as e:
        raise ConfigError(f"cannot read {path}: {e}")
    h_cols = [i for i, c in enumerate(columns) if c.startswith("h_")]
    if not h_cols or columns[0] != "t":
        raise ConfigError(f"{path}: expected t and h_j columns, got {columns}")
    if "psi" not in columns:
        return ReducedTrajectory(t=data[:, 0], h=data[:, h_cols])
    rows = [dict(zip(columns, row)) for row in data.tolist()]
    return ObservableSeries(N=len(h_cols), rows=rows)
