import json

import numpy as np
import pytest
from pydantic import ValidationError

from metastable.domain.models import (
    AcceptanceThresholds,
    ExperimentPlan,
    ReducedTrajectory,
    SpectrumReport,
)
from metastable.services.exceptions import ConfigError, FitError
from metastable.services.harness_service import (
    emit_plot_data,
    evaluate_acceptance,
    fit_exponential,
    fit_rates,
    load_plot_data,
    max_displacement,
    plan_points,
    run_plan,
    sweep_fit,
    write_trajectory,
)
from metastable.services.reduced_service import ReducedService
from metastable.utils.persistence import write_json


@pytest.fixture
def make_plan(make_run):
    """Plans over the small runs of conftest; reduced engine unless told otherwise."""
    def factory(kind="single_sim", h0=(0.3,), engine="reduced", sweep_values=(), acceptance=None,
                rho=0.5, t_end=5.0, output_dir="runs/plan"):
        run = make_run(h0=h0, rho=rho, t_end=t_end, grid_points=257)
        return ExperimentPlan(
            kind=kind, base=run, engine=engine, sweep_values=list(sweep_values),
            output_dir=str(output_dir), acceptance=acceptance or AcceptanceThresholds(),
        )
    return factory


def test_fit_recovers_exponential_rate():
    """
    Caso 1: Ajuste de log(tasa) contra 1/ε
    * Escenario: datos exactos y = 2 − √2·x.
    * Validación:
      * Pendiente −√2, R² = 1.
      * Desviación relativa nula respecto de la pendiente predicha.
    """
    xs = np.array([10.0, 15.0, 20.0, 25.0])
    ys = 2.0 - np.sqrt(2.0) * xs
    fit = fit_exponential(xs, ys, predicted_slope=-np.sqrt(2.0))
    assert fit.slope == pytest.approx(-np.sqrt(2.0), rel=1e-12)
    assert fit.intercept == pytest.approx(2.0, rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.relative_deviation < 1e-12
    assert fit.n_points == 4
    assert not fit.non_exponential


def test_fit_flags_non_exponential_data():
    """
    Caso 2: Datos sin decaimiento
    * Validación: pendiente ≥ 0 marca non_exponential sin lanzar.
    """
    fit = fit_exponential([10.0, 20.0, 30.0], [-3.0, -3.0, -3.0])
    assert fit.non_exponential, f"constant data should be flagged: {fit.as_dict()}"
    assert fit.predicted_slope is None and fit.relative_deviation is None


def test_fit_needs_three_points():
    """
    Caso 3: Muy pocos puntos
    * Validación:
      * Menos de 3 puntos finitos lanza FitError.
      * Los NaN se descartan antes de contar.
    """
    with pytest.raises(FitError):
        fit_exponential([1.0, 2.0], [1.0, 0.5])
    with pytest.raises(FitError):
        fit_exponential([1.0, 2.0, 3.0], [1.0, np.nan, 0.5])


def test_fit_rates_drops_non_positive():
    """
    Caso 4: Tasas no positivas
    """
    xs = [10.0, 20.0, 30.0, 40.0]
    rates = [np.exp(-10.0), 0.0, np.exp(-30.0), np.exp(-40.0)]
    fit = fit_rates(xs, rates)
    assert fit.n_points == 3
    assert fit.slope == pytest.approx(-1.0, rel=1e-10)


def test_max_displacement_skips_nan_rows():
    """
    Caso 5: Desplazamiento máximo
    """
    positions = np.array([[0.3, 0.7], [np.nan, 0.7], [0.28, 0.71]])
    assert max_displacement(positions) == pytest.approx(0.02, abs=1e-15)
    assert np.isnan(max_displacement(np.full((2, 1), np.nan)))


def test_emit_plot_data_formats():
    """
    Caso 6: Datos para graficar
    * Validación:
      * Cabecera '#' con los nombres de columna.
      * Una fila por muestra o por modo.
      * Tipo desconocido o combinación inválida lanza ConfigError.
    """
    traj = ReducedTrajectory(t=np.array([0.0, 1.0]), h=np.array([[0.25, 0.75], [0.24, 0.76]]))
    text = emit_plot_data(traj, "layers")
    lines = text.splitlines()
    assert lines[0] == "# t h_1 h_2"
    assert len(lines) == 3
    assert lines[2].split() == ["1", "0.23999999999999999", "0.76000000000000001"]

    diag, off = ReducedService.assemble_B(np.array([-0.02, -0.03, -0.02]))
    report = ReducedService.spectrum_from_hessian(diag, off, 0.1, 1.0)
    lines = emit_plot_data(report, "spectrum").splitlines()
    assert lines[0] == "# i mu_sq lambda_plus lambda_minus"
    assert [line.split()[0] for line in lines[1:]] == ["1", "2"]

    with pytest.raises(ConfigError):
        emit_plot_data(traj, "histogram")
    with pytest.raises(ConfigError):
        emit_plot_data(traj, "channel")


def test_load_plot_data_roundtrip(tmp_path):
    """
    Caso 7: Lectura de artefactos para graficar
    * Validación:
      * traj.csv vuelve como ReducedTrajectory.
      * Un JSON con 'spectrum' vuelve como SpectrumReport.
      * Un CSV sin columnas h_j lanza ConfigError.
    """
    traj = ReducedTrajectory(t=np.linspace(0.0, 1.0, 5), h=np.linspace(0.3, 0.29, 5)[:, None],
                             eta=np.zeros((5, 1)))
    path = write_trajectory(traj, tmp_path / "traj.csv", "hash")
    loaded = load_plot_data(path, "layers")
    assert isinstance(loaded, ReducedTrajectory)
    np.testing.assert_array_equal(loaded.h, traj.h)

    diag, off = ReducedService.assemble_B(np.array([-0.02, -0.03, -0.02]))
    report = ReducedService.spectrum_from_hessian(diag, off, 0.1, 1.0)
    spec_path = write_json(tmp_path / "equilibrium.json", {"spectrum": report.as_dict()}, "hash")
    loaded = load_plot_data(spec_path, "spectrum")
    assert isinstance(loaded, SpectrumReport)
    np.testing.assert_array_equal(loaded.mu_sq, report.mu_sq)

    bad = tmp_path / "bad.csv"
    bad.write_text("# config_hash=x\nt,energy\n0,1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_plot_data(bad, "layers")


def test_plan_validation(make_run):
    """
    Caso 8: Validación del plan
    * Validación:
      * Valores de barrido no monótonos son rechazados.
      * Un barrido sin valores es rechazado.
    """
    run = make_run()
    with pytest.raises(ValidationError):
        ExperimentPlan(kind="epsilon_sweep", base=run, sweep_values=[0.1, 0.05, 0.08])
    with pytest.raises(ValidationError):
        ExperimentPlan(kind="tau_compare", base=run)


def test_plan_points_refine_grid(make_plan):
    """
    Caso 9: Puntos de un barrido en ε
    * Validación:
      * Un punto por valor, con su índice.
      * La malla se refina hasta Δx ≤ ε/8.
    """
    plan = make_plan(kind="epsilon_sweep", sweep_values=[0.1, 0.05, 0.03], engine="pde")
    points = plan_points(plan)
    assert [p["index"] for p in points] == [0, 1, 2]
    assert [p["run"]["sim"]["params"]["eps"] for p in points] == [0.1, 0.05, 0.03]
    assert [p["run"]["sim"]["grid_points"] for p in points] == [257, 257, 268]

    single = plan_points(make_plan())
    assert len(single) == 1 and single[0]["value"] is None


def test_evaluate_acceptance(make_plan):
    """
    Caso 10: Umbrales de aceptación
    * Validación:
      * Cada umbral declarado produce un chequeo con valor y límite.
      * Sin valores disponibles el chequeo falla.
    """
    plan = make_plan(acceptance=AcceptanceThresholds(max_displacement=0.01, max_equilibrium_residual=1e-10))
    points = [
        {"ok": True, "result": {"displacement": 0.004}},
        {"ok": True, "result": {"displacement": 0.002}},
        {"ok": False, "error": "boom"},
    ]
    checks = evaluate_acceptance(plan, points, None)
    assert checks["max_displacement"] == {"value": 0.004, "threshold": 0.01, "passed": True}
    assert checks["max_equilibrium_residual"]["passed"] is False
    assert "slope_rel_dev" not in checks


@pytest.mark.asyncio
async def test_run_plan_reduced_single(make_plan, tmp_path):
    """
    Caso 11: Plan de una corrida reducida
    * Escenario: N = 1, h0 = 0.3, τ = 0.1 hasta t = 5.
    * Validación:
      * summary.json y traj.csv con el mismo hash de configuración.
      * El desplazamiento cumple el umbral y el plan pasa.
    """
    plan = make_plan(acceptance=AcceptanceThresholds(max_displacement=0.05))
    summary = await run_plan(plan, output_dir=str(tmp_path), workers=1)

    assert summary["passed"], f"summary: {summary}"
    assert summary["failed_points"] == 0
    assert summary["fit_engine"] is None, "single runs carry no fit"
    result = summary["points"][0]["result"]
    assert 0.0 < result["displacement"] < 0.05
    assert result["gamma_tau"] == pytest.approx(1.0)

    stored = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    header = (tmp_path / "point" / "traj.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == f"# config_hash={stored['config_hash']}"
    assert stored["schema_version"] == 1


@pytest.mark.asyncio
async def test_run_plan_is_deterministic(make_plan, tmp_path):
    """
    Caso 12: Reproducibilidad
    * Validación: dos ejecuciones del mismo plan producen archivos idénticos byte a byte.
    """
    plan = make_plan(t_end=2.0)
    await run_plan(plan, output_dir=str(tmp_path / "a"), workers=1)
    await run_plan(plan, output_dir=str(tmp_path / "b"), workers=1)
    for name in ("summary.json", "point/traj.csv"):
        first = (tmp_path / "a" / name).read_bytes()
        second = (tmp_path / "b" / name).read_bytes()
        assert first == second, f"{name} differs between identical runs"


@pytest.mark.asyncio
async def test_run_plan_failing_threshold(make_plan, tmp_path):
    """
    Caso 13: Umbral incumplido
    * Validación: el plan se completa pero passed = False.
    """
    plan = make_plan(t_end=2.0, acceptance=AcceptanceThresholds(max_displacement=1e-12))
    summary = await run_plan(plan, output_dir=str(tmp_path), workers=1)
    assert summary["failed_points"] == 0
    assert summary["acceptance"]["max_displacement"]["passed"] is False
    assert summary["passed"] is False


@pytest.mark.asyncio
async def test_equilibrium_study_plan(make_plan, tmp_path):
    """
    Caso 14: Estudio de equilibrio
    * Escenario: N = 2, ε = 0.1.
    * Validación:
      * equilibrium.json con h^e = (0.25, 0.75) y el espectro.
      * El residuo cumple el umbral.
    """
    plan = make_plan(kind="equilibrium_study", h0=(0.25, 0.75),
                     acceptance=AcceptanceThresholds(max_equilibrium_residual=1e-10))
    summary = await run_plan(plan, output_dir=str(tmp_path), workers=1)
    assert summary["passed"], f"summary: {summary}"

    payload = json.loads((tmp_path / "point" / "equilibrium.json").read_text(encoding="utf-8"))
    assert payload["h"] == pytest.approx([0.25, 0.75], abs=1e-8)
    assert payload["psi"] == pytest.approx(0.0, abs=1e-20)
    assert len(payload["spectrum"]["mu_sq"]) == 2


@pytest.mark.asyncio
async def test_failed_point_is_recorded(make_plan, tmp_path):
    """
    Caso 15: Punto fallido
    * Escenario: N = 4 con ε = 0.1, sin equilibrio admisible.
    * Validación: el error queda en el resumen con su tipo y el plan no pasa.
    """
    plan = make_plan(kind="equilibrium_study", h0=(0.125, 0.375, 0.625, 0.875))
    summary = await run_plan(plan, output_dir=str(tmp_path), workers=1)
    point = summary["points"][0]
    assert point["ok"] is False
    assert point["error_type"] == "EquilibriumError"
    assert point["exit_code"] == 2
    assert summary["failed_points"] == 1
    assert summary["passed"] is False


@pytest.mark.asyncio
async def test_tau_compare_plan(make_plan, tmp_path):
    """
    Caso 16: Comparación con el límite parabólico
    * Escenario: τ ∈ {0.2, 0.1}, γ ≡ 1, h0 = 0.3.
    * Validación:
      * comparison.csv con una serie por τ.
      * sup E_τ queda por debajo de la referencia E_τ(0) + 1 − γ_τ + τ.
    """
    plan = make_plan(kind="tau_compare", sweep_values=[0.2, 0.1], t_end=2.0,
                     acceptance=AcceptanceThresholds(max_sup_error_ratio=1.0))
    summary = await run_plan(plan, output_dir=str(tmp_path), workers=1)
    assert summary["passed"], f"summary: {summary}"
    runs = summary["points"][0]["result"]["runs"]
    assert [r["tau"] for r in runs] == [0.2, 0.1]
    assert (tmp_path / "point" / "comparison.csv").exists()


@pytest.mark.parametrize("engine, warned", [("reduced", True), ("pde", False)])
def test_sweep_fit_flags_reduced_engine(make_plan, monkeypatch, engine, warned):
    """
    Caso 17: Ajuste de ε-sweep según el motor
    * Escenario: tasas sintéticas exp(−√2·0.6/ε) para ε = 0.1, 0.08, 0.06.
    * Validación:
      * La pendiente coincide con la predicha −√2·ℓ_min.
      * Con el motor reducido queda un aviso en el log; con el PDE no.
    """
    import metastable.services.harness_service as harness

    messages = []
    monkeypatch.setattr(harness.logger, "warning", lambda message, **kw: messages.append(message))
    eps_values = (0.1, 0.08, 0.06)
    plan = make_plan(kind="epsilon_sweep", engine=engine, sweep_values=eps_values)
    points = [
        {"ok": True, "value": eps, "result": {"rate": float(np.exp(-np.sqrt(2.0) * 0.6 / eps))}}
        for eps in eps_values
    ]
    fit = sweep_fit(plan, points)

    assert fit is not None, "three usable points must give a fit"
    assert fit.relative_deviation < 1e-10, f"deviation {fit.relative_deviation}"
    flagged = any("motor reducido" in m for m in messages)
    assert flagged is warned, f"engine={engine}, messages={messages}"
