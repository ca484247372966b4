"""
Command-line handlers.

One handler per subcommand; each returns the process exit code. Numerical
and configuration failures surface as ServiceError subclasses and are
mapped to their exit_code by `main` (1 config, 2 numerical, 3 acceptance).
JSON results go to stdout, logs and the banner to stderr.
"""
import argparse
import asyncio
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from metastable.config import Settings, config_hash, load_config, payload_hash
from metastable.domain.models import ExperimentPlan, LayerVector, ModelConfig, RunConfig
from metastable.services.dependency_injection import ServiceContainer
from metastable.services.exceptions import AcceptanceError, ConfigError, ServiceError
from metastable.services.harness_service import (
    PLOT_KINDS,
    comparison_record,
    comparison_series,
    emit_plot_data,
    equilibrium_report,
    load_plot_data,
    run_plan,
    simulation_record,
    write_comparison,
    write_plot_data,
    write_series,
    write_trajectory,
)
from metastable.services.model_service import ModelService
from metastable.services.profile_service import ProfileService
from metastable.utils.banner import print_banner, print_run_info, print_separator
from metastable.utils.persistence import (
    dump_json,
    write_field_csv,
    write_json,
    write_snapshot_json,
)
from metastable.utils.sexy_logger import get_logger

logger = get_logger(__name__)


class CliParser(argparse.ArgumentParser):
    """argparse con errores de uso como ConfigError (exit 1 en vez de 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _model(path: Optional[str]) -> ModelConfig:
    return load_config(path, ModelConfig) if path else ModelConfig()


def _print_json(payload: Dict, digest: Optional[str] = None):
    sys.stdout.write(dump_json(payload, digest))


def _reduced_digest(model: ModelConfig, **extra) -> str:
    return payload_hash({"model": model.model_dump(mode="json"), **extra})


# --- Handlers ---

def handle_validate_model(args) -> int:
    """Double-well checks, c_g, D∞ and γ_τ of a model file."""
    model = _model(args.config)
    report = ModelService.validate_double_well(model.potential)
    payload = {"potential": report.as_dict()}
    if not report.passed:
        _print_json(payload)
        logger.error(f"potencial inválido: {report.failures()}")
        return ConfigError.exit_code

    spec = ModelService.build(model)
    A_plus, A_minus = ModelService.well_curvatures(model.potential)
    payload.update({
        "c_g": spec.c_g,
        "d_infinity": ModelService.d_infinity(model.potential),
        "gamma_tau": ModelService.gamma_tau(model.potential, model.damping, model.tau),
        "A_plus": A_plus,
        "A_minus": A_minus,
    })
    _print_json(payload, config_hash(model))
    return 0


def handle_profile(args) -> int:
    """Steady profile of length ε/r; optional (x, φ, φ_x) CSV."""
    model = _model(args.config)
    ModelService.build(model)
    profiles = ProfileService(model.potential)
    sol = profiles.amplitude_for_ratio(args.r, args.branch)
    digest = _reduced_digest(model, r=args.r, branch=args.branch, eps=args.eps)
    if args.out:
        profiles.export_profile_csv(sol, args.eps, args.out, digest, points=args.points)
    _print_json({
        "branch": sol.branch,
        "r": sol.r,
        "ell": args.eps / sol.r,
        "M": sol.M,
        "beta": sol.beta,
        "alpha": sol.alpha,
        "minimal_period": profiles.minimal_period(args.branch),
        "r_max": profiles.r_max(args.branch),
    }, digest)
    return 0


def handle_manifold(args) -> int:
    """u^h for the run's h0: snapshot JSON, CSV and the tangent-space diagnostics."""
    run = load_config(args.config, RunConfig)
    digest = config_hash(run)
    params = run.sim.params
    container = ServiceContainer.for_simulation(run.model, run.sim)
    manifold = container.manifold
    lv = LayerVector(np.asarray(run.initial.h0, dtype=float), params.eps, params.rho)

    uh = manifold.build_uh(lv)
    if args.out:
        write_snapshot_json(args.out, uh)
    if args.csv:
        write_field_csv(args.csv, uh, digest)
    _print_json({
        "h": lv.h.tolist(),
        "spacings": lv.spacings.tolist(),
        "alphas": manifold.alphas(lv).tolist(),
        "psi": manifold.barrier_psi(lv, "alpha_formula"),
        "psi_inner_product": manifold.barrier_psi(lv, "inner_product"),
        "D": manifold.matrix_D(lv).tolist(),
        "coercivity_lambda": manifold.coercivity_lambda(lv),
        "curvature_projections": manifold.curvature_projections(lv).tolist(),
    }, digest)
    return 0


def handle_simulate(args) -> int:
    """Full hyperbolic run: series.csv and optional snapshots."""
    run = load_config(args.config, RunConfig)
    digest = config_hash(run)
    print_run_info("simulate", digest)
    params = run.sim.params
    container = ServiceContainer.for_simulation(run.model, run.sim)
    initial = container.pde.initial_state(run.initial, params.eps, params.rho)
    series = container.pde.simulate(run.sim, initial)
    snapshots = Path(args.snapshots) if args.snapshots else None
    write_series(series, container.grid, digest, args.out, snapshots)
    _print_json(simulation_record(series), digest)
    return 0


def handle_reduce(args) -> int:
    """Parabolic or hyperbolic layer ODE from h0."""
    model = _model(args.model)
    container = ServiceContainer(model.potential, model.damping, args.tau)
    lv = LayerVector(np.asarray(args.h0, dtype=float), args.eps, args.rho)
    t_eval = np.linspace(0.0, args.t_end, args.samples)
    digest = _reduced_digest(model, system=args.system, h0=list(args.h0), eps=args.eps, rho=args.rho,
                             tau=args.tau, t_end=args.t_end, samples=args.samples, mode=args.mode,
                             velocity=args.velocity)

    if args.system == "parabolic":
        traj = container.reduced.integrate_parabolic(lv, args.t_end, args.mode, t_eval)
    else:
        if args.tau <= 0.0:
            raise ConfigError("the hyperbolic system needs --tau > 0")
        gamma = ModelService.gamma_tau(model.potential, model.damping, args.tau)
        if args.velocity is None:
            eta0 = container.reduced.pstar(lv)
        else:
            eta0 = np.full(lv.N, args.velocity)
        traj = container.reduced.integrate_hyperbolic(lv, eta0, args.tau, gamma, args.t_end, args.mode, t_eval)

    write_trajectory(traj, args.out, digest)
    _print_json({
        "system": args.system,
        "samples": int(traj.t.size),
        "t_final": float(traj.t[-1]),
        "h_final": traj.h[-1].tolist(),
        "event": traj.event,
    }, digest)
    return 0


def handle_equilibrium(args) -> int:
    """h^e and its SpectrumReport as JSON."""
    model = _model(args.model)
    container = ServiceContainer(model.potential, model.damping, args.tau)
    payload = equilibrium_report(container, args.N, args.eps, args.rho)
    digest = _reduced_digest(model, N=args.N, eps=args.eps, rho=args.rho, tau=args.tau)
    if args.out:
        write_json(args.out, payload, digest)
    _print_json(payload, digest)
    return 0


def handle_spectrum(args) -> int:
    """Spectrum of the linearised layer system at h (h^e when --h is omitted)."""
    model = _model(args.model)
    container = ServiceContainer(model.potential, model.damping, args.tau)
    reduced = container.reduced
    if args.h:
        lv = LayerVector(np.asarray(args.h, dtype=float), args.eps, args.rho)
    else:
        lv = reduced.equilibrium(args.N, args.eps, args.rho)
    gamma = ModelService.gamma_tau(model.potential, model.damping, args.tau)
    report = reduced.spectrum(lv, args.tau, gamma)
    digest = _reduced_digest(model, h=lv.h.tolist(), eps=args.eps, rho=args.rho, tau=args.tau)
    payload = {"h": lv.h.tolist(), "gamma_tau": gamma, "spectrum": report.as_dict()}
    if args.out:
        write_json(args.out, payload, digest)
    _print_json(payload, digest)
    return 0


def handle_compare(args) -> int:
    """Hyperbolic vs parabolic trajectories for each τ of the list."""
    model = _model(args.model)
    container = ServiceContainer(model.potential, model.damping, max(args.tau_list))
    lv = LayerVector(np.asarray(args.h0, dtype=float), args.eps, args.rho)
    series = comparison_series(container, lv, args.tau_list, args.t_end, args.t1)
    digest = _reduced_digest(model, taus=list(args.tau_list), h0=list(args.h0), eps=args.eps,
                             rho=args.rho, t_end=args.t_end, t1=args.t1)
    write_comparison(series, args.out, digest)
    _print_json(comparison_record(series), digest)
    return 0


def handle_sweep(args) -> int:
    """Run an experiment plan; exit 2 on failed points, 3 on missed thresholds."""
    plan = load_config(args.plan, ExperimentPlan)
    workers = args.workers or Settings().WORKERS
    print_run_info(f"sweep ({plan.kind})", config_hash(plan), workers)
    summary = asyncio.run(run_plan(plan, args.out, workers))
    if summary["failed_points"]:
        logger.error(f"{summary['failed_points']} punto(s) fallaron; ver summary.json")
        return ServiceError.exit_code
    failed = [name for name, check in summary["acceptance"].items() if not check["passed"]]
    if failed:
        raise AcceptanceError(f"acceptance thresholds missed: {failed}")
    logger.success("plan aceptado")
    return 0


def handle_plot(args) -> int:
    """gnuplot columns from a series.csv, traj.csv or spectrum JSON."""
    data = load_plot_data(args.input, args.kind)
    if args.out:
        write_plot_data(data, args.kind, args.out)
    else:
        sys.stdout.write(emit_plot_data(data, args.kind))
    return 0


# --- Parser ---

def _add_layer_args(p: argparse.ArgumentParser, with_tau: bool = True):
    p.add_argument("--model", help="model JSON (potential + damping); quartic with g=1 by default")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--rho", type=float, default=0.5)
    if with_tau:
        p.add_argument("--tau", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="metastable", description="Metastable layer dynamics of the 1-D hyperbolic Allen-Cahn equation")
    parser.add_argument("--no-banner", action="store_true", help="do not print the banner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-model", help="check a potential/damping pair")
    p.add_argument("--config", help="model JSON")
    p.set_defaults(handler=handle_validate_model)

    p = sub.add_parser("profile", help="steady profile of length eps/r")
    p.add_argument("--config", help="model JSON")
    p.add_argument("--r", type=float, required=True, help="ratio eps/ell")
    p.add_argument("--branch", choices=["plus", "minus"], default="plus")
    p.add_argument("--eps", type=float, default=0.03)
    p.add_argument("--points", type=int, default=401)
    p.add_argument("--out", help="CSV with x, phi, phi_x")
    p.set_defaults(handler=handle_profile)

    p = sub.add_parser("manifold", help="u^h, alphas, Psi, D(h) for the h0 of a run config")
    p.add_argument("--config", required=True, help="run JSON")
    p.add_argument("--out", help="snapshot JSON of u^h")
    p.add_argument("--csv", help="CSV (x, value) of u^h")
    p.set_defaults(handler=handle_manifold)

    p = sub.add_parser("simulate", help="integrate the full system")
    p.add_argument("--config", required=True, help="run JSON")
    p.add_argument("--out", required=True, help="series.csv")
    p.add_argument("--snapshots", help="directory for snapshot JSON files")
    p.set_defaults(handler=handle_simulate)

    p = sub.add_parser("reduce", help="integrate the layer ODE")
    _add_layer_args(p)
    p.add_argument("--system", choices=["parabolic", "hyperbolic"], default="hyperbolic")
    p.add_argument("--h0", type=float, nargs="+", required=True)
    p.add_argument("--t-end", type=float, default=10.0)
    p.add_argument("--samples", type=int, default=1001)
    p.add_argument("--mode", choices=["exact", "asymptotic"], default="exact")
    p.add_argument("--velocity", type=float, help="constant initial eta; P*(h0) when omitted")
    p.add_argument("--out", required=True, help="traj.csv")
    p.set_defaults(handler=handle_reduce)

    p = sub.add_parser("equilibrium", help="equilibrium layers and spectrum")
    _add_layer_args(p)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--out", help="equilibrium JSON")
    p.set_defaults(handler=handle_equilibrium)

    p = sub.add_parser("spectrum", help="spectrum of the linearised layer system")
    _add_layer_args(p)
    p.add_argument("--h", type=float, nargs="+", help="layer positions; equilibrium when omitted")
    p.add_argument("--N", type=int, default=2)
    p.add_argument("--out", help="spectrum JSON")
    p.set_defaults(handler=handle_spectrum)

    p = sub.add_parser("compare", help="tau -> 0 comparison with the parabolic system")
    _add_layer_args(p, with_tau=False)
    p.add_argument("--tau-list", type=float, nargs="+", required=True)
    p.add_argument("--h0", type=float, nargs="+", required=True)
    p.add_argument("--t-end", type=float, default=10.0)
    p.add_argument("--t1", type=float, default=1.0)
    p.add_argument("--out", required=True, help="comparison.csv")
    p.set_defaults(handler=handle_compare)

    p = sub.add_parser("sweep", help="run an experiment plan")
    p.add_argument("--plan", required=True, help="plan JSON")
    p.add_argument("--out", help="output directory (overrides the plan)")
    p.add_argument("--workers", type=int)
    p.set_defaults(handler=handle_sweep)

    p = sub.add_parser("plot", help="gnuplot-ready columns")
    p.add_argument("--kind", choices=PLOT_KINDS, required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="output file; stdout when omitted")
    p.set_defaults(handler=handle_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse, dispatch and map errors to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        if not args.no_banner:
            print_banner()
            print_separator()
        return args.handler(args)
    except ServiceError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupción por teclado detectada.")
        return 130
