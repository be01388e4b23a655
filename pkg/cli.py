#!/usr/bin/env python3
"""
EMS Simulator CLI
Command-line interface for planning, data generation, predictor training and
strategy simulation.
"""

import functools
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple

import click
from pydantic import ValidationError

from app.config import ParameterSet, config
from app.exceptions import ConvergenceError, EmsError, InputError
from app.logging_config import configure_logging
from app.models.control import StrategyKind
from app.models.optimization import SocGrid
from app.models.planning import PlannerLimits
from app.models.prediction import PredictionConfig, PredictorKind, PredictorModel
from app.models.simulation import SimConfig
from app.services import data_io
from app.services.comparison import compare_strategies
from app.services.cycle_generator import benchmark_cycle, generate_cycles
from app.services.cycle_prediction import evaluate_predictor, load_model, save_model, train_predictor
from app.services.powertrain import build_powertrain, synthesize_fuel_map
from app.services.simulation import Simulator
from app.services.speed_planner import plan_speed
from app.services.strategies import build_strategy

STRATEGIES = [k.value for k in StrategyKind]
PREDICTORS = [k.value for k in PredictorKind]


def handle_errors(func):
    """Map simulator errors to exit codes with a one-line red message"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except EmsError as exc:
            click.echo(click.style(f"❌ {type(exc).__name__}: {exc.message}", fg="red"), err=True)
            sys.exit(exc.exit_code)
        except ValidationError as exc:
            click.echo(click.style(f"❌ Invalid configuration: {exc.errors()[0]['msg']}", fg="red"), err=True)
            sys.exit(InputError.exit_code)
    return wrapper


def common_options(func):
    """--seed, --params and --horizon shared by every subcommand"""
    func = click.option('--horizon', type=int, default=None, help='Prediction / MPC horizon p (steps)')(func)
    func = click.option('--params', 'params_file', type=click.Path(), default=None, help='Parameter file')(func)
    func = click.option('--seed', type=int, default=None, help='Random seed')(func)
    return func


def powertrain_options(func):
    """--fuel-map and --voc-curve replace the synthesized map and the linear Voc line"""
    func = click.option('--voc-curve', type=click.Path(), default=None, help='soc,voc CSV')(func)
    func = click.option('--fuel-map', type=click.Path(), default=None, help='Fuel map grid CSV (torque rows x rpm columns)')(func)
    return func


def load_parameters(params_file: Optional[str], horizon: Optional[int]) -> ParameterSet:
    params = ParameterSet.from_file(params_file or config.PARAMS_FILE)
    if horizon is not None:
        if horizon < 1:
            raise InputError("--horizon must be at least 1")
        params.set('prediction.horizon', horizon)
        params.set('mpc.horizon', horizon)
    return params


def load_powertrain(params: ParameterSet, fuel_map: Optional[str], voc_curve: Optional[str]):
    return build_powertrain(
        params,
        data_io.read_fuel_map(fuel_map) if fuel_map else None,
        data_io.read_voc_curve(voc_curve) if voc_curve else None,
    )


def parse_grid(grid: Optional[str], params: ParameterSet) -> Optional[SocGrid]:
    """``m,q`` → uniform lattice of m SOC parts and q speed levels"""
    if not grid:
        return None
    try:
        m, q = (int(x) for x in grid.split(','))
    except ValueError as exc:
        raise InputError(f"--grid expects 'm,q', got {grid!r}") from exc
    return SocGrid.from_parameters(params, m, q)


def load_predictors(paths: Tuple[str, ...]) -> Dict[str, PredictorModel]:
    models = {}
    for path in paths:
        model = load_model(path)
        models[model.kind.value] = model
    return models


def resolve_cycle(cycle: str, seed: int, params: ParameterSet):
    return benchmark_cycle(seed, params) if cycle == 'benchmark' else data_io.read_cycle(cycle)


@click.group()
@click.version_option(version="1.0.0", prog_name="EMS Simulator CLI")
@click.option('--log-level', default=None, help='Log level (default from EMS_LOG_LEVEL)')
@click.option('--log-format', type=click.Choice(['console', 'json']), default=None)
def cli(log_level, log_format):
    """🚜 Tracked-vehicle hybrid energy management simulator

    Plan speed profiles, generate driving data, train speed predictors and
    compare energy-management strategies in closed loop.
    """
    configure_logging(log_level, log_format)


@cli.command()
@click.argument('path_csv', type=click.Path())
@click.option('-o', '--output', default=None, help='Profile CSV (default <output dir>/profile.csv)')
@common_options
@handle_errors
def plan(path_csv, output, seed, params_file, horizon):
    """📈 Plan a velocity profile for a path CSV"""
    params = load_parameters(params_file, horizon)
    output = output or config.output_path('profile.csv')
    path = data_io.read_path(path_csv)
    try:
        profile = plan_speed(path, PlannerLimits.from_parameters(params))
    except ConvergenceError as exc:
        if exc.last_value is not None:
            data_io.write_profile(path, exc.last_value, output, seed, params)
        raise
    data_io.write_profile(path, profile, output, seed, params)
    click.echo(click.style(f"✅ Profile with {len(profile)} points written to {output}", fg="green"))
    click.echo(f"   Iterations: {profile.iterations}")


@cli.command('fuel-map')
@click.option('-o', '--output', default=None, help='Map CSV (default <output dir>/fuel_map.csv)')
@common_options
@handle_errors
def export_fuel_map(output, seed, params_file, horizon):
    """⛽ Write the synthesized engine fuel map as a torque x speed grid"""
    params = load_parameters(params_file, horizon)
    fmap = synthesize_fuel_map(params)
    path = data_io.write_fuel_map(fmap, output or config.output_path('fuel_map.csv'), seed, params)
    click.echo(click.style(f"✅ {len(fmap.torques)}x{len(fmap.speeds)} fuel map written to {path}", fg="green"))


@cli.command()
@click.option('-o', '--output', default=None, help='Dataset directory (default <output dir>/dataset)')
@click.option('--episodes', type=int, default=None, help='Number of episodes')
@common_options
@handle_errors
def gen(output, episodes, seed, params_file, horizon):
    """🎲 Generate a synthetic driving dataset and the benchmark cycle"""
    params = load_parameters(params_file, horizon)
    seed = config.SEED if seed is None else seed
    output = output or config.output_path('dataset')
    dataset, cycles = generate_cycles(seed, params, episodes)
    data_io.write_dataset(cycles, output, seed, params)
    data_io.write_cycle(benchmark_cycle(seed, params), Path(output) / 'benchmark.csv', seed, params)
    steps = sum(len(e) for e in dataset.episodes)
    click.echo(click.style(f"✅ {len(dataset)} episodes ({steps} steps) written to {output}", fg="green"))


@cli.command()
@click.argument('kind', type=click.Choice(PREDICTORS))
@click.argument('dataset', type=click.Path())
@click.option('-o', '--output', default=None, help='Model file (default <output dir>/<kind>.npz)')
@click.option('--holdout', type=float, default=0.2, show_default=True, help='Trailing episode fraction held out')
@common_options
@handle_errors
def train(kind, dataset, output, holdout, seed, params_file, horizon):
    """🧠 Train a speed predictor"""
    params = load_parameters(params_file, horizon)
    seed = config.SEED if seed is None else seed
    data, _ = data_io.read_dataset(dataset)
    train_set, held_out = data.split(holdout)
    model = train_predictor(kind, train_set, PredictionConfig.from_parameters(params, seed=seed))
    path = save_model(model, output or config.output_path(f"{kind}.npz"))
    click.echo(click.style(f"✅ {kind} predictor saved to {path}", fg="green"))
    if len(held_out):
        click.echo(f"   Held-out RMSE: {evaluate_predictor(model, held_out):.3f} km/h")


@cli.command('eval-pred')
@click.argument('dataset', type=click.Path())
@click.argument('models', nargs=-1, required=True, type=click.Path())
@click.option('-o', '--output', default=None, help='RMSE CSV (default <output dir>/rmse.csv)')
@click.option('--holdout', type=float, default=0.2, show_default=True)
@common_options
@handle_errors
def eval_pred(dataset, models, output, holdout, seed, params_file, horizon):
    """📊 Predictor RMSE table on the held-out episodes"""
    params = load_parameters(params_file, horizon)
    output = output or config.output_path('rmse.csv')
    data, _ = data_io.read_dataset(dataset)
    _, held_out = data.split(holdout)
    if not len(held_out):
        held_out = data
    rmse = {name: evaluate_predictor(model, held_out) for name, model in load_predictors(models).items()}
    data_io.write_rmse(rmse, output, seed, params)
    for name, value in rmse.items():
        click.echo(f"   {name:<14} {value:8.3f} km/h")
    click.echo(click.style(f"✅ RMSE table written to {output}", fg="green"))


@cli.command()
@click.argument('cycle', default='benchmark')
@click.option('--strategy', type=click.Choice(STRATEGIES), default='pf', show_default=True)
@click.option('--model', 'models', multiple=True, type=click.Path(), help='Predictor file (repeatable)')
@click.option('--grid', default=None, help="Uniform lattice 'm,q' instead of the SOC band")
@click.option('--dump-lattice', type=click.Path(), default=None, help='Write the DP lattice CSV')
@click.option('-o', '--output', default=None, help='Log CSV (default <output dir>/simlog.csv)')
@common_options
@powertrain_options
@handle_errors
def sim(cycle, strategy, models, grid, dump_lattice, output, fuel_map, voc_curve, seed, params_file, horizon):
    """🚜 Simulate one strategy on a cycle CSV (or 'benchmark')"""
    params = load_parameters(params_file, horizon)
    seed = config.SEED if seed is None else seed
    drive = resolve_cycle(cycle, seed, params)
    powertrain = load_powertrain(params, fuel_map, voc_curve)
    controller = build_strategy(
        strategy, params, powertrain, drive, load_predictors(models), grid=parse_grid(grid, params)
    )
    log = Simulator(powertrain, SimConfig.from_parameters(params)).run(drive, controller)
    data_io.write_simlog(log, output or config.output_path('simlog.csv'), seed, params)

    if dump_lattice:
        solution = getattr(controller, 'solution', None) or getattr(controller, 'last_solution', None)
        if solution is None:
            click.echo(click.style("⚠️  Strategy produced no DP lattice", fg="yellow"))
        else:
            data_io.write_lattice(solution, dump_lattice, seed, params)

    click.echo(click.style(f"✅ {strategy} on {drive.name}: {log.total_fuel:.1f} g fuel", fg="green"))
    click.echo(f"   SOC: {log.soc_init:.4f} → {log.soc_final:.4f}")
    click.echo(f"   Fallback steps: {log.fallback_steps}")


@cli.command()
@click.option('--cycle', default='benchmark', show_default=True)
@click.option('--strategy', 'strategies', multiple=True, type=click.Choice(STRATEGIES),
              help='Strategies to compare (default: all)')
@click.option('--model', 'models', multiple=True, type=click.Path(), help='Predictor file (repeatable)')
@click.option('--dataset', type=click.Path(), default=None, help='Dataset for the RMSE table')
@click.option('--holdout', type=float, default=0.2, show_default=True)
@click.option('--grid', default=None, help="Uniform lattice 'm,q' instead of the SOC band")
@click.option('-o', '--output', default=None, help='Report directory (default <output dir>/report)')
@common_options
@powertrain_options
@handle_errors
def compare(cycle, strategies, models, dataset, holdout, grid, output, fuel_map, voc_curve, seed, params_file, horizon):
    """🏁 Compare strategies on one cycle"""
    params = load_parameters(params_file, horizon)
    seed = config.SEED if seed is None else seed
    drive = resolve_cycle(cycle, seed, params)
    predictors = load_predictors(models)
    powertrain = load_powertrain(params, fuel_map, voc_curve)
    evaluation = None
    if dataset:
        data, _ = data_io.read_dataset(dataset)
        evaluation = data.split(holdout)[1] or data

    report = compare_strategies(
        drive, strategies or STRATEGIES, predictors, params, evaluation,
        powertrain=powertrain, grid=parse_grid(grid, params),
    )
    out = Path(output) if output else config.output_path('report')
    data_io.write_comparison(report, out / 'comparison.csv', seed, params)
    if report.rmse:
        data_io.write_rmse(report.rmse, out / 'rmse.csv', seed, params)
    for name, log in report.logs.items():
        data_io.write_soc_trace(log, out / f'soc_{name}.csv', seed, params)
        data_io.write_engine_points(log, powertrain, out / f'engine_{name}.csv', seed, params)

    click.echo(click.style(f"✅ Comparison on {drive.name}", fg="green"))
    for row in report.rows:
        if row.error:
            click.echo(click.style(f"   {row.strategy:<12} failed: {row.error}", fg="red"))
        else:
            click.echo(
                f"   {row.strategy:<12} {row.equivalent_fuel:9.1f} g  "
                f"({100 * row.improvement:+.1f}%)  ΔSOC {row.delta_soc:+.4f}"
            )


if __name__ == "__main__":
    cli()
