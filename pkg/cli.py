"""
Command line front end for simcache-lab
Commands are mounted on the Flask CLI as the `lab` group and exposed as the
`simcache-lab` console script
"""
import logging
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
from flask import current_app
from flask.cli import AppGroup

from models import PRESETS, ExperimentConfig, Policy
from services.catalog import CatalogService
from services.cache_simulators import generate_irm_trace
from services.experiment_runner import (
    COMPARE_COLUMNS, ITERATION_COLUMNS, METHODS, NORM_COLUMNS, ExperimentRunner,
)
from utils import data_io
from utils.decorators import cli_errors
from utils.reproducibility import RunIdentity
from utils.results_export import ResultsExporter

logger = logging.getLogger(__name__)

lab = AppGroup('lab', help='Similarity cache prediction, simulation and comparison.')

SIMULATE_COLUMNS = ['policy', 'C', 'hit_rate', 'ci95', 'seed_count', 'exact_hit_rate', 'approximate_hit_rate']

# CLI flag -> ExperimentConfig field
OVERRIDES = {
    'grid': 'grid_side',
    'catalog': 'catalog_file',
    'alpha': 'alpha',
    'popularity': 'popularity_file',
    'popularity_trace': 'popularity_trace_file',
    'threshold': 'threshold',
    'tie_break': 'tie_break',
    'q_rule': 'q_rule',
    'q_exponent': 'q_exponent',
    'q_table': 'q_table_file',
    'beta': 'beta',
    'iterations': 'max_iterations',
    'r': 'trace_length',
    'trace': 'trace_file',
    'repetitions': 'repetitions',
    'seed': 'seed',
    'warmup': 'warmup_fraction',
    'workers': 'workers',
}


def experiment_options(f):
    """Options shared by every command that builds an ExperimentConfig"""
    options = [
        click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False),
                     help='TOML or JSON experiment file.'),
        click.option('--preset', type=click.Choice(sorted(PRESETS)), help='Named experiment preset.'),
        click.option('--grid', type=int, help='Grid side; the catalog is grid x grid points.'),
        click.option('--catalog', type=click.Path(exists=True, dir_okay=False), help='Catalog CSV id,x0,...'),
        click.option('--alpha', type=float, help='Hotspot popularity exponent.'),
        click.option('--hotspot', 'hotspots', type=(float, float), multiple=True, help='Hotspot point x y.'),
        click.option('--popularity', type=click.Path(exists=True, dir_okay=False), help='Popularity CSV id,weight.'),
        click.option('--popularity-trace', type=click.Path(exists=True, dir_okay=False),
                     help='Request log whose frequencies define popularity.'),
        click.option('-d', '--threshold', type=float, help='Dissimilarity threshold d.'),
        click.option('--tie-break', type=click.Choice(['auto', 'by_id', 'counterclockwise'])),
        click.option('--q-rule', type=click.Choice(['power', 'sim_lru', 'lru', 'table'])),
        click.option('--q-exponent', type=float, help='q = dis ** -exponent for the power rule.'),
        click.option('--q-table', type=click.Path(exists=True, dir_okay=False), help='CSV server,requester,q.'),
        click.option('-C', '--capacity', 'capacities', type=float, multiple=True, help='Cache capacity (repeatable).'),
        click.option('--beta', type=float, help='Damping factor in [0, 1).'),
        click.option('--tune-beta/--no-tune-beta', default=None, help='Choose beta from sampled Jacobians.'),
        click.option('--iterations', type=int, help='Maximum fixed-point iterations.'),
        click.option('--r', type=int, help='Requests per generated trace.'),
        click.option('--trace', type=click.Path(exists=True, dir_okay=False), help='Request trace file.'),
        click.option('--repetitions', type=int, help='Number of generated traces.'),
        click.option('--seed', type=int, help='Base seed; trace i uses seed + i.'),
        click.option('--warmup', type=float, help='Fraction of each trace discarded as warmup.'),
        click.option('--workers', type=int, help='Worker processes for repeated simulations.'),
    ]
    for option in reversed(options):
        f = option(f)

    @wraps(f)
    def decorated_function(*args, **kwargs):
        config = load_config(kwargs.pop('config_file'), kwargs.pop('preset'), kwargs)
        return f(*args, config=config, **kwargs)
    return decorated_function


def load_config(config_file: Optional[str], preset: Optional[str], flags: Dict[str, Any]) -> ExperimentConfig:
    """File values, then preset, then explicit flags; flags are consumed from the mapping"""
    data: Dict[str, Any] = data_io.load_experiment_config(config_file) if config_file else {}
    if preset:
        data['preset'] = preset
    for flag, name in OVERRIDES.items():
        value = flags.pop(flag, None)
        if value is not None:
            data[name] = value
    hotspots = flags.pop('hotspots', ())
    if hotspots:
        data['hotspots'] = [list(h) for h in hotspots]
    capacities = flags.pop('capacities', ())
    if capacities:
        data['capacities'] = list(capacities)
    tune = flags.pop('tune_beta', None)
    if tune is not None:
        data['tune_beta'] = tune
    if 'workers' not in data:
        data['workers'] = current_app.config.get('DEFAULT_WORKERS', 1)
    return ExperimentConfig.from_dict(data)


def make_runner() -> ExperimentRunner:
    return ExperimentRunner(current_app.config)


def emit(payload: Dict[str, Any], out: Optional[str]) -> None:
    text = ResultsExporter.write_json(payload, out)
    if out is None:
        click.echo(text)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

@lab.command('gen-catalog')
@cli_errors
@click.option('--grid', type=int, required=True, help='Grid side.')
@click.option('--out', type=click.Path(dir_okay=False), required=True, help='Catalog CSV path.')
def gen_catalog(grid, out):
    """Write a grid x grid catalog with integer coordinates."""
    catalog = CatalogService.grid_catalog(grid)
    data_io.write_catalog_csv(catalog, out)
    logger.info(f"gen-catalog: {len(catalog)} items written to {out}")
    emit({'items': len(catalog), 'path': out,
          'reproducibility': RunIdentity.block('gen-catalog', {'grid': grid})}, None)


@lab.command('gen-trace')
@cli_errors
@experiment_options
@click.option('--out', type=click.Path(dir_okay=False), required=True, help='Trace path (.gz compresses).')
@click.option('--timestamps', is_flag=True, help='Add unit-rate Poisson timestamps.')
def gen_trace(config, out, timestamps):
    """Write one IRM trace drawn from the configured popularity."""
    prepared = make_runner().prepare(config)
    trace = generate_irm_trace(prepared.popularity, config.trace_length, config.seed, timestamps)
    data_io.write_trace(trace, out)
    metadata = {
        'seed': config.seed,
        'r': config.trace_length,
        'alpha': config.alpha,
        'n_items': len(prepared.catalog),
        'timestamps': timestamps,
        'reproducibility': RunIdentity.block('gen-trace', config.to_dict(), [config.seed]),
    }
    ResultsExporter.write_json(metadata, Path(f"{out}.json"))
    logger.info(f"gen-trace: {len(trace)} requests written to {out}")


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

@lab.command('predict')
@cli_errors
@experiment_options
@click.option('--out', type=click.Path(dir_okay=False), help='JSON report path (stdout if omitted).')
@click.option('--trace-csv', type=click.Path(dir_okay=False), help='Per-iteration diagnostics CSV.')
@click.option('--states', is_flag=True, help='Include the full cache-state distribution (small catalogs).')
def predict(config, out, trace_csv, states):
    """Solve the RND-TTL fixed point for every capacity."""
    runner = make_runner()
    prepared = runner.prepare(config)
    reports: List[Dict[str, Any]] = []
    iteration_rows: List[Dict[str, Any]] = []
    for capacity in config.capacities:
        report, result = runner.predict(prepared, capacity)
        reports.append({'C': capacity, **report.to_dict()})
        if states:
            reports[-1]['state_distribution'] = runner.state_distribution(result)
        iteration_rows.extend(runner.iteration_rows(result, capacity))
    if trace_csv:
        ResultsExporter.write_csv(iteration_rows, trace_csv, ['C'] + ITERATION_COLUMNS)
    emit({'reports': reports,
          'reproducibility': RunIdentity.block('predict', config.to_dict(), [config.seed])}, out)
    logger.info(f"predict: {len(reports)} capacities, H={[round(r['H'], 5) for r in reports]}")


# ---------------------------------------------------------------------------
# Simulation and comparison
# ---------------------------------------------------------------------------

@lab.command('simulate')
@cli_errors
@experiment_options
@click.option('--policy', type=click.Choice([p.value for p in Policy]), default=Policy.RND_LRU.value)
@click.option('--timer', type=float, help='TTL timer for the ttl policy.')
@click.option('--csv', 'csv_path', type=click.Path(dir_okay=False), help='Result table path.')
@click.option('--out', type=click.Path(dir_okay=False), help='JSON summary path (stdout if omitted).')
def simulate(config, policy, timer, csv_path, out):
    """Trace-driven simulation of one policy at every capacity."""
    runner = make_runner()
    prepared = runner.prepare(config)
    policy = Policy(policy)
    traces = runner.make_traces(prepared, with_timestamps=policy == Policy.TTL)
    rows = []
    for capacity in config.capacities:
        stats = runner.simulate(prepared, capacity, policy, traces, timer)
        rows.append({'policy': policy.value, 'C': capacity, 'hit_rate': stats.mean_hit_rate,
                     'ci95': stats.ci95, 'seed_count': stats.repetitions,
                     'exact_hit_rate': stats.exact_hit_rate,
                     'approximate_hit_rate': stats.approximate_hit_rate})
    if csv_path:
        ResultsExporter.write_csv(rows, csv_path, SIMULATE_COLUMNS)
    seeds = [t.seed for t in traces if t.seed is not None]
    emit({'rows': rows, 'warmup_fraction': config.warmup_fraction,
          'reproducibility': RunIdentity.block('simulate', config.to_dict(), seeds)}, out)
    logger.info(f"simulate: {policy.value} over {len(traces)} traces and {len(rows)} capacities")


@lab.command('compare')
@cli_errors
@experiment_options
@click.option('--method', 'methods', type=click.Choice(METHODS), multiple=True,
              help='Method to include (repeatable; default all applicable).')
@click.option('--csv', 'csv_path', type=click.Path(dir_okay=False), help='Comparison table path.')
@click.option('--xlsx', 'xlsx_path', type=click.Path(dir_okay=False), help='Excel workbook path.')
@click.option('--occupancy-dump', type=float, help='Capacity for the per-item occupancy dump.')
@click.option('--dump-csv', type=click.Path(dir_okay=False), help='Per-item occupancy CSV path.')
@click.option('--out', type=click.Path(dir_okay=False), help='JSON summary path (stdout if omitted).')
def compare(config, methods, csv_path, xlsx_path, occupancy_dump, dump_csv, out):
    """Empirical, model and baseline hit rates, one row per (C, method)."""
    runner = make_runner()
    prepared = runner.prepare(config)
    chosen = runner.resolve_methods(prepared, list(methods) if methods else None)
    needs_traces = occupancy_dump is not None or any(m.startswith('exp_') for m in chosen)
    traces = runner.make_traces(prepared) if needs_traces else None

    rows = runner.compare(prepared, chosen, traces)
    sheets = {'compare': rows}
    if csv_path:
        ResultsExporter.write_csv(rows, csv_path, COMPARE_COLUMNS)
    if occupancy_dump is not None:
        dump = runner.occupancy_dump(prepared, occupancy_dump, traces)
        sheets['occupancy'] = dump
        if dump_csv:
            ResultsExporter.write_csv(dump, dump_csv)

    seeds = [t.seed for t in traces if t.seed is not None] if traces else [config.seed]
    reproducibility = RunIdentity.block('compare', config.to_dict(), seeds)
    if xlsx_path:
        ResultsExporter.write_xlsx(sheets, xlsx_path, metadata={**reproducibility, 'config': config.to_dict()})
    emit({'rows': rows, 'warmup_fraction': config.warmup_fraction, 'reproducibility': reproducibility}, out)
    logger.info(f"compare: {len(rows)} rows for methods {', '.join(chosen)}")


# ---------------------------------------------------------------------------
# Damping and Jacobian diagnostics
# ---------------------------------------------------------------------------

@lab.command('tune-beta')
@cli_errors
@experiment_options
@click.option('--samples', type=int, help='Sampled points of the capped simplex per capacity.')
@click.option('--out', type=click.Path(dir_okay=False), help='JSON path (stdout if omitted).')
def tune_beta(config, samples, out):
    """Choose beta from the damping intervals of sampled Jacobians."""
    if samples is not None:
        config.beta_samples = samples
    runner = make_runner()
    prepared = runner.prepare(config)
    results = []
    for capacity in config.capacities:
        tuning = runner.tune(prepared, capacity)
        results.append({
            'C': capacity,
            'beta': tuning.beta,
            'verified': tuning.verified,
            'reason': tuning.reason,
            'skipped': tuning.skipped,
            'intersection': tuning.intersection,
            'samples': [
                {'gamma': i.gamma, 'eta': i.eta, 'discriminant': i.discriminant,
                 'lower': i.lower, 'upper': i.upper, 'spectral_norm': i.spectral_norm}
                for i in tuning.intervals
            ],
        })
    emit({'tuning': results,
          'reproducibility': RunIdentity.block('tune-beta', config.to_dict(), [config.seed])}, out)
    logger.info(f"tune-beta: {[(r['C'], round(r['beta'], 4), r['verified']) for r in results]}")


@lab.command('analyze-jacobian')
@cli_errors
@experiment_options
@click.option('--csv', 'csv_path', type=click.Path(dir_okay=False), help='Norm-vs-capacity table path.')
@click.option('--out', type=click.Path(dir_okay=False), help='JSON path (stdout if omitted).')
def analyze_jacobian(config, csv_path, out):
    """Spectral, 1 and infinity norms of J_G_beta at the LRU start for each capacity."""
    runner = make_runner()
    rows = runner.jacobian_norms(runner.prepare(config))
    if csv_path:
        ResultsExporter.write_csv(rows, csv_path, NORM_COLUMNS)
    emit({'norms': rows,
          'reproducibility': RunIdentity.block('analyze-jacobian', config.to_dict(), [config.seed])}, out)
    logger.info(f"analyze-jacobian: spectral norms {[round(r['spectral'], 4) for r in rows]}")


@lab.command('check-cover')
@cli_errors
@experiment_options
@click.option('--mode', type=click.Choice(['auto', 'exact', 'heuristic']), default='auto')
@click.option('--out', type=click.Path(dir_okay=False), help='JSON path (stdout if omitted).')
def check_cover(config, mode, out):
    """Check the cover condition that makes t_C unique on the capped simplex."""
    runner = make_runner()
    prepared = runner.prepare(config)
    rows = []
    for capacity in config.capacities:
        result = runner.cover_check(prepared, capacity, None if mode == 'auto' else mode)
        rows.append({'C': capacity, 'mode': result.mode, 'status': result.status.value,
                     'covered': result.covered, 'required': result.required,
                     'witness': list(result.witness)})
    emit({'cover': rows,
          'reproducibility': RunIdentity.block('check-cover', config.to_dict(), [config.seed])}, out)
    logger.info(f"check-cover: {[(r['C'], r['status']) for r in rows]}")


def main() -> None:
    """Console entry point: run the `lab` group inside an application context"""
    from main import create_app

    app = create_app()
    with app.app_context():
        lab.main(prog_name='simcache-lab')
