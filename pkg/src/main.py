"""
Main application for the homogenization workbench.
Orchestrates structure checks, cell solves, tabulation, parabolic solves and
the corrector convergence study from JSON experiment documents.
"""

import os
import sys
import copy
import json
import argparse
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

# Add current directory to Python path
sys.path.append(os.path.dirname(__file__))

from cell_problems import ELLIPTIC, CellGrid, SolverOptions, energy_identity_check, regime_for, solve_cell
from effective_operator import DirectEffectiveFlux, cached_table, save_table, verify_b_estimates
from errors import (ConfigurationError, HomogenizationError, SchemaError, StudyError,
                    exit_code_for)
from flux_models import FluxModel, builtin_models, check_structure, check_time_modulus, time_gate
from multiscale_fields import (CellSolutionCache, SpaceTimeGrid, assemble_corrector_field,
                               corrector_diagnostics, fields_frame, flux_weak_gap, mesh_average, remainder)
from parabolic_solver import (FieldSpec, ProblemSpec, energy_balance, gradient_integrability_probe,
                              restrict, solve_fine, solve_homogenized, time_translation_probe)
from report_generator import ReportGenerator, rerender, rows_frame

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
logger = logging.getLogger(__name__)


# -- experiment documents ---------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


class CellGridSettings(_Strict):
    n_space: int = Field(64, ge=4)
    n_time: int = Field(8, ge=2)


class FineGridSettings(_Strict):
    elements_per_cell: int = Field(32, ge=2)
    steps_per_period: int = Field(8, ge=1)


class GridSettings(_Strict):
    cell: CellGridSettings = Field(default_factory=CellGridSettings)
    fine: FineGridSettings = Field(default_factory=FineGridSettings)


class TableSettings(_Strict):
    box: Union[Tuple[float, float], List[Tuple[float, float]]]
    spacing: float = Field(gt=0)


class ProblemSettings(_Strict):
    horizon: float = Field(0.5, gt=0)
    source: Dict[str, Any] = Field(default_factory=lambda: {'type': 'constant', 'value': 1.0})
    initial: Dict[str, Any] = Field(default_factory=lambda: {'type': 'constant', 'value': 0.0})


class Tolerances(_Strict):
    solver: Optional[float] = Field(None, gt=0)
    period: float = Field(1e-8, gt=0)
    identity: float = Field(1e-6, gt=0)
    structure: float = Field(0.0, ge=0)


class ExperimentConfig(_Strict):
    """Single JSON experiment document; unknown keys are rejected."""
    model: Union[str, Dict[str, Any]]
    mu: float = Field(gt=0)
    epsilons: List[float] = Field(default_factory=list)
    problem: ProblemSettings = Field(default_factory=ProblemSettings)
    grids: GridSettings = Field(default_factory=GridSettings)
    table: Optional[TableSettings] = None
    quantization: Optional[float] = Field(None, gt=0)
    tolerances: Tolerances = Field(default_factory=Tolerances)
    ceilings: Dict[str, float] = Field(default_factory=dict)
    cache_budget: Optional[int] = Field(None, ge=1)
    structure_samples: int = Field(10000, ge=1)
    export_fields: bool = False
    xi: Optional[List[float]] = None
    output_dir: str = 'results'
    seed: int = 0

    @field_validator('epsilons')
    @classmethod
    def _nested_epsilons(cls, value: List[float]) -> List[float]:
        for eps in value:
            if not 0 < eps <= 1:
                raise ValueError(f"epsilon {eps} is not in (0, 1]")
            inverse = 1.0 / eps
            if abs(inverse - round(inverse)) > 1e-9 * inverse:
                raise ValueError(f"1/epsilon must be an integer, got 1/{eps} = {inverse}")
        if any(b >= a for a, b in zip(value, value[1:])):
            raise ValueError("epsilons must be strictly decreasing")
        return value


def _json_path(loc) -> str:
    path = '$'
    for part in loc:
        path += f'[{part}]' if isinstance(part, int) else f'.{part}'
    return path


def parse_experiment(data: Dict) -> ExperimentConfig:
    """Validate an experiment document.

    Raises:
        SchemaError: Carries the JSON paths of every offending key
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        paths = [_json_path(error['loc']) for error in e.errors()]
        details = '; '.join(f"{_json_path(error['loc'])}: {error['msg']}" for error in e.errors())
        raise SchemaError(f"invalid experiment config: {details}", paths) from e


def load_experiment(path: str) -> ExperimentConfig:
    with open(path, 'r') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path} is not valid JSON: {e}", ['$']) from e
    config = parse_experiment(data)
    logger.info(f"Experiment loaded from {path}")
    return config


def resolve_model(config: ExperimentConfig) -> FluxModel:
    if isinstance(config.model, str):
        presets = builtin_models()
        if config.model not in presets:
            raise SchemaError(f"unknown built-in model '{config.model}'; choose one of {sorted(presets)}",
                              ['$.model'])
        return presets[config.model]
    try:
        return FluxModel.from_dict(config.model)
    except (ConfigurationError, KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"invalid model descriptor: {e}", ['$.model']) from e


def build_problem(config: ExperimentConfig, dim: int, **flux) -> ProblemSpec:
    fields = {}
    for name in ('source', 'initial'):
        try:
            fields[name] = FieldSpec.from_dict(getattr(config.problem, name), dim)
        except (KeyError, TypeError, ValueError, ConfigurationError) as e:
            raise SchemaError(f"invalid {name} descriptor: {e}", [f'$.problem.{name}']) from e
    return ProblemSpec(dim=dim, horizon=config.problem.horizon, **fields, **flux)


def solver_options(config: ExperimentConfig, settings: Dict) -> SolverOptions:
    solver = settings.get('solver', {})
    return SolverOptions(tol=config.tolerances.solver, max_iter=int(solver.get('max_iter', 2000)),
                         period_tol=config.tolerances.period,
                         max_periods=int(solver.get('max_periods', 200)),
                         identity_tol=config.tolerances.identity)


def cell_grid(config: ExperimentConfig, dim: int) -> CellGrid:
    return CellGrid(dim=dim, n_space=config.grids.cell.n_space, n_time=config.grids.cell.n_time)


def fine_grid(config: ExperimentConfig, epsilon: float, dim: int) -> SpaceTimeGrid:
    """n_x = elements_per_cell / eps and steps_per_period steps per eps^mu-period."""
    fine = config.grids.fine
    horizon = config.problem.horizon
    n_x = int(round(fine.elements_per_cell / epsilon))
    n_t = max(1, int(round(fine.steps_per_period * horizon / epsilon ** config.mu)))
    return SpaceTimeGrid(dim=dim, T=horizon, n_x=n_x, n_t=n_t, epsilon=epsilon, mu=config.mu)


@dataclass
class ConvergenceReport:
    """One row per epsilon, in the order of the study."""
    rows: List[Dict] = field(default_factory=list)
    diagnostics: Dict[str, Dict] = field(default_factory=dict)
    files: List[str] = field(default_factory=list)

    def frame(self):
        return rows_frame(self.rows)


# -- application settings ---------------------------------------------------

_ENV = re.compile(r'\$\{([^}]+)\}')


def _expand_env(value):
    if isinstance(value, dict):
        return {k: _expand_env(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_expand_env(v) for v in value]
    if isinstance(value, str):
        return _ENV.sub(lambda m: os.getenv(m.group(1), ''), value)
    return value


def _merge(base: Dict, override: Dict) -> Dict:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class HomogenizationWorkbench:
    """Main application class: one instance per CLI invocation."""

    def __init__(self, settings_path: str = "config.yaml", threads: Optional[int] = None):
        """Initialize the workbench.

        Args:
            settings_path: Path to the YAML application settings
            threads: Worker threads; overrides the settings file
        """
        self.settings = self.load_settings(settings_path)
        self.threads = max(1, int(threads or self.settings.get('threads', 1)))
        self.solve_counts = {'fine': 0, 'homogenized': 0}

    def load_settings(self, settings_path: str) -> Dict:
        """Load application settings from YAML, merged over the defaults."""
        try:
            # Try relative path first, then the repository root
            if not os.path.exists(settings_path):
                settings_path = os.path.join(os.path.dirname(__file__), '..', settings_path)

            with open(settings_path, 'r') as f:
                settings = yaml.safe_load(f) or {}

            logger.info(f"Settings loaded from {settings_path}")
            return _merge(self.default_settings(), _expand_env(settings))

        except (OSError, yaml.YAMLError) as e:
            logger.warning(f"Failed to load settings, using defaults: {e}")
            return self.default_settings()

    def default_settings(self) -> Dict:
        return {
            'logging': {'level': 'INFO'},
            'solver': {'max_iter': 2000, 'max_periods': 200},
            'cache': {'budget': 10000},
            'study': {'translation_shifts': [0.015625, 0.0625, 0.25]},
            'threads': 1,
        }

    # -- subcommands --------------------------------------------------------

    def check_structure(self, config: ExperimentConfig) -> Dict:
        model = resolve_model(config)
        report = check_structure(model, config.structure_samples, config.seed, config.tolerances.structure)
        result = {'model': model.family, 'structure': report.to_dict(), 'passed': report.passed}
        if regime_for(config.mu) == ELLIPTIC and model.time_dependent:
            if model.time_modulus is None:
                result['time_modulus'] = {'passed': False, 'reason': 'no time_modulus descriptor'}
            else:
                result['time_modulus'] = check_time_modulus(model, config.structure_samples,
                                                            config.seed).to_dict()
            result['passed'] = result['passed'] and result['time_modulus']['passed']
        logger.info(f"Structure check {'passed' if result['passed'] else 'failed'}")
        return result

    def cell_solve(self, config: ExperimentConfig, xi: Optional[List[float]], out_dir: Optional[str]) -> Dict:
        model = resolve_model(config)
        xi = xi or config.xi or [1.0] * model.dim
        opts = solver_options(config, self.settings)
        solution = solve_cell(model, config.mu, xi, cell_grid(config, model.dim), opts)
        identity = energy_identity_check(solution, model)
        if identity > opts.identity_tol:
            logger.warning(f"Energy identity residual {identity:.3e} above {opts.identity_tol:g}")
        result = {**solution.to_dict(), 'energy_identity': identity}
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, 'cell_solution.csv')
            solution.to_frame().to_csv(path, index=False)
            result['file'] = path
        return result

    def effective_evaluator(self, config: ExperimentConfig, model: FluxModel, opts: SolverOptions,
                            out_dir: str):
        grid = cell_grid(config, model.dim)
        if config.table is None:
            if not model.is_linear:
                raise SchemaError("nonlinear models need a 'table' section for the homogenized flux",
                                  ['$.table'])
            logger.info("Using direct cell solves on the unit vectors for b")
            return DirectEffectiveFlux(model, config.mu, grid, opts)
        return cached_table(os.path.join(out_dir, 'tables'), model, config.mu, config.table.box,
                            config.table.spacing, grid, opts, threads=self.threads)

    def tabulate(self, config: ExperimentConfig, out_dir: str) -> Dict:
        if config.table is None:
            raise SchemaError("tabulate needs a 'table' section with box and spacing", ['$.table'])
        model = resolve_model(config)
        opts = solver_options(config, self.settings)
        table = self.effective_evaluator(config, model, opts, out_dir)
        json_path, csv_path = save_table(table, os.path.join(out_dir, 'flux_table.json'))
        estimates = verify_b_estimates(table, model.constants, 1000, config.seed)
        return {'files': [json_path, csv_path], 'nodes': int(len(table.nodes())),
                'estimates': estimates.to_dict()}

    def solve(self, config: ExperimentConfig, out_dir: str, epsilon: Optional[float] = None,
              homogenized: bool = False) -> Dict:
        model = resolve_model(config)
        opts = solver_options(config, self.settings)
        if epsilon is None:
            if not config.epsilons:
                raise SchemaError("no epsilon given and the config lists none", ['$.epsilons'])
            epsilon = config.epsilons[-1] if homogenized else config.epsilons[0]
        grid = fine_grid(config, epsilon, model.dim)
        if homogenized:
            effective = self.effective_evaluator(config, model, opts, out_dir)
            result = solve_homogenized(build_problem(config, model.dim, effective=effective), grid, opts)
            self.solve_counts['homogenized'] += 1
        else:
            result = solve_fine(build_problem(config, model.dim, model=model), grid, opts)
            self.solve_counts['fine'] += 1
        generator = ReportGenerator(out_dir)
        trajectory = os.path.join(out_dir, f'trajectory_{result.kind}.csv')
        result.trajectory_frame().to_csv(trajectory, index=False)
        ledger = generator.write_ledger(result.ledger, result.kind)
        return {'kind': result.kind, 'grid': grid.to_dict(), 'energy_residual': energy_balance(result),
                'max_step_residual': float(result.step_residuals.max()) if len(result.step_residuals) else 0.0,
                'files': [trajectory, ledger]}

    def run_study(self, config: ExperimentConfig, out_dir: Optional[str] = None) -> ConvergenceReport:
        """Fine solve, corrector and remainder for every epsilon against one homogenized solve.

        Raises:
            SchemaError: The config lists no epsilons
            StudyError: A stage failed; completed rows are written before raising
        """
        if not config.epsilons:
            raise SchemaError("epsilons must list at least one value", ['$.epsilons'])
        out_dir = out_dir or config.output_dir
        model = resolve_model(config)
        dim = model.dim
        opts = solver_options(config, self.settings)
        generator = ReportGenerator(out_dir)
        report = ConvergenceReport()
        meta = {'model': config.model if isinstance(config.model, str) else model.family,
                'mu': config.mu, 'regime': regime_for(config.mu), 'homogenized_solves': 0}
        budget = config.cache_budget or int(self.settings['cache']['budget'])
        shifts = [s * config.problem.horizon for s in self.settings['study']['translation_shifts']]

        stage = 'structure_check'
        executor = ThreadPoolExecutor(max_workers=self.threads)
        try:
            structure = check_structure(model, config.structure_samples, config.seed,
                                        config.tolerances.structure)
            if not structure.passed:
                raise ConfigurationError(f"model fails the structure check: {structure.to_dict()}")
            if regime_for(config.mu) == ELLIPTIC:
                time_gate(model)

            stage = 'effective_flux'
            effective = self.effective_evaluator(config, model, opts, out_dir)
            grids = [fine_grid(config, eps, dim) for eps in config.epsilons]

            stage = 'homogenized_solve'
            u_hom = solve_homogenized(build_problem(config, dim, effective=effective), grids[-1], opts)
            self.solve_counts['homogenized'] += 1
            meta['homogenized_solves'] = self.solve_counts['homogenized']
            logger.info(f"Homogenized solve count: {self.solve_counts['homogenized']}")
            generator.write_ledger(u_hom.ledger, 'homogenized')
            energy_hom = energy_balance(u_hom)

            cache = CellSolutionCache(model, config.mu, cell_grid(config, dim), opts,
                                      quantization=config.quantization, budget=budget)
            fine_problem = build_problem(config, dim, model=model)
            stage = 'fine_solve'
            futures = [executor.submit(solve_fine, fine_problem, grid, opts) for grid in grids]

            for eps, grid, future in zip(config.epsilons, grids, futures):
                stage = f'fine_solve eps={eps:g}'
                u_fine = future.result()
                self.solve_counts['fine'] += 1
                generator.write_ledger(u_fine.ledger, f'fine_eps_{eps:g}')

                stage = f'corrector eps={eps:g}'
                started = time.perf_counter()
                u_hom_eps = restrict(u_hom, grid)
                grad_error = (u_fine.gradient - u_hom_eps.gradient).lp_norm(model.p)
                averaged = mesh_average(u_hom_eps.gradient, grid)
                averaged_error = (u_fine.gradient - averaged).lp_norm(model.p)
                corrector = assemble_corrector_field(u_hom_eps, cache, grid, config.quantization,
                                                     threads=self.threads)
                r, remainder_norm = remainder(u_fine, corrector, model.p)
                if config.export_fields:
                    generator.write_fields(fields_frame({'corrector': corrector, 'averaged': averaged,
                                                         'remainder': r}), f'fields_eps_{eps:g}')

                stage = f'diagnostics eps={eps:g}'
                diagnostics = corrector_diagnostics(cache, corrector, model.constants, config.ceilings,
                                                    seed=config.seed)
                entry = diagnostics.to_dict()
                entry['flags'] = list(diagnostics.flags)
                entry['flux_weak_gap'] = flux_weak_gap(u_fine, u_hom_eps, model, effective, grid)
                entry['time_translation'] = {f'{s:g}': v for s, v in
                                             zip(shifts, time_translation_probe(u_fine, shifts))}
                entry['gradient_integrability'] = gradient_integrability_probe(u_fine)
                report.diagnostics[f'{eps:g}'] = entry

                report.rows.append({
                    'epsilon': eps,
                    'grad_error_lp': grad_error,
                    'averaged_error_lp': averaged_error,
                    'remainder_lp': remainder_norm,
                    'energy_residual_fine': energy_balance(u_fine),
                    'energy_residual_hom': energy_hom,
                    'cell_cache_entries': len(cache),
                    'wall_time_s': u_fine.wall_time_s + time.perf_counter() - started,
                })
                logger.info(f"eps={eps:g}: grad error {grad_error:.4e}, remainder {remainder_norm:.4e}")

        except (HomogenizationError, OSError) as e:
            logger.error(f"Study aborted during {stage}: {e}")
            generator.write_study(report.rows, meta, report.diagnostics,
                                  failure={'stage': stage, 'message': str(e)})
            raise StudyError(stage, e, report.rows) from e
        finally:
            executor.shutdown(wait=True, cancel_futures=True)

        report.files = generator.write_study(report.rows, meta, report.diagnostics)
        logger.info(f"Study finished: {len(report.rows)} rows, "
                    f"{self.solve_counts['fine']} fine solve(s), {self.solve_counts['homogenized']} homogenized")
        return report

    def report(self, csv_path: str, out_dir: Optional[str] = None) -> str:
        return rerender(csv_path, out_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='homog', description="Homogenization workbench for monotone parabolic operators")
    parser.add_argument('--settings', default='config.yaml', help='Path to the YAML application settings')
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level (overrides the settings file)')
    sub = parser.add_subparsers(dest='command', required=True)

    def command(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', required=needs_config, help='Path to the JSON experiment document')
        p.add_argument('--out', help='Output directory (defaults to output_dir of the config)')
        p.add_argument('--threads', type=int, help='Worker threads')
        p.add_argument('--seed', type=int, help='Override the config seed')
        return p

    command('check-structure', 'Sample the structure conditions of the model')
    cell = command('cell-solve', 'Solve one cell problem and print b(xi)')
    cell.add_argument('--xi', type=float, nargs='+', help='Macroscopic gradient')
    command('tabulate', 'Tabulate b on the configured box')
    solve = command('solve', 'Run a fine or homogenized parabolic solve')
    solve.add_argument('--epsilon', type=float, help='Epsilon of the fine problem (default: first listed)')
    solve.add_argument('--homogenized', action='store_true', help='Solve the homogenized problem')
    command('study', 'Run the corrector convergence study')
    report = command('report', 'Re-render plots from an existing convergence report', needs_config=False)
    report.add_argument('--csv', help='Convergence report CSV (default: <out>/convergence_report.csv)')
    return parser


def _print(payload: Dict):
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    # INFO until the settings file has named its own level
    logging.basicConfig(format=LOG_FORMAT)
    root = logging.getLogger()
    root.setLevel(args.log_level or logging.INFO)
    workbench = HomogenizationWorkbench(args.settings, threads=args.threads)
    level = args.log_level or str(workbench.settings['logging'].get('level', 'INFO')).upper()
    root.setLevel(getattr(logging, level, logging.INFO))

    try:
        config = None
        if args.config:
            config = load_experiment(args.config)
            if args.seed is not None:
                config = config.model_copy(update={'seed': args.seed})
        out_dir = args.out or (config.output_dir if config else None)

        if args.command == 'check-structure':
            result = workbench.check_structure(config)
            _print(result)
            return 0 if result['passed'] else 1
        if args.command == 'cell-solve':
            result = workbench.cell_solve(config, args.xi, args.out)
            print(f"b({', '.join(f'{x:g}' for x in result['xi'])}) = "
                  f"{', '.join(f'{b:.6f}' for b in result['b'])}")
            _print(result)
        elif args.command == 'tabulate':
            _print(workbench.tabulate(config, out_dir))
        elif args.command == 'solve':
            _print(workbench.solve(config, out_dir, args.epsilon, args.homogenized))
        elif args.command == 'study':
            report = workbench.run_study(config, out_dir)
            print(report.frame().to_string(index=False))
        elif args.command == 'report':
            csv_path = args.csv or os.path.join(out_dir or '.', 'convergence_report.csv')
            print(workbench.report(csv_path, args.out))
        return 0

    except (HomogenizationError, OSError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
