"""
Batch command-line front end.

    eopr fit       fit EOpR and baselines, write estimates, band, effects, scores
    eopr simulate  draw a synthetic panel plus its noiseless truth
    eopr placebo   placebo-in-space runs with every control cast as treated
    eopr ablate    EOpR across a lambda grid (including 0)
    eopr sweep     Monte-Carlo sweeps over simulation configs
    eopr align     align dated series around each unit's intervention date

Exit codes: 0 success, 2 validation error, 3 numerical failure, 1 anything else.
"""
import argparse
import sys
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml
from rich.console import Console
from rich.table import Table

from src.config.settings import (
    OUTPUT_FORMATS,
    SWEEP_PRESETS,
    RunConfig,
    Settings,
)
from src.core.eopr import effect_series
from src.core.estimators import build_estimators
from src.core.evaluation import (
    inject_effect,
    lambda_ablation,
    placebo_run,
    score,
    sweep,
)
from src.core.exceptions import ConfigurationError, NumericalError, ValidationError
from src.core.panel import (
    align_by_intervention,
    load_alignment_spec,
    load_panel,
    preprocess_alignment,
    save_panel,
)
from src.core.simulation import PRESETS, SimulationConfig, generate_panel
from src.utils.logger import LogContext, LoggerSetup
from src.utils.reporter import ReportWriter


__version__ = "1.0.0"
__description__ = "Ellipsoidal optimal recovery synthetic control"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

# argparse destinations that are not configuration keys
_CLI_ONLY = {'command', 'config', 'log_dir', 'verbose', 'quiet'}

ESTIMATE_COLUMNS = ['time', 'observed', 'method', 'estimate', 'band_lower', 'band_upper']
BAND_COLUMNS = ['time', 'lower', 'center', 'upper', 'half_width']
EFFECT_COLUMNS = ['time', 'method', 'effect']
SCORE_COLUMNS = ['method', 'pre_rmse', 'post_rmse', 'reference']
PLACEBO_COLUMNS = ['unit', 'is_treated', 'time', 'gap']
PLACEBO_SUMMARY_COLUMNS = ['unit', 'is_treated', 'post_rmse', 'rank', 'error']
ABLATION_COLUMNS = ['lambda', 'pre_rmse', 'post_rmse', 'error']
SWEEP_COLUMNS = ['config', 'n_units', 't_total', 't0', 'method', 'repeats', 'ok', 'failed',
                 'pre_rmse_mean', 'pre_rmse_std', 'pre_rmse_median',
                 'post_rmse_mean', 'post_rmse_std', 'post_rmse_median']
SWEEP_RUN_COLUMNS = ['config', 'seed', 'method', 'pre_rmse', 'post_rmse', 'error']


class EoprCLI:
    """Command-line interface for the EOpR toolkit"""

    def __init__(self, console: Optional[Console] = None):
        self.console = console or Console()
        self.logger = LoggerSetup.get_logger('eopr.cli')
        self.verbose = False

    # ------------------------------------------------------------------
    # Parser

    def create_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog='eopr',
            description=__description__,
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="""
Examples:
  # Simulate a panel, then fit every method on it
  %(prog)s simulate --n-units 50 --t-total 200 --t0 20 --seed 7 --out sim/
  %(prog)s fit --input sim/panel.csv --treated treated --t0 20 --out fit/

  # Placebo runs with an injected step effect
  %(prog)s placebo --input sim/panel.csv --treated treated --t0 20 --methods eopr \\
      --effect-shape step --effect-magnitude 5 --out placebo/

  # Lambda ablation and a T0-fraction sweep
  %(prog)s ablate --input sim/panel.csv --treated treated --t0 20 --out ablate/
  %(prog)s sweep --preset t0-fraction --repeats 10 --out sweep/
            """
        )
        parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')

        common = argparse.ArgumentParser(add_help=False)
        group = common.add_argument_group('Run options')
        group.add_argument('--config', help='Flat JSON config file (flags override it)')
        group.add_argument('--out', help='Output directory')
        group.add_argument('--format', choices=OUTPUT_FORMATS, help='Report format')
        group.add_argument('--seed', type=int, help='Random seed')
        group.add_argument('--threads', type=int, help='Worker threads (default: EOPR_THREADS)')
        group.add_argument('--log-dir', help='Also write text and JSON logs here')
        group.add_argument('--verbose', action='store_true', help='Debug output and tracebacks')
        group.add_argument('--quiet', action='store_true', help='Warnings and errors only')

        methods = argparse.ArgumentParser(add_help=False)
        group = methods.add_argument_group('Method options')
        group.add_argument('--methods', help='Comma-separated subset of eopr,sc,dsc,rsc')
        group.add_argument('--lambda-grid', dest='lambda_grid',
                           help='Comma-separated lambda grid in (0, 1] for selection')
        group.add_argument('--lambda', dest='lambda', type=float,
                           help='Fixed lambda (skips selection)')
        group.add_argument('--holdout-fraction', dest='holdout_fraction', type=float)
        group.add_argument('--normalize', choices=['none', 'treated_pre_max', 'zscore'])
        group.add_argument('--rsc-cutoff-ratio', dest='rsc_cutoff_ratio', type=float)
        group.add_argument('--rsc-ridge', dest='rsc_ridge', type=float)
        group.add_argument('--qp-max-iters', dest='qp_max_iters', type=int)
        group.add_argument('--qp-tol', dest='qp_tol', type=float)

        data = argparse.ArgumentParser(add_help=False)
        group = data.add_argument_group('Input options')
        group.add_argument('--input', help='Panel file')
        group.add_argument('--layout', choices=['wide', 'long'])
        group.add_argument('--treated', help='Label of the treated unit')
        group.add_argument('--t0', type=int, help='Number of pre-intervention periods')
        group.add_argument('--truth', help='Noiseless wide panel for truth-referenced scores')
        group.add_argument('--controls', help='Comma-separated donor units (default: every control)')

        simulation = argparse.ArgumentParser(add_help=False)
        group = simulation.add_argument_group('Simulation options')
        group.add_argument('--pool-size', dest='pool_size', type=int)
        group.add_argument('--noise-sigma', dest='noise_sigma', type=float)
        group.add_argument('--no-treated-noise', dest='treated_noise',
                           action='store_const', const=False, default=None)
        group.add_argument('--weight-mode', dest='weight_mode', choices=['equal', 'dirichlet'])

        sub = parser.add_subparsers(dest='command', metavar='COMMAND')
        sub.required = True

        sub.add_parser('fit', parents=[common, data, methods],
                       help='Fit methods and write estimates, band, effects and scores')

        p = sub.add_parser('simulate', parents=[common, simulation], help='Generate a synthetic panel')
        p.add_argument('--n-units', dest='n_units', type=int)
        p.add_argument('--t-total', dest='t_total', type=int)
        p.add_argument('--t0', type=int)

        p = sub.add_parser('placebo', parents=[common, data, methods], help='Placebo-in-space runs')
        p.add_argument('--effect-shape', dest='effect_shape', choices=['step', 'ramp'],
                       help='Inject a known effect into the treated post-period first')
        p.add_argument('--effect-magnitude', dest='effect_magnitude', type=float)

        p = sub.add_parser('ablate', parents=[common, data, methods], help='Lambda ablation')
        p.add_argument('--ablation-grid', dest='ablation_grid',
                       help='Comma-separated lambdas (0 allowed)')
        p.add_argument('--reference', choices=['observed', 'truth'])

        p = sub.add_parser('sweep', parents=[common, methods, simulation], help='Simulation sweeps')
        p.add_argument('--preset', choices=SWEEP_PRESETS)
        p.add_argument('--sweep-config', dest='sweep_config',
                       help='YAML list of simulation configs')
        p.add_argument('--repeats', type=int)
        p.add_argument('--reference', choices=['observed', 'truth'])

        p = sub.add_parser('align', parents=[common], help='Align dated series around interventions')
        p.add_argument('--input', help='Long unit,time,value file with ISO dates')
        p.add_argument('--dates', help='unit,intervention_date file')
        p.add_argument('--treated')
        p.add_argument('--pre-days', dest='pre_days', type=int)
        p.add_argument('--post-days', dest='post_days', type=int)
        p.add_argument('--smoothing-window', dest='smoothing_window', type=int)
        p.add_argument('--no-increments', dest='increments',
                       action='store_const', const=False, default=None,
                       help='Series are already daily values, not cumulative counts')

        return parser

    def load_configuration(self, args: argparse.Namespace) -> RunConfig:
        """Defaults < config file < command-line flags"""
        settings = Settings(args.config)
        overrides = {
            key: value for key, value in vars(args).items()
            if key not in _CLI_ONLY and value is not None
        }
        settings.update(overrides)
        return RunConfig.from_settings(args.command, settings)

    # ------------------------------------------------------------------
    # Subcommands

    def cmd_fit(self, config: RunConfig) -> ReportWriter:
        panel = self._load_input(config)
        truth = self._load_truth(config, panel)
        estimators = build_estimators(config.methods, config.estimator_settings())

        results = {}
        for name, estimator in estimators.items():
            with LogContext(self.logger, f'fit {name}', **panel.describe()):
                results[name] = estimator.fit(panel)

        writer = ReportWriter(config.out, config.format)
        times = panel.time_labels
        score_rows, effect_rows, summary_methods = [], [], {}

        for name, est in results.items():
            has_band = getattr(est, 'has_band', False)
            writer.write_table(f'estimate_{name}', 'estimate', ESTIMATE_COLUMNS, [
                {
                    'time': t,
                    'observed': panel.treated[i],
                    'method': name,
                    'estimate': est.s_hat[i],
                    'band_lower': est.band_lower[i] if has_band else None,
                    'band_upper': est.band_upper[i] if has_band else None,
                }
                for i, t in enumerate(times)
            ])
            if has_band:
                writer.write_table(f'band_{name}', 'band', BAND_COLUMNS, [
                    {'time': t, 'lower': est.band_lower[i], 'center': est.s_hat[i],
                     'upper': est.band_upper[i], 'half_width': est.half_widths[i]}
                    for i, t in enumerate(times)
                ])

            tau = effect_series(est, panel.treated, panel.t0)
            effect_rows.extend(
                {'time': t, 'method': name, 'effect': value}
                for t, value in zip(times[panel.t0:], tau)
            )

            report = score(panel, est, method=name)
            score_rows.append(report.to_dict())
            if truth is not None:
                score_rows.append(score(panel, est, truth.treated, name, 'truth').to_dict())

            summary_methods[name] = self._method_summary(panel, est)

        writer.write_table('effects', 'effects', EFFECT_COLUMNS, effect_rows)
        writer.write_table('scores', 'scores', SCORE_COLUMNS, score_rows)
        writer.write_json('fit_summary', 'fit_summary', {
            'panel': panel.describe(),
            'treated': panel.treated_label,
            'methods': summary_methods,
            'config': config.to_dict(),
            'files': writer.manifest(),
        })

        self.print_table('Scores', SCORE_COLUMNS, score_rows)
        return writer

    def cmd_simulate(self, config: RunConfig) -> ReportWriter:
        sim_config = SimulationConfig(
            n_units=config.n_units,
            t_total=config.t_total,
            t0=config.t0,
            pool_size=config.pool_size,
            noise_sigma=config.noise_sigma,
            treated_noise=config.treated_noise,
            seed=config.seed,
            weight_mode=config.weight_mode,
        )
        sim = generate_panel(sim_config)

        writer = ReportWriter(config.out, config.format)
        # panel files stay wide CSV so that `fit --input` can read them
        writer.track(save_panel(sim.panel, Path(config.out) / 'panel.csv', 'wide'))
        writer.track(save_panel(sim.truth, Path(config.out) / 'truth.csv', 'wide'))
        writer.write_json('metadata', 'simulation', sim.metadata())

        self.print_table('Simulated panel', ['n_units', 't_total', 't0', 'seed'], [
            {**sim.panel.describe(), 'seed': sim_config.seed}
        ])
        return writer

    def cmd_placebo(self, config: RunConfig) -> ReportWriter:
        panel = self._load_input(config)
        if config.effect_shape:
            panel = inject_effect(panel, config.effect_shape, config.effect_magnitude)
        estimators = build_estimators(config.methods, config.estimator_settings())

        reports = {name: placebo_run(panel, est, max_workers=config.threads)
                   for name, est in estimators.items()}

        writer = ReportWriter(config.out, config.format)
        summary_rows = []
        for name, report in reports.items():
            writer.write_table(f'placebo_{name}', 'placebo', PLACEBO_COLUMNS, [
                {'unit': unit, 'is_treated': unit == report.treated_label, 'time': t, 'gap': gap}
                for unit in report.units
                for t, gap in zip(panel.time_labels, report.gaps[unit])
            ])
            rows = self._placebo_summary(report)
            writer.write_table(f'placebo_summary_{name}', 'placebo_summary',
                               PLACEBO_SUMMARY_COLUMNS, rows)
            summary_rows.append({'method': name, 'treated_rank': report.treated_rank,
                                 'n_units': len(report.units), 'failed': len(report.errors)})

        self.print_table('Placebo ranks', ['method', 'treated_rank', 'n_units', 'failed'],
                         summary_rows)
        return writer

    def cmd_ablate(self, config: RunConfig) -> ReportWriter:
        panel = self._load_input(config)
        reference = None
        if config.reference == 'truth':
            truth = self._load_truth(config, panel)
            if truth is None:
                raise ConfigurationError("--reference truth needs --truth")
            reference = truth.treated

        rows = lambda_ablation(panel, config.ablation_grid, reference,
                               normalization=config.normalize, max_workers=config.threads)

        writer = ReportWriter(config.out, config.format)
        table = [row.to_dict() for row in rows]
        writer.write_table('ablation', 'ablation', ABLATION_COLUMNS, table)
        self.print_table('Lambda ablation', ABLATION_COLUMNS, table)
        return writer

    def cmd_sweep(self, config: RunConfig) -> ReportWriter:
        configs = self._sweep_configs(config)
        result = sweep(configs, config.methods, config.repeats, base_seed=config.seed,
                       reference=config.reference or 'truth',
                       settings=config.estimator_settings(), max_workers=config.threads)

        writer = ReportWriter(config.out, config.format)
        table = [row.to_dict() for row in result.rows]
        writer.write_table('sweep', 'sweep', SWEEP_COLUMNS, table)
        writer.write_table('sweep_runs', 'sweep_runs', SWEEP_RUN_COLUMNS, [
            {'config': configs[r.config_index].label, 'seed': r.seed, 'method': r.method,
             'pre_rmse': r.pre_rmse, 'post_rmse': r.post_rmse, 'error': r.error}
            for r in result.runs
        ])
        self.print_table('Sweep', ['config', 'method', 'ok', 'pre_rmse_median', 'post_rmse_median'],
                         table)
        return writer

    def cmd_align(self, config: RunConfig) -> ReportWriter:
        spec = load_alignment_spec(config.input, config.dates, config.treated)
        spec = preprocess_alignment(spec, config.increments, config.smoothing_window)
        panel = align_by_intervention(spec, (config.pre_days, config.post_days))

        writer = ReportWriter(config.out, config.format)
        writer.track(save_panel(panel, Path(config.out) / 'aligned_panel.csv', 'wide'))
        writer.write_json('alignment', 'alignment', {
            **panel.describe(),
            'treated': panel.treated_label,
            'window': {'pre_days': config.pre_days, 'post_days': config.post_days},
            'increments': config.increments,
            'smoothing_window': config.smoothing_window,
            'intervention_dates': {unit: spec.intervention_dates[unit].isoformat()
                                   for unit in spec.units},
        })
        self.print_table('Aligned panel', ['n_units', 't_total', 't0'], [panel.describe()])
        return writer

    # ------------------------------------------------------------------
    # Helpers

    def _load_input(self, config: RunConfig):
        panel = load_panel(config.input, config.layout, config.treated, config.t0)
        if config.controls:
            panel = panel.select_controls(config.controls)
            self.logger.info(f"Donor pool restricted to {panel.n_controls} controls")
        return panel

    def _load_truth(self, config: RunConfig, panel):
        if not config.truth:
            return None
        truth = load_panel(config.truth, 'wide', config.treated, config.t0)
        if config.controls:
            truth = truth.select_controls(config.controls)
        if truth.unit_labels != panel.unit_labels or truth.time_labels != panel.time_labels:
            raise ValidationError("Truth panel labels do not match the input panel")
        return truth

    @staticmethod
    def _method_summary(panel, est) -> Dict[str, Any]:
        summary: Dict[str, Any] = {'diagnostics': est.diagnostics}
        if est.method == 'eopr':
            summary.update({
                'lambda': est.lam,
                'qform': est.qform,
                'radius': est.radius,
                'representor_weights': est.weights,
            })
        else:
            summary['weights'] = dict(zip(panel.control_labels, est.weights.tolist()))
            summary['intercept'] = est.intercept
        return summary

    @staticmethod
    def _placebo_summary(report) -> List[Dict[str, Any]]:
        rows = []
        for unit in report.units:
            value = report.post_rmse[unit]
            failed = unit in report.errors
            rank = None if failed else 1 + sum(
                1 for other in report.units
                if other != unit and other not in report.errors and report.post_rmse[other] > value
            )
            rows.append({'unit': unit, 'is_treated': unit == report.treated_label,
                         'post_rmse': value, 'rank': rank, 'error': report.errors.get(unit)})
        return rows

    def _sweep_configs(self, config: RunConfig) -> List[SimulationConfig]:
        overrides = {'pool_size': config.pool_size, 'noise_sigma': config.noise_sigma,
                     'treated_noise': config.treated_noise, 'weight_mode': config.weight_mode}
        if config.preset:
            return PRESETS[config.preset](**overrides)

        path = Path(config.sweep_config)
        if not path.exists():
            raise FileNotFoundError(f"Sweep config not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Sweep config {path} is not valid YAML: {e}") from e

        entries = data.get('configs') if isinstance(data, dict) else data
        if not isinstance(entries, list) or not entries:
            raise ConfigurationError(f"Sweep config {path} must list simulation configs")
        configs = []
        for entry in entries:
            if not isinstance(entry, dict):
                raise ConfigurationError(f"Sweep config entries must be mappings, got {entry!r}")
            configs.append(SimulationConfig.from_dict({**overrides, **entry}))
        return configs

    def print_table(self, title: str, columns: Sequence[str], rows: Sequence[Dict[str, Any]]):
        table = Table(title=title, show_header=True, header_style='bold magenta')
        for column in columns:
            table.add_column(column)
        for row in rows:
            table.add_row(*[self._fmt(row.get(c)) for c in columns])
        self.console.print(table)

    @staticmethod
    def _fmt(value: Any) -> str:
        if value is None:
            return '-'
        if isinstance(value, (float, np.floating)):
            return f"{value:.6g}"
        return str(value)

    # ------------------------------------------------------------------

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        parser = self.create_parser()
        args = parser.parse_args(argv)
        self.verbose = args.verbose
        LoggerSetup.set_level(args.verbose, args.quiet)
        if args.log_dir:
            LoggerSetup.initialize(args.log_dir)

        try:
            config = self.load_configuration(args)
            handler = getattr(self, f'cmd_{args.command}')
            with LogContext(self.logger, args.command):
                writer = handler(config)
            self.logger.info(f"Wrote {len(writer.written)} files to {config.out}")
            return EXIT_OK
        except (ValidationError, FileNotFoundError) as e:
            self.logger.error(f"{type(e).__name__}: {e}")
            return EXIT_VALIDATION
        except (NumericalError, np.linalg.LinAlgError) as e:
            self.logger.error(f"Numerical failure - {type(e).__name__}: {e}")
            return EXIT_NUMERICAL
        except KeyboardInterrupt:
            self.logger.warning("Interrupted")
            return 130
        except Exception as e:
            self.logger.error(f"Unexpected error: {type(e).__name__}: {e}")
            if self.verbose:
                traceback.print_exc()
            return EXIT_FAILURE
        finally:
            if args.log_dir:
                LoggerSetup.shutdown()


def main(argv: Optional[Sequence[str]] = None):
    sys.exit(EoprCLI().run(argv))


if __name__ == '__main__':
    main()
