"""
Configuration settings for the EOpR toolkit.

Settings are a flat key/value mapping. Values come from three layers:
built-in defaults, an optional JSON config file and command-line flags,
with later layers winning. `RunConfig` is the validated snapshot a
subcommand runs with.
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from src.core.exceptions import ConfigurationError


load_dotenv()

SUBCOMMANDS = ('fit', 'simulate', 'placebo', 'ablate', 'sweep', 'align')
OUTPUT_FORMATS = ('csv', 'json-lines')
SWEEP_PRESETS = ('t0-fraction', 'units', 'post-length')
ALL_METHODS = ('eopr', 'sc', 'dsc', 'rsc')


def default_threads() -> int:
    """Worker cap from EOPR_THREADS, else min(8, cpu count)"""
    raw = os.getenv('EOPR_THREADS')
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ConfigurationError(f"EOPR_THREADS must be an integer, got '{raw}'") from None
        if value < 1:
            raise ConfigurationError(f"EOPR_THREADS must be >= 1, got {value}")
        return value
    return min(8, os.cpu_count() or 1)


DEFAULTS: Dict[str, Any] = {
    # input
    'input': None,
    'layout': 'wide',
    'treated': None,
    't0': None,
    'truth': None,
    'controls': None,
    # methods
    'methods': list(ALL_METHODS),
    'lambda': None,
    'lambda_grid': [1e-06, 1e-05, 0.0001, 0.001, 0.01, 0.1, 1.0],
    'holdout_fraction': 0.2,
    'rsc_cutoff_ratio': 0.1,
    'rsc_ridge': 0.0,
    'qp_max_iters': 50000,
    'qp_tol': 1e-10,
    'normalize': 'treated_pre_max',
    # output
    'out': None,
    'format': 'csv',
    'seed': 0,
    'threads': None,
    # simulate
    'n_units': 50,
    't_total': 200,
    'pool_size': 10,
    'noise_sigma': 1.0,
    'treated_noise': True,
    'weight_mode': 'equal',
    # placebo
    'effect_shape': None,
    'effect_magnitude': 0.0,
    # ablate
    'ablation_grid': [0.0, 1e-06, 1e-05, 0.0001, 0.001, 0.01, 0.1, 1.0],
    'reference': None,
    # sweep
    'preset': None,
    'sweep_config': None,
    'repeats': 10,
    # align
    'dates': None,
    'pre_days': None,
    'post_days': None,
    'smoothing_window': 7,
    'increments': True,
}


def parse_float_list(value) -> List[float]:
    if value is None:
        return []
    if isinstance(value, str):
        value = [v for v in value.split(',') if v.strip()]
    try:
        return [float(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigurationError(f"Expected a list of numbers, got {value!r}") from None


def parse_name_list(value) -> List[str]:
    if value is None:
        return []
    if isinstance(value, str):
        value = value.split(',')
    return [str(v).strip().lower() for v in value if str(v).strip()]


def parse_label_list(value) -> List[str]:
    """Like parse_name_list, but unit labels keep their case"""
    if value is None:
        return []
    if isinstance(value, str):
        value = value.split(',')
    return [str(v).strip() for v in value if str(v).strip()]


class Settings:
    """Flat application settings with JSON file support"""

    def __init__(self, config_file: Optional[str] = None, **overrides):
        self.values: Dict[str, Any] = {k: (list(v) if isinstance(v, list) else v)
                                       for k, v in DEFAULTS.items()}

        config_file = config_file or os.getenv('EOPR_CONFIG')
        if config_file:
            self.load_from_file(config_file)
        self.update(overrides)

    def load_from_file(self, config_file: str):
        """Load a flat JSON object of settings; unknown keys are rejected"""
        path = Path(config_file)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        self.update(data)

    def update(self, values: Dict[str, Any]):
        unknown = sorted(k for k in values if k not in DEFAULTS)
        if unknown:
            raise ConfigurationError(f"Unknown configuration keys: {', '.join(unknown)}")
        self.values.update(values)

    def save_to_file(self, config_file: str):
        with open(config_file, 'w', encoding='utf-8') as f:
            json.dump(self.values, f, indent=2, sort_keys=True)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def set(self, key: str, value: Any):
        self.update({key: value})

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.values)


@dataclass
class RunConfig:
    """Validated configuration for one subcommand run"""
    subcommand: str
    input: Optional[str] = None
    layout: str = 'wide'
    treated: Optional[str] = None
    t0: Optional[int] = None
    truth: Optional[str] = None
    controls: List[str] = field(default_factory=list)
    methods: List[str] = field(default_factory=lambda: list(ALL_METHODS))
    lam: Optional[float] = None
    lambda_grid: List[float] = field(default_factory=list)
    holdout_fraction: float = 0.2
    rsc_cutoff_ratio: float = 0.1
    rsc_ridge: float = 0.0
    qp_max_iters: int = 50000
    qp_tol: float = 1e-10
    normalize: str = 'treated_pre_max'
    out: Optional[str] = None
    format: str = 'csv'
    seed: int = 0
    threads: int = 1
    n_units: int = 50
    t_total: int = 200
    pool_size: int = 10
    noise_sigma: float = 1.0
    treated_noise: bool = True
    weight_mode: str = 'equal'
    effect_shape: Optional[str] = None
    effect_magnitude: float = 0.0
    ablation_grid: List[float] = field(default_factory=list)
    reference: Optional[str] = None
    preset: Optional[str] = None
    sweep_config: Optional[str] = None
    repeats: int = 10
    dates: Optional[str] = None
    pre_days: Optional[int] = None
    post_days: Optional[int] = None
    smoothing_window: int = 7
    increments: bool = True

    @classmethod
    def from_settings(cls, subcommand: str, settings: Settings) -> 'RunConfig':
        values = settings.to_dict()
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in values.items() if k in names}
        kwargs['lam'] = values.get('lambda')
        kwargs['methods'] = parse_name_list(values.get('methods'))
        kwargs['controls'] = parse_label_list(values.get('controls'))
        kwargs['lambda_grid'] = parse_float_list(values.get('lambda_grid'))
        kwargs['ablation_grid'] = parse_float_list(values.get('ablation_grid'))
        kwargs['threads'] = values.get('threads') or default_threads()
        config = cls(subcommand=subcommand, **kwargs)
        config.validate()
        return config

    def _require(self, *keys: str):
        missing = [k for k in keys if getattr(self, k) in (None, '')]
        if missing:
            raise ConfigurationError(
                f"'{self.subcommand}' requires: {', '.join('--' + k.replace('_', '-') for k in missing)}"
            )

    def _check_int(self, key: str, minimum: int):
        value = getattr(self, key)
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            raise ConfigurationError(f"{key} must be an integer >= {minimum}, got {value!r}")

    def validate(self):
        """Raise ConfigurationError on anything a run would trip over"""
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigurationError(f"Unknown subcommand '{self.subcommand}'")
        self._require('out')
        if self.format not in OUTPUT_FORMATS:
            raise ConfigurationError(f"format must be one of {OUTPUT_FORMATS}, got '{self.format}'")
        self._check_int('seed', 0)
        self._check_int('threads', 1)

        if self.layout not in ('wide', 'long'):
            raise ConfigurationError(f"layout must be 'wide' or 'long', got '{self.layout}'")
        if self.normalize not in ('none', 'treated_pre_max', 'zscore'):
            raise ConfigurationError(f"Unknown normalization scheme '{self.normalize}'")
        if not self.methods:
            raise ConfigurationError("At least one method is required")
        unknown = [m for m in self.methods if m not in ALL_METHODS]
        if unknown:
            raise ConfigurationError(
                f"Unknown methods: {', '.join(unknown)} (expected {', '.join(ALL_METHODS)})"
            )
        if len(set(self.methods)) != len(self.methods):
            raise ConfigurationError("Duplicate methods requested")
        if len(set(self.controls)) != len(self.controls):
            raise ConfigurationError("Duplicate control units requested")
        if not self.lambda_grid:
            raise ConfigurationError("lambda_grid must not be empty")
        if any(not 0 < g <= 1 for g in self.lambda_grid):
            raise ConfigurationError(f"lambda_grid values must lie in (0, 1], got {self.lambda_grid}")
        if self.lam is not None and not (isinstance(self.lam, (int, float)) and self.lam >= 0):
            raise ConfigurationError(f"lambda must be a number >= 0, got {self.lam!r}")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigurationError(f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction}")
        if not 0 <= self.rsc_cutoff_ratio <= 1:
            raise ConfigurationError(f"rsc_cutoff_ratio must lie in [0, 1], got {self.rsc_cutoff_ratio}")
        if self.rsc_ridge < 0:
            raise ConfigurationError(f"rsc_ridge must be >= 0, got {self.rsc_ridge}")
        self._check_int('qp_max_iters', 1)
        if not self.qp_tol > 0:
            raise ConfigurationError(f"qp_tol must be > 0, got {self.qp_tol}")
        if self.reference not in (None, 'observed', 'truth'):
            raise ConfigurationError(f"reference must be 'observed' or 'truth', got '{self.reference}'")

        getattr(self, f'_validate_{self.subcommand}')()

    def _validate_fit(self):
        self._require('input', 'treated', 't0')
        self._check_int('t0', 1)

    def _validate_placebo(self):
        self._validate_fit()
        if self.effect_shape not in (None, 'step', 'ramp'):
            raise ConfigurationError(f"effect_shape must be 'step' or 'ramp', got '{self.effect_shape}'")

    def _validate_ablate(self):
        self._validate_fit()
        if not self.ablation_grid:
            raise ConfigurationError("ablation_grid must not be empty")
        if any(g < 0 for g in self.ablation_grid):
            raise ConfigurationError(f"ablation_grid values must be >= 0, got {self.ablation_grid}")

    def _validate_simulate(self):
        self._require('t0')
        for key, minimum in (('n_units', 2), ('t_total', 2), ('t0', 1), ('pool_size', 1)):
            self._check_int(key, minimum)
        if self.t0 >= self.t_total:
            raise ConfigurationError(f"t0 must be < t_total, got t0={self.t0}, t_total={self.t_total}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.weight_mode not in ('equal', 'dirichlet'):
            raise ConfigurationError(f"weight_mode must be 'equal' or 'dirichlet', got '{self.weight_mode}'")

    def _validate_sweep(self):
        if bool(self.preset) == bool(self.sweep_config):
            raise ConfigurationError("sweep needs exactly one of --preset or --sweep-config")
        if self.preset and self.preset not in SWEEP_PRESETS:
            raise ConfigurationError(f"preset must be one of {SWEEP_PRESETS}, got '{self.preset}'")
        self._check_int('repeats', 1)

    def _validate_align(self):
        self._require('input', 'dates', 'treated', 'pre_days', 'post_days')
        self._check_int('pre_days', 1)
        self._check_int('post_days', 1)
        self._check_int('smoothing_window', 1)

    def estimator_settings(self) -> Dict[str, Any]:
        """Flat mapping understood by estimators.build_estimators"""
        return {
            'normalize': self.normalize,
            'lambda': self.lam,
            'lambda_grid': self.lambda_grid,
            'holdout_fraction': self.holdout_fraction,
            'rsc_cutoff_ratio': self.rsc_cutoff_ratio,
            'rsc_ridge': self.rsc_ridge,
            'qp_max_iters': self.qp_max_iters,
            'qp_tol': self.qp_tol,
            'threads': self.threads,
        }

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        # thread count never changes results
        data.pop('threads')
        return data


Config = Settings
