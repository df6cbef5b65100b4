"""
Synthetic panels with known noiseless ground truth.

Each control unit i and period t draw a latent value from a small pool
(theta_i from B_r, rho_t from B_c, both Unif(0,1) pools) and the noiseless
outcome is

    s_it = 10 / (1 + exp(-theta_i - rho_t - theta_i * rho_t))

Observed outcomes add N(0, sigma^2) noise. The treated unit is a convex
combination of the noiseless control rows. Randomness comes from a single
numpy Generator (PCG64) seeded from the config, so runs are reproducible
across platforms.
"""
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from src.core.exceptions import ConfigurationError
from src.core.panel import PanelData
from src.utils.logger import LoggerSetup


logger = LoggerSetup.get_logger(__name__)

WEIGHT_MODES = ('equal', 'dirichlet')


@dataclass(frozen=True)
class SimulationConfig:
    n_units: int
    t_total: int
    t0: int
    pool_size: int = 10
    noise_sigma: float = 1.0
    treated_noise: bool = True
    seed: int = 0
    weight_mode: str = 'equal'

    def __post_init__(self):
        if self.n_units < 2:
            raise ConfigurationError(f"n_units must be >= 2, got {self.n_units}")
        if not 1 <= self.t0 < self.t_total:
            raise ConfigurationError(f"t0 must satisfy 1 <= t0 < t_total, got t0={self.t0}, "
                                     f"t_total={self.t_total}")
        if self.pool_size < 1:
            raise ConfigurationError(f"pool_size must be >= 1, got {self.pool_size}")
        if not self.noise_sigma >= 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigurationError(f"weight_mode must be one of {WEIGHT_MODES}, "
                                     f"got '{self.weight_mode}'")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def with_seed(self, seed: int) -> 'SimulationConfig':
        return replace(self, seed=seed)

    @property
    def label(self) -> str:
        return f"N{self.n_units}_T{self.t_total}_t0{self.t0}_sigma{self.noise_sigma:g}"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SimulationConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown simulation keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigurationError(f"Invalid simulation config: {e}") from e


@dataclass(frozen=True)
class SimOutput:
    panel: PanelData
    truth: PanelData
    theta: np.ndarray
    rho: np.ndarray
    weights: np.ndarray
    weight_mode: str
    config: SimulationConfig
    pools: Dict[str, np.ndarray] = field(default_factory=dict)

    def metadata(self) -> Dict[str, Any]:
        return {
            'seed': self.config.seed,
            'config': self.config.to_dict(),
            'weight_mode': self.weight_mode,
            'treated_weights': self.weights.tolist(),
            'theta': self.theta.tolist(),
            'rho': self.rho.tolist(),
            'pools': {name: pool.tolist() for name, pool in self.pools.items()},
            't0': self.panel.t0,
            'unit_labels': list(self.panel.unit_labels),
        }


def outcome_surface(theta, rho) -> np.ndarray:
    """Noiseless outcome for every (theta_i, rho_t) pair"""
    theta = np.asarray(theta, dtype=float)[:, None]
    rho = np.asarray(rho, dtype=float)[None, :]
    return 10.0 / (1.0 + np.exp(-theta - rho - theta * rho))


def draw_treated_weights(n_controls: int, rng: Optional[np.random.Generator] = None,
                         mode: str = 'equal') -> np.ndarray:
    if mode == 'equal':
        return np.full(n_controls, 1.0 / n_controls)
    if mode == 'dirichlet':
        if rng is None:
            raise ConfigurationError("Dirichlet weights need a random generator")
        return rng.dirichlet(np.ones(n_controls))
    raise ConfigurationError(f"weight_mode must be one of {WEIGHT_MODES}, got '{mode}'")


def treated_from_controls(noiseless_controls, rng: Optional[np.random.Generator] = None,
                          mode: str = 'equal', weights=None) -> np.ndarray:
    """Convex combination of the noiseless control rows"""
    rows = np.asarray(noiseless_controls, dtype=float)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ConfigurationError("Need at least one control row")
    if weights is None:
        weights = draw_treated_weights(rows.shape[0], rng, mode)
    return np.asarray(weights, dtype=float) @ rows


def unit_labels(n_units: int) -> List[str]:
    width = max(3, len(str(n_units - 1)))
    return ['treated'] + [f"control_{i:0{width}d}" for i in range(1, n_units)]


def generate_panel(config: SimulationConfig) -> SimOutput:
    """Draw one synthetic panel and its noiseless counterpart"""
    rng = np.random.default_rng(config.seed)
    n_controls = config.n_units - 1

    row_pool = rng.uniform(0.0, 1.0, config.pool_size)
    col_pool = rng.uniform(0.0, 1.0, config.pool_size)
    theta = rng.choice(row_pool, n_controls)
    rho = rng.choice(col_pool, config.t_total)

    noiseless = outcome_surface(theta, rho)
    noise = rng.standard_normal((n_controls, config.t_total)) * config.noise_sigma

    weights = draw_treated_weights(n_controls, rng, config.weight_mode)
    treated_truth = treated_from_controls(noiseless, weights=weights)
    treated_noise = rng.standard_normal(config.t_total) * config.noise_sigma

    labels = tuple(unit_labels(config.n_units))
    times = tuple(range(1, config.t_total + 1))
    truth = PanelData(noiseless, treated_truth, config.t0, labels, times)
    panel = PanelData(
        noiseless + noise,
        treated_truth + treated_noise if config.treated_noise else treated_truth,
        config.t0,
        labels,
        times,
    )

    logger.debug(f"Generated panel {config.label} seed={config.seed}")
    return SimOutput(panel=panel, truth=truth, theta=theta, rho=rho, weights=weights,
                     weight_mode=config.weight_mode, config=config,
                     pools={'rows': row_pool, 'columns': col_pool})


# ---------------------------------------------------------------------------
# Sweep presets

def _clamp_t0(t0: int, t_total: int) -> int:
    return min(max(1, t0), t_total - 1)


def t0_fraction_configs(n_units: int = 50, t_total: int = 200,
                        fractions: Iterable[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
                        **overrides) -> List[SimulationConfig]:
    """Intervention at increasing fractions of the horizon"""
    return [
        SimulationConfig(n_units=n_units, t_total=t_total,
                         t0=_clamp_t0(int(round(f * t_total)), t_total), **overrides)
        for f in fractions
    ]


def unit_count_configs(unit_counts: Iterable[int] = (10, 25, 50, 100, 200),
                       t0: int = 25, t_total: int = 125, **overrides) -> List[SimulationConfig]:
    """Growing donor pools at a fixed horizon"""
    return [SimulationConfig(n_units=n, t_total=t_total, t0=t0, **overrides) for n in unit_counts]


def post_length_configs(post_lengths: Iterable[int] = (50, 100, 150, 200, 250, 300, 350, 400, 450),
                        n_units: int = 100, t0: int = 50, **overrides) -> List[SimulationConfig]:
    """Fixed pre-period with a lengthening post-period"""
    return [
        SimulationConfig(n_units=n_units, t_total=t0 + p, t0=t0, **overrides)
        for p in post_lengths
    ]


PRESETS = {
    't0-fraction': t0_fraction_configs,
    'units': unit_count_configs,
    'post-length': post_length_configs,
}
