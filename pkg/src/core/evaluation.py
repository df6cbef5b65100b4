"""
Scoring and experiment runners.

Every runner that loops over units, lambdas or seeds catches per-item
failures, logs them and records them in its output instead of aborting.
Work may be spread over a thread pool; results are always reduced in
sorted-key order so output never depends on scheduling.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.estimators import EoprEstimator, Estimator, build_estimators
from src.core.exceptions import (
    EmptyGridError,
    EmptyRangeError,
    EoprError,
    ValidationError,
)
from src.core.panel import PanelData
from src.core.simulation import SimulationConfig, generate_panel
from src.utils.logger import LogContext, LoggerSetup


logger = LoggerSetup.get_logger(__name__)

EFFECT_SHAPES = ('step', 'ramp')
REFERENCES = ('observed', 'truth')
FIT_ERRORS = (EoprError, np.linalg.LinAlgError)


def _map(func, items: Sequence, max_workers: Optional[int]) -> List:
    if max_workers and max_workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            return list(executor.map(func, items))
    return [func(item) for item in items]


@dataclass(frozen=True)
class ScoreReport:
    pre_rmse: float
    post_rmse: float
    method: str = ''
    panel: Dict[str, int] = field(default_factory=dict)
    reference: str = 'observed'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def rmse(u, u_hat, index_range: Optional[Tuple[int, int]] = None) -> float:
    """Root mean squared difference over the half-open index range [start, stop)"""
    u = np.asarray(u, dtype=float)
    u_hat = np.asarray(u_hat, dtype=float)
    if u.shape != u_hat.shape:
        raise ValidationError(f"Length mismatch: {u.shape} vs {u_hat.shape}")

    start, stop = (0, u.shape[0]) if index_range is None else index_range
    start, stop = max(0, start), min(u.shape[0], stop)
    if stop <= start:
        raise EmptyRangeError(f"Empty scoring range [{start}, {stop})")
    diff = u[start:stop] - u_hat[start:stop]
    return float(np.sqrt(np.mean(diff * diff)))


def score(panel: PanelData, estimate, reference=None, method: str = '',
          reference_name: str = 'observed') -> ScoreReport:
    """Pre-period (training) and post-period (testing) RMSE of an estimate"""
    s_hat = np.asarray(getattr(estimate, 's_hat', estimate), dtype=float)
    target = panel.treated if reference is None else np.asarray(reference, dtype=float)
    method = method or getattr(estimate, 'method', '')
    return ScoreReport(
        pre_rmse=rmse(target, s_hat, (0, panel.t0)),
        post_rmse=rmse(target, s_hat, (panel.t0, panel.t_total)),
        method=method,
        panel=panel.describe(),
        reference=reference_name,
    )


# ---------------------------------------------------------------------------
# Placebo tests

@dataclass(frozen=True)
class PlaceboReport:
    """Gap series (estimate - observed) for the treated unit and every placebo"""
    units: Tuple[str, ...]
    gaps: Dict[str, np.ndarray]
    post_rmse: Dict[str, float]
    treated_rank: int
    method: str
    t0: int
    errors: Dict[str, str] = field(default_factory=dict)

    @property
    def treated_label(self) -> str:
        return self.units[0]

    def ranking(self) -> List[Tuple[str, float]]:
        """Units by decreasing post-gap RMSE, failed units last"""
        def key(label):
            value = self.post_rmse[label]
            return (math.isnan(value), -value if not math.isnan(value) else 0.0)
        return [(label, self.post_rmse[label]) for label in sorted(self.units, key=key)]


def placebo_run(panel: PanelData, estimator: Estimator,
                max_workers: Optional[int] = None) -> PlaceboReport:
    """Refit with each control cast as treated; rank the true treated unit by divergence"""
    if panel.n_units < 3:
        raise ValidationError(f"Placebo runs need at least 3 units, got {panel.n_units}")

    def _run(index: int):
        target = panel if index < 0 else panel.with_treated(index)
        try:
            est = estimator.fit(target)
        except FIT_ERRORS as e:
            if index < 0:
                raise
            logger.warning(f"Placebo fit failed for unit '{target.treated_label}': {e}",
                           extra={'unit': target.treated_label, 'error_type': type(e).__name__})
            return target.treated_label, None, f"{type(e).__name__}: {e}"
        return target.treated_label, est.s_hat - target.treated, None

    with LogContext(logger, 'placebo run', method=estimator.name, n_units=panel.n_units):
        results = _map(_run, list(range(-1, panel.n_controls)), max_workers)

    t0 = panel.t0
    gaps, post_rmse, errors = {}, {}, {}
    for label, gap, error in results:
        if gap is None:
            gaps[label] = np.full(panel.t_total, np.nan)
            post_rmse[label] = math.nan
            errors[label] = error
        else:
            gaps[label] = gap
            post_rmse[label] = float(np.sqrt(np.mean(gap[t0:] ** 2)))

    treated_value = post_rmse[panel.treated_label]
    rank = 1 + sum(
        1 for label, value in post_rmse.items()
        if label != panel.treated_label and not math.isnan(value) and value > treated_value
    )
    logger.info(f"Treated unit ranks {rank} of {panel.n_units} by post-gap RMSE",
                extra={'rank': rank, 'failed_units': len(errors)})

    return PlaceboReport(
        units=tuple(label for label, _, _ in results),
        gaps=gaps,
        post_rmse=post_rmse,
        treated_rank=rank,
        method=estimator.name,
        t0=t0,
        errors=errors,
    )


def inject_effect(panel: PanelData, shape: str, magnitude: float) -> PanelData:
    """Add a known effect to the treated post-period"""
    if shape not in EFFECT_SHAPES:
        raise ValidationError(f"Effect shape must be one of {EFFECT_SHAPES}, got '{shape}'")

    n_post = panel.t_total - panel.t0
    if shape == 'step':
        effect = np.full(n_post, float(magnitude))
    else:
        effect = float(magnitude) * np.arange(1, n_post + 1) / n_post

    treated = panel.treated.copy()
    treated[panel.t0:] += effect
    return panel.with_values(panel.controls, treated)


# ---------------------------------------------------------------------------
# Lambda ablation

@dataclass(frozen=True)
class AblationRow:
    lam: float
    pre_rmse: float
    post_rmse: float
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {'lambda': self.lam, 'pre_rmse': self.pre_rmse,
                'post_rmse': self.post_rmse, 'error': self.error or ''}


def lambda_ablation(panel: PanelData, grid: Sequence[float], reference=None,
                    normalization: str = 'treated_pre_max',
                    max_workers: Optional[int] = None) -> List[AblationRow]:
    """Fit EOpR at every lambda of `grid` (0 allowed) and score each fit"""
    grid = [float(g) for g in grid]
    if not grid:
        raise EmptyGridError("Ablation grid is empty")
    bad = [g for g in grid if not (math.isfinite(g) and g >= 0)]
    if bad:
        raise ValidationError(f"Ablation lambdas must be finite and >= 0, got {bad}")

    def _run(lam: float) -> AblationRow:
        estimator = EoprEstimator(lam=lam, with_band=False, normalization=normalization)
        try:
            report = score(panel, estimator.fit(panel), reference)
        except FIT_ERRORS as e:
            logger.warning(f"Ablation fit failed at lambda={lam:g}: {e}")
            return AblationRow(lam, math.nan, math.nan, f"{type(e).__name__}: {e}")
        return AblationRow(lam, report.pre_rmse, report.post_rmse)

    with LogContext(logger, 'lambda ablation', grid_size=len(grid)):
        return _map(_run, sorted(grid), max_workers)


# ---------------------------------------------------------------------------
# Simulation sweeps

@dataclass(frozen=True)
class SweepRun:
    config_index: int
    seed: int
    method: str
    pre_rmse: float
    post_rmse: float
    error: Optional[str] = None


@dataclass(frozen=True)
class SweepRow:
    config: str
    n_units: int
    t_total: int
    t0: int
    method: str
    repeats: int
    ok: int
    failed: int
    pre_rmse_mean: float
    pre_rmse_std: float
    pre_rmse_median: float
    post_rmse_mean: float
    post_rmse_std: float
    post_rmse_median: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class SweepResult:
    rows: List[SweepRow]
    runs: List[SweepRun]


def _summarize(values: List[float]) -> Tuple[float, float, float]:
    if not values:
        return math.nan, math.nan, math.nan
    arr = np.asarray(values)
    return float(np.mean(arr)), float(np.std(arr)), float(np.median(arr))


def sweep(configs: Sequence[SimulationConfig], methods: Sequence[str], repeats: int,
          base_seed: int = 0, reference: str = 'truth',
          settings: Optional[Dict[str, Any]] = None,
          max_workers: Optional[int] = None) -> SweepResult:
    """Mean, spread and median of pre/post RMSE per (config, method) over seeded repeats.

    Repeat r of every config uses seed base_seed + r, so configs that differ
    only in one dimension share their random draws.
    """
    if repeats < 1:
        raise ValidationError(f"repeats must be >= 1, got {repeats}")
    if reference not in REFERENCES:
        raise ValidationError(f"reference must be one of {REFERENCES}, got '{reference}'")
    if not configs:
        raise ValidationError("Sweep needs at least one simulation config")

    estimators = build_estimators(methods, settings or {})
    cells = [(ci, rep) for ci in range(len(configs)) for rep in range(repeats)]

    def _run(cell) -> List[SweepRun]:
        ci, rep = cell
        seed = base_seed + rep
        try:
            sim = generate_panel(configs[ci].with_seed(seed))
        except FIT_ERRORS as e:
            return [SweepRun(ci, seed, m, math.nan, math.nan, f"{type(e).__name__}: {e}")
                    for m in methods]

        target = sim.truth.treated if reference == 'truth' else None
        runs = []
        for method, estimator in estimators.items():
            try:
                report = score(sim.panel, estimator.fit(sim.panel), target)
                runs.append(SweepRun(ci, seed, method, report.pre_rmse, report.post_rmse))
            except FIT_ERRORS as e:
                logger.warning(f"Sweep cell {configs[ci].label} seed={seed} {method} failed: {e}")
                runs.append(SweepRun(ci, seed, method, math.nan, math.nan,
                                     f"{type(e).__name__}: {e}"))
        return runs

    with LogContext(logger, 'simulation sweep', configs=len(configs), repeats=repeats,
                    methods=list(methods)):
        runs = [run for batch in _map(_run, cells, max_workers) for run in batch]

    rows = []
    for ci, config in enumerate(configs):
        for method in methods:
            cell_runs = [r for r in runs if r.config_index == ci and r.method == method]
            ok = [r for r in cell_runs if r.error is None]
            pre = _summarize([r.pre_rmse for r in ok])
            post = _summarize([r.post_rmse for r in ok])
            rows.append(SweepRow(
                config=config.label,
                n_units=config.n_units,
                t_total=config.t_total,
                t0=config.t0,
                method=method,
                repeats=repeats,
                ok=len(ok),
                failed=len(cell_runs) - len(ok),
                pre_rmse_mean=pre[0], pre_rmse_std=pre[1], pre_rmse_median=pre[2],
                post_rmse_mean=post[0], post_rmse_std=post[1], post_rmse_median=post[2],
            ))
    return SweepResult(rows=rows, runs=runs)
