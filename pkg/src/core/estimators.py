"""
Common estimator interface shared by EOpR and the baselines.

`Estimator.fit` normalizes the panel, runs the method on the normalized
panel and maps the result back to the original units, so every method sees
data on the same scale and a lambda grid in (0, 1] keeps its meaning.
"""
from abc import ABC, abstractmethod
from dataclasses import replace
from typing import Any, Dict, Optional, Sequence, Type

from src.core.baselines import (
    QP_MAX_ITERS,
    QP_TOL,
    RscConfig,
    WeightedEstimate,
    dsc_fit,
    rsc_fit,
    sc_fit,
)
from src.core.eopr import (
    DEFAULT_HOLDOUT_FRACTION,
    DEFAULT_LAMBDA_GRID,
    EoprEstimate,
    best_lambda,
    fit_eopr,
    score_lambda_grid,
)
from src.core.exceptions import ConfigurationError
from src.core.panel import NORMALIZATION_SCHEMES, PanelData, normalize
from src.utils.logger import LoggerSetup


logger = LoggerSetup.get_logger(__name__)

DEFAULT_NORMALIZATION = 'treated_pre_max'


class Estimator(ABC):
    """Base class for counterfactual estimators"""

    name: str = ''

    def __init__(self, normalization: str = DEFAULT_NORMALIZATION):
        if normalization not in NORMALIZATION_SCHEMES:
            raise ConfigurationError(
                f"Unknown normalization '{normalization}', expected one of {NORMALIZATION_SCHEMES}"
            )
        self.normalization = normalization

    def fit(self, panel: PanelData):
        scaled, record = normalize(panel, self.normalization)
        return self._fit(scaled).denormalized(record)

    @abstractmethod
    def _fit(self, panel: PanelData):
        """Fit on an already-normalized panel"""

    def params(self) -> Dict[str, Any]:
        return {'normalization': self.normalization}

    def __repr__(self) -> str:
        args = ', '.join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


class EoprEstimator(Estimator):
    name = 'eopr'

    def __init__(self, lam: Optional[float] = None,
                 grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
                 holdout_fraction: float = DEFAULT_HOLDOUT_FRACTION,
                 with_band: bool = True,
                 max_workers: Optional[int] = None,
                 normalization: str = DEFAULT_NORMALIZATION):
        super().__init__(normalization)
        self.lam = lam
        self.grid = tuple(grid)
        self.holdout_fraction = holdout_fraction
        self.with_band = with_band
        self.max_workers = max_workers

    def _fit(self, panel: PanelData) -> EoprEstimate:
        scores = None
        lam = self.lam
        if lam is None:
            scores = score_lambda_grid(panel, self.grid, self.holdout_fraction, self.max_workers)
            lam = best_lambda(scores)

        est = fit_eopr(panel, lam, with_band=self.with_band)
        diagnostics = {**est.diagnostics, 'selected_lambda': lam}
        if scores is not None:
            diagnostics['lambda_scores'] = {repr(k): v for k, v in sorted(scores.items())}
        return replace(est, diagnostics=diagnostics)

    def params(self) -> Dict[str, Any]:
        return {**super().params(), 'lam': self.lam, 'grid': list(self.grid),
                'holdout_fraction': self.holdout_fraction}


class ScEstimator(Estimator):
    name = 'sc'

    def __init__(self, max_iters: int = QP_MAX_ITERS, tol: float = QP_TOL,
                 normalization: str = DEFAULT_NORMALIZATION):
        super().__init__(normalization)
        self.max_iters = max_iters
        self.tol = tol

    def _fit(self, panel: PanelData) -> WeightedEstimate:
        return sc_fit(panel, self.max_iters, self.tol)

    def params(self) -> Dict[str, Any]:
        return {**super().params(), 'max_iters': self.max_iters, 'tol': self.tol}


class DscEstimator(ScEstimator):
    name = 'dsc'

    def _fit(self, panel: PanelData) -> WeightedEstimate:
        return dsc_fit(panel, self.max_iters, self.tol)


class RscEstimator(Estimator):
    name = 'rsc'

    def __init__(self, config: Optional[RscConfig] = None,
                 normalization: str = DEFAULT_NORMALIZATION):
        super().__init__(normalization)
        self.config = config or RscConfig()

    def _fit(self, panel: PanelData) -> WeightedEstimate:
        return rsc_fit(panel, self.config)

    def params(self) -> Dict[str, Any]:
        return {**super().params(),
                'singular_value_cutoff_ratio': self.config.singular_value_cutoff_ratio,
                'ridge': self.config.ridge}


ESTIMATORS: Dict[str, Type[Estimator]] = {
    cls.name: cls for cls in (EoprEstimator, ScEstimator, DscEstimator, RscEstimator)
}
METHODS = tuple(ESTIMATORS)


def build_estimator(name: str, **params) -> Estimator:
    """Instantiate a method by its command-line name"""
    try:
        cls = ESTIMATORS[name]
    except KeyError:
        raise ConfigurationError(
            f"Unknown method '{name}', expected one of {', '.join(METHODS)}"
        ) from None
    return cls(**params)


def build_estimators(methods: Sequence[str], settings: Dict[str, Any]) -> Dict[str, Estimator]:
    """Estimators for `methods`, parameterized from a flat settings mapping"""
    normalization = settings.get('normalize', DEFAULT_NORMALIZATION)
    qp = {'max_iters': settings.get('qp_max_iters', QP_MAX_ITERS),
          'tol': settings.get('qp_tol', QP_TOL)}
    params = {
        'eopr': {'lam': settings.get('lambda'),
                 'grid': settings.get('lambda_grid', DEFAULT_LAMBDA_GRID),
                 'holdout_fraction': settings.get('holdout_fraction', DEFAULT_HOLDOUT_FRACTION),
                 'max_workers': settings.get('threads')},
        'sc': qp,
        'dsc': qp,
        'rsc': {'config': RscConfig(settings.get('rsc_cutoff_ratio', 0.1),
                                    settings.get('rsc_ridge', 0.0))},
    }
    return {
        name: build_estimator(name, normalization=normalization, **params.get(name, {}))
        for name in methods
    }
