"""
Classical synthetic-control baselines.

SC    simplex-weighted combination of control units fitted on the pre-period
DSC   SC on unit-demeaned series, treated pre-period mean restored afterwards
RSC   SVD-denoised controls followed by (ridge) least squares, unconstrained
"""
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
import scipy.linalg

from src.core.exceptions import ConfigurationError, DegenerateSpectrumError
from src.core.panel import PanelData, split
from src.utils.logger import LoggerSetup


logger = LoggerSetup.get_logger(__name__)

QP_MAX_ITERS = 50_000
QP_TOL = 1e-10
_REFRESH_EVERY = 100


@dataclass(frozen=True)
class WeightedEstimate:
    s_hat: np.ndarray
    weights: np.ndarray
    intercept: float
    method: str
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def denormalized(self, record) -> 'WeightedEstimate':
        if record.scheme == 'none':
            return self
        intercept = float(record.invert(self.intercept)) if self.method == 'dsc' else self.intercept
        return replace(
            self,
            s_hat=record.invert(self.s_hat),
            intercept=intercept,
            diagnostics={**self.diagnostics, 'normalization': record.to_dict()},
        )


@dataclass(frozen=True)
class RscConfig:
    singular_value_cutoff_ratio: float = 0.1
    ridge: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.singular_value_cutoff_ratio <= 1.0:
            raise ConfigurationError(
                f"RSC cutoff ratio must lie in [0, 1], got {self.singular_value_cutoff_ratio}"
            )
        if not self.ridge >= 0.0:
            raise ConfigurationError(f"RSC ridge must be >= 0, got {self.ridge}")


def solve_simplex_qp(A, b, max_iters: int = QP_MAX_ITERS, tol: float = QP_TOL) -> np.ndarray:
    """Minimize ||Aw - b||^2 over the probability simplex.

    Frank-Wolfe with away steps and exact line search. The quadratic is kept
    in Gram form (H = A'A, c = A'b) and Hw is updated incrementally, with a
    full refresh every few hundred iterations to bound drift. Starts from the
    closest vertex; every argmin/argmax resolves ties to the lowest index.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    if n == 1:
        return np.ones(1)

    H = A.T @ A
    c = A.T @ b
    diag = np.diag(H)

    start = int(np.argmin(diag - 2.0 * c))
    w = np.zeros(n)
    w[start] = 1.0
    Hw = H[:, start].copy()
    wHw = float(diag[start])

    iteration = 0
    gap = np.inf
    for iteration in range(1, max_iters + 1):
        grad = 2.0 * (Hw - c)
        g_w = float(grad @ w)

        s = int(np.argmin(grad))
        gap = g_w - grad[s]
        if gap <= tol:
            break

        active = w > 0
        v = int(np.argmax(np.where(active, grad, -np.inf)))
        away_gap = grad[v] - g_w

        if gap >= away_gap:
            # toward vertex s
            Hd = H[:, s] - Hw
            dHw = Hw[s] - wHw
            dHd = diag[s] - 2.0 * Hw[s] + wHw
            slope = grad[s] - g_w
            gamma_max = 1.0
            away = False
        else:
            # away from vertex v
            Hd = Hw - H[:, v]
            dHw = wHw - Hw[v]
            dHd = wHw - 2.0 * Hw[v] + diag[v]
            slope = g_w - grad[v]
            gamma_max = w[v] / (1.0 - w[v])
            away = True

        gamma = gamma_max if dHd <= 0 else min(gamma_max, max(0.0, -slope / (2.0 * dHd)))
        if gamma <= 0.0:
            break

        if away:
            w *= 1.0 + gamma
            w[v] -= gamma
            if gamma == gamma_max:
                w[v] = 0.0
        else:
            w *= 1.0 - gamma
            w[s] += gamma
            if gamma == 1.0:
                w[:] = 0.0
                w[s] = 1.0
        np.clip(w, 0.0, None, out=w)

        Hw += gamma * Hd
        wHw += 2.0 * gamma * dHw + gamma * gamma * dHd

        if iteration % _REFRESH_EVERY == 0:
            Hw = H @ w
            wHw = float(w @ Hw)
    else:
        logger.debug(f"Simplex QP hit max_iters={max_iters} with gap {gap:.3g}")

    np.clip(w, 0.0, None, out=w)
    return w / w.sum()


def sc_fit(panel: PanelData, max_iters: int = QP_MAX_ITERS, tol: float = QP_TOL) -> WeightedEstimate:
    """Convex combination of controls matching the treated pre-period"""
    S_pre, _, s1_pre, _ = split(panel)
    weights = solve_simplex_qp(S_pre.T, s1_pre, max_iters, tol)
    return WeightedEstimate(
        s_hat=panel.controls.T @ weights,
        weights=weights,
        intercept=0.0,
        method='sc',
    )


def dsc_fit(panel: PanelData, max_iters: int = QP_MAX_ITERS, tol: float = QP_TOL) -> WeightedEstimate:
    """SC on series demeaned by their own pre-period means"""
    S_pre, _, s1_pre, _ = split(panel)
    unit_means = S_pre.mean(axis=1)
    treated_mean = float(np.mean(s1_pre))

    weights = solve_simplex_qp((S_pre - unit_means[:, None]).T, s1_pre - treated_mean,
                               max_iters, tol)
    demeaned = panel.controls - unit_means[:, None]
    return WeightedEstimate(
        s_hat=demeaned.T @ weights + treated_mean,
        weights=weights,
        intercept=treated_mean,
        method='dsc',
    )


def retained_rank(singular_values, ratio: float) -> int:
    """Number of singular values at or above ratio * sigma_max"""
    singular_values = np.asarray(singular_values, dtype=float)
    if singular_values.size == 0 or singular_values[0] <= 0:
        return 0
    return int(np.count_nonzero(singular_values >= ratio * singular_values[0]))


def rsc_fit(panel: PanelData, config: Optional[RscConfig] = None) -> WeightedEstimate:
    """Hard-threshold the control spectrum, then regress the treated pre-period"""
    config = config or RscConfig()
    u, s, vt = np.linalg.svd(panel.controls, full_matrices=False)
    if s[0] == 0:
        raise DegenerateSpectrumError("Control matrix is identically zero")

    rank = retained_rank(s, config.singular_value_cutoff_ratio)
    denoised = (u[:, :rank] * s[:rank]) @ vt[:rank]

    t0 = panel.t0
    design = denoised[:, :t0]
    s1_pre = panel.treated[:t0]
    if config.ridge > 0:
        gram = design @ design.T + config.ridge * np.eye(design.shape[0])
        weights = scipy.linalg.solve(gram, design @ s1_pre, assume_a='pos')
    else:
        weights, *_ = scipy.linalg.lstsq(design.T, s1_pre)

    logger.debug(f"RSC retained rank {rank} of {s.size}",
                 extra={'retained_rank': rank, 'ratio': config.singular_value_cutoff_ratio})
    return WeightedEstimate(
        s_hat=denoised.T @ weights,
        weights=weights,
        intercept=0.0,
        method='rsc',
        diagnostics={'retained_rank': rank},
    )
