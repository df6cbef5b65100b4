"""
Ellipsoidal optimal recovery of a treated unit's untreated trajectory.

The control units define a signal class K = {x : x'Qx <= h} with
Q = pinv(S'S + lambda*I). The counterfactual is the Chebyshev center of the
slice of K that agrees with the treated unit on the pre-intervention period:
the minimum-Q-norm trajectory interpolating the observed pre-period. The
worst-case band at each period is the range of that coordinate over the
slice.

Two evaluation paths are used. For lambda > 0 the
push-through identities in unit space (an (N-1)x(N-1) system) give the same
quantities without inverting the ill-conditioned T x T Gram matrix. For
lambda = 0 the representor Gram matrix is solved
directly, falling back to a pseudo-inverse solve when it is singular.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np
import scipy.linalg

from src.core.exceptions import (
    EmptyGridError,
    NonFiniteError,
    NumericalError,
    SingularPhiError,
    TooShortPreError,
    ValidationError,
)
from src.core.panel import PanelData, split
from src.utils.logger import LoggerSetup


logger = LoggerSetup.get_logger(__name__)

DEFAULT_LAMBDA_GRID = tuple(10.0 ** k for k in range(-6, 1))
DEFAULT_HOLDOUT_FRACTION = 0.2
PINV_RTOL = 1e-12


@dataclass(frozen=True)
class EllipsoidModel:
    """Learned signal class K = {x : x'Qx <= radius}"""
    sigma: np.ndarray
    q: np.ndarray
    lam: float
    radius: float
    rank: int
    controls: np.ndarray = field(repr=False)
    # Hermitian SVD factors of sigma: sigma = u @ diag(d) @ vt
    u: np.ndarray = field(repr=False)
    d: np.ndarray = field(repr=False)
    vt: np.ndarray = field(repr=False)

    @property
    def t_total(self) -> int:
        return self.sigma.shape[0]

    @property
    def uses_unit_space(self) -> bool:
        return self.lam > 0

    @property
    def kept(self) -> np.ndarray:
        return _kept(self.d, self.lam)

    def coordinate_gram(self) -> np.ndarray:
        """Sigma Q Sigma: Q-inner products of every coordinate representor"""
        gram = (self.u * np.where(self.kept, self.d, 0.0)) @ self.vt
        return 0.5 * (gram + gram.T)

    def unit_gram_factor(self, t0: int):
        """Cholesky factor of A A' + lambda I, A = pre-period controls"""
        pre = self.controls[:, :t0]
        gram = pre @ pre.T + self.lam * np.eye(pre.shape[0])
        try:
            return scipy.linalg.cho_factor(0.5 * (gram + gram.T), lower=True)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"Unit Gram matrix is not positive definite at lambda={self.lam:g}") from e


@dataclass(frozen=True)
class RepresentorSystem:
    """Gram matrix of the pre-period representors"""
    phi: np.ndarray
    pre_columns: np.ndarray
    t0: int
    singular: bool = False


@dataclass(frozen=True)
class EoprEstimate:
    """Recovered trajectory, interpolation weights and worst-case band"""
    s_hat: np.ndarray
    weights: np.ndarray
    qform: float
    lam: float
    t0: int
    radius: float
    band_lower: Optional[np.ndarray] = None
    band_upper: Optional[np.ndarray] = None
    half_widths: Optional[np.ndarray] = None
    diagnostics: Dict[str, object] = field(default_factory=dict)
    method: str = 'eopr'

    @property
    def has_band(self) -> bool:
        return self.half_widths is not None

    def denormalized(self, record) -> 'EoprEstimate':
        """Map trajectory and band back to original units"""
        if record.scheme == 'none':
            return self
        return replace(
            self,
            s_hat=record.invert(self.s_hat),
            band_lower=None if self.band_lower is None else record.invert(self.band_lower),
            band_upper=None if self.band_upper is None else record.invert(self.band_upper),
            half_widths=None if self.half_widths is None else record.invert_width(self.half_widths),
            diagnostics={**self.diagnostics, 'normalization': record.to_dict()},
        )


def _check_lambda(lam: float):
    if not math.isfinite(lam) or lam < 0:
        raise ValidationError(f"lambda must be finite and >= 0, got {lam}")


def _kept(d: np.ndarray, lam: float) -> np.ndarray:
    if lam > 0:
        return np.ones_like(d, dtype=bool)
    return d > PINV_RTOL * d[0] if d[0] > 0 else np.zeros_like(d, dtype=bool)


def learn_ellipsoid(S, lam: float) -> EllipsoidModel:
    """Sigma = S'S + lambda*I, Q = pinv(Sigma), radius = max control Q-norm"""
    controls = np.asarray(S, dtype=float)
    if controls.ndim != 2 or controls.shape[0] < 1:
        raise ValidationError(f"Control matrix must be 2-D with at least one row, got {controls.shape}")
    if not np.all(np.isfinite(controls)):
        raise NonFiniteError("Control matrix contains NaN or infinite values")
    lam = float(lam)
    _check_lambda(lam)

    t_total = controls.shape[1]
    gram = controls.T @ controls
    gram = 0.5 * (gram + gram.T)
    sigma = gram + lam * np.eye(t_total)

    # Rank is decided on the spectrum of S'S; lambda then shifts every eigenvalue
    u, d, vt = np.linalg.svd(gram, hermitian=True)
    if lam > 0:
        d = np.where(d > PINV_RTOL * d[0], d, 0.0) + lam
        # S'S is PSD; null directions may come back with flipped signs in vt
        vt = u.T.copy()
    kept = _kept(d, lam)
    rank = int(np.count_nonzero(kept))

    q = (vt[kept].T / d[kept]) @ u[:, kept].T
    q = 0.5 * (q + q.T)

    if lam > 0:
        # s_i' (S'S + lam I)^-1 s_i = 1 - lam * [(SS' + lam I)^-1]_ii
        unit_gram = controls @ controls.T + lam * np.eye(controls.shape[0])
        inv_diag = np.diag(scipy.linalg.inv(0.5 * (unit_gram + unit_gram.T)))
        qforms = 1.0 - lam * inv_diag
    else:
        projected = controls @ q
        qforms = np.einsum('it,it->i', projected, controls)
    radius = float(max(0.0, np.max(qforms)))

    logger.debug(
        f"Learned ellipsoid: T={t_total}, lambda={lam:g}, rank={rank}, radius={radius:.6g}",
        extra={'lam': lam, 'rank': rank, 'radius': radius}
    )
    for arr in (sigma, q, d, u, vt):
        arr.setflags(write=False)
    frozen_controls = controls.copy()
    frozen_controls.setflags(write=False)
    return EllipsoidModel(sigma=sigma, q=q, lam=lam, radius=radius, rank=rank,
                          controls=frozen_controls, u=u, d=d, vt=vt)


def representors(model: EllipsoidModel, t0: int, allow_singular: bool = False) -> RepresentorSystem:
    """Representors of the pre-period coordinate functionals and their Gram matrix"""
    if not 1 <= t0 <= model.t_total:
        raise ValidationError(f"t0={t0} outside [1, {model.t_total}]")

    phi = model.coordinate_gram()[:t0, :t0]
    phi = 0.5 * (phi + phi.T)
    eig = scipy.linalg.eigvalsh(phi)
    singular = bool(eig[-1] <= 0 or eig[0] <= PINV_RTOL * eig[-1])

    if singular and model.lam == 0 and not allow_singular:
        raise SingularPhiError(
            f"Representor Gram matrix is singular (rank {int(np.sum(eig > PINV_RTOL * max(eig[-1], 0)))}"
            f" of {t0}); use the pseudo-inverse path"
        )

    return RepresentorSystem(phi=phi, pre_columns=model.sigma[:, :t0], t0=t0, singular=singular)


def extrapolate(model: EllipsoidModel, reps: RepresentorSystem, s1_pre) -> EoprEstimate:
    """Minimum-Q-norm trajectory that reproduces s1_pre on the pre-period"""
    b = np.asarray(s1_pre, dtype=float)
    t0 = reps.t0
    if b.shape != (t0,):
        raise ValidationError(f"s1_pre must have length {t0}, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise NonFiniteError("Treated pre-period contains NaN or infinite values")

    diagnostics: Dict[str, object] = {'pseudo_inverse_path': False}

    if model.uses_unit_space:
        pre = model.controls[:, :t0]
        factor = model.unit_gram_factor(t0)
        coef = scipy.linalg.cho_solve(factor, pre @ b)
        residual = b - pre.T @ coef
        weights = residual / model.lam
        s_hat = model.controls.T @ coef
        s_hat[:t0] += residual
        qform = float(b @ residual) / model.lam
    else:
        if reps.singular:
            weights = np.linalg.pinv(reps.phi, rcond=PINV_RTOL, hermitian=True) @ b
            diagnostics['pseudo_inverse_path'] = True
        else:
            weights = scipy.linalg.solve(reps.phi, b, assume_a='pos')
        s_hat = reps.pre_columns @ weights
        qform = float(weights @ reps.phi @ weights)

    if not (np.all(np.isfinite(s_hat)) and math.isfinite(qform)):
        raise SingularPhiError("Extrapolation produced non-finite values")

    return EoprEstimate(s_hat=s_hat, weights=weights, qform=qform, lam=model.lam, t0=t0,
                        radius=model.radius, diagnostics=diagnostics)


def worst_case_band(model: EllipsoidModel, reps: RepresentorSystem, est: EoprEstimate) -> EoprEstimate:
    """Per-period range of trajectories in K consistent with the pre-period"""
    t0 = reps.t0
    t_total = model.t_total
    diagnostics = dict(est.diagnostics)

    slack = model.radius - est.qform
    diagnostics['outside_signal_class'] = bool(slack < 0)
    if slack < 0:
        logger.warning(
            f"Treated pre-period lies outside the learned ellipsoid "
            f"(qform {est.qform:.6g} > radius {model.radius:.6g}); band collapses to the estimate",
            extra={'qform': est.qform, 'radius': model.radius}
        )
    slack = max(0.0, slack)

    schur = np.zeros(t_total)
    if t0 < t_total:
        if model.uses_unit_space:
            # Schur complement of Sigma_pp: lambda * (1 + s_t' (AA' + lambda I)^-1 s_t)
            post = model.controls[:, t0:]
            solved = scipy.linalg.cho_solve(model.unit_gram_factor(t0), post)
            schur[t0:] = model.lam * (1.0 + np.einsum('it,it->t', post, solved))
        else:
            gram = model.coordinate_gram()
            cross = gram[:t0, t0:]
            if reps.singular:
                solved = np.linalg.pinv(reps.phi, rcond=PINV_RTOL, hermitian=True) @ cross
            else:
                solved = scipy.linalg.solve(reps.phi, cross, assume_a='pos')
            schur[t0:] = np.diag(gram)[t0:] - np.einsum('pt,pt->t', cross, solved)

    clamped = bool(np.any(schur < 0))
    diagnostics['band_clamped'] = clamped
    if clamped:
        logger.debug(f"Clamped {int(np.sum(schur < 0))} negative band terms to zero")
    half_widths = math.sqrt(slack) * np.sqrt(np.clip(schur, 0.0, None))
    diagnostics['slack'] = slack

    return replace(
        est,
        band_lower=est.s_hat - half_widths,
        band_upper=est.s_hat + half_widths,
        half_widths=half_widths,
        diagnostics=diagnostics,
    )


def effect_series(est, treated_observed, t0: int) -> np.ndarray:
    """Counterfactual minus observed over the post-intervention period"""
    s_hat = np.asarray(getattr(est, 's_hat', est), dtype=float)
    observed = np.asarray(treated_observed, dtype=float)
    if s_hat.shape != observed.shape:
        raise ValidationError(
            f"Estimate length {s_hat.shape[0]} does not match observed length {observed.shape[0]}"
        )
    if not 1 <= t0 <= observed.shape[0]:
        raise ValidationError(f"t0={t0} outside [1, {observed.shape[0]}]")
    return s_hat[t0:] - observed[t0:]


def fit_eopr(panel: PanelData, lam: float, with_band: bool = True) -> EoprEstimate:
    """Learn the ellipsoid from the controls and recover the treated trajectory"""
    _, _, s1_pre, _ = split(panel)
    model = learn_ellipsoid(panel.controls, lam)
    try:
        reps = representors(model, panel.t0)
    except SingularPhiError as e:
        LoggerSetup.log_decision(logger, 'pseudo-inverse representor solve', reason=str(e), lam=lam)
        reps = representors(model, panel.t0, allow_singular=True)

    est = extrapolate(model, reps, s1_pre)
    if with_band:
        est = worst_case_band(model, reps, est)
    return replace(est, diagnostics={**est.diagnostics, 'rank': model.rank})


def _validate_grid(grid: Sequence[float], holdout_fraction: float, t0: int):
    grid = [float(g) for g in grid]
    if not grid:
        raise EmptyGridError("Lambda grid is empty")
    bad = [g for g in grid if not (math.isfinite(g) and 0 < g <= 1)]
    if bad:
        raise ValidationError(f"Lambda grid values must lie in (0, 1], got {bad}")
    if not 0 < holdout_fraction < 1:
        raise ValidationError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")

    # round() guards against 10 * 0.8 = 8.000000000000002 style artefacts
    n_fit = math.ceil(round(t0 * (1 - holdout_fraction), 9))
    if n_fit < 1 or t0 - n_fit < 1:
        raise TooShortPreError(
            f"Pre-period of {t0} periods leaves no holdout at fraction {holdout_fraction}"
        )
    return sorted(set(grid)), n_fit


def score_lambda_grid(panel: PanelData, grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
                      holdout_fraction: float = DEFAULT_HOLDOUT_FRACTION,
                      max_workers: Optional[int] = None) -> Dict[float, float]:
    """Holdout RMSE of each lambda: fit on the early pre-period, score on its tail"""
    grid, n_fit = _validate_grid(grid, holdout_fraction, panel.t0)
    pre_only = panel.restrict(panel.t0, n_fit)
    held_out = pre_only.treated[n_fit:]

    def _score(lam: float) -> float:
        try:
            est = fit_eopr(pre_only, lam, with_band=False)
        except NumericalError as e:
            logger.warning(f"lambda={lam:g} failed during selection: {e}")
            return math.inf
        return float(np.sqrt(np.mean((est.s_hat[n_fit:] - held_out) ** 2)))

    if max_workers and max_workers > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            scores = list(executor.map(_score, grid))
    else:
        scores = [_score(lam) for lam in grid]
    return dict(zip(grid, scores))


def select_lambda(panel: PanelData, grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
                  holdout_fraction: float = DEFAULT_HOLDOUT_FRACTION,
                  max_workers: Optional[int] = None) -> float:
    """Lambda with the smallest holdout RMSE; ties go to the largest lambda"""
    return best_lambda(score_lambda_grid(panel, grid, holdout_fraction, max_workers))


def best_lambda(scores: Dict[float, float]) -> float:
    best_lam, best_score = None, math.inf
    for lam in sorted(scores, reverse=True):
        if scores[lam] < best_score:
            best_lam, best_score = lam, scores[lam]

    if best_lam is None:
        raise NumericalError("Every lambda in the grid failed to produce a holdout score")

    LoggerSetup.log_decision(logger, f'lambda={best_lam:g}', holdout_rmse=best_score,
                             grid_size=len(scores))
    return best_lam
