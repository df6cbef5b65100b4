import math

import numpy as np
import pytest
import scipy.linalg
import scipy.optimize

from src.core.eopr import (
    DEFAULT_LAMBDA_GRID,
    best_lambda,
    effect_series,
    extrapolate,
    fit_eopr,
    learn_ellipsoid,
    representors,
    score_lambda_grid,
    select_lambda,
    worst_case_band,
)
from src.core.exceptions import (
    EmptyGridError,
    NumericalError,
    SingularPhiError,
    TooShortPreError,
    ValidationError,
)
from src.core.panel import PanelData
from src.core.simulation import SimulationConfig, generate_panel


def make_panel(n_controls, t_total, t0, seed=0, treated=None):
    rng = np.random.default_rng(seed)
    controls = rng.normal(size=(n_controls, t_total))
    if treated is None:
        mix = rng.dirichlet(np.ones(n_controls))
        treated = mix @ controls
    labels = ("treated",) + tuple(f"c{i}" for i in range(n_controls))
    return PanelData(controls, treated, t0, labels, tuple(range(t_total)))


def kkt_oracle(sigma, t0, b):
    """argmin x'Qx s.t. x[:t0] = b with Q = inv(sigma), from the Lagrange system"""
    t_total = sigma.shape[0]
    q = scipy.linalg.inv(sigma)
    E = np.eye(t_total)[:t0]
    kkt = np.block([[2.0 * q, E.T], [E, np.zeros((t0, t0))]])
    rhs = np.concatenate([np.zeros(t_total), b])
    return scipy.linalg.solve(kkt, rhs)[:t_total]


# Fixtures
@pytest.fixture
def panel():
    """Four controls, ten periods, six pre-periods; treated inside the control hull"""
    return make_panel(4, 10, 6, seed=3)


# Test the learned ellipsoid
class TestLearnEllipsoid:

    def test_sigma_and_inverse(self, panel):
        model = learn_ellipsoid(panel.controls, 1.0)
        expected = panel.controls.T @ panel.controls + np.eye(10)

        np.testing.assert_allclose(model.sigma, expected)
        np.testing.assert_allclose(model.q @ model.sigma, np.eye(10), atol=1e-8)
        assert model.rank == 10
        assert model.uses_unit_space

    def test_radius_is_max_control_qform(self, panel):
        model = learn_ellipsoid(panel.controls, 0.5)
        q = scipy.linalg.inv(model.sigma)
        direct = max(float(s @ q @ s) for s in panel.controls)

        assert model.radius == pytest.approx(direct, rel=1e-8)
        assert 0.0 < model.radius <= 1.0

    def test_zero_lambda_is_rank_deficient(self, panel):
        model = learn_ellipsoid(panel.controls, 0.0)

        assert model.rank == 4
        assert not model.uses_unit_space

    def test_rejects_negative_lambda(self, panel):
        with pytest.raises(ValidationError):
            learn_ellipsoid(panel.controls, -1.0)

    def test_tiny_lambda_keeps_full_rank_on_raw_scale(self):
        """lambda far below 1e-12 of the largest eigenvalue of S'S"""
        sim = generate_panel(SimulationConfig(n_units=50, t_total=400, t0=200, seed=0))
        model = learn_ellipsoid(sim.panel.controls, 1e-6)

        assert model.rank == 400
        assert model.uses_unit_space
        assert np.all(model.d >= 1e-6)


# Test recovery of the treated trajectory
class TestExtrapolate:

    def test_matches_kkt_oracle(self):
        panel = make_panel(5, 12, 7, seed=11)
        est = fit_eopr(panel, 1.0, with_band=False)
        sigma = panel.controls.T @ panel.controls + np.eye(12)
        oracle = kkt_oracle(sigma, 7, panel.treated[:7])

        np.testing.assert_allclose(est.s_hat, oracle, atol=1e-8)
        q = scipy.linalg.inv(sigma)
        assert est.qform == pytest.approx(float(oracle @ q @ oracle), rel=1e-8)

    def test_oracle_equivalence_random_instances(self):
        """Minimum-norm interpolant against the block-partitioned closed form"""
        rng = np.random.default_rng(2024)
        for instance in range(100):
            n_controls = int(rng.integers(3, 11))
            t_total = int(rng.integers(8, 31))
            t0 = int(rng.integers(1, t_total))
            lam = float(rng.choice([1e-4, 1e-2, 1.0]))
            panel = make_panel(n_controls, t_total, t0, seed=instance)

            est = fit_eopr(panel, lam, with_band=False)
            sigma = panel.controls.T @ panel.controls + lam * np.eye(t_total)
            b = panel.treated[:t0]
            post = sigma[t0:, :t0] @ scipy.linalg.solve(sigma[:t0, :t0], b, assume_a="pos")

            scale = max(1.0, float(np.max(np.abs(b))))
            assert np.max(np.abs(est.s_hat[:t0] - b)) <= 1e-8 * scale
            assert np.max(np.abs(est.s_hat[t0:] - post)) <= 1e-8 * scale

    def test_exact_pre_fit(self, panel):
        est = fit_eopr(panel, 1e-3, with_band=False)

        np.testing.assert_allclose(est.s_hat[:6], panel.treated[:6], atol=1e-10)

    def test_exact_pre_fit_with_tiny_lambda_and_long_horizon(self):
        panel = generate_panel(SimulationConfig(n_units=50, t_total=400, t0=200, seed=0)).panel
        est = fit_eopr(panel, 1e-6)
        scale = float(np.max(np.abs(panel.treated[:200])))

        assert est.diagnostics["pseudo_inverse_path"] is False
        assert est.diagnostics["rank"] == 400
        assert np.max(np.abs(est.s_hat[:200] - panel.treated[:200])) <= 1e-8 * scale
        assert np.all(est.half_widths[:200] <= 1e-6 * scale)

    def test_singular_phi_at_zero_lambda(self, panel):
        """More pre-periods than controls makes the representor Gram matrix singular"""
        model = learn_ellipsoid(panel.controls, 0.0)

        with pytest.raises(SingularPhiError):
            representors(model, panel.t0)

        reps = representors(model, panel.t0, allow_singular=True)
        est = extrapolate(model, reps, panel.treated[:6])
        assert est.diagnostics["pseudo_inverse_path"] is True
        np.testing.assert_allclose(est.s_hat[:6], panel.treated[:6], atol=1e-8)

    def test_fit_falls_back_to_pseudo_inverse(self, panel):
        est = fit_eopr(panel, 0.0)

        assert est.diagnostics["pseudo_inverse_path"] is True
        assert est.diagnostics["rank"] == 4
        assert np.all(np.isfinite(est.s_hat))

    def test_zero_lambda_full_rank_phi(self):
        panel = make_panel(8, 10, 4, seed=5)
        est = fit_eopr(panel, 0.0, with_band=False)

        assert est.diagnostics["pseudo_inverse_path"] is False
        np.testing.assert_allclose(est.s_hat[:4], panel.treated[:4], atol=1e-8)

    def test_scaling_covariance(self, panel):
        c = 7.5
        scaled = panel.with_values(panel.controls * c, panel.treated * c)
        base = fit_eopr(panel, 0.1, with_band=False)
        est = fit_eopr(scaled, 0.1 * c * c, with_band=False)

        np.testing.assert_allclose(est.s_hat, c * base.s_hat, rtol=1e-8, atol=1e-10)

    def test_deterministic(self, panel):
        first = fit_eopr(panel, 0.01)
        second = fit_eopr(panel, 0.01)

        assert np.array_equal(first.s_hat, second.s_hat)
        assert np.array_equal(first.half_widths, second.half_widths)

    def test_wrong_length_pre_period(self, panel):
        model = learn_ellipsoid(panel.controls, 1.0)
        reps = representors(model, 6)

        with pytest.raises(ValidationError):
            extrapolate(model, reps, np.ones(5))


# Test the worst-case band
class TestWorstCaseBand:

    def test_band_brackets_estimate(self, panel):
        est = fit_eopr(panel, 1.0)

        assert est.has_band
        assert np.all(est.half_widths >= 0)
        assert np.all(est.band_lower <= est.s_hat)
        assert np.all(est.s_hat <= est.band_upper)
        np.testing.assert_array_equal(est.half_widths[:6], 0.0)

    def test_closed_form_half_widths(self, panel):
        """sqrt(slack * [inv(Q_ff)]_tt) on the post-period"""
        est = fit_eopr(panel, 1.0)
        sigma = panel.controls.T @ panel.controls + np.eye(10)
        q = scipy.linalg.inv(sigma)
        q_ff_inv = scipy.linalg.inv(q[6:, 6:])
        slack = est.radius - est.qform

        assert slack > 0
        expected = np.sqrt(slack * np.diag(q_ff_inv))
        np.testing.assert_allclose(est.half_widths[6:], expected, rtol=1e-6)

    def test_band_edges_match_constrained_optimizer(self):
        """Extremes of each coordinate over {x'Qx <= h, x_pre = s1_pre} on noiseless panels"""
        t_total, t0, lam = 12, 8, 1.0
        for seed in range(20):
            sim = generate_panel(SimulationConfig(n_units=6, t_total=t_total, t0=t0,
                                                  noise_sigma=0.0, seed=seed))
            panel = sim.panel
            est = fit_eopr(panel, lam)
            q = scipy.linalg.inv(panel.controls.T @ panel.controls + lam * np.eye(t_total))
            b = panel.treated[:t0]
            scale = float(np.max(np.abs(b)))

            np.testing.assert_allclose(est.band_lower[:t0], b, atol=1e-6 * scale)
            np.testing.assert_allclose(est.band_upper[:t0], b, atol=1e-6 * scale)

            def room(z):
                x = np.concatenate([b, z])
                return est.radius - x @ q @ x

            def room_jac(z):
                x = np.concatenate([b, z])
                return -2.0 * (q @ x)[t0:]

            for k in range(t_total - t0):
                for sign, edge in ((1.0, est.band_upper), (-1.0, est.band_lower)):
                    result = scipy.optimize.minimize(
                        lambda z: -sign * z[k],
                        est.s_hat[t0:].copy(),
                        jac=lambda z: -sign * np.eye(t_total - t0)[k],
                        method="SLSQP",
                        constraints=[{"type": "ineq", "fun": room, "jac": room_jac}],
                        options={"ftol": 1e-14, "maxiter": 500},
                    )
                    attained = -sign * result.fun
                    assert attained == pytest.approx(edge[t0 + k], rel=1e-5, abs=1e-6 * scale)

    def test_outside_signal_class_collapses(self):
        rng = np.random.default_rng(8)
        panel = make_panel(4, 10, 6, seed=8, treated=100.0 * rng.normal(size=10))
        est = fit_eopr(panel, 1.0)

        assert est.diagnostics["outside_signal_class"] is True
        assert est.diagnostics["slack"] == 0.0
        np.testing.assert_array_equal(est.half_widths, 0.0)

    def test_generic_path_band(self, panel):
        """Zero lambda uses the representor system instead of unit space"""
        model = learn_ellipsoid(panel.controls, 0.0)
        reps = representors(model, 6, allow_singular=True)
        est = worst_case_band(model, reps, extrapolate(model, reps, panel.treated[:6]))

        assert np.all(est.half_widths >= 0)
        assert np.all(est.half_widths[:6] <= 1e-6 * max(1.0, np.max(np.abs(panel.treated))))


# Test effects
class TestEffectSeries:

    def test_counterfactual_minus_observed(self):
        s_hat = np.array([1.0, 2.0, 3.0, 4.0])
        observed = np.array([1.0, 2.0, 1.0, 1.0])

        np.testing.assert_array_equal(effect_series(s_hat, observed, 2), [2.0, 3.0])

    def test_zero_when_estimate_equals_observed(self, panel):
        np.testing.assert_array_equal(effect_series(panel.treated, panel.treated, 6), np.zeros(4))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            effect_series(np.ones(4), np.ones(5), 2)


# Test lambda selection
class TestSelectLambda:

    def test_default_grid(self):
        assert DEFAULT_LAMBDA_GRID[0] == pytest.approx(1e-6)
        assert DEFAULT_LAMBDA_GRID[-1] == 1.0
        assert len(DEFAULT_LAMBDA_GRID) == 7

    def test_ties_go_to_largest(self):
        assert best_lambda({1e-3: 0.5, 0.1: 0.5, 1.0: 0.7}) == 0.1

    def test_all_failed(self):
        with pytest.raises(NumericalError):
            best_lambda({0.1: math.inf, 1.0: math.inf})

    def test_selected_is_grid_minimum(self):
        panel = make_panel(6, 40, 20, seed=1)
        scores = score_lambda_grid(panel)
        lam = select_lambda(panel)

        assert lam in DEFAULT_LAMBDA_GRID
        assert scores[lam] == pytest.approx(min(scores.values()), abs=1e-6)

    def test_empty_grid(self, panel):
        with pytest.raises(EmptyGridError):
            select_lambda(panel, grid=[])

    def test_grid_outside_unit_interval(self, panel):
        with pytest.raises(ValidationError):
            select_lambda(panel, grid=[0.0, 0.1])
        with pytest.raises(ValidationError):
            select_lambda(panel, grid=[2.0])

    def test_pre_period_too_short(self):
        panel = make_panel(4, 10, 1)

        with pytest.raises(TooShortPreError):
            select_lambda(panel)

    def test_threads_do_not_change_scores(self, panel):
        assert score_lambda_grid(panel, max_workers=1) == score_lambda_grid(panel, max_workers=4)
