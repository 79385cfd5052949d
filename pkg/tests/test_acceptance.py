"""
End-to-end reproductions on the test model.

These runs take minutes; they are marked slow and skipped by default.
Run them with: pytest -m slow
"""

import numpy as np
import pytest

from src.fastslow_homogenizer.analysis import (
    DtPolicy,
    bench,
    eps_sweep,
    fit_loglog_slope,
    pipeline_errors,
    run_check_suite,
    stepsize_scaling,
)
from src.fastslow_homogenizer.integrator import dyadic_step
from src.fastslow_homogenizer.model import theta_star
from src.fastslow_homogenizer.systems import (
    full_energy,
    full_states,
    initial_slow_state,
    run_full,
    run_homogenized,
    run_second_order,
    run_transformed,
    slow_states,
    transform_trajectory,
)
from src.fastslow_homogenizer.thermo import (
    observables_leading,
    thermo_series,
    verify_constituents,
    verify_constraint,
    verify_first_law,
)

from .conftest import TEST_MODEL_ENERGY

pytestmark = pytest.mark.slow

SWEEP_EPS = [0.5 ** 3, 0.5 ** 4, 0.5 ** 5, 0.5 ** 6]


@pytest.fixture(scope="module")
def sweep(test_model):
    return eps_sweep(test_model, SWEEP_EPS, T=1.0, workers=None)


class TestConvergence:
    """Test the orders of the leading and second-order approximations."""

    def test_leading_order_slope(self, sweep):
        """Test sup |y_eps - y0| = O(eps^2)."""
        assert not sweep.degenerate
        assert 1.7 <= sweep.slope_leading <= 2.3

    def test_second_order_slope(self, sweep):
        """Test sup |y_eps - y0 - eps^2 (ybar2 + [y2])| = O(eps^3)."""
        assert 2.5 <= sweep.slope_second <= 3.5

    def test_second_order_improves_every_eps(self, sweep):
        """Test that the second-order error is at most a quarter of the leading error."""
        for leading, second in zip(sweep.sup_errors_leading, sweep.sup_errors_second):
            assert second <= 0.25 * leading

    def test_reconstruction_close_to_full(self, sweep):
        """Test the tenfold improvement at eps = 1/32."""
        k = sweep.eps_values.index(0.5 ** 5)
        assert sweep.sup_errors_second[k] <= sweep.sup_errors_leading[k] / 10

    def test_long_horizon(self, test_model):
        """Test that the second-order error stays below the leading one up to T = 1/eps^2."""
        eps = 0.125
        errors = pipeline_errors(test_model, eps, T=eps ** -2)
        late = errors.times > 1.0

        assert np.all(errors.column("max_second")[late] < errors.column("max_leading")[late])


class TestStepSizes:
    """Test the scaling of the largest admissible steps."""

    @pytest.mark.parametrize(
        "pipeline, criterion, exponent, tolerance, expected_at_eighth",
        [
            ("full", "leading", 2.0, 0.5, 1e-3),
            ("slow", "leading", 1.0, 0.4, 3e-2),
            ("full", "second", 3.0, 0.5, 4e-4),
            ("slow", "second", 1.5, 0.4, 3e-3),
        ],
    )
    def test_scaling(self, test_model, pipeline, criterion, exponent, tolerance, expected_at_eighth):
        """Test the fitted exponent of dt_max and its value at eps = 1/8."""
        scaling = stepsize_scaling(test_model, [0.25, 0.125, 0.0625], pipeline, criterion, T=1.0, workers=None)

        assert abs(scaling.exponent - exponent) <= tolerance
        at_eighth = next(report for report in scaling.reports if report.eps == 0.125)
        assert expected_at_eighth / 4 <= at_eighth.dt_max <= expected_at_eighth * 4

    def test_step_count_ratio(self, test_model):
        """Test that the slow pipeline needs at least 30 times fewer steps at eps = 1/32, growing with 1/eps."""
        policy = DtPolicy()
        ratios = [
            bench(test_model, eps, 1.0, policy.dt_full(eps, 1.0), policy.dt_slow(eps, 1.0), execute=False).step_ratio
            for eps in (0.5 ** 4, 0.5 ** 5, 0.5 ** 6)
        ]

        assert ratios[1] >= 30
        assert ratios[0] < ratios[1] < ratios[2]


class TestConservation:
    """Test the conserved quantities of each pipeline."""

    def _drift(self, model, eps, dt):
        traj = run_full(model, eps, dt, 1.0, output_stride=16)
        energies = np.array([full_energy(model, state, eps) for state in full_states(model, traj)])
        return np.max(np.abs(energies - TEST_MODEL_ENERGY)) / TEST_MODEL_ENERGY

    def test_full_energy(self, test_model):
        """Test relative drift at most 1e-6 and second-order shrinkage when dt halves."""
        drift = self._drift(test_model, 0.125, 1.0 / 16384)
        drift_half = self._drift(test_model, 0.125, 1.0 / 32768)

        assert drift <= 1e-6
        assert drift / drift_half >= 3.5

    def test_second_order_constraint(self, test_model):
        """Test |Ebar2_perp + Ebar2_par| <= 1e-6 on [0, 1], including t = 0."""
        dt = 1.0 / 16384
        traj = run_second_order(test_model, 0.125, dt, 1.0, output_stride=64)
        report = verify_constraint(thermo_series(test_model, None, traj, 0.125), dt)

        assert report.initial_abs <= 1e-12
        assert report.max_abs <= 1e-6

    def test_constituent_relations_along_run(self, test_model, second_trajectory):
        """Test the affine constituent relations at several states of a run."""
        _, C = initial_slow_state(test_model)
        for state in slow_states(test_model, second_trajectory)[::4]:
            report = verify_constituents(test_model, state, C=C)
            assert max(report.temperature_residual, report.force_residual, report.identity_residual) <= 1e-10

    def test_first_law_order(self, test_model):
        """Test that halving the output spacing reduces the first-law residual rate by about four."""
        rates = []
        for stride in (128, 64):
            traj = run_homogenized(test_model, 1.0 / 8192, 1.0, output_stride=stride)
            y = traj.columns(["y1", "y2"])
            p = traj.columns(["p1", "p2"])
            records = [observables_leading(test_model, y[k], p[k], t=float(t)) for k, t in enumerate(traj.times)]
            rates.append(verify_first_law(records).max_rate)

        assert 3.5 <= rates[0] / rates[1] <= 4.5


class TestAdiabaticInvariant:
    """Test that the actions stay within O(eps) of theta*."""

    def test_action_deviation_slope(self, test_model):
        """Test sup |theta_eps - theta*| = O(eps) in every channel."""
        deviations = []
        for eps in SWEEP_EPS:
            traj = run_full(test_model, eps, dyadic_step(1.0, eps / 512), 1.0, output_stride=16)
            angles = transform_trajectory(test_model, traj, eps)
            theta = angles.columns([f"theta{lam + 1}" for lam in range(test_model.r)])
            deviations.append(np.max(np.abs(theta - theta_star(test_model)), axis=0))
        deviations = np.array(deviations)

        for lam in range(test_model.r):
            assert 0.7 <= fit_loglog_slope(SWEEP_EPS, deviations[:, lam]).slope <= 1.3

    def test_coordinates_agree(self, test_model):
        """Test that integrating in action-angle variables matches the mapped full run."""
        eps, dt = 0.125, 1.0 / 8192
        mapped = transform_trajectory(test_model, run_full(test_model, eps, dt, 1.0, output_stride=64), eps)
        direct = run_transformed(test_model, eps, dt, 1.0, output_stride=64)

        for label in ("y1", "y2", "theta1", "theta2"):
            np.testing.assert_allclose(mapped.column(label), direct.column(label), rtol=0, atol=1e-4)


class TestDegenerateOracle:
    """Test the constant-frequency model, for which all corrections vanish."""

    def test_no_corrections(self, constant_model):
        """Test zero corrections and y_eps = y0 when both pipelines share one step."""
        dt = 1.0 / 4096
        policy = DtPolicy(full_coeff=dt, full_power=0.0, slow_coeff=dt, slow_power=0.0)
        errors = pipeline_errors(constant_model, 0.125, T=1.0, policy=policy)

        np.testing.assert_allclose(errors.column("y2_total"), 0.0, atol=1e-14)
        np.testing.assert_allclose(errors.column("e_leading"), 0.0, atol=1e-12)

    def test_zero_second_order_thermodynamics(self, constant_model):
        """Test that Sbar2 and Ebar2_perp vanish along the run."""
        traj = run_second_order(constant_model, 0.125, 1.0 / 1024, 1.0, output_stride=64)
        for record in thermo_series(constant_model, None, traj, 0.125):
            assert abs(record.Sbar2) <= 1e-14
            assert abs(record.Ebar2_perp) <= 1e-14


def test_check_suite_passes(test_model):
    """Test that every named check passes on the test model."""
    report = run_check_suite(test_model)
    assert report.failed == []
