"""
Unit tests for the thermo module.
"""

import logging
from dataclasses import replace

import numpy as np
import pytest

from src.fastslow_homogenizer.analysis import windowed_average
from src.fastslow_homogenizer.errors import GridMismatch, ZeroFastEnergy
from src.fastslow_homogenizer.integrator import Trajectory
from src.fastslow_homogenizer.model import frequency_jets
from src.fastslow_homogenizer.systems import (
    FullState,
    initial_slow_state,
    run_full,
    run_homogenized,
    run_second_order,
    second_order_energy,
    to_action_angle,
)
from src.fastslow_homogenizer.thermo import (
    ThermoRecord,
    entropy_constant,
    log_phase_volume,
    observables_eps,
    observables_leading,
    observables_second,
    oscillatory_observables,
    thermo_series,
    verify_constituents,
    verify_constraint,
    verify_first_law,
)

from .conftest import TEST_MODEL_ENERGY

EPS = 0.125


def _leading_records(model, traj):
    y = traj.columns([f"y{k + 1}" for k in range(model.n)])
    p = traj.columns([f"p{k + 1}" for k in range(model.n)])
    return [observables_leading(model, y[k], p[k], t=float(t)) for k, t in enumerate(traj.times)]


@pytest.fixture(scope="module")
def full_trajectory(test_model):
    """Full run on the same grid as the second_trajectory fixture."""
    return run_full(test_model, EPS, 1.0 / 1024, 0.25, output_stride=16)


class TestFiniteEpsObservables:
    """Test temperature, entropy and phase volume at finite eps."""

    def test_initial_state(self, test_model):
        """Test E_perp = 1/2 |u*|^2 and the split of the total energy at t = 0."""
        record = observables_eps(test_model, FullState.initial(test_model), EPS, t=0.0)

        assert record.E_perp == pytest.approx(6.5)
        assert record.T_eps == pytest.approx(3.25)
        assert record.E_perp + record.E_par == pytest.approx(TEST_MODEL_ENERGY, abs=1e-12)
        assert record.t == 0.0

    def test_entropy_identity(self, test_model):
        """Test log Gamma_eps + C_eps = S_eps."""
        state = FullState(
            y=np.array([0.9, -0.4]),
            ydot=np.array([0.3, 1.1]),
            z=np.array([0.05, -0.02]),
            zdot=np.array([2.5, 1.7]),
        )
        record = observables_eps(test_model, state, EPS)

        assert record.log_Gamma_eps + entropy_constant(test_model.r, EPS) == pytest.approx(record.S_eps, abs=1e-12)
        assert np.log(record.Gamma_eps) == pytest.approx(record.log_Gamma_eps)

    def test_force_is_temperature_times_log_gradient(self, test_model):
        """Test F_eps = T_eps sum_lambda DL_lambda."""
        state = FullState.initial(test_model)
        record = observables_eps(test_model, state, EPS)
        d_log = frequency_jets(test_model, state.y, order=1).d_log

        np.testing.assert_allclose(record.F_eps, record.T_eps * d_log.sum(axis=0))

    def test_accepts_action_angle_state(self, test_model):
        """Test that a transformed state gives the same observables as the full one."""
        state = FullState(
            y=np.array([1.0, -0.5]),
            ydot=np.array([1.0, 1.2]),
            z=np.array([0.01, 0.02]),
            zdot=np.array([3.0, 2.0]),
        )
        direct = observables_eps(test_model, state, EPS)
        transformed = observables_eps(test_model, to_action_angle(test_model, state, EPS), EPS)

        assert transformed.E_perp == pytest.approx(direct.E_perp, rel=1e-12)
        assert transformed.S_eps == pytest.approx(direct.S_eps, rel=1e-12)
        assert log_phase_volume(test_model, state, EPS) == pytest.approx(direct.log_Gamma_eps)

    def test_zero_fast_energy(self, test_model):
        """Test that a fast subsystem at rest has no entropy."""
        state = FullState(np.array([1.0, -0.5]), np.zeros(2), np.zeros(2), np.zeros(2))
        with pytest.raises(ZeroFastEnergy):
            observables_eps(test_model, state, EPS)

    def test_entropy_constant_single_channel(self):
        """Test C_eps = -log(2 eps pi) for r = 1."""
        assert entropy_constant(1, 0.25) == pytest.approx(-np.log(0.5 * np.pi))


class TestLeadingObservables:
    """Test the leading-order thermodynamics along the homogenized motion."""

    def test_initial_values(self, test_model):
        """Test E0_perp = theta* . omega = 6.5 and E0_par = 8.25125 - 6.5."""
        record = observables_leading(test_model, test_model.y_star, test_model.p_star)

        assert record.E0_perp == pytest.approx(6.5)
        assert record.T0 == pytest.approx(3.25)
        assert record.E0_par == pytest.approx(TEST_MODEL_ENERGY - 6.5)
        assert record.E0_perp_from_entropy == pytest.approx(record.E0_perp, rel=1e-12)

    def test_entropy_of_energy_holds_along_trajectory(self, test_model, homog_trajectory):
        """Test E0_perp(S0, y0) reproduces E0_perp at every sample."""
        for record in _leading_records(test_model, homog_trajectory):
            assert record.E0_perp_from_entropy == pytest.approx(record.E0_perp, rel=1e-12)

    def test_entropy_varies_for_test_model(self, test_model, homog_trajectory):
        """Test that S0 changes along the motion when the frequency ratios do."""
        entropy = np.array([rec.S0 for rec in _leading_records(test_model, homog_trajectory)])
        assert np.ptp(entropy) > 1e-3

    def test_entropy_constant_for_fixed_ratio(self, ratio_model):
        """Test that S0 stays at its initial value when omega_2 = 2 omega_1."""
        traj = run_homogenized(ratio_model, 1.0 / 256, 1.0, output_stride=16)
        entropy = np.array([rec.S0 for rec in _leading_records(ratio_model, traj)])
        np.testing.assert_allclose(entropy, entropy[0], rtol=0, atol=1e-12)

    def test_scaling_of_initial_velocities(self, test_model):
        """Test that u* -> c u* scales T0 and F0 by c^2 and shifts S0 by r log c^2."""
        c = 1.5
        hot = test_model.with_initial_data(u_star=c * test_model.u_star)
        base = observables_leading(test_model, test_model.y_star, test_model.p_star)
        scaled = observables_leading(hot, hot.y_star, hot.p_star)

        assert scaled.T0 == pytest.approx(c ** 2 * base.T0)
        np.testing.assert_allclose(scaled.F0, c ** 2 * base.F0)
        assert scaled.S0 == pytest.approx(base.S0 + test_model.r * np.log(c ** 2))

    def test_zero_actions(self, test_model):
        """Test that vanishing theta* leaves the leading entropy undefined."""
        cold = test_model.with_initial_data(u_star=np.zeros(test_model.r))
        with pytest.raises(ZeroFastEnergy):
            observables_leading(cold, cold.y_star, cold.p_star)


class TestSecondOrderObservables:
    """Test the averaged second-order thermodynamics."""

    def test_parts_balance_at_start(self, test_model, slow_start):
        """Test Ebar2_perp + Ebar2_par = Ebar2 = 0 at t = 0."""
        state, C = slow_start
        record = observables_second(test_model, state, C)

        assert record.Ebar2_perp + record.Ebar2_par == pytest.approx(second_order_energy(test_model, state, C), abs=1e-12)
        assert abs(record.Ebar2_perp + record.Ebar2_par) < 1e-12

    def test_energy_of_entropy_identity(self, test_model, slow_start):
        """Test that Ebar2_perp(Sbar2, ybar2) reproduces Ebar2_perp."""
        state, C = slow_start
        record = observables_second(test_model, state, C)
        assert record.Ebar2_perp_from_entropy == pytest.approx(record.Ebar2_perp, abs=1e-12)

    def test_constituent_relations(self, test_model, slow_start):
        """Test dEbar2_perp/dSbar2 = T0 and dEbar2_perp/dybar2 = F0."""
        state, C = slow_start
        report = verify_constituents(test_model, state, C=C)

        assert report.temperature_residual <= 1e-10
        assert report.force_residual <= 1e-10
        assert report.identity_residual <= 1e-10

    def test_constituent_relations_detect_force_mismatch(self, test_model, slow_start, mocker):
        """Test that a force inconsistent with the frequency jets shows up in the force residual."""
        state, C = slow_start

        def skewed(model, y0, p0, t=None):
            record = observables_leading(model, y0, p0, t=t)
            return replace(record, F0=1.5 * record.F0)

        mocker.patch("src.fastslow_homogenizer.thermo.observables_leading", side_effect=skewed)
        report = verify_constituents(test_model, state, C=C)

        assert report.temperature_residual <= 1e-10
        assert report.force_residual > 1e-3

    def test_constituent_step_must_be_positive(self, test_model, slow_start):
        """Test that a non-positive difference step is rejected."""
        state, C = slow_start
        with pytest.raises(ValueError, match="must be positive"):
            verify_constituents(test_model, state, h=0.0, C=C)

    def test_oscillatory_terms_at_start(self, test_model, slow_start):
        """Test that first-order slow energy oscillations vanish at phi0 = 0."""
        state, C = slow_start
        record = oscillatory_observables(test_model, state, EPS, C=C)
        leading = observables_leading(test_model, state.y0, state.p0)

        assert record.E1_par_osc == 0.0
        assert record.S1_osc == pytest.approx(record.E1_perp_osc / leading.T0)

    def test_constant_frequencies_have_no_corrections(self, constant_model):
        """Test that every oscillatory term vanishes when omega does not depend on y."""
        state, C = initial_slow_state(constant_model)
        record = oscillatory_observables(constant_model, state, EPS, C=C)

        assert record.E1_perp_osc == 0.0
        assert record.E1_par_osc == 0.0
        assert record.S1_osc == 0.0


class TestOscillatoryAverages:
    """Test that the oscillatory expansion terms average out over many fast periods."""

    def test_first_order_terms_average_out(self, test_model):
        """Test windowed averages of [E1_perp], [S1] and [E1_par] well below their amplitude."""
        eps = 1.0 / 64
        traj = run_second_order(test_model, eps, 1.0 / 1024, 0.5)
        records = thermo_series(test_model, None, traj, eps)
        for name in ("E1_perp_osc", "S1_osc", "E1_par_osc"):
            values = np.array([getattr(rec, name) for rec in records])
            series = Trajectory(traj.times, values.reshape(-1, 1), (name,))
            averaged = windowed_average(series, name, 0.125).column(f"{name}_avg")

            assert np.max(np.abs(averaged)) <= 0.2 * np.max(np.abs(values))


class TestThermoRecord:
    """Test merging and flattening of records."""

    def test_merge_prefers_set_fields(self):
        """Test that fields set in the other record win and None leaves the original."""
        base = ThermoRecord(t=1.0, E0_perp=2.0, T0=1.0)
        merged = base.merge(ThermoRecord(T0=3.0))

        assert merged.t == 1.0
        assert merged.E0_perp == 2.0
        assert merged.T0 == 3.0

    def test_to_row_flattens_vectors(self):
        """Test that vectors become 1-based suffixed columns and None is skipped."""
        row = ThermoRecord(t=0.5, S0=1.25, F0=np.array([0.1, 0.2])).to_row()
        assert row == {"t": 0.5, "S0": 1.25, "F0_1": 0.1, "F0_2": 0.2}


class TestThermoSeries:
    """Test records assembled along trajectories."""

    def test_slow_only(self, test_model, second_trajectory):
        """Test that finite-eps fields stay unset without a full trajectory."""
        records = thermo_series(test_model, None, second_trajectory, EPS)

        assert len(records) == len(second_trajectory)
        assert records[0].E_perp is None
        assert records[0].Sbar2 is not None
        np.testing.assert_allclose([rec.t for rec in records], second_trajectory.times)

    def test_with_full_trajectory(self, test_model, full_trajectory, second_trajectory):
        """Test finite-eps records and the entropy identity along a full run."""
        records = thermo_series(test_model, full_trajectory, second_trajectory, EPS)
        constant = entropy_constant(test_model.r, EPS)

        for record in records:
            assert record.E_perp + record.E_par == pytest.approx(TEST_MODEL_ENERGY, abs=1e-3)
            assert record.log_Gamma_eps + constant == pytest.approx(record.S_eps, abs=1e-10)

    def test_grid_mismatch(self, test_model, second_trajectory):
        """Test that trajectories on different grids are rejected."""
        coarse = run_full(test_model, EPS, 1.0 / 1024, 0.25, output_stride=32)
        with pytest.raises(GridMismatch):
            thermo_series(test_model, coarse, second_trajectory, EPS)


class TestFirstLaw:
    """Test the discrete first-law residual."""

    def test_residual_is_small(self, test_model, homog_trajectory):
        """Test that the per-step residual is far below the energy scale."""
        report = verify_first_law(_leading_records(test_model, homog_trajectory), homog_trajectory)

        assert report.steps == len(homog_trajectory) - 1
        assert report.dt == pytest.approx(1.0 / 64)
        assert report.max_residual < 1e-4

    def test_second_order_rate(self, test_model, homog_trajectory):
        """Test that halving the output spacing divides the residual rate by about four."""
        fine = verify_first_law(_leading_records(test_model, homog_trajectory))
        coarse_traj = homog_trajectory.subsample(2)
        coarse = verify_first_law(_leading_records(test_model, coarse_traj))

        assert 3.0 < coarse.max_rate / fine.max_rate < 5.0

    def test_single_record(self, test_model):
        """Test that one record yields an empty report."""
        record = observables_leading(test_model, test_model.y_star, test_model.p_star, t=0.0)
        report = verify_first_law([record])

        assert report.steps == 0
        assert report.max_rate == 0.0

    def test_non_uniform_grid(self, test_model, homog_trajectory):
        """Test that irregular record times raise GridMismatch."""
        records = _leading_records(test_model, homog_trajectory)[:4]
        del records[2]
        with pytest.raises(GridMismatch, match="uniform"):
            verify_first_law(records)

    def test_trajectory_grid_must_match(self, test_model, homog_trajectory):
        """Test that the positions trajectory must share the record times."""
        records = _leading_records(test_model, homog_trajectory)
        with pytest.raises(GridMismatch):
            verify_first_law(records, homog_trajectory.subsample(2))


class TestConstraint:
    """Test the averaged second-order energy constraint."""

    def test_constraint_holds(self, test_model, second_trajectory):
        """Test |Ebar2_perp + Ebar2_par| within max(100 dt^2, 1e-12) along the run."""
        records = thermo_series(test_model, None, second_trajectory, EPS)
        report = verify_constraint(records, 1.0 / 1024)

        assert report.passed
        assert report.initial_abs < 1e-12
        assert report.tolerance == pytest.approx(100.0 / 1024 ** 2)

    def test_violation_is_reported(self, caplog):
        """Test that a violated constraint fails and logs a warning."""
        caplog.set_level(logging.WARNING)
        records = [ThermoRecord(Ebar2_perp=0.0, Ebar2_par=0.0), ThermoRecord(Ebar2_perp=1.0, Ebar2_par=-0.5)]
        report = verify_constraint(records, 0.01)

        assert not report.passed
        assert report.max_abs == 0.5
        assert "Averaged second-order energy" in caplog.text

    def test_tolerance_floor(self):
        """Test that tiny steps fall back to the 1e-12 floor."""
        report = verify_constraint([ThermoRecord(Ebar2_perp=0.0, Ebar2_par=0.0)], 1e-9)
        assert report.tolerance == 1e-12
