import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hekf_kit import vehicle
from hekf_kit.errors import ConfigurationError, DomainError
from hekf_kit.vehicle import ModelInput, TireParams, VehicleParams


def test_mftm_matches_hand_evaluation():
    tire = TireParams(C=1.4, D=1.0, c1=7.0, c2=40e3, l_relax=0.6)
    alpha, F_z, mu = 0.05, 30e3, 0.9
    # sin(2 atan(x)) = 2x / (1 + x^2)
    x = F_z / tire.c2
    B = tire.c1 * (2 * x / (1 + x * x)) / tire.C
    expected = mu * F_z * math.sin(tire.C * math.atan(B * math.tan(alpha)))
    assert vehicle.mftm_steady_force(alpha, F_z, tire, mu) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(8749.6, abs=1.0)


@settings(max_examples=200, deadline=None)
@given(alpha=st.floats(-1.5, 1.5), F_z=st.floats(0.0, 2e5),
       C=st.floats(0.5, 2.0), c1=st.floats(1.0, 15.0), c2=st.floats(1e4, 1e5), mu=st.floats(0.1, 1.5))
def test_mftm_bounded_and_odd(alpha, F_z, C, c1, c2, mu):
    tire = TireParams(C=C, c1=c1, c2=c2)
    f = vehicle.mftm_steady_force(alpha, F_z, tire, mu)
    assert abs(f) <= mu * F_z
    assert f == -vehicle.mftm_steady_force(-alpha, F_z, tire, mu)


def test_small_slip_slope_is_cornering_stiffness():
    tire = TireParams()
    F_z, mu, h = 40e3, 0.9, 1e-7
    slope = vehicle.mftm_steady_force(h, F_z, tire, mu) / h
    expected = mu * F_z * tire.c1 * math.sin(2 * math.atan(F_z / tire.c2))
    assert slope == pytest.approx(expected, rel=1e-6)


def test_tire_domain_errors():
    tire = TireParams()
    with pytest.raises(DomainError):
        vehicle.mftm_steady_force(np.pi / 2, 1e4, tire, 0.9)
    with pytest.raises(DomainError):
        vehicle.mftm_steady_force(0.1, -1.0, tire, 0.9)
    with pytest.raises(DomainError):
        vehicle.tire_force_derivative(0.0, 0.1, 1e4, 0.0, tire, 0.9)
    with pytest.raises(ConfigurationError):
        TireParams(C=-1.0)


def test_relaxation_moves_force_toward_steady_value():
    tire = TireParams()
    steady = vehicle.mftm_steady_force(0.03, 4e4, tire, 0.9)
    assert vehicle.tire_force_derivative(steady, 0.03, 4e4, 10.0, tire, 0.9) == 0.0
    assert vehicle.tire_force_derivative(steady - 100.0, 0.03, 4e4, 10.0, tire, 0.9) > 0
    # time constant l / v_x
    rate = vehicle.tire_force_derivative(steady - 100.0, 0.03, 4e4, 10.0, tire, 0.9)
    assert rate == pytest.approx(100.0 * 10.0 / tire.l_relax, rel=1e-12)


def test_straight_driving_stays_straight():
    p = VehicleParams()
    n = 200
    X = vehicle.simulate(np.zeros(vehicle.N_SSM), np.zeros(n), np.full(n, 15.0), np.full(n, 1.5e5),
                         np.full(n, 5.0), p)
    assert np.all(X == 0.0)


def test_mirrored_steering_mirrors_states():
    p = VehicleParams()
    t = np.arange(300) * vehicle.DT
    delta = 0.05 * np.sin(2 * np.pi * 0.4 * t)
    args = (np.full_like(t, 12.0), np.full_like(t, 1.2e5), np.full_like(t, 5.5), p)
    X = vehicle.simulate(np.zeros(vehicle.N_SSM), delta, *args)
    Xm = vehicle.simulate(np.zeros(vehicle.N_SSM), -delta, *args)
    np.testing.assert_allclose(Xm, -X, atol=1e-9 * np.abs(X).max())


def test_king_pin_constraint_is_kept():
    p = VehicleParams()
    t = np.arange(1500) * vehicle.DT
    delta = 0.08 * np.sin(2 * np.pi * 0.3 * t)
    v, l_cog = 14.0, 5.5
    X = vehicle.simulate(np.zeros(vehicle.N_SSM), delta, np.full_like(t, v), np.full_like(t, 1.5e5),
                         np.full_like(t, l_cog), p)
    vy1, r1, vy2, r2, theta = (X[:, i] for i in (vehicle.VY1, vehicle.R1, vehicle.VY2, vehicle.R2, vehicle.THETA))
    violation = vy1 - p.l_c1 * r1 - v * theta - vy2 - l_cog * r2
    assert np.max(np.abs(violation)) < 1e-3 * np.max(np.abs(vy1))
    assert np.max(np.abs(theta)) > 0.01


def test_rk4_is_fourth_order():
    # dx/dt = -x; local error of one step scales like dt^5
    errs = [abs(vehicle.rk4_step(lambda x: -x, 1.0, h) - math.exp(-h)) for h in (0.1, 0.05)]
    assert errs[0] / errs[1] == pytest.approx(32, rel=0.05)


def test_augmented_transition_holds_random_walk_states():
    x = np.zeros(vehicle.N_AUG)
    x[vehicle.DELTA1], x[vehicle.LCOG] = 0.02, 5.0
    out = vehicle.augmented_transition(x, [12.0, 1.4e5], VehicleParams())
    assert out[vehicle.DELTA1] == 0.02 and out[vehicle.LCOG] == 5.0
    assert out[vehicle.R1] > 0  # left steer turns left


def test_input_domain_errors():
    p = VehicleParams()
    x = np.zeros(vehicle.N_SSM)
    for bad in (ModelInput(0.0, 0.0, 1e5, 5.0), ModelInput(0.0, 10.0, 0.0, 5.0),
                ModelInput(0.0, 10.0, 1e5, -1.0), ModelInput(1.6, 10.0, 1e5, 5.0)):
        with pytest.raises(DomainError):
            vehicle.continuous_dynamics(x, bad, p)


def test_semitrailer_mass_inverts_static_balance():
    m2, l_cog, p = 20e3, 5.0, VehicleParams()
    F_z2 = m2 * p.g * l_cog / p.l_Agg
    assert vehicle.semitrailer_mass(F_z2, l_cog, p.l_Agg) == pytest.approx(m2, rel=1e-14)
    assert np.sum(vehicle.vertical_axle_forces(F_z2)) == pytest.approx(F_z2, rel=1e-14)


def test_parameter_file_round_trip(tmp_path):
    p = vehicle.with_tires(VehicleParams(m1=8123.5), t21=TireParams(C=1.31, c1=6.5, c2=4.1e4, l_relax=0.51))
    path = tmp_path / "params.txt"
    vehicle.save_params(path, p)
    assert vehicle.load_params(path) == p
    path.write_text("m1 = 1\nbogus = 2\n")
    with pytest.raises(ConfigurationError):
        vehicle.load_params(path)


def test_output_matrix_selects_measured_states():
    C = vehicle.output_matrix("hekf")
    x = np.arange(vehicle.N_AUG, dtype=float)
    np.testing.assert_array_equal(C @ x, vehicle.measurement(x, "hekf"))
    with pytest.raises(ConfigurationError):
        vehicle.output_indices("ukf")
