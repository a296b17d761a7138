import numpy as np
import pytest

from hekf_kit import datagen, vehicle
from hekf_kit.datagen import LOADING_STATES, ManeuverDataset, ManeuverSpec, SensorNoise
from hekf_kit.errors import ConfigurationError, GenerationError
from hekf_kit.vehicle import VehicleParams


def _straight(duration=100.0, seed=3):
    return ManeuverSpec("sine", 0.0, 12.0, 12.0, duration, "partial_load_1", seed=seed)


def test_zero_steering_gives_zero_articulation():
    ds = datagen.generate_maneuver(_straight(10.0), VehicleParams())
    assert np.all(ds["true.theta"] == 0.0)
    assert np.all(ds["true.psi2_dot"] == 0.0)


def test_noise_variances_match_configuration():
    noise = SensorNoise(psi2_dot=0.01, v_x2=0.2, F_z2=800.0)
    ds = datagen.generate_maneuver(_straight(), VehicleParams(), noise)
    assert len(ds) > 10_000
    for col, truth, sigma in (("meas.psi2_dot", "true.psi2_dot", 0.01), ("meas.v_x2", "in.v_x2", 0.2),
                              ("meas.F_z2", "in.F_z2", 800.0)):
        var = np.var(ds[col] - ds[truth], ddof=1)
        assert var == pytest.approx(sigma**2, rel=0.05)


def test_wheel_speed_yaw_rate_noise():
    noise = SensorNoise(yaw_from_wheel_speeds=True, track_width=2.0, wheel_speed=0.01)
    ds = datagen.generate_maneuver(_straight(), VehicleParams(), noise)
    # difference of two independent wheel speeds over the track width
    assert np.var(ds["meas.psi2_dot"], ddof=1) == pytest.approx(2 * 0.01**2 / 4.0, rel=0.05)


def test_same_seed_same_bytes():
    spec = datagen.maneuver_suite("no_load", 1, 5.0, seed=11)[0]
    a = datagen.generate_maneuver(spec, VehicleParams()).to_csv()
    b = datagen.generate_maneuver(spec, VehicleParams()).to_csv()
    assert a == b


def test_csv_round_trip_at_nine_digits(tmp_path):
    spec = datagen.maneuver_suite("full_load", 1, 5.0, seed=2)[0]
    ds = datagen.generate_maneuver(spec, VehicleParams())
    path = tmp_path / "m.csv"
    ds.write(path)
    again = ManeuverDataset.read(path)
    assert again.dt == ds.dt and again.name == ds.name and again.loading == ds.loading
    for col in datagen.COLUMNS:
        np.testing.assert_allclose(again[col], ds[col], rtol=1e-8, atol=1e-300)
    assert again.to_csv() == path.read_text()


def test_loading_state_axle_load_and_cog_are_consistent():
    p = VehicleParams()
    for ls in LOADING_STATES.values():
        F_z2 = ls.F_z2(p.l_Agg)
        assert vehicle.semitrailer_mass(F_z2, ls.l_cog(), p.l_Agg) == pytest.approx(ls.mass(), rel=1e-12)
    body = datagen.TrailerBody()
    expected = (body.mass * body.cog * p.g + 21600.0 * 6.0 * p.g) / p.l_Agg
    assert LOADING_STATES["full_load"].F_z2(p.l_Agg) == pytest.approx(expected, rel=1e-12)


def test_ood_load_has_training_mass_but_distinct_axle_load():
    p = VehicleParams()
    pl1, pl2 = LOADING_STATES["partial_load_1"], LOADING_STATES["partial_load_2"]
    assert pl1.payload == pl2.payload
    loads = sorted(LOADING_STATES[k].F_z2(p.l_Agg) for k in datagen.TRAINING_LOADS)
    ood = pl2.F_z2(p.l_Agg)
    assert min(abs(ood - f) for f in loads) > 5e3


@pytest.mark.parametrize("kind", datagen.PROFILE_KINDS)
def test_profiles_respect_envelope(kind):
    spec = ManeuverSpec(kind, np.radians(30), 3.0, 22.0, 30.0, "no_load", rate=0.2)
    t = np.arange(0, 30, 0.01)
    assert np.max(np.abs(spec.steering(t))) <= np.radians(30) + 1e-12
    assert np.all(spec.steering(t[t < spec.t_start]) == 0)
    v = spec.speed(t)
    assert v.min() >= 3.0 and v.max() <= 22.0


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ManeuverSpec("sine", np.radians(31), 10.0, 10.0, 10.0, "no_load")
    with pytest.raises(ConfigurationError):
        ManeuverSpec("sine", 0.1, 25.0, 10.0, 10.0, "no_load")
    with pytest.raises(ConfigurationError):
        ManeuverSpec("zigzag", 0.1, 10.0, 10.0, 10.0, "no_load")
    with pytest.raises(ConfigurationError):
        ManeuverSpec("sine", 0.1, 10.0, 10.0, 10.0, "overload")


def test_unstable_simulation_raises_generation_error():
    weak = datagen.perturbed_params(VehicleParams(), 0.0)
    weak = vehicle.with_tires(weak, t21=vehicle.TireParams(c1=1e-3), t22=vehicle.TireParams(c1=1e-3),
                              t23=vehicle.TireParams(c1=1e-3))
    spec = ManeuverSpec("step", np.radians(30), 22.0, 22.0, 20.0, "full_load")
    with pytest.raises(GenerationError, match="unstable"):
        datagen.generate_maneuver(spec, weak)


def test_perturbation_changes_only_tire_coefficients():
    nom = VehicleParams()
    truth = datagen.perturbed_params(nom, 0.1, seed=4)
    assert truth.m1 == nom.m1 and truth.J2 == nom.J2
    for a, b in zip(truth.tires, nom.tires):
        assert a.D == b.D
        for f in ("C", "c1", "c2", "l_relax"):
            assert getattr(a, f) / getattr(b, f) == pytest.approx(1.1) or \
                getattr(a, f) / getattr(b, f) == pytest.approx(0.9)
    assert truth.tires[2] == truth.tires[3] == truth.tires[4]
