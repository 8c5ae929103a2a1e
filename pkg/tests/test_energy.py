import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soilwave.energy import (
    BatterySpec,
    EnergyProfile,
    average_current,
    builtin_mcus,
    builtin_profiles,
    default_battery,
    estimate_lifetime,
    lifetime_report,
    load_profile,
    profile_from_dict,
    profile_to_dict,
)
from soilwave.errors import ArgumentError, DegenerateInputError, ValidationError


class TestAverageCurrent:
    def test_sensor_hand_arithmetic(self):
        # (35 * 7.5 + 0.004 * 592.5) / 600
        want = (262.5 + 2.37) / 600
        got = average_current(EnergyProfile(35, 7.5, 0.004, 600))
        assert got == pytest.approx(want, rel=1e-15)
        assert got == pytest.approx(0.44145, abs=5e-6)

    def test_limits(self):
        assert average_current(EnergyProfile(35, 0, 0.004, 600)) == 0.004
        assert average_current(EnergyProfile(35, 600, 0.004, 600)) == 35

    def test_zero_period(self):
        with pytest.raises(ArgumentError):
            average_current(EnergyProfile(1, 0, 0.1, 0))

    @pytest.mark.parametrize("args", [(-1, 1, 0, 10), (1, 1, -0.1, 10), (1, 11, 0, 10), (1, -1, 0, 10)])
    def test_invariants(self, args):
        with pytest.raises(ValidationError):
            EnergyProfile(*args)


class TestLifetime:
    def test_sensor(self):
        days = estimate_lifetime(builtin_profiles()["sensor"], default_battery())
        assert abs(days - 834.37) <= 0.5

    def test_beacon(self):
        days = estimate_lifetime(builtin_profiles()["beacon"], default_battery())
        assert abs(days - 1580) <= 1
        assert days / 365 == pytest.approx(4.33, abs=0.01)

    def test_sleep_only(self):
        days = estimate_lifetime(EnergyProfile(35, 0, 0.004, 600), default_battery())
        assert days == pytest.approx(8840 / 0.004 / 24, rel=1e-12)

    def test_zero_current(self):
        with pytest.raises(DegenerateInputError):
            estimate_lifetime(EnergyProfile(0, 1, 0, 10), default_battery())

    def test_battery_invariants(self):
        with pytest.raises(ValidationError):
            BatterySpec(0)
        with pytest.raises(ValidationError):
            BatterySpec(100, 1.0)
        assert BatterySpec(10400, 0.15).usable_mah == pytest.approx(8840)

    def test_report(self):
        r = lifetime_report(builtin_profiles()["sensor"], default_battery())
        assert set(r) == {"profile", "avg_current_ma", "lifetime_days", "lifetime_years"}
        assert r["lifetime_years"] == pytest.approx(2.29, abs=0.01)


profiles = st.builds(
    lambda ia, frac, isl, period: EnergyProfile(ia, frac * period, isl, period),
    st.floats(0.1, 200), st.floats(0.001, 0.9), st.floats(0.0001, 0.05), st.floats(10, 10_000),
)


class TestProperties:
    @given(profiles, st.floats(1.01, 3.0))
    @settings(max_examples=200)
    def test_monotone_in_currents_and_time(self, p, k):
        b = default_battery()
        base = estimate_lifetime(p, b)
        assert estimate_lifetime(EnergyProfile(p.i_active * k, p.t_active, p.i_sleep, p.period), b) < base
        assert estimate_lifetime(EnergyProfile(p.i_active, p.t_active, p.i_sleep * k, p.period), b) < base
        t = min(p.period, p.t_active * k)
        if p.i_active > p.i_sleep and t > p.t_active:
            assert estimate_lifetime(EnergyProfile(p.i_active, t, p.i_sleep, p.period), b) < base

    @given(profiles, st.floats(0.0, 0.9), st.floats(0.01, 0.09))
    @settings(max_examples=200)
    def test_monotone_in_battery(self, p, derate, step):
        lo = estimate_lifetime(p, BatterySpec(1000, min(derate + step, 0.99)))
        assert lo < estimate_lifetime(p, BatterySpec(1000, derate))
        assert estimate_lifetime(p, BatterySpec(1000 * (1 + step), derate)) > estimate_lifetime(p, BatterySpec(1000, derate))

    @given(profiles, st.floats(0.1, 10))
    @settings(max_examples=200)
    def test_duty_cycle_invariance(self, p, k):
        b = default_battery()
        scaled = EnergyProfile(p.i_active, p.t_active * k, p.i_sleep, p.period * k)
        assert estimate_lifetime(scaled, b) == pytest.approx(estimate_lifetime(p, b), rel=1e-12)


class TestPresets:
    def test_profiles(self):
        pr = builtin_profiles()
        assert (pr["sensor"].i_active, pr["sensor"].t_active) == (35.0, 7.5)
        assert (pr["beacon"].i_active, pr["beacon"].t_active) == (25.0, 5.5)
        for p in pr.values():
            assert p.i_sleep == 0.004 and p.period == 600.0
        assert pr["sensor"].components["LoRa RF96 IC"] == 116.1
        b = default_battery()
        assert (b.capacity_mah, b.derate) == (10400.0, 0.15)

    def test_mcus(self):
        assert builtin_mcus() == {"ATmega328P": 3.9, "ATtiny84": 3.0, "ATtiny85": 3.0, "STM32": 8.0}


class TestJson:
    def test_round_trip(self, tmp_path):
        p, b = builtin_profiles()["beacon"], BatterySpec(5000, 0.1)
        path = tmp_path / "p.json"
        path.write_text(json.dumps(profile_to_dict(p, b)))
        p2, b2 = load_profile(path)
        assert p2 == p and b2 == b

    def test_default_battery(self):
        _, b = profile_from_dict({"i_active": 1, "t_active": 1, "i_sleep": 0.01, "period": 60})
        assert b == default_battery()

    def test_missing_and_unknown(self):
        with pytest.raises(ValidationError):
            profile_from_dict({"i_active": 1, "t_active": 1, "period": 60})
        with pytest.raises(ValidationError):
            profile_from_dict({"i_active": 1, "t_active": 1, "i_sleep": 0, "period": 60, "volts": 3})
