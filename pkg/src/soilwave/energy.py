"""Duty-cycle battery lifetime of the buried sensor and the sensor-free beacon."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ArgumentError, DegenerateInputError, ValidationError

HOURS_PER_DAY = 24.0
DAYS_PER_YEAR = 365.0


@dataclass(frozen=True)
class EnergyProfile:
    i_active: float  # mA
    t_active: float  # s
    i_sleep: float  # mA
    period: float  # s
    label: str = ""
    components: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.i_active < 0 or self.i_sleep < 0:
            raise ValidationError("currents must be >= 0")
        if self.period < 0 or not 0 <= self.t_active <= self.period:
            raise ValidationError("need 0 <= t_active <= period")


@dataclass(frozen=True)
class BatterySpec:
    capacity_mah: float
    derate: float = 0.15

    def __post_init__(self):
        if not self.capacity_mah > 0:
            raise ValidationError("capacity_mah must be > 0")
        if not 0 <= self.derate < 1:
            raise ValidationError("derate must lie in [0, 1)")

    @property
    def usable_mah(self) -> float:
        return self.capacity_mah * (1.0 - self.derate)


def average_current(p: EnergyProfile) -> float:
    """Time-weighted mean current over one wake/sleep period, in mA."""
    if p.period == 0:
        raise ArgumentError("period must be > 0")
    return (p.i_active * p.t_active + p.i_sleep * (p.period - p.t_active)) / p.period


def estimate_lifetime(p: EnergyProfile, b: BatterySpec) -> float:
    """Days until the derated capacity is exhausted."""
    avg = average_current(p)
    if avg <= 0:
        raise DegenerateInputError("average current is zero; lifetime is unbounded")
    return b.usable_mah / avg / HOURS_PER_DAY


def lifetime_report(p: EnergyProfile, b: BatterySpec) -> dict:
    days = estimate_lifetime(p, b)
    return {
        "profile": p.label,
        "avg_current_ma": average_current(p),
        "lifetime_days": days,
        "lifetime_years": days / DAYS_PER_YEAR,
    }


# Per-component active currents (mA) of the prototypes; informational only.
_SENSOR_COMPONENTS = {
    "LoRa RF96 IC": 116.1,
    "Soil moisture sensor v2.7.6": 9.34,
    "Arduino mini pro (ATmega328p)": 9.09,
    "LDO": 0.00377,
    "Timer TPL5110": 0.000310,
}
_BEACON_COMPONENTS = {
    "LoRa RF96 IC": 116.1,
    "Soil moisture sensor v2.7.6": 0.0,
    "Arduino mini pro (ATmega328p)": 4.0,
    "LDO": 0.00377,
    "Timer TPL5110": 0.000310,
}

SLEEP_MA = 0.004
KEEPALIVE_PERIOD_S = 600.0

MCU_ACTIVE_MA = {
    "ATmega328P": 3.9,
    "ATtiny84": 3.0,
    "ATtiny85": 3.0,
    "STM32": 8.0,
}


def default_battery() -> BatterySpec:
    """Li-SOCl2 pack, 10.4 Ah with 15 % self-discharge derating."""
    return BatterySpec(capacity_mah=10400.0, derate=0.15)


def builtin_profiles() -> dict[str, EnergyProfile]:
    return {
        "sensor": EnergyProfile(35.0, 7.5, SLEEP_MA, KEEPALIVE_PERIOD_S, "sensor", dict(_SENSOR_COMPONENTS)),
        "beacon": EnergyProfile(25.0, 5.5, SLEEP_MA, KEEPALIVE_PERIOD_S, "beacon", dict(_BEACON_COMPONENTS)),
    }


def builtin_mcus() -> dict[str, float]:
    return dict(MCU_ACTIVE_MA)


def profile_from_dict(d: dict) -> tuple[EnergyProfile, BatterySpec]:
    """Profile JSON: ``i_active``, ``t_active``, ``i_sleep``, ``period``, optional ``label``
    and ``battery: {capacity_mah, derate}`` (defaults to the built-in pack)."""
    d = dict(d)
    battery = d.pop("battery", None)
    try:
        p = EnergyProfile(float(d.pop("i_active")), float(d.pop("t_active")), float(d.pop("i_sleep")),
                          float(d.pop("period")), str(d.pop("label", "custom")))
    except KeyError as exc:
        raise ValidationError(f"profile is missing {exc.args[0]!r}") from None
    if d:
        raise ValidationError(f"unknown profile keys: {sorted(d)}")
    b = default_battery() if battery is None else BatterySpec(**battery)
    return p, b


def profile_to_dict(p: EnergyProfile, b: BatterySpec) -> dict:
    d = {k: v for k, v in asdict(p).items() if k != "components"}
    d["battery"] = asdict(b)
    return d


def load_profile(path) -> tuple[EnergyProfile, BatterySpec]:
    with open(path, encoding="utf-8") as fh:
        return profile_from_dict(json.load(fh))
