"""Preset ECU fleets used by the experiments and tests.

ECUs are specified by two numbers.  ``upsilon`` is the target profile, via
the small-deviation approximation

    upsilon ~ -857*dh - 2000*dl + 1000*1.95*sigma*(1/3.5 - 1/1.5)

with dh, dl the offsets of the dominant levels from 3.5 V / 1.5 V (the last
term accounts for the tracked percentiles sitting 0.67 and 1.28 noise
deviations from the mode).  ``spread`` is ``dh - 3*dl``, which a change of
supply voltage leaves untouched because it moves CANH three times as much as
CANL.  ECUs with distinct ``spread`` therefore keep distinct momentary levels
even when one of them shifts its supply to copy another's profile.
"""

from __future__ import annotations

from dataclasses import dataclass

from .bus import BusConfig, EcuConfig, MessageSpec, TransientModel, solve_params

_PCT_OFFSET = 0.674 + 1.282
_KH, _KL = 3000 / 3.5, 3000 / 1.5


def levels_for_profile(upsilon: float, spread: float, sigma: float) -> tuple[float, float]:
    """CANH/CANL dominant levels expected to produce profile ``upsilon``."""
    k = upsilon - 1000 * _PCT_OFFSET * sigma * (1 / 3.5 - 1 / 1.5)
    # solve -_KH*dh - _KL*dl = k together with dh - 3*dl = spread
    dh = (_KL / 3 * spread - k) / (_KH + _KL / 3)
    dl = (dh - spread) / 3
    return 3.5 + dh, 1.5 + dl


@dataclass(frozen=True)
class EcuSpec:
    name: str
    upsilon: float
    spread: float
    vcc: float
    sigma: float
    ids: tuple[int, ...]
    interval: tuple[float, float]

    def build(self, periodic: bool = False) -> EcuConfig:
        h, l = levels_for_profile(self.upsilon, self.spread, self.sigma)
        params = solve_params(h, l, vcc=self.vcc, transient_model=TransientModel(noise_sigma=self.sigma))
        lo, hi = self.interval
        if periodic:
            lo = hi = 0.5 * (lo + hi)
        msgs = tuple(MessageSpec(i, lo, hi, start=0.0005 * k) for k, i in enumerate(self.ids))
        return EcuConfig(self.name, params, msgs)


def build_fleet(specs, periodic: bool = False) -> BusConfig:
    return BusConfig(tuple(s.build(periodic) for s in specs))


PROTOTYPE = (
    EcuSpec("A", 10.1, 0.00, 5.00, 0.0050, (0x01,), (0.020, 0.200)),
    EcuSpec("B", -154.3, 0.06, 5.03, 0.0048, (0x07,), (0.020, 0.200)),
    EcuSpec("C", -4.9, -0.05, 4.98, 0.0053, (0x15,), (0.020, 0.200)),
)

_SEDAN_RATE = (0.010, 0.020)
SEDAN = (
    EcuSpec("A", 102.6, -0.05, 4.90, 0.0046, (0x0A0, 0x1EA), _SEDAN_RATE),
    EcuSpec("B", 85.0, 0.15, 4.94, 0.0055, (0x0B4, 0x1D0), _SEDAN_RATE),
    EcuSpec("C", 150.0, -0.25, 4.98, 0.0050, (0x0C8, 0x201), _SEDAN_RATE),
    EcuSpec("D", -39.2, 0.25, 5.02, 0.0042, (0x0D5, 0x309), _SEDAN_RATE),
    EcuSpec("E", 67.5, -0.15, 5.06, 0.0058, (0x0E2, 0x320), _SEDAN_RATE),
    EcuSpec("F", 120.8, 0.05, 5.10, 0.0052, (0x0F0, 0x33A), _SEDAN_RATE),
)

# F copies A's profile from a different operating point, so only the
# momentary features can tell the two apart
COLLIDED = SEDAN[:5] + (EcuSpec("F", 102.6, 0.10, 5.10, 0.0052, (0x0F0, 0x33A), _SEDAN_RATE),)

_LARGE_RATE = (0.008, 0.016)
LARGE = tuple(
    EcuSpec(name, u, s, v, sig, (0x100 + 0x10 * k,), _LARGE_RATE)
    for k, (name, u, s, v, sig) in enumerate([
        ("A", -120.0, 0.25, 4.90, 0.0046),
        ("B", -80.0, -0.15, 4.92, 0.0055),
        ("C", -45.0, 0.10, 4.94, 0.0050),
        ("D", -10.0, -0.25, 4.96, 0.0042),
        ("E", 20.0, 0.20, 4.98, 0.0058),
        ("F", 45.0, -0.05, 5.00, 0.0052),
        ("G", 70.0, 0.00, 5.02, 0.0047),
        ("H", 95.0, -0.20, 5.04, 0.0056),
        ("I", 120.0, 0.15, 5.06, 0.0044),
        ("J", 150.0, -0.10, 5.08, 0.0053),
        ("K", 180.0, 0.05, 5.10, 0.0049),
    ])
)

PRESETS = {"prototype": PROTOTYPE, "sedan": SEDAN, "collided": COLLIDED, "large": LARGE}


def preset(name: str, periodic: bool = False) -> BusConfig:
    try:
        return build_fleet(PRESETS[name], periodic)
    except KeyError:
        raise KeyError(f"unknown fleet {name!r}; choose from {sorted(PRESETS)}") from None
