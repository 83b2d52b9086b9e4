"""Unit constants and conversion helpers.

All internal computation is SI: Pa, m, s, kg.  Config files and reports may
use the field units below; `parse_quantity` converts "<number> [unit]"
strings to SI.
"""

from __future__ import annotations

BAR = 1.0e5            # Pa
DARCY = 9.869233e-13   # m^2
DAY = 86400.0          # s
HOUR = 3600.0          # s
MINUTE = 60.0          # s

#: unit token -> multiplicative factor to SI
UNIT_FACTORS = {
    # pressure
    "pa": 1.0,
    "kpa": 1.0e3,
    "mpa": 1.0e6,
    "bar": BAR,
    # permeability / area
    "m2": 1.0,
    "darcy": DARCY,
    "mdarcy": 1.0e-3 * DARCY,
    # time
    "s": 1.0,
    "min": MINUTE,
    "h": HOUR,
    "d": DAY,
    "day": DAY,
    # length
    "m": 1.0,
    "cm": 1.0e-2,
    "mm": 1.0e-3,
    # dimensionless / rates
    "": 1.0,
}


class UnitError(ValueError):
    """Unknown unit token or malformed quantity string."""


def parse_quantity(text: str) -> float:
    """Parse "<number> [unit]" into an SI float.

    >>> parse_quantity("0.1 Darcy") == 0.1 * DARCY
    True
    >>> parse_quantity("3 bar")
    300000.0
    """
    parts = text.strip().split()
    if not parts or len(parts) > 2:
        raise UnitError(f"malformed quantity: {text!r}")
    try:
        value = float(parts[0])
    except ValueError as exc:
        raise UnitError(f"malformed number in quantity: {text!r}") from exc
    unit = parts[1].lower() if len(parts) == 2 else ""
    if unit not in UNIT_FACTORS:
        raise UnitError(f"unknown unit {parts[1]!r} in quantity {text!r}")
    return value * UNIT_FACTORS[unit]
