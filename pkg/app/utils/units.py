"""Unit conversion constants. Geometry is in micrometres, everything else SI."""

UM = 1e-6
UL_PER_MIN = 1e-9 / 60.0


def um_to_m(value: float) -> float:
    return value * UM


def ul_per_min_to_m3_per_s(value: float) -> float:
    return value * UL_PER_MIN


def m3_per_s_to_ul_per_min(value: float) -> float:
    return value / UL_PER_MIN
