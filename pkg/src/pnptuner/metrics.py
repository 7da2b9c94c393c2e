"""Evaluation arithmetic: speedup, greenup, EDP, normalization, geomeans."""

from __future__ import annotations

import math

from .errors import DataError


def _positive(name: str, *values: float) -> None:
    for v in values:
        if not v > 0:
            raise DataError(f"{name} requires positive inputs, got {v!r}")


def speedup(t_default: float, t_new: float) -> float:
    _positive("speedup", t_default, t_new)
    return t_default / t_new


def greenup(e_default: float, e_new: float) -> float:
    _positive("greenup", e_default, e_new)
    return e_default / e_new


def edp(e: float, t: float) -> float:
    _positive("edp", e, t)
    return e * t


def edp_improvement(default: tuple[float, float], new: tuple[float, float]) -> float:
    """EDP ratio for (energy, time) pairs. Evaluated as the product of the
    two ratios so that edp_improvement == speedup * greenup holds exactly in
    floating point."""
    e_d, t_d = default
    e_n, t_n = new
    return speedup(t_d, t_n) * greenup(e_d, e_n)


def geomean(values: list[float]) -> float:
    if not values:
        raise DataError("geomean of an empty sequence")
    _positive("geomean", *values)
    return math.exp(sum(math.log(v) for v in values) / len(values))


def normalized(value: float, oracle_value: float) -> float:
    _positive("normalized", oracle_value)
    return value / oracle_value


def frac_within(normalized_values: list[float], threshold: float) -> float:
    if not 0 < threshold <= 1:
        raise DataError(f"threshold must be in (0, 1], got {threshold}")
    if not normalized_values:
        raise DataError("frac_within of an empty sequence")
    return sum(1 for v in normalized_values if v >= threshold) / len(normalized_values)
