"""Named binary predicates over terminal metrics or streaming trajectory state.

A constraint evaluates to a 0/1 indicator plus a signed margin: positive
margin means satisfied with room to spare, in the constraint's own units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Optional

EQUALITY_TOLERANCE = 1e-3  # |value - bound| <= tol counts as equal


@dataclass(frozen=True)
class Constraint:
    name: str
    metric: str                    # terminal metric name, or trajectory variable
    op: str                        # "<" | ">" | "=="
    bound: float
    units: str = ""
    streaming: bool = False
    tolerance: float = EQUALITY_TOLERANCE

    def __post_init__(self):
        if self.op not in ("<", ">", "=="):
            raise ValueError(f"unsupported op {self.op!r}")

    def evaluate(self, value: Optional[float]) -> tuple[int, float]:
        """(indicator, signed margin) for an observed metric value.

        A missing or non-finite value fails the constraint outright, except
        that an infinite value on the satisfied side still passes (e.g. a
        gain margin of +inf against a lower bound).
        """
        if value is None or math.isnan(value):
            return 0, -math.inf
        if self.op == "<":
            return (1 if value < self.bound else 0), self.bound - value
        if self.op == ">":
            return (1 if value > self.bound else 0), value - self.bound
        diff = abs(value - self.bound)
        return (1 if diff <= self.tolerance else 0), self.tolerance - diff

    def streaming_margin(self, value: float) -> float:
        """Running margin for one trajectory sample (streaming constraints only)."""
        return self.evaluate(value)[1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "metric": self.metric,
            "op": self.op,
            "bound": self.bound,
            "units": self.units,
            "streaming": self.streaming,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Constraint":
        return cls(
            name=d["name"],
            metric=d["metric"],
            op=d["op"],
            bound=float(d["bound"]),
            units=d.get("units", ""),
            streaming=bool(d.get("streaming", False)),
            tolerance=float(d.get("tolerance", EQUALITY_TOLERANCE)),
        )


def evaluate_constraints(
    values: Mapping[str, float],
    constraints: list[Constraint],
) -> tuple[dict[str, int], dict[str, float]]:
    """Exact indicator and signed margin per constraint over a metric map."""
    indicators: dict[str, int] = {}
    margins: dict[str, float] = {}
    for c in constraints:
        ind, margin = c.evaluate(values.get(c.metric))
        indicators[c.name] = ind
        margins[c.name] = margin
    return indicators, margins


def unsatisfied(indicators: Mapping[str, int]) -> set[str]:
    return {name for name, ind in indicators.items() if ind == 0}
