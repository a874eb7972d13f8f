"""Stealth and impact scores comparing a clean trace with a Trojan-inserted one."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .netlist import Element
from .simulator import SimTrace

EPSILON = 0.05
# Clean outputs this close to 0 V are solver noise, not a usable ΔP denominator.
V_ZERO = 1e-6

CSV_COLUMNS = ("netlist", "trojan_types", "n_it", "L_T", "R_evade", "node_impact",
               "activation_range", "delta_p", "delta_a")


class SweepMismatch(ValueError):
    pass


class UnknownOutputNode(KeyError):
    pass


class DegenerateOutput(ZeroDivisionError):
    pass


class MissingGeometry(ValueError):
    pass


def _check_sweep(clean: SimTrace, trojan: SimTrace) -> None:
    if len(clean.values) != len(trojan.values) or not np.allclose(clean.values, trojan.values):
        raise SweepMismatch("traces were taken on different sweep grids")


def _output_deviation(clean: SimTrace, trojan: SimTrace, node: str) -> np.ndarray:
    _check_sweep(clean, trojan)
    if not (clean.has_node(node) and trojan.has_node(node)):
        raise UnknownOutputNode(node)
    return np.abs(trojan.v(node) - clean.v(node))


def node_impact(clean: SimTrace, trojan: SimTrace, epsilon: float = EPSILON) -> float:
    """Share of the clean circuit's nodes that move by more than ``epsilon``
    at some sweep point. Nodes that exist only in the Trojan design are ignored."""
    _check_sweep(clean, trojan)
    nodes = clean.nodes
    if not nodes:
        return 0.0
    impacted = 0
    for node in nodes:
        if not trojan.has_node(node):
            continue
        dev = np.abs(trojan.v(node) - clean.v(node))
        if np.nanmax(dev, initial=0.0) > epsilon:
            impacted += 1
    return 100.0 * impacted / len(nodes)


def activation_range(clean: SimTrace, trojan: SimTrace, output_node: str,
                     epsilon: float = EPSILON) -> float:
    """Percentage of sweep points where the output deviates by more than ``epsilon``."""
    dev = _output_deviation(clean, trojan, output_node)
    return 100.0 * int(np.sum(dev > epsilon)) / len(dev)


def delta_p(clean: SimTrace, trojan: SimTrace, output_node: str) -> float:
    """Relative output change at the point of largest deviation, in percent.

    Raises DegenerateOutput when the clean output there is 0 V (within ``V_ZERO``).
    """
    dev = _output_deviation(clean, trojan, output_node)
    k = int(np.nanargmax(dev))
    if dev[k] == 0:
        return 0.0
    v_o = float(clean.v(output_node)[k])
    v_max = float(trojan.v(output_node)[k])
    if abs(v_o) <= V_ZERO:
        raise DegenerateOutput(f"clean output is 0 V at the worst-case point {clean.values[k]:g}")
    return abs(v_o - v_max) / abs(v_o) * 100.0


def delta_a(trojan_elems: Iterable[Element], cua_area: float) -> float:
    """Transistor area of the inserted components relative to the circuit area, in percent.

    Only MOSFETs count; resistors and capacitors add nothing.
    """
    if not cua_area > 0:
        raise ValueError("circuit area must be positive")
    total = 0.0
    for e in trojan_elems:
        if not e.kind.is_mosfet:
            continue
        if "W" not in e.params or "L" not in e.params:
            raise MissingGeometry(e.id)
        total += e.params["W"] * e.params["L"]
    return total / cua_area * 100.0


def mosfet_area(elems: Iterable[Element]) -> float:
    return sum(e.params["W"] * e.params["L"] for e in elems if e.kind.is_mosfet)


@dataclass(frozen=True)
class MetricsRecord:
    netlist: str
    trojan_types: str
    n_it: int
    l_t: int
    r_evade_final_pct: float
    node_impact_pct: float
    activation_range_pct: float
    delta_p_pct: float
    delta_a_pct: float
    epsilon_impact: float = EPSILON
    epsilon_activation: float = EPSILON
    l_max: int | None = None

    def __post_init__(self) -> None:
        for name in ("r_evade_final_pct", "node_impact_pct", "activation_range_pct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} out of range: {v}")
        if self.l_max is not None and self.l_t > self.l_max:
            raise ValueError("more Trojan components than the insertion budget")

    def row(self) -> dict:
        return {
            "netlist": self.netlist,
            "trojan_types": self.trojan_types,
            "n_it": self.n_it,
            "L_T": self.l_t,
            "R_evade": _fmt(self.r_evade_final_pct),
            "node_impact": _fmt(self.node_impact_pct),
            "activation_range": _fmt(self.activation_range_pct),
            "delta_p": _fmt(self.delta_p_pct),
            "delta_a": _fmt(self.delta_a_pct),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsRecord:
        return cls(**d)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4g}"


def records_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def type_label(elems: Iterable[Element]) -> str:
    """Compact type tag such as ``C+NMOS``, ordered R, C, NMOS, PMOS."""
    order = {"Resistor": ("R", 0), "Capacitor": ("C", 1), "Nmos": ("NMOS", 2), "Pmos": ("PMOS", 3)}
    tags = {order[e.kind.value] for e in elems if e.kind.value in order}
    return "+".join(t for t, _ in sorted(tags, key=lambda x: x[1])) or "-"


def compare(name: str, clean: SimTrace, trojan: SimTrace, output_node: str,
            trojan_elems: Sequence[Element], cua_area: float, n_it: int = 0,
            r_evade: float = 100.0, epsilon_impact: float = EPSILON,
            epsilon_activation: float = EPSILON, l_max: int | None = None) -> MetricsRecord:
    """All scores for one clean/Trojan pair.

    An undefined ΔP, or a ΔA with no positive circuit area, is recorded as NaN.
    """
    try:
        dp = delta_p(clean, trojan, output_node)
    except DegenerateOutput:
        dp = math.nan
    return MetricsRecord(
        netlist=name,
        trojan_types=type_label(trojan_elems),
        n_it=n_it,
        l_t=len(trojan_elems),
        r_evade_final_pct=r_evade,
        node_impact_pct=node_impact(clean, trojan, epsilon_impact),
        activation_range_pct=activation_range(clean, trojan, output_node, epsilon_activation),
        delta_p_pct=dp,
        delta_a_pct=delta_a(trojan_elems, cua_area) if cua_area > 0 else math.nan,
        epsilon_impact=epsilon_impact,
        epsilon_activation=epsilon_activation,
        l_max=l_max,
    )
