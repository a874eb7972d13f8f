from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latent.metrics import (
    CSV_COLUMNS,
    DegenerateOutput,
    MetricsRecord,
    MissingGeometry,
    SweepMismatch,
    UnknownOutputNode,
    activation_range,
    delta_a,
    delta_p,
    node_impact,
    records_csv,
    type_label,
)
from latent.netlist import Element, ElementKind
from latent.simulator import SimTrace, SweepSpec


def trace(values: dict[str, list[float]], points: int | None = None) -> SimTrace:
    nodes = tuple(values)
    k = points or len(next(iter(values.values())))
    spec = SweepSpec("VIN", 0, 2, k)
    node_v = np.array([values[n] for n in nodes], dtype=float).T.reshape(k, len(nodes))
    return SimTrace(spec, spec.values(), nodes, (), node_v, np.zeros((k, 0)), np.ones(k, bool))


def mos(eid: str, w: float, l: float) -> Element:
    return Element(ElementKind.NMOS, eid, ("a", "b", "0"), {"W": w, "L": l, "Vto": 0.5, "Kp": 1e-4}, "nm")


class TestNodeImpact:
    def test_identical(self):
        t = trace({"a": [1.0] * 26, "b": [0.5] * 26})
        assert node_impact(t, t) == 0.0

    def test_five_of_eighteen(self):
        clean = trace({f"n{k}": [1.0] * 26 for k in range(18)})
        moved = {f"n{k}": [1.0] * 26 for k in range(18)}
        for k in range(5):
            moved[f"n{k}"] = [1.0] * 25 + [1.2]
        score = node_impact(clean, trace(moved))
        assert score == pytest.approx(5 / 18 * 100)
        # published tables truncate to one decimal
        assert math.floor(score * 10) / 10 == 27.7

    def test_all(self):
        clean = trace({"a": [0.0] * 4, "b": [0.0] * 4})
        assert node_impact(clean, trace({"a": [1.0] * 4, "b": [1.0] * 4})) == 100.0

    def test_trojan_only_nodes_ignored(self):
        clean = trace({"a": [0.0] * 4})
        assert node_impact(clean, trace({"a": [0.0] * 4, "tacc1": [2.0] * 4})) == 0.0

    def test_sweep_mismatch(self):
        with pytest.raises(SweepMismatch):
            node_impact(trace({"a": [0.0] * 4}), trace({"a": [0.0] * 5}))

    @given(st.lists(st.floats(0, 1), min_size=10, max_size=10, unique=True))
    def test_antitone(self, eps):
        rng = np.random.default_rng(0)
        clean = trace({f"n{k}": list(rng.uniform(0, 2, 26)) for k in range(12)})
        trojan = trace({f"n{k}": list(clean.v(f"n{k}") + rng.normal(0, 0.3, 26)) for k in range(12)})
        scores = [node_impact(clean, trojan, e) for e in sorted(eps)]
        assert all(a >= b for a, b in zip(scores, scores[1:]))


class TestActivationRange:
    def test_three_of_twenty_six(self):
        clean = trace({"out": [1.0] * 26})
        dev = [1.0] * 26
        dev[10:13] = [0.5, 0.5, 0.5]
        assert round(activation_range(clean, trace({"out": dev}), "out"), 1) == 11.5

    def test_everywhere(self):
        assert activation_range(trace({"out": [1.0] * 5}), trace({"out": [0.0] * 5}), "out") == 100.0

    def test_unknown_output(self):
        t = trace({"out": [1.0] * 5})
        with pytest.raises(UnknownOutputNode):
            activation_range(t, t, "nope")

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_antitone(self, e1, e2):
        lo, hi = sorted((e1, e2))
        clean = trace({"out": list(np.linspace(0, 2, 26))})
        trojan = trace({"out": list(np.linspace(0, 2, 26) ** 1.5)})
        assert activation_range(clean, trojan, "out", hi) <= activation_range(clean, trojan, "out", lo)


class TestDeltaP:
    def test_examples(self):
        assert delta_p(trace({"out": [1.0, 1.0]}), trace({"out": [0.887, 1.0]}), "out") == pytest.approx(11.3)
        assert delta_p(trace({"out": [2.0, 2.0]}), trace({"out": [2.0, 1.0]}), "out") == 50.0
        t = trace({"out": [1.0, 0.3]})
        assert delta_p(t, t, "out") == 0.0

    def test_degenerate(self):
        with pytest.raises(DegenerateOutput):
            delta_p(trace({"out": [0.0, 1.0]}), trace({"out": [0.5, 1.0]}), "out")

    def test_uses_worst_point_not_global_max(self):
        clean = trace({"out": [2.0, 0.5]})
        trojan = trace({"out": [1.9, 0.2]})
        assert delta_p(clean, trojan, "out") == pytest.approx(60.0)

    def test_invariant_to_extra_nodes(self):
        c1, t1 = trace({"out": [1.0, 2.0]}), trace({"out": [0.9, 1.5]})
        c2 = trace({"out": [1.0, 2.0], "x": [5.0, 5.0]})
        t2 = trace({"out": [0.9, 1.5], "x": [0.0, 9.0]})
        assert delta_p(c1, t1, "out") == delta_p(c2, t2, "out")


class TestDeltaA:
    def test_two_unit_devices(self):
        assert delta_a([mos("M1", 1e-6, 1e-6), mos("M2", 1e-6, 1e-6)], 100e-12) == pytest.approx(2.0, abs=1e-12)

    def test_capacitors_only(self):
        c = Element(ElementKind.CAPACITOR, "C1", ("a", "0"), {"C": 1e-12})
        assert delta_a([c], 1e-11) == 0.0

    def test_one_device(self):
        assert abs(delta_a([mos("M1", 2e-6, 1e-6)], 25e-12) - 8.0) <= 1e-12

    def test_missing_geometry(self):
        bad = Element.__new__(Element)
        object.__setattr__(bad, "kind", ElementKind.NMOS)
        object.__setattr__(bad, "id", "M1")
        object.__setattr__(bad, "params", {"W": 1e-6})
        with pytest.raises(MissingGeometry):
            delta_a([bad], 1e-12)

    @given(st.lists(st.tuples(st.floats(1e-7, 1e-5), st.floats(1e-7, 1e-5)), max_size=6),
           st.lists(st.tuples(st.floats(1e-7, 1e-5), st.floats(1e-7, 1e-5)), max_size=6))
    def test_additive(self, xs, ys):
        a = [mos(f"M{k}", w, l) for k, (w, l) in enumerate(xs)]
        b = [mos(f"M{50 + k}", w, l) for k, (w, l) in enumerate(ys)]
        area = 1e-10
        assert delta_a(a + b, area) == pytest.approx(delta_a(a, area) + delta_a(b, area), rel=1e-12, abs=1e-15)


class TestRecord:
    def test_range_checked(self):
        with pytest.raises(ValueError):
            MetricsRecord("x", "R", 1, 1, 120.0, 0, 0, 0, 0)
        with pytest.raises(ValueError):
            MetricsRecord("x", "R", 1, 13, 100.0, 0, 0, 0, 0, l_max=12)

    def test_csv_column_order(self):
        rec = MetricsRecord("x", "C+NMOS", 4, 2, 100.0, 27.7, 11.5, 3.0, math.nan)
        head, row = records_csv([rec]).splitlines()
        assert head.split(",") == list(CSV_COLUMNS)
        assert row == "x,C+NMOS,4,2,100,27.7,11.5,3,nan"

    def test_type_label(self):
        c = Element(ElementKind.CAPACITOR, "C1", ("a", "0"), {"C": 1e-12})
        assert type_label([mos("M1", 1e-6, 1e-6), c]) == "C+NMOS"
        assert type_label([]) == "-"
