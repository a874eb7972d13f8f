from __future__ import annotations

import pytest

from latent.baselines import PATTERNS, BaselineTrojan, PlacementFailure, place_baseline
from latent.netlist import parse, serialize
from latent.simulator import SweepSpec


@pytest.mark.parametrize("pattern", PATTERNS)
def test_template_is_valid_after_substitution(pattern, corpus):
    t = BaselineTrojan.get(pattern)
    n = corpus["ladder20"]
    out = t.instantiate(n, "o12", ["t1", "t2"][: t.triggers])
    assert len(out.elements) == len(n.elements) + len(t.lines)
    assert parse(serialize(out)) == out


def test_unknown_pattern():
    with pytest.raises(KeyError):
        BaselineTrojan.get("A3")


def test_a2_on_divider_has_area():
    n = parse("div\nVDD vdd 0 2\nVIN in 0 0\nR1 vdd mid 1k\nR2 mid 0 1k\nR3 in 0 1k\n")
    res = place_baseline(n, "A2-like", SweepSpec("VIN", 0, 2, 26), "mid", area=1e-12, seed=0)
    assert res.record.delta_a_pct > 0
    assert res.record.trojan_types == "C+NMOS"


@pytest.mark.parametrize("pattern", PATTERNS)
def test_same_seed_same_placement(pattern, corpus, manifest):
    e = manifest.get("synth04")
    a = place_baseline(corpus["synth04"], pattern, e.sweep(), e.output_node, e.area, seed=11)
    b = place_baseline(corpus["synth04"], pattern, e.sweep(), e.output_node, e.area, seed=11)
    assert a.triggers == b.triggers and a.netlist == b.netlist and a.record == b.record


def test_a2_window_is_wide_on_threshold_benchmark(corpus, manifest):
    e = manifest.get("thresh")
    for seed in range(1, 6):
        res = place_baseline(corpus["thresh"], "A2-like", e.sweep(), e.output_node, e.area, seed=seed)
        assert res.record.activation_range_pct > 20


def test_too_few_nodes():
    n = parse("tiny\nV1 a 0 1\nR1 a 0 1k\n")
    with pytest.raises(PlacementFailure):
        place_baseline(n, "DELTA-like", SweepSpec("V1", 0, 1, 3), "a", 1e-12)
