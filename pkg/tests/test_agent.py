from __future__ import annotations

import itertools
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import FlagAll, FlagNone, InsertOnly, Replay, ScriptedDetector
from latent.agent import (
    Action,
    ActionKind,
    AgentState,
    CampaignConfig,
    EmptyCua,
    HeuristicPolicy,
    IterationRecord,
    SimulationFailure,
    Termination,
    Toolbox,
    evasion_reward,
    run_campaign,
    step,
    upper_bound,
)
from latent.detector import DetectionReport, RuleDetector
from latent.netlist import Element, ElementKind, Netlist, parse
from latent.simulator import SweepSpec

SWEEP = SweepSpec("VIN", 0, 2, 6)


def _chain(n_nodes: int) -> Netlist:
    lines = ["chain", "VIN in 0 1", "R1 in c1 1k"]
    for k in range(1, n_nodes - 1):
        lines.append(f"R{k + 1} c{k} c{k + 1} 1k")
    lines.append(f"R{n_nodes} c{n_nodes - 1} 0 1k")
    return parse("\n".join(lines))


class TestReward:
    def test_examples(self):
        assert evasion_reward({"R1", "C2"}, set()) == 100.0
        assert evasion_reward({"R1", "C2"}, {"C2"}) == 50.0
        assert evasion_reward({"R1"}, {"R1", "M5"}) == 0.0
        assert evasion_reward(set(), {"R1"}) is None

    @given(st.sets(st.sampled_from("ABCDEFGH"), min_size=1), st.sets(st.sampled_from("ABCDEFGHIJ")))
    def test_set_law(self, agent, sus):
        r = evasion_reward(agent, sus)
        assert 0 <= r <= 100
        assert r == 100 * len(agent - sus) / len(agent)
        assert evasion_reward(agent, sus | {"Z9"}) == r


class TestBounds:
    @pytest.mark.parametrize("n, expected", [(5, 3), (18, 11), (20, 12), (25, 15), (10, 6)])
    def test_upper_bound(self, n, expected):
        assert upper_bound(0.6, n) == expected

    def test_empty_cua(self):
        with pytest.raises(EmptyCua):
            run_campaign(Netlist("empty", ()), CampaignConfig(sweep=SWEEP))

    def test_upper_bound_stops_insertion(self):
        cua = _chain(20)
        cfg = CampaignConfig(sweep=SweepSpec("VIN", 0, 1, 3), T=1000)
        res = run_campaign(cua, cfg, policy=InsertOnly(), detector=FlagNone())
        assert res.reason is Termination.UPPER_BOUND
        assert res.l_t == res.l_max == 12
        assert max(len(r.inserted) for r in res.history) <= 12

    def test_flag_everything_hits_upper_bound_with_zero_reward(self):
        cua = _chain(5)
        cfg = CampaignConfig(sweep=SweepSpec("VIN", 0, 1, 3))
        res = run_campaign(cua, cfg, policy=InsertOnly(), detector=FlagAll())
        assert res.reason is Termination.UPPER_BOUND
        assert res.l_t == 3 and res.r_evade == 0.0

    def test_flag_everything_with_reverts_hits_hard_cap(self):
        cua = _chain(5)
        cfg = CampaignConfig(sweep=SweepSpec("VIN", 0, 1, 3), hard_cap=12)
        res = run_campaign(cua, cfg, detector=FlagAll())
        assert res.reason is Termination.HARD_CAP
        assert res.n_it == 12


class TestStep:
    def _state(self, cua, l_max=5):
        return AgentState.initial(cua, seed=1, l_max=l_max)

    def test_noop_reward_is_undefined_and_does_not_count(self):
        cua = _chain(4)
        tools = Toolbox(SWEEP.__class__("VIN", 0, 1, 3), FlagNone())
        s = step(self._state(cua), Replay([Action.noop("thinking")]), tools)
        rec = s.history[0]
        assert not rec.reward_defined and rec.r_evade == 100.0
        assert s.consecutive_full_evasions == 0

    def test_rejected_line_becomes_noop(self):
        cua = _chain(4)
        tools = Toolbox(SweepSpec("VIN", 0, 1, 3), FlagNone())
        policy = Replay([Action.insert_line("Mx c1 c2 0 nm W=1u L=1u")])
        s = step(self._state(cua), policy, tools)
        rec = s.history[0]
        assert rec.action.kind is ActionKind.NOOP
        assert rec.check is not None and not rec.check.accepted
        assert s.candidate == cua

    def test_revert_restores_last_undetected(self):
        cua = _chain(6)
        tools = Toolbox(SweepSpec("VIN", 0, 1, 3), ScriptedDetector(cua, [100, 50]))
        actions = [Action.insert_line("R50 c1 0 1meg"), Action.insert_line("R51 c2 0 1meg"),
                   Action.revert("R51")]
        policy = Replay(actions)
        s = self._state(cua)
        for _ in range(3):
            s = step(s, policy, tools)
        assert [r.r_evade for r in s.history] == [100.0, 50.0, 100.0]
        assert s.inserted == ("R50",)
        assert "R51" not in s.candidate and "R50" in s.candidate

    def test_revert_of_unknown_target_is_noop(self):
        cua = _chain(4)
        tools = Toolbox(SweepSpec("VIN", 0, 1, 3), FlagNone())
        s = step(self._state(cua), Replay([Action.revert("R1")]), tools)
        assert s.history[0].action.kind is ActionKind.NOOP

    def test_simulation_failure_auto_reverts(self):
        cua = _chain(4)

        class Breaks(Toolbox):
            def simulate(self, n):
                if "R77" in n:
                    raise SimulationFailure("forced", n)
                return super().simulate(n)

        tools = Breaks(SweepSpec("VIN", 0, 1, 3), FlagNone())
        policy = Replay([Action.insert_line("R77 c1 0 1k")])
        s = step(self._state(cua), policy, tools)
        rec = s.history[0]
        assert rec.action.kind is ActionKind.REVERT and rec.action.reason.startswith("auto-revert")
        assert s.candidate == cua and s.inserted == ()

    def test_record_invariants(self):
        report = DetectionReport(frozenset(), {})
        with pytest.raises(ValueError):
            IterationRecord(1, "", Action.noop("x"), None, report, 101.0, True, ())
        e = Element(ElementKind.RESISTOR, "R5", ("a", "b"), {"R": 1.0})
        with pytest.raises(ValueError):
            IterationRecord(1, "", Action.insert(e), None, report, 100.0, True, ("R5",))


class TestCampaign:
    def test_deterministic(self, corpus, manifest):
        entry = manifest.get("ladder20")
        cfg = CampaignConfig(sweep=entry.sweep(), seed=42)
        a = run_campaign(corpus["ladder20"], cfg)
        b = run_campaign(corpus["ladder20"], cfg)
        assert a.history_jsonl() == b.history_jsonl()
        assert a.final == b.final

    def test_history_is_json_lines(self, corpus, manifest):
        entry = manifest.get("synth01")
        res = run_campaign(corpus["synth01"], CampaignConfig(sweep=entry.sweep(), seed=3))
        lines = res.history_jsonl().splitlines()
        assert len(lines) == res.n_it
        assert [json.loads(x)["iteration"] for x in lines] == list(range(1, res.n_it + 1))

    def test_scripted_window(self):
        cua = _chain(20)
        cfg = CampaignConfig(sweep=SweepSpec("VIN", 0, 1, 3), seed=7)
        res = run_campaign(cua, cfg, detector=ScriptedDetector(cua, [100, 100, 60, 100, 100, 100]))
        series = res.r_evade_series
        assert series[:2] == [100.0, 100.0] and series[2] < 100.0
        assert series[3:] == [100.0, 100.0, 100.0]
        assert res.n_it == 6 and res.reason is Termination.CONSECUTIVE_EVASION

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(ValueError):
            CampaignConfig.from_dict({"sweep": {"source": "VIN"}, "gamma": 1})

    def test_config_round_trip(self):
        cfg = CampaignConfig.from_dict({"sweep": {"source": "VIN", "start": 0, "stop": 2, "points": 26},
                                        "alpha": 0.5, "T": 2, "seed": 9,
                                        "detector": {"rules": {"resistor": False}}})
        assert cfg.T == 2 and cfg.seed == 9 and not cfg.detector.resistor_rules


class TestHeuristicPolicy:
    def test_keeps_type_after_full_evasion(self, corpus, manifest):
        entry = manifest.get("ladder20")
        res = run_campaign(corpus["ladder20"], CampaignConfig(sweep=entry.sweep(), seed=42))
        kinds = [r.action.element.kind for r in res.history if r.action.kind is ActionKind.INSERT]
        for prev, nxt, rec in zip(kinds, kinds[1:], res.history):
            if rec.r_evade == 100.0:
                assert prev == nxt

    def test_switches_type_and_bans_after_detection(self):
        cua = _chain(8)
        policy = HeuristicPolicy(seed=0)
        tools = Toolbox(SweepSpec("VIN", 0, 1, 3), FlagAll())
        s = AgentState.initial(cua, seed=0, l_max=5)
        s = step(s, policy, tools)
        first = s.history[0].action.element
        assert first.kind is ElementKind.RESISTOR
        s = step(s, policy, tools)
        assert s.history[1].action.kind is ActionKind.REVERT
        assert (first.kind, tuple(sorted(first.nodes))) in policy.banned
        s = step(s, policy, tools)
        assert s.history[2].action.element.kind is not ElementKind.RESISTOR

    def test_best_kind_tie_order(self):
        p = HeuristicPolicy()
        assert p.best_kind() is ElementKind.RESISTOR
        p.stats[ElementKind.RESISTOR][1] += 1
        assert p.best_kind() is ElementKind.CAPACITOR

    def test_rule_detector_campaign_terminates(self, corpus, manifest):
        for name in ("opamp", "synth07", "thresh"):
            entry = manifest.get(name)
            res = run_campaign(corpus[name], CampaignConfig(sweep=entry.sweep(), seed=42),
                               detector=RuleDetector())
            assert res.reason in (Termination.CONSECUTIVE_EVASION, Termination.UPPER_BOUND)
            assert res.n_it <= 10 * res.l_max


def test_pairs_cover_all_subsets():
    ids = ["R1", "C2", "M3"]
    for r in range(1, 4):
        for agent in itertools.combinations(ids, r):
            for k in range(4):
                for sus in itertools.combinations(ids, k):
                    expected = 100 * sum(a not in sus for a in agent) / len(agent)
                    assert evasion_reward(agent, sus) == expected
