"""Scripted policies and detectors for driving the campaign loop in tests."""

from __future__ import annotations

import math
from typing import Sequence

from latent.agent import Action, AgentState, IterationRecord
from latent.detector import DetectionReport, Diagnosis
from latent.netlist import Element, ElementKind, Netlist


class ScriptedDetector:
    """Flags agent lines so each fresh evaluation hits a target reward.

    The k-th evaluation of a netlist that contains agent lines uses
    ``script[k]``; it flags the newest agent lines, choosing the count whose
    reward is closest to the target (at least one line when the target is
    below 100). Cached re-evaluations in the campaign never reach it.
    """

    detector_id = "scripted"

    def __init__(self, cua: Netlist, script: Sequence[float]):
        self.cua_ids = set(cua.ids)
        self.script = list(script)
        self.calls = 0
        self.seen: list[str] = []

    def detect(self, n: Netlist, trace) -> DetectionReport:
        agent = [i for i in n.ids if i not in self.cua_ids]
        if not agent:
            return DetectionReport(frozenset(), {}, self.detector_id)
        target = self.script[min(self.calls, len(self.script) - 1)]
        self.calls += 1
        size = len(agent)
        k = min(range(size + 1), key=lambda j: (abs(100 * (size - j) / size - target), j))
        if target < 100:
            k = max(k, 1)
        for i in agent:
            if i not in self.seen:
                self.seen.append(i)
        newest_first = sorted(agent, key=self.seen.index, reverse=True)
        flagged = newest_first[:k]
        diag = {e: (Diagnosis("SCRIPT", (), (), "scripted"),) for e in flagged}
        return DetectionReport(frozenset(flagged), diag, self.detector_id)


class FlagAll:
    detector_id = "all"

    def detect(self, n: Netlist, trace) -> DetectionReport:
        diag = {e.id: (Diagnosis("ALL", e.nodes, (), "everything"),) for e in n.elements}
        return DetectionReport(frozenset(diag), diag, self.detector_id)


class FlagNone:
    detector_id = "none"

    def detect(self, n: Netlist, trace) -> DetectionReport:
        return DetectionReport(frozenset(), {}, self.detector_id)


class InsertOnly:
    """Inserts a fresh resistor every iteration and never reverts."""

    def __init__(self, value: float = 1e6):
        self.value = value
        self.k = 0

    def decide(self, state: AgentState, feedback: str, available_nodes: Sequence[str]) -> Action:
        self.k += 1
        nodes = [v for v in available_nodes if v != "0"]
        a = nodes[self.k % len(nodes)]
        return Action.insert(Element(ElementKind.RESISTOR, f"R{900 + self.k}", (a, "0"),
                                     {"R": self.value}))

    def notify(self, result: IterationRecord) -> None:
        pass


class Replay:
    """Plays back a fixed list of actions, then does nothing."""

    def __init__(self, actions: Sequence[Action]):
        self.actions = list(actions)
        self.seen: list[IterationRecord] = []

    def decide(self, state, feedback, available_nodes) -> Action:
        return self.actions.pop(0) if self.actions else Action.noop("script exhausted")

    def notify(self, result: IterationRecord) -> None:
        self.seen.append(result)


def ceil_alpha(alpha: float, n: int) -> int:
    return math.ceil(alpha * n - 1e-9)
