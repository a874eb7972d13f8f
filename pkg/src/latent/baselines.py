"""Static reference Trojans placed at seeded random nodes.

Two structural homages to published analog Trojans, used only as points of
comparison:

* ``A2-like``: a diode-connected transistor charges a small capacitor from a
  trigger node; once the capacitor voltage passes threshold a wide NMOS pulls
  the victim node toward ground.
* ``DELTA-like``: two series NMOS from the victim to ground, gated by two
  trigger nodes, with a capacitor on the shared node. The victim is loaded
  only while both triggers are high.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Sequence

from .agent import evasion_reward
from .detector import Detector, DetectionReport, RuleDetector
from .metrics import MetricsRecord, compare
from .netlist import GROUND, Element, Netlist, node_inventory, parse, serialize
from .simulator import SimTrace, SimulationError, SweepSpec, dc_sweep

PATTERNS = ("A2-like", "DELTA-like")

TEMPLATES = {
    "A2-like": (
        ("C{c1} {acc} 0 50f",
         "M{m1} {trig} {trig} {acc} a2n W=1u L=1u",
         "M{m2} {victim} {acc} 0 a2n W=100u L=0.5u"),
        ".model a2n nmos vto=0.5 kp=200u",
        1,
    ),
    "DELTA-like": (
        ("M{m1} {victim} {trig} {acc} dln W=40u L=0.5u",
         "M{m2} {acc} {trig2} 0 dln W=40u L=0.5u",
         "C{c1} {acc} 0 20f"),
        ".model dln nmos vto=0.7 kp=200u",
        2,
    ),
}

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


class PlacementFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class BaselineTrojan:
    pattern: str
    lines: tuple[str, ...]
    model_card: str
    triggers: int

    @classmethod
    def get(cls, pattern: str) -> BaselineTrojan:
        if pattern not in TEMPLATES:
            raise KeyError(f"unknown pattern {pattern!r}; choose from {', '.join(PATTERNS)}")
        lines, card, triggers = TEMPLATES[pattern]
        return cls(pattern, lines, card, triggers)

    def placeholders(self) -> set[str]:
        return {m for ln in self.lines for m in _PLACEHOLDER.findall(ln)}

    def instantiate(self, n: Netlist, victim: str, triggers: Sequence[str]) -> Netlist:
        """Substitute node names and fresh ids, then parse the result."""
        if len(triggers) != self.triggers:
            raise ValueError(f"{self.pattern} needs {self.triggers} trigger node(s)")
        subs = {"victim": victim, "trig": triggers[0], "acc": _fresh_node(n, "tacc")}
        if self.triggers > 1:
            subs["trig2"] = triggers[1]
        subs.update(_fresh_ids(n))
        body = serialize(n).rstrip().removesuffix(".end").rstrip().splitlines()
        model = self.model_card.split()[1]
        extra = [] if model in n.models else [self.model_card]
        text = "\n".join([*body, *(ln.format(**subs) for ln in self.lines), *extra, ".end"])
        return parse(text, source=f"<{self.pattern}>")


def _fresh_node(n: Netlist, stem: str) -> str:
    taken = set(node_inventory(n))
    k = 1
    while f"{stem}{k}" in taken:
        k += 1
    return f"{stem}{k}"


def _fresh_ids(n: Netlist) -> dict[str, int]:
    top = {"R": 0, "C": 0, "M": 0}
    for eid in n.ids:
        m = re.match(r"^([RCM])(\d+)$", eid)
        if m:
            top[m.group(1)] = max(top[m.group(1)], int(m.group(2)))
    return {"c1": top["C"] + 1, "m1": top["M"] + 1, "m2": top["M"] + 2}


@dataclass(frozen=True)
class BaselineResult:
    pattern: str
    netlist: Netlist
    inserted: tuple[Element, ...]
    victim: str
    triggers: tuple[str, ...]
    attempts: int
    clean_trace: SimTrace
    trojan_trace: SimTrace
    report: DetectionReport
    record: MetricsRecord


def place_baseline(cua: Netlist, pattern: str, sweep: SweepSpec, output_node: str, area: float,
                   seed: int = 0, name: str = "", max_attempts: int = 5,
                   detector: Detector | None = None) -> BaselineResult:
    """Insert ``pattern`` with seeded random trigger nodes and score it.

    The victim is ``output_node``. Trigger nodes are drawn from the circuit's
    node inventory, excluding ground and the victim. A placement whose sweep
    does not fully converge is redrawn, up to ``max_attempts`` times. The
    placed pattern is also shown to ``detector`` (rules by default) so its
    evasion score sits in the same table as a campaign's.
    """
    template = BaselineTrojan.get(pattern)
    rng = random.Random(seed)
    pool = [v for v in node_inventory(cua) if v not in (GROUND, output_node)]
    if len(pool) < template.triggers:
        raise PlacementFailure("not enough candidate trigger nodes")
    clean = dc_sweep(cua, sweep)
    before = set(cua.ids)
    last_err = ""
    for attempt in range(1, max_attempts + 1):
        triggers = tuple(rng.sample(pool, template.triggers))
        trojan = template.instantiate(cua, output_node, triggers)
        try:
            trace = dc_sweep(trojan, sweep)
        except SimulationError as err:
            last_err = str(err)
            continue
        if not trace.all_converged:
            last_err = "sweep did not fully converge"
            continue
        inserted = tuple(e for e in trojan.elements if e.id not in before)
        report = (detector or RuleDetector()).detect(trojan, trace)
        reward = evasion_reward([e.id for e in inserted], report.suspects)
        label = name or (cua.title.split() or [pattern])[0]
        record = compare(label, clean, trace, output_node, inserted, area, r_evade=reward)
        return BaselineResult(pattern, trojan, inserted, output_node, triggers, attempt,
                              clean, trace, report, record)
    raise PlacementFailure(f"{pattern}: no simulable placement in {max_attempts} attempts ({last_err})")
