"""Thought-action-observation loop that inserts Trojan components.

Each iteration a policy looks at the last detection feedback and proposes an
insertion, a revert, or nothing. Insertions go through the syntax checker, the
candidate is re-simulated and re-analysed by the detector, and the evasion
reward is the share of agent-inserted lines the detector did not flag.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

from .detector import DetectionReport, Detector, DetectorConfig, RuleDetector, diagnosis_summary
from .netlist import (
    GROUND,
    CheckResult,
    Element,
    ElementKind,
    Netlist,
    allocate_id,
    check_line,
    insert,
    node_count,
    node_inventory,
    serialize,
    syntax_check,
)
from .simulator import SimTrace, SimulationError, SolverOptions, SweepSpec, dc_sweep


class EmptyCua(ValueError):
    pass


class NodeExhaustion(RuntimeError):
    pass


class SimulationFailure(SimulationError):
    """A candidate could not be simulated; carries the netlist for post-mortem."""

    def __init__(self, message: str, netlist: Netlist):
        self.netlist = netlist
        super().__init__(message)


class Termination(enum.Enum):
    CONSECUTIVE_EVASION = "ConsecutiveEvasion"
    UPPER_BOUND = "UpperBound"
    HARD_CAP = "HardCap"


# --------------------------------------------------------------------------
# reward


def evasion_reward(l_agent: Sequence[str] | set[str], l_sus: Sequence[str] | set[str]) -> float | None:
    """Percentage of agent-inserted lines that the detector did not flag.

    Returns ``None`` when nothing has been inserted yet (reward undefined).
    """
    agent = set(l_agent)
    if not agent:
        return None
    return 100.0 * len(agent - set(l_sus)) / len(agent)


# --------------------------------------------------------------------------
# actions and records


class ActionKind(enum.Enum):
    INSERT = "Insert"
    REVERT = "Revert"
    NOOP = "Noop"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    element: Element | None = None
    line: str | None = None
    target: str | None = None
    reason: str = ""
    thought: str = ""

    @classmethod
    def insert(cls, element: Element, thought: str = "") -> Action:
        return cls(ActionKind.INSERT, element=element, line=element.line(), thought=thought)

    @classmethod
    def insert_line(cls, line: str, thought: str = "") -> Action:
        return cls(ActionKind.INSERT, line=line.strip(), thought=thought)

    @classmethod
    def revert(cls, target: str, thought: str = "", reason: str = "") -> Action:
        return cls(ActionKind.REVERT, target=target, thought=thought, reason=reason)

    @classmethod
    def noop(cls, reason: str, thought: str = "", line: str | None = None) -> Action:
        return cls(ActionKind.NOOP, reason=reason, thought=thought, line=line)

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value}
        if self.line is not None:
            d["line"] = self.line
        if self.target is not None:
            d["target"] = self.target
        if self.reason:
            d["reason"] = self.reason
        return d


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    thought_summary: str
    action: Action
    check: CheckResult | None
    report: DetectionReport
    r_evade: float
    reward_defined: bool
    inserted: tuple[str, ...]

    def __post_init__(self) -> None:
        if not 0.0 <= self.r_evade <= 100.0:
            raise ValueError("r_evade must lie in [0, 100]")
        if self.action.kind is ActionKind.INSERT and not (self.check and self.check.accepted):
            raise ValueError("an insertion is only recorded after an accepted syntax check")

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "thought": self.thought_summary,
            "action": self.action.to_dict(),
            "check": self.check.to_dict() if self.check else None,
            "suspects": sorted(self.report.suspects),
            "r_evade": self.r_evade,
            "reward_defined": self.reward_defined,
            "inserted": list(self.inserted),
        }


@dataclass(frozen=True)
class AgentState:
    """Campaign state between iterations.

    ``rng`` is the campaign's shared stream for id allocation and insertion
    positions; it advances as the campaign runs.
    """

    cua: Netlist
    candidate: Netlist
    inserted: tuple[str, ...] = ()
    history: tuple[IterationRecord, ...] = ()
    iteration: int = 0
    rng_seed: int = 0
    consecutive_full_evasions: int = 0
    last_clean: Netlist | None = None
    last_clean_inserted: tuple[str, ...] = ()
    l_max: int = 0
    rng: random.Random = field(default_factory=random.Random, compare=False, repr=False)

    @classmethod
    def initial(cls, cua: Netlist, seed: int, l_max: int) -> AgentState:
        return cls(cua=cua, candidate=cua, rng_seed=seed, last_clean=cua, l_max=l_max,
                   rng=random.Random(seed))

    @property
    def last(self) -> IterationRecord | None:
        return self.history[-1] if self.history else None

    @property
    def available_nodes(self) -> list[str]:
        return node_inventory(self.cua) + [GROUND]


class Policy(Protocol):
    def decide(self, state: AgentState, feedback: str, available_nodes: Sequence[str]) -> Action: ...

    def notify(self, result: IterationRecord) -> None: ...


# --------------------------------------------------------------------------
# tools: simulation + detection with a per-campaign cache


class Toolbox:
    """Simulator and detector bound to one campaign's sweep."""

    def __init__(self, sweep: SweepSpec, detector: Detector,
                 options: SolverOptions = SolverOptions()):
        self.sweep = sweep
        self.detector = detector
        self.options = options
        self._cache: dict[str, tuple[SimTrace, DetectionReport]] = {}

    def simulate(self, n: Netlist) -> SimTrace:
        trace = dc_sweep(n, self.sweep, self.options)
        if not trace.all_converged:
            bad = [f"{v:.4g}" for v, ok in zip(trace.values, trace.converged) if not ok]
            raise SimulationFailure(f"no DC convergence at {self.sweep.source_id} = {', '.join(bad)}", n)
        return trace

    def evaluate(self, n: Netlist) -> tuple[SimTrace, DetectionReport]:
        key = serialize(n)
        if key not in self._cache:
            try:
                trace = self.simulate(n)
            except SimulationFailure:
                raise
            except SimulationError as err:
                raise SimulationFailure(str(err), n) from err
            self._cache[key] = (trace, self.detector.detect(n, trace))
        return self._cache[key]


def step(state: AgentState, policy: Policy, tools: Toolbox) -> AgentState:
    """One thought-action-observation cycle."""
    feedback = ""
    if state.last is not None:
        feedback = diagnosis_summary(state.last.report, tools.sweep.points)
    action = policy.decide(state, feedback, state.available_nodes)
    thought = action.thought

    candidate, inserted = state.candidate, state.inserted
    check: CheckResult | None = None
    element: Element | None = None
    if action.kind is ActionKind.INSERT:
        if action.element is not None:
            element = action.element
            check = syntax_check(element, candidate)
        else:
            check, element = check_line(action.line or "", candidate)
            if element is not None:
                action = dataclasses.replace(action, element=element)
        if check.accepted and element is not None and len(inserted) >= state.l_max:
            check = None
            action = Action.noop("upper bound on inserted components reached", thought, action.line)
        elif check.accepted and element is not None:
            candidate = insert(candidate, element, state.rng, avoid=inserted)
            inserted = inserted + (element.id,)
        else:
            action = Action.noop(f"syntax check: {check.reason.value}: {check.detail}",
                                 thought, action.line)
    elif action.kind is ActionKind.REVERT:
        if action.target in inserted:
            candidate, inserted = state.last_clean, state.last_clean_inserted
            removed = [i for i in state.inserted if i not in inserted]
            action = dataclasses.replace(action, reason=action.reason or f"removed {', '.join(removed)}")
        else:
            action = Action.noop(f"revert target {action.target!r} is not an agent line", thought)

    try:
        _, report = tools.evaluate(candidate)
    except SimulationFailure as err:
        if action.kind is not ActionKind.INSERT:
            raise
        # a component that breaks DC convergence is void; undo it
        candidate, inserted = state.candidate, state.inserted
        action = Action(ActionKind.REVERT, element=element, line=action.line, target=element.id,
                        reason=f"auto-revert: {err}", thought=thought)
        _, report = tools.evaluate(candidate)

    reward = evasion_reward(inserted, report.suspects)
    defined = reward is not None
    r_evade = 100.0 if reward is None else reward
    consecutive = state.consecutive_full_evasions
    if defined:
        consecutive = consecutive + 1 if r_evade == 100.0 else 0
    last_clean, last_clean_inserted = state.last_clean, state.last_clean_inserted
    if r_evade == 100.0:
        last_clean, last_clean_inserted = candidate, inserted

    record = IterationRecord(state.iteration + 1, thought, action, check, report, r_evade,
                             defined, inserted)
    policy.notify(record)
    return dataclasses.replace(
        state,
        candidate=candidate,
        inserted=inserted,
        history=state.history + (record,),
        iteration=state.iteration + 1,
        consecutive_full_evasions=consecutive,
        last_clean=last_clean,
        last_clean_inserted=last_clean_inserted,
    )


# --------------------------------------------------------------------------
# campaign


@dataclass(frozen=True)
class CampaignConfig:
    sweep: SweepSpec
    alpha: float = 0.6
    T: int = 3
    seed: int = 0
    policy: str = "heuristic"
    detector: DetectorConfig = DetectorConfig()
    hard_cap: int | None = None
    output_node: str | None = None
    area: float | None = None
    manifest: str | None = None

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.policy not in ("heuristic", "llm"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.hard_cap is not None and self.hard_cap < 1:
            raise ValueError("hard_cap must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> CampaignConfig:
        known = {"alpha", "T", "seed", "sweep", "policy", "detector", "hard_cap",
                 "output_node", "area", "manifest"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "sweep" not in d:
            raise ValueError("config needs a sweep section")
        return cls(
            sweep=SweepSpec.from_dict(d["sweep"]),
            alpha=float(d.get("alpha", 0.6)),
            T=int(d.get("T", 3)),
            seed=int(d.get("seed", 0)),
            policy=str(d.get("policy", "heuristic")),
            detector=DetectorConfig.from_dict(d.get("detector", {})),
            hard_cap=int(d["hard_cap"]) if d.get("hard_cap") is not None else None,
            output_node=d.get("output_node"),
            area=float(d["area"]) if d.get("area") is not None else None,
            manifest=d.get("manifest"),
        )


def upper_bound(alpha: float, n_nodes: int) -> int:
    """Insertion budget ``ceil(alpha * N)``."""
    # guard against 0.6 * 20 landing a hair above 12
    return math.ceil(round(alpha * n_nodes, 9))


@dataclass
class CampaignResult:
    cua: Netlist
    final: Netlist
    history: tuple[IterationRecord, ...]
    reason: Termination
    l_max: int
    inserted: tuple[str, ...]
    clean_trace: SimTrace
    final_trace: SimTrace

    @property
    def n_it(self) -> int:
        return len(self.history)

    @property
    def l_t(self) -> int:
        return len(self.inserted)

    @property
    def r_evade(self) -> float:
        return self.history[-1].r_evade if self.history else 100.0

    @property
    def r_evade_series(self) -> list[float]:
        return [r.r_evade for r in self.history]

    def trojan_elements(self) -> list[Element]:
        return [self.final.element(i) for i in self.inserted]

    def history_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.history)

    def summary(self) -> dict:
        kinds = sorted({self.final.element(i).kind.value for i in self.inserted})
        return {
            "reason": self.reason.value,
            "n_it": self.n_it,
            "L_T": self.l_t,
            "L_max": self.l_max,
            "R_evade": self.r_evade,
            "inserted": list(self.inserted),
            "trojan_types": kinds,
            "r_evade_series": self.r_evade_series,
        }


def run_campaign(cua: Netlist, cfg: CampaignConfig, policy: Policy | None = None,
                 detector: Detector | None = None,
                 on_step: Callable[[AgentState], None] | None = None) -> CampaignResult:
    """Iterate until ``T`` consecutive full evasions, the insertion budget, or the hard cap."""
    n_nodes = node_count(cua)
    if n_nodes == 0:
        raise EmptyCua("circuit under attack has no nodes")
    l_max = upper_bound(cfg.alpha, n_nodes)
    hard_cap = cfg.hard_cap if cfg.hard_cap is not None else 10 * l_max
    if policy is None:
        policy = make_policy(cfg)
    tools = Toolbox(cfg.sweep, detector or RuleDetector(cfg.detector))
    clean_trace, _ = tools.evaluate(cua)

    state = AgentState.initial(cua, cfg.seed, l_max)
    reason = Termination.HARD_CAP
    while state.iteration < hard_cap:
        state = step(state, policy, tools)
        if on_step is not None:
            on_step(state)
        if state.consecutive_full_evasions >= cfg.T:
            reason = Termination.CONSECUTIVE_EVASION
            break
        if len(state.inserted) >= l_max:
            reason = Termination.UPPER_BOUND
            break
    final_trace, _ = tools.evaluate(state.candidate)
    return CampaignResult(cua, state.candidate, state.history, reason, l_max, state.inserted,
                          clean_trace, final_trace)


def make_policy(cfg: CampaignConfig) -> Policy:
    if cfg.policy == "llm":
        from .llm import LLMPolicy

        return LLMPolicy.from_env()
    return HeuristicPolicy(cfg.seed)


# --------------------------------------------------------------------------
# default policy


KIND_ORDER = (ElementKind.RESISTOR, ElementKind.CAPACITOR, ElementKind.NMOS, ElementKind.PMOS)
W_CHOICES = (0.5e-6, 1e-6, 2e-6)
L_CHOICES = (0.5e-6, 1e-6)


def _log_uniform(rng: random.Random, lo: float, hi: float) -> float:
    v = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    return float(f"{v:.3g}")


class HeuristicPolicy:
    """Deterministic stand-in for a language-model agent.

    Keeps the component type after a full evasion; after a detection it
    reverts, bans the offending (type, nodes) placement and switches to the type
    with the best smoothed evasion rate so far (ties: R, C, NMOS, PMOS).
    """

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)
        self.stats = {k: [0, 0] for k in KIND_ORDER}  # evaded, detected
        self.current: ElementKind | None = None
        self.banned: set[tuple[ElementKind, tuple[str, ...]]] = set()
        self.placements: dict[str, tuple[ElementKind, tuple[str, ...]]] = {}
        self.exhausted: set[ElementKind] = set()

    def evasion_rate(self, kind: ElementKind) -> float:
        evaded, detected = self.stats[kind]
        return (evaded + 1) / (evaded + detected + 2)

    def best_kind(self, allowed: Sequence[ElementKind] = KIND_ORDER) -> ElementKind:
        candidates = [k for k in KIND_ORDER if k in allowed and k not in self.exhausted]
        if not candidates:
            raise NodeExhaustion("every placement of every component type is banned")
        return max(candidates, key=lambda k: (self.evasion_rate(k), -KIND_ORDER.index(k)))

    @staticmethod
    def _key(kind: ElementKind, nodes: Sequence[str]) -> tuple[ElementKind, tuple[str, ...]]:
        return (kind, tuple(nodes) if kind.is_mosfet else tuple(sorted(nodes)))

    def _tuples(self, kind: ElementKind, nodes: Sequence[str]):
        if kind.is_mosfet:
            return itertools.permutations(nodes, 3)
        return itertools.combinations(nodes, 2)

    def _sample_nodes(self, kind: ElementKind, nodes: Sequence[str]) -> tuple[str, ...] | None:
        k = kind.arity
        if len(nodes) < k:
            return None
        for _ in range(64):
            pick = tuple(self.rng.sample(list(nodes), k))
            if self._key(kind, pick) not in self.banned:
                return pick
        free = [t for t in self._tuples(kind, nodes) if self._key(kind, t) not in self.banned]
        return self.rng.choice(free) if free else None

    def _model_for(self, kind: ElementKind, n: Netlist):
        models = sorted((m for m in n.models.values() if m.polarity is kind), key=lambda m: m.name)
        return models[0] if models else None

    def decide(self, state: AgentState, feedback: str, available_nodes: Sequence[str]) -> Action:
        last = state.last
        if last is not None and last.reward_defined and last.r_evade < 100.0:
            flagged = [i for i in reversed(state.inserted) if i in last.report.suspects]
            if flagged:
                return Action.revert(
                    flagged[0],
                    thought=f"R_evade fell to {last.r_evade:.1f}%: {flagged[0]} was flagged; "
                            "reverting to the last undetected netlist")
        if self.current is None:
            self.current = self.best_kind()
        while True:
            kind = self.current
            if kind.is_mosfet and self._model_for(kind, state.candidate) is None:
                self.exhausted.add(kind)
            else:
                nodes = self._sample_nodes(kind, available_nodes)
                if nodes is not None:
                    break
                self.exhausted.add(kind)
            self.current = self.best_kind()
        element = self._make_element(kind, nodes, state)
        if last is None or not last.reward_defined:
            why = "no feedback yet"
        else:
            why = f"last R_evade {last.r_evade:.1f}%"
        return Action.insert(element, thought=f"{why}; inserting {kind.value} at {', '.join(nodes)}")

    def _make_element(self, kind: ElementKind, nodes: tuple[str, ...], state: AgentState) -> Element:
        eid = allocate_id(state.candidate, kind.prefix, state.rng)
        if kind is ElementKind.RESISTOR:
            return Element(kind, eid, nodes, {"R": _log_uniform(self.rng, 1e3, 1e6)})
        if kind is ElementKind.CAPACITOR:
            return Element(kind, eid, nodes, {"C": _log_uniform(self.rng, 1e-15, 1e-11)})
        model = self._model_for(kind, state.candidate)
        params = {"W": self.rng.choice(W_CHOICES), "L": self.rng.choice(L_CHOICES),
                  "Vto": model.vto, "Kp": model.kp}
        return Element(kind, eid, nodes, params, model.name)

    def notify(self, result: IterationRecord) -> None:
        action = result.action
        if action.kind is ActionKind.INSERT and action.element is not None:
            e = action.element
            self.placements[e.id] = self._key(e.kind, e.nodes)
            self.stats[e.kind][1 if e.id in result.report.suspects else 0] += 1
        elif action.kind is ActionKind.REVERT:
            if action.reason.startswith("auto-revert") and action.element is not None:
                e = action.element
                self.placements[e.id] = self._key(e.kind, e.nodes)
                self.stats[e.kind][1] += 1
            if action.target in self.placements:
                self.banned.add(self.placements[action.target])
            self.current = self.best_kind()
