"""Rule-based Trojan detection over a netlist and its DC sweep trace.

The rules look for the signatures inserted components tend to leave behind:

R1  dangling-at-DC    capacitor with no DC path to ground on either terminal
R2  stuck-region      MOSFET in cutoff (or saturation) at every sweep point
R3  golden-deviation  node deviating from a golden trace (only with a reference)
R4  stuck-at-rail     gate-feeding node pinned to a supply at every point
R5  resistor-anomaly  resistor whose removal changes no node voltage

Rule families can be switched off per element kind, which is how a detector
blind to resistor anomalies is modelled.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .netlist import GROUND, ElementKind, Netlist, node_inventory, serialize
from .simulator import MnaSystem, SimTrace, SolverOptions, _dc_islands, mosfet_region, trace_state

RULE_NAMES = {
    "R1": "dangling-at-DC",
    "R2": "stuck-region",
    "R3": "golden-deviation",
    "R4": "stuck-at-rail",
    "R5": "resistor-anomaly",
    "FP": "spurious",
}


class TraceMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    tau_v: float = 0.05
    tau_stuck: float = 0.01
    capacitive_rules: bool = True
    mosfet_rules: bool = True
    resistor_rules: bool = True
    reference: SimTrace | None = field(default=None, compare=False)
    tol_removal: float = 1e-6
    # seeded per-element false positives, off by default
    fp_rate: float = 0.0
    fp_seed: int = 0

    def __post_init__(self) -> None:
        if not self.tau_v > 0:
            raise ValueError("tau_v must be positive")
        if self.tau_stuck < 0:
            raise ValueError("tau_stuck must be non-negative")
        if not 0.0 <= self.fp_rate <= 1.0:
            raise ValueError("fp_rate must be a probability")

    def kind_enabled(self, kind: ElementKind) -> bool:
        if kind is ElementKind.RESISTOR:
            return self.resistor_rules
        if kind is ElementKind.CAPACITOR:
            return self.capacitive_rules
        if kind.is_mosfet:
            return self.mosfet_rules
        return False

    @classmethod
    def from_dict(cls, d: Mapping, reference: SimTrace | None = None) -> DetectorConfig:
        rules = d.get("rules", {})
        thr = d.get("thresholds", {})
        return cls(
            tau_v=float(thr.get("tau_v", 0.05)),
            tau_stuck=float(thr.get("tau_stuck", 0.01)),
            capacitive_rules=bool(rules.get("capacitive", True)),
            mosfet_rules=bool(rules.get("mosfet", True)),
            resistor_rules=bool(rules.get("resistor", True)),
            reference=reference,
            tol_removal=float(thr.get("tol_removal", 1e-6)),
            fp_rate=float(d.get("fp_rate", 0.0)),
            fp_seed=int(d.get("fp_seed", 0)),
        )


@dataclass(frozen=True)
class Diagnosis:
    rule: str
    nodes: tuple[str, ...]
    sweep_points: tuple[float, ...]
    explanation: str

    def to_dict(self) -> dict:
        return {"rule": self.rule, "name": RULE_NAMES.get(self.rule, self.rule),
                "nodes": list(self.nodes), "sweep": list(self.sweep_points),
                "explanation": self.explanation}


@dataclass(frozen=True)
class DetectionReport:
    suspects: frozenset[str]
    diagnoses: Mapping[str, tuple[Diagnosis, ...]]
    detector_id: str = "rules"

    def records(self) -> list[dict]:
        """One flat record per (suspect, rule) hit, in id order."""
        out = []
        for eid in sorted(self.suspects, key=id_sort_key):
            for d in self.diagnoses[eid]:
                out.append({"element": eid, **d.to_dict()})
        return out

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps({"detector": self.detector_id, "records": self.records()},
                          indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_records(cls, records: list[Mapping], detector_id: str = "rules") -> DetectionReport:
        diags: dict[str, list[Diagnosis]] = {}
        for r in records:
            diags.setdefault(r["element"], []).append(Diagnosis(
                r["rule"], tuple(r.get("nodes", ())), tuple(float(v) for v in r.get("sweep", ())),
                r.get("explanation", "")))
        return cls(frozenset(diags), {k: tuple(v) for k, v in diags.items()}, detector_id)


def id_sort_key(eid: str) -> tuple[str, int, str]:
    """Natural order: prefix letter, then numeric suffix (C9 < C12 < M3)."""
    digits = "".join(ch for ch in eid[1:] if ch.isdigit())
    num = int(digits) if digits and eid[1:].isdigit() else -1
    return (eid[:1].upper(), num, eid)


class Detector(Protocol):
    detector_id: str

    def detect(self, n: Netlist, trace: SimTrace) -> DetectionReport: ...


class RuleDetector:
    """Deterministic default oracle."""

    detector_id = "rules"

    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        self.cfg = cfg

    def detect(self, n: Netlist, trace: SimTrace) -> DetectionReport:
        return detect(n, trace, self.cfg)


# --------------------------------------------------------------------------


def _source_nodes(n: Netlist) -> set[str]:
    return {node for e in n.elements if e.kind is ElementKind.VSOURCE for node in e.nodes} - {GROUND}


def _points(trace: SimTrace, mask: np.ndarray) -> tuple[float, ...]:
    return tuple(float(v) for v in trace.values[mask])


def _rule_dangling(n: Netlist, hits) -> None:
    floating = set(_dc_islands(n, node_inventory(n)))
    for e in n.elements:
        if e.kind is ElementKind.CAPACITOR and all(
                node in floating for node in e.nodes if node != GROUND):
            hits(e.id, Diagnosis("R1", e.nodes, (),
                                 f"capacitor {e.id} has no DC path to ground from {' or '.join(e.nodes)}"))


def _rule_stuck_region(n: Netlist, trace: SimTrace, ok: np.ndarray, hits) -> None:
    pinned = _source_nodes(n) | {GROUND}
    for e in n.elements:
        if not e.kind.is_mosfet:
            continue
        d, g, s = e.nodes
        if g in pinned:
            continue
        pol = 1 if e.kind is ElementKind.NMOS else -1
        vd, vg, vs = trace.v(d)[ok], trace.v(g)[ok], trace.v(s)[ok]
        regions = {mosfet_region(pol, a, b, c, e.params["Vto"]) for a, b, c in zip(vd, vg, vs)}
        if regions == {"cutoff"}:
            hits(e.id, Diagnosis("R2", (g,), _points(trace, ok),
                                 f"{e.id} never conducts: gate {g} keeps it in cutoff over the whole sweep"))
        elif regions == {"saturation"} and g != d:
            hits(e.id, Diagnosis("R2", (g,), _points(trace, ok),
                                 f"{e.id} is saturated at every sweep point; gate {g} holds it permanently on"))


def _rule_golden(n: Netlist, trace: SimTrace, ref: SimTrace, ok: np.ndarray, tau_v: float, hits) -> None:
    if len(ref.values) != len(trace.values) or not np.allclose(ref.values, trace.values):
        raise TraceMismatch("reference trace uses a different sweep grid")
    both = ok & ref.converged
    deviating: dict[str, np.ndarray] = {}
    for node in trace.nodes:
        if not ref.has_node(node):
            continue
        dev = np.abs(trace.v(node) - ref.v(node))
        mask = both & (dev > tau_v)
        if mask.any():
            deviating[node] = mask
    for e in n.elements:
        if e.kind in (ElementKind.VSOURCE, ElementKind.ISOURCE):
            continue
        nodes = tuple(node for node in e.nodes if node in deviating)
        if nodes:
            mask = np.logical_or.reduce([deviating[node] for node in nodes])
            hits(e.id, Diagnosis("R3", nodes, _points(trace, mask),
                                 f"{e.id} touches {', '.join(nodes)}, which deviate from the golden "
                                 f"trace by more than {tau_v:g} V"))


def _rule_stuck_rail(n: Netlist, trace: SimTrace, ok: np.ndarray, tau: float, swept: str, hits) -> None:
    rails = [np.zeros(int(ok.sum()))]
    for e in n.elements:
        if e.kind is ElementKind.VSOURCE and e.id != swept:
            for node in e.nodes:
                if node != GROUND:
                    rails.append(trace.v(node)[ok])
    pinned = _source_nodes(n) | {GROUND}
    gates = {e.nodes[1] for e in n.elements if e.kind.is_mosfet}
    for node in trace.nodes:
        if node in pinned or node not in gates:
            continue
        v = trace.v(node)[ok]
        if not len(v):
            continue
        for rail in rails:
            if np.all(np.abs(v - rail) <= tau):
                level = float(np.mean(rail))
                for e in n.elements:
                    if e.kind in (ElementKind.VSOURCE, ElementKind.ISOURCE):
                        continue
                    if node in e.nodes and not (e.kind.is_mosfet and e.nodes[1] == node):
                        hits(e.id, Diagnosis("R4", (node,), _points(trace, ok),
                                             f"gate node {node} sits within {tau:g} V of the "
                                             f"{level:.3g} V rail at every point; {e.id} holds it there"))
                break


def _rule_resistor_removal(n: Netlist, trace: SimTrace, ok: np.ndarray, tol: float, hits) -> None:
    """Flag resistors whose removal leaves every node voltage unchanged.

    Removal is evaluated as a rank-one update of the converged Jacobian
    (Sherman-Morrison), exact for linear networks.
    """
    resistors = [e for e in n.elements if e.kind is ElementKind.RESISTOR]
    if not resistors or not ok.any():
        return
    sys = MnaSystem(n, SolverOptions(floating_caps="ignore"))
    dim = sys.size - 1

    def red(node: str) -> int | None:
        k = sys.node_index[node]
        return None if k == sys.n else k

    cols = []
    for e in resistors:
        u = np.zeros(dim)
        a, b = red(e.nodes[0]), red(e.nodes[1])
        if a is not None:
            u[a] += 1.0
        if b is not None:
            u[b] -= 1.0
        cols.append(u)
    U = np.array(cols).T
    g = np.array([1.0 / e.params["R"] for e in resistors])
    alive = np.ones(len(resistors), dtype=bool)
    for k in np.flatnonzero(ok):
        if not alive.any():
            break
        x = trace_state(sys, trace, k)
        J = sys.jacobian(x, gmin=1e-12)
        live = np.flatnonzero(alive)
        try:
            if sys.sparse:
                Z = spla.splu(J.tocsc()).solve(U[:, live])
            else:
                Z = sla.lu_solve(sla.lu_factor(J, check_finite=False), U[:, live], check_finite=False)
        except (RuntimeError, ValueError, np.linalg.LinAlgError):
            continue
        currents = np.array([trace.i(resistors[j].id)[k] for j in live])
        uz = np.einsum("ij,ij->j", U[:, live], Z)
        denom = 1.0 - g[live] * uz
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.abs(Z[: sys.n] * (currents / denom))
        changed = (np.abs(denom) < 1e-9) | (np.max(delta, axis=0, initial=0.0) > tol)
        alive[live[changed]] = False
    for j in np.flatnonzero(alive):
        e = resistors[j]
        hits(e.id, Diagnosis("R5", e.nodes, _points(trace, ok),
                             f"removing {e.id} between {e.nodes[0]} and {e.nodes[1]} changes no node "
                             f"voltage by more than {tol:g} V: it is electrically inert"))


def _spurious(n: Netlist, cfg: DetectorConfig, already: set[str], hits) -> None:
    digest = hashlib.sha256(serialize(n).encode()).hexdigest()
    for e in n.elements:
        if e.id in already or not cfg.kind_enabled(e.kind):
            continue
        rng = random.Random(f"{cfg.fp_seed}|{digest}|{e.id}")
        if rng.random() < cfg.fp_rate:
            hits(e.id, Diagnosis("FP", e.nodes, (), f"{e.id} flagged without a specific signature"))


def detect(n: Netlist, trace: SimTrace, cfg: DetectorConfig = DetectorConfig()) -> DetectionReport:
    """Apply the enabled rules; the union of hits is the suspect set."""
    expected = set(node_inventory(n)) - set(_dc_islands(n, node_inventory(n)))
    if set(trace.nodes) != expected:
        raise TraceMismatch(
            f"trace nodes {sorted(set(trace.nodes) ^ expected)} disagree with the netlist")
    kinds = {e.id: e.kind for e in n.elements}
    found: dict[str, list[Diagnosis]] = {}

    def hits(eid: str, diag: Diagnosis) -> None:
        if cfg.kind_enabled(kinds[eid]):
            found.setdefault(eid, []).append(diag)

    ok = trace.converged
    if cfg.capacitive_rules:
        _rule_dangling(n, hits)
    if cfg.mosfet_rules:
        _rule_stuck_region(n, trace, ok, hits)
        _rule_stuck_rail(n, trace, ok, cfg.tau_stuck, trace.sweep.source_id, hits)
    if cfg.reference is not None:
        _rule_golden(n, trace, cfg.reference, ok, cfg.tau_v, hits)
    if cfg.resistor_rules:
        _rule_resistor_removal(n, trace, ok, cfg.tol_removal, hits)
    if cfg.fp_rate > 0:
        _spurious(n, cfg, set(found), hits)
    return DetectionReport(frozenset(found), {k: tuple(v) for k, v in found.items()}, "rules")


def _fmt_points(points: tuple[float, ...], total: int) -> str:
    if not points:
        return "n/a (structural)"
    if len(points) == total:
        return f"all {total} points"
    return ", ".join(f"{p:.4g}" for p in points) + " V"


def diagnosis_summary(r: DetectionReport, total_points: int = 0) -> str:
    """Observation text handed back to the policy, one block per suspect."""
    lines = [f"DETECTION REPORT [{r.detector_id}]"]
    if not r.suspects:
        lines.append("no suspects")
        return "\n".join(lines) + "\n"
    for eid in sorted(r.suspects, key=id_sort_key):
        lines.append(f"suspect {eid}")
        for d in r.diagnoses[eid]:
            lines.append(f"  rule {d.rule} ({RULE_NAMES.get(d.rule, d.rule)})")
            lines.append(f"  nodes: {', '.join(d.nodes) if d.nodes else '-'}")
            lines.append(f"  sweep: {_fmt_points(d.sweep_points, total_points)}")
            lines.append(f"  why: {d.explanation}")
    return "\n".join(lines) + "\n"
