"""SPICE netlist front-end: parsing, validation, mutation and serialization.

Only a conservative subset of SPICE is understood: R, C, M (level-1, three
terminals), V and I elements, ``.model`` cards for MOSFETs, ``*`` comments and
``+`` continuation lines. Every other control card is kept verbatim as opaque
metadata.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
import random
import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

GROUND = "0"
GROUND_ALIASES = frozenset({"0", "gnd", "GND", "Gnd"})

SUFFIXES = {
    "f": Decimal("1e-15"),
    "p": Decimal("1e-12"),
    "n": Decimal("1e-9"),
    "u": Decimal("1e-6"),
    "m": Decimal("1e-3"),
    "k": Decimal("1e3"),
    "meg": Decimal("1e6"),
    "g": Decimal("1e9"),
    "t": Decimal("1e12"),
    "mil": Decimal("25.4e-6"),
}

_VALUE_RE = re.compile(
    r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)(meg|mil|[fpnumkgt])?([a-z]*)$",
    re.IGNORECASE,
)
_AGENT_ID_RE = re.compile(r"^[RCM]([1-9]\d*)$")


class ElementKind(enum.Enum):
    RESISTOR = "Resistor"
    CAPACITOR = "Capacitor"
    NMOS = "Nmos"
    PMOS = "Pmos"
    VSOURCE = "VoltageSource"
    ISOURCE = "CurrentSource"

    @property
    def prefix(self) -> str:
        return _PREFIX[self]

    @property
    def arity(self) -> int:
        return 3 if self in (ElementKind.NMOS, ElementKind.PMOS) else 2

    @property
    def is_mosfet(self) -> bool:
        return self in (ElementKind.NMOS, ElementKind.PMOS)


_PREFIX = {
    ElementKind.RESISTOR: "R",
    ElementKind.CAPACITOR: "C",
    ElementKind.NMOS: "M",
    ElementKind.PMOS: "M",
    ElementKind.VSOURCE: "V",
    ElementKind.ISOURCE: "I",
}

# Kinds an agent may insert.
TROJAN_KINDS = (ElementKind.RESISTOR, ElementKind.CAPACITOR, ElementKind.NMOS, ElementKind.PMOS)


class NetlistError(ValueError):
    """Base class for parse and structural errors; carries the source location."""

    def __init__(self, message: str, line: int | None = None, token: str | None = None):
        self.message = message
        self.line = line
        self.token = token
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}" + (f" ({token!r})" if token is not None else ""))


class UnknownElementPrefix(NetlistError):
    pass


class ArityMismatch(NetlistError):
    pass


class MalformedValue(NetlistError):
    pass


class DuplicateId(NetlistError):
    pass


class UnknownModel(NetlistError):
    pass


class IdNotFound(KeyError):
    pass


def parse_value(token: str) -> float:
    """Convert a SPICE number with an optional scale suffix to an SI float.

    Trailing unit letters after the suffix are ignored, as in SPICE
    (``10pF`` == ``10p``).

    >>> parse_value("2.5p")
    2.5e-12
    >>> parse_value("1meg")
    1000000.0
    """
    m = _VALUE_RE.match(token.strip())
    if m is None:
        raise MalformedValue("cannot parse numeric value", token=token)
    # scale in decimal so "50u" lands on the float nearest 5e-5
    mantissa = Decimal(m.group(1))
    if m.group(2):
        mantissa *= SUFFIXES[m.group(2).lower()]
    value = float(mantissa)
    if not math.isfinite(value):
        raise MalformedValue("non-finite value", token=token)
    return value


def format_value(value: float) -> str:
    """Shortest decimal that round-trips through ``float``; no suffixes."""
    if value == int(value) and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def canonical_node(name: str) -> str:
    return GROUND if name in GROUND_ALIASES else name


@dataclass(frozen=True)
class Model:
    """A ``.model`` card for a level-1 MOSFET."""

    name: str
    polarity: ElementKind
    vto: float
    kp: float

    def card(self) -> str:
        kind = "nmos" if self.polarity is ElementKind.NMOS else "pmos"
        return f".model {self.name} {kind} vto={format_value(self.vto)} kp={format_value(self.kp)}"


@dataclass(frozen=True)
class Element:
    """One circuit element.

    ``params`` uses the keys ``R`` (ohms), ``C`` (farads), ``W``/``L`` (meters)
    and ``Vto``/``Kp`` for MOSFETs, and ``dc`` (volts or amperes) for sources.
    MOSFETs additionally name their ``model``.
    """

    kind: ElementKind
    id: str
    nodes: tuple[str, ...]
    params: Mapping[str, float]
    model: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(canonical_node(n) for n in self.nodes))
        object.__setattr__(self, "params", dict(self.params))
        validate_element(self)

    @property
    def value(self) -> float:
        return self.params[_MAIN_PARAM[self.kind]]

    def line(self) -> str:
        """Canonical SPICE rendering."""
        nodes = " ".join(self.nodes)
        if self.kind.is_mosfet:
            return (
                f"{self.id} {nodes} {self.model} "
                f"W={format_value(self.params['W'])} L={format_value(self.params['L'])}"
            )
        return f"{self.id} {nodes} {format_value(self.value)}"


_MAIN_PARAM = {
    ElementKind.RESISTOR: "R",
    ElementKind.CAPACITOR: "C",
    ElementKind.VSOURCE: "dc",
    ElementKind.ISOURCE: "dc",
}


def validate_element(e: Element, line: int | None = None) -> None:
    if not e.id or e.id[0].upper() != e.kind.prefix:
        raise UnknownElementPrefix(f"id does not match kind {e.kind.value}", line, e.id)
    if len(e.nodes) != e.kind.arity:
        raise ArityMismatch(
            f"{e.kind.value} needs {e.kind.arity} nodes, got {len(e.nodes)}", line, e.id
        )
    if any(not n for n in e.nodes):
        raise ArityMismatch("empty node name", line, e.id)
    for key, val in e.params.items():
        if not isinstance(val, (int, float)) or not math.isfinite(val):
            raise MalformedValue(f"parameter {key} must be a finite real", line, e.id)
    required = ("W", "L", "Vto", "Kp") if e.kind.is_mosfet else (_MAIN_PARAM[e.kind],)
    for key in required:
        if key not in e.params:
            raise MalformedValue(f"missing parameter {key}", line, e.id)
    positive = {"R", "C", "W", "L", "Kp"} & set(required)
    for key in positive:
        if e.params[key] <= 0:
            raise MalformedValue(f"parameter {key} must be positive", line, e.id)
    if e.kind.is_mosfet and not e.model:
        raise UnknownModel("MOSFET without model", line, e.id)


@dataclass(frozen=True)
class Netlist:
    """An ordered list of elements plus the MOSFET models they reference.

    ``cards`` holds comments and control cards in source order; they are
    carried along but never interpreted. ``meta`` (provenance) is excluded from
    equality so structurally identical netlists compare equal.
    """

    title: str
    elements: tuple[Element, ...]
    models: Mapping[str, Model] = field(default_factory=dict)
    cards: tuple[str, ...] = ()
    meta: Mapping[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "elements", tuple(self.elements))
        object.__setattr__(self, "models", dict(self.models))
        object.__setattr__(self, "cards", tuple(self.cards))
        seen: set[str] = set()
        for e in self.elements:
            if e.id in seen:
                raise DuplicateId("duplicate element id", token=e.id)
            seen.add(e.id)

    @property
    def ground(self) -> str:
        return GROUND

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.elements]

    def element(self, eid: str) -> Element:
        for e in self.elements:
            if e.id == eid:
                return e
        raise IdNotFound(eid)

    def __contains__(self, eid: object) -> bool:
        return any(e.id == eid for e in self.elements)

    def replace(self, **changes) -> Netlist:
        return dataclasses.replace(self, **changes)


def node_inventory(n: Netlist) -> list[str]:
    """Non-ground nodes in order of first appearance."""
    seen: dict[str, None] = {}
    for e in n.elements:
        for node in e.nodes:
            if node != GROUND:
                seen.setdefault(node, None)
    return list(seen)


def node_count(n: Netlist) -> int:
    return len(node_inventory(n))


# --------------------------------------------------------------------------
# parsing


def _logical_lines(text: str) -> list[tuple[int, str]]:
    lines: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith("+") and lines:
            first, prev = lines[-1]
            lines[-1] = (first, prev + " " + stripped[1:].strip())
        else:
            lines.append((lineno, stripped))
    return lines


def _split_params(tokens: Sequence[str], lineno: int) -> tuple[list[str], dict[str, str]]:
    positional: list[str] = []
    named: dict[str, str] = {}
    for tok in tokens:
        if "=" in tok:
            key, _, val = tok.partition("=")
            if not key or not val:
                raise MalformedValue("bad key=value parameter", lineno, tok)
            named[key.lower()] = val
        else:
            positional.append(tok)
    return positional, named


def _normalize_eq(line: str) -> str:
    return re.sub(r"\s*=\s*", "=", line)


def _parse_model(line: str, lineno: int) -> Model:
    body = _normalize_eq(line).replace("(", " ").replace(")", " ")
    tokens = body.split()
    if len(tokens) < 3:
        raise MalformedValue("incomplete .model card", lineno, line)
    name, mtype = tokens[1], tokens[2].lower()
    if mtype not in ("nmos", "pmos"):
        raise UnknownModel("only nmos/pmos models are supported", lineno, mtype)
    _, named = _split_params(tokens[3:], lineno)
    polarity = ElementKind.NMOS if mtype == "nmos" else ElementKind.PMOS
    default_vto = 0.5 if polarity is ElementKind.NMOS else -0.5
    try:
        vto = parse_value(named.get("vto", str(default_vto)))
        kp = parse_value(named.get("kp", "50u"))
    except MalformedValue as err:
        raise MalformedValue("bad model parameter", lineno, err.token) from None
    return Model(name, polarity, vto, kp)


def parse_element(line: str, models: Mapping[str, Model], lineno: int | None = None) -> Element:
    """Parse a single element line against the given model table."""
    tokens = _normalize_eq(line).split()
    if not tokens:
        raise ArityMismatch("empty element line", lineno)
    eid = tokens[0]
    prefix = eid[0].upper()
    rest = tokens[1:]

    def value(tok: str) -> float:
        try:
            return parse_value(tok)
        except MalformedValue:
            raise MalformedValue("cannot parse numeric value", lineno, tok) from None

    if prefix in ("R", "C"):
        positional, _ = _split_params(rest, lineno or 0)
        if len(positional) != 3:
            raise ArityMismatch(f"{prefix} element needs 2 nodes and a value", lineno, eid)
        kind = ElementKind.RESISTOR if prefix == "R" else ElementKind.CAPACITOR
        return _build(kind, eid, positional[:2], {prefix: value(positional[2])}, None, lineno)
    if prefix in ("V", "I"):
        positional, _ = _split_params(rest, lineno or 0)
        if len(positional) == 4 and positional[2].lower() == "dc":
            positional = positional[:2] + positional[3:]
        if len(positional) != 3:
            raise ArityMismatch(f"{prefix} source needs 2 nodes and a DC value", lineno, eid)
        kind = ElementKind.VSOURCE if prefix == "V" else ElementKind.ISOURCE
        return _build(kind, eid, positional[:2], {"dc": value(positional[2])}, None, lineno)
    if prefix == "M":
        positional, named = _split_params(rest, lineno or 0)
        if len(positional) == 4 and positional[3] in models:
            nodes, mname = positional[:3], positional[3]
        elif len(positional) == 5 and positional[4] in models:
            # four-terminal form; bulk is tied to source in this model
            logger.warning("line %s: bulk terminal of %s ignored", lineno, eid)
            nodes, mname = positional[:3], positional[4]
        elif len(positional) in (4, 5):
            raise UnknownModel("MOSFET references an undefined model", lineno, positional[-1])
        else:
            raise ArityMismatch("MOSFET needs drain, gate, source and a model", lineno, eid)
        model = models[mname]
        params = {
            "W": value(named["w"]) if "w" in named else 1e-6,
            "L": value(named["l"]) if "l" in named else 1e-6,
            "Vto": model.vto,
            "Kp": model.kp,
        }
        return _build(model.polarity, eid, nodes, params, mname, lineno)
    raise UnknownElementPrefix("unsupported element", lineno, eid)


def _build(kind, eid, nodes, params, model, lineno) -> Element:
    try:
        return Element(kind, eid, tuple(nodes), params, model)
    except NetlistError as err:
        raise type(err)(err.message, lineno, err.token) from None


def parse(text: str, source: str = "<string>") -> Netlist:
    """Parse SPICE source text into a :class:`Netlist`.

    The first line is the title, as in SPICE. Errors carry the 1-based line
    number of the offending logical line.
    """
    lines = _logical_lines(text)
    if not lines:
        return Netlist(title="", elements=(), meta={"source": source})
    title = lines[0][1]
    body = lines[1:]

    models: dict[str, Model] = {}
    for lineno, line in body:
        if line.lower().startswith(".model"):
            m = _parse_model(line, lineno)
            models[m.name] = m

    elements: list[Element] = []
    cards: list[str] = []
    seen: set[str] = set()
    for lineno, line in body:
        if not line:
            continue
        low = line.lower()
        if line.startswith("*"):
            cards.append(line)
            continue
        if low.startswith(".model"):
            continue
        if low.startswith(".end") and not low.startswith(".ends"):
            continue
        if line.startswith("."):
            logger.warning("line %d: control card %r kept as metadata", lineno, line.split()[0])
            cards.append(line)
            continue
        e = parse_element(line, models, lineno)
        if e.id in seen:
            raise DuplicateId("duplicate element id", lineno, e.id)
        seen.add(e.id)
        elements.append(e)
    return Netlist(title=title, elements=tuple(elements), models=models, cards=tuple(cards),
                   meta={"source": source})


def serialize(n: Netlist) -> str:
    """Render canonical SPICE text; ``parse(serialize(n)) == n``."""
    out = [n.title, *n.cards]
    out.extend(e.line() for e in n.elements)
    out.extend(m.card() for m in n.models.values())
    out.append(".end")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# agent-facing checks and mutation


class RejectReason(enum.Enum):
    BAD_PREFIX = "BadPrefix"
    BAD_IDENTIFIER_SUFFIX = "BadIdentifierSuffix"
    DUPLICATE_ID = "DuplicateId"
    ARITY_MISMATCH = "ArityMismatch"
    BAD_VALUE = "BadValue"
    UNKNOWN_NODE = "UnknownNode"
    UNKNOWN_MODEL = "UnknownModel"
    DEGENERATE_NODES = "DegenerateNodes"
    DISALLOWED_KIND = "DisallowedKind"


@dataclass(frozen=True)
class CheckResult:
    accepted: bool
    reason: RejectReason | None = None
    detail: str = ""

    @classmethod
    def accept(cls) -> CheckResult:
        return cls(True)

    @classmethod
    def reject(cls, reason: RejectReason, detail: str) -> CheckResult:
        return cls(False, reason, detail)

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "reason": self.reason.value if self.reason else None,
            "detail": self.detail,
        }


_ERROR_REASON = {
    UnknownElementPrefix: RejectReason.BAD_PREFIX,
    ArityMismatch: RejectReason.ARITY_MISMATCH,
    MalformedValue: RejectReason.BAD_VALUE,
    DuplicateId: RejectReason.DUPLICATE_ID,
    UnknownModel: RejectReason.UNKNOWN_MODEL,
}


def syntax_check(candidate: Element, n: Netlist) -> CheckResult:
    """Validate an agent-proposed element against the current netlist.

    Rejection is returned as a value so it can be fed back to the policy.
    """
    try:
        validate_element(candidate)
    except NetlistError as err:
        return CheckResult.reject(_ERROR_REASON[type(err)], str(err))
    if candidate.kind not in TROJAN_KINDS:
        return CheckResult.reject(RejectReason.DISALLOWED_KIND, candidate.kind.value)
    if not _AGENT_ID_RE.match(candidate.id):
        return CheckResult.reject(
            RejectReason.BAD_IDENTIFIER_SUFFIX,
            f"{candidate.id!r}: identifier must be {candidate.kind.prefix} followed by a positive integer",
        )
    if candidate.id in n:
        return CheckResult.reject(RejectReason.DUPLICATE_ID, candidate.id)
    known = set(node_inventory(n)) | {GROUND}
    for node in candidate.nodes:
        if node not in known:
            return CheckResult.reject(RejectReason.UNKNOWN_NODE, node)
    a, b = candidate.nodes[0], candidate.nodes[-1]
    if a == b:
        return CheckResult.reject(RejectReason.DEGENERATE_NODES, f"{a} == {b}")
    if candidate.kind.is_mosfet:
        model = n.models.get(candidate.model or "")
        if model is None or model.polarity is not candidate.kind:
            return CheckResult.reject(RejectReason.UNKNOWN_MODEL, str(candidate.model))
        if (candidate.params["Vto"], candidate.params["Kp"]) != (model.vto, model.kp):
            return CheckResult.reject(RejectReason.BAD_VALUE, "Vto/Kp disagree with model card")
    return CheckResult.accept()


def check_line(line: str, n: Netlist) -> tuple[CheckResult, Element | None]:
    """Parse a raw SPICE line and syntax-check it; parse errors become rejections."""
    try:
        e = parse_element(line.strip(), n.models)
    except NetlistError as err:
        return CheckResult.reject(_ERROR_REASON[type(err)], str(err)), None
    return syntax_check(e, n), e


def eligible_slots(n: Netlist, avoid: Iterable[str] = ()) -> list[int]:
    """Insertion slots (0..len) not adjacent to any element id in ``avoid``."""
    avoid = set(avoid)
    flagged = [e.id in avoid for e in n.elements]
    slots = []
    for k in range(len(n.elements) + 1):
        left = k > 0 and flagged[k - 1]
        right = k < len(flagged) and flagged[k]
        if not (left or right):
            slots.append(k)
    return slots


def sample_position(n: Netlist, rng: random.Random, avoid: Iterable[str] = ()) -> int:
    """Uniform over slots that keep ``avoid`` elements non-contiguous.

    Falls back to all slots when every slot touches an avoided element.
    """
    slots = eligible_slots(n, avoid) or list(range(len(n.elements) + 1))
    return slots[rng.randrange(len(slots))]


def insert(n: Netlist, e: Element, rng: random.Random, avoid: Iterable[str] = ()) -> Netlist:
    """Return a new netlist with ``e`` placed at a sampled position."""
    if e.id in n:
        raise DuplicateId("duplicate element id", token=e.id)
    pos = sample_position(n, rng, avoid)
    elements = n.elements[:pos] + (e,) + n.elements[pos:]
    return n.replace(elements=elements)


def insert_at(n: Netlist, e: Element, pos: int) -> Netlist:
    if e.id in n:
        raise DuplicateId("duplicate element id", token=e.id)
    return n.replace(elements=n.elements[:pos] + (e,) + n.elements[pos:])


def remove(n: Netlist, eid: str) -> Netlist:
    if eid not in n:
        raise IdNotFound(eid)
    return n.replace(elements=tuple(e for e in n.elements if e.id != eid))


def allocate_id(n: Netlist, prefix: str, rng: random.Random, upper: int = 999) -> str:
    """Random unused identifier ``<prefix><int>``; widens the range when crowded."""
    used = set(n.ids)
    while True:
        for _ in range(64):
            cand = f"{prefix}{rng.randint(1, upper)}"
            if cand not in used:
                return cand
        upper *= 10
