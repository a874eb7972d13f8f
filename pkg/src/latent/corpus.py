"""Bundled benchmark circuits and the manifest that describes them.

Every benchmark shares the same test bench: ``VDD vdd 0 2`` supplies the
circuit and ``VIN in 0 0`` is the swept input, 0 to 2 V.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

from .netlist import Netlist, node_count, parse
from .simulator import SimTrace, SweepSpec, dc_sweep

CORPUS_VERSION = "1.0"
MODELS = (".model nmod nmos vto=0.5 kp=100u", ".model pmod pmos vto=-0.5 kp=50u")
BENCH = ("VDD vdd 0 2", "VIN in 0 0")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkEntry:
    name: str
    path: str
    output_node: str
    source: str
    area: float
    expected_nodes: int

    def sweep(self, points: int = 26) -> SweepSpec:
        return SweepSpec(self.source, 0.0, 2.0, points)


@dataclass(frozen=True)
class BenchmarkManifest:
    entries: tuple[BenchmarkEntry, ...]
    version: str
    root: Path

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, name: str) -> BenchmarkEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def resolve(self, entry: BenchmarkEntry) -> Path:
        return self.root / entry.path

    def load(self, entry: BenchmarkEntry | str) -> Netlist:
        """Parse one benchmark and guard against corpus drift."""
        if isinstance(entry, str):
            entry = self.get(entry)
        path = self.resolve(entry)
        n = parse(path.read_text(), source=str(path))
        if node_count(n) != entry.expected_nodes:
            raise ManifestError(f"{entry.name}: expected {entry.expected_nodes} nodes, "
                                f"found {node_count(n)}")
        return n

    def to_json(self) -> str:
        return json.dumps({"version": self.version,
                           "entries": [asdict(e) for e in self.entries]}, indent=2) + "\n"


def load_manifest(path: str | Path | None = None) -> BenchmarkManifest:
    """Read a manifest; the bundled corpus is used when ``path`` is None."""
    if path is None:
        path = Path(str(resources.files("latent") / "data" / "corpus" / "manifest.json"))
    path = Path(path)
    raw = json.loads(path.read_text())
    entries = tuple(BenchmarkEntry(**e) for e in raw["entries"])
    for e in entries:
        if not (path.parent / e.path).is_file():
            raise ManifestError(f"{e.name}: missing netlist {e.path}")
    return BenchmarkManifest(entries, raw.get("version", ""), path.parent)


def bundled_corpus_dir() -> Path:
    return Path(str(resources.files("latent") / "data" / "corpus"))


def mosfet_area(n: Netlist) -> float:
    return sum(e.params["W"] * e.params["L"] for e in n.elements if e.kind.is_mosfet)


# --------------------------------------------------------------------------
# builders


class _Builder:
    def __init__(self, title: str):
        self.lines = [title, *BENCH]
        self.counts = {"R": 0, "C": 0, "M": 0}
        self.nodes: list[str] = ["vdd", "in"]
        self._fresh = 0

    def node(self, prefix: str = "n") -> str:
        self._fresh += 1
        name = f"{prefix}{self._fresh}"
        self.nodes.append(name)
        return name

    def _id(self, p: str) -> str:
        self.counts[p] += 1
        return f"{p}{self.counts[p]}"

    def r(self, a: str, b: str, val: str) -> None:
        self.lines.append(f"{self._id('R')} {a} {b} {val}")

    def c(self, a: str, b: str, val: str) -> None:
        self.lines.append(f"{self._id('C')} {a} {b} {val}")

    def m(self, d: str, g: str, s: str, model: str, w: str = "1u", l: str = "1u") -> None:
        self.lines.append(f"{self._id('M')} {d} {g} {s} {model} W={w} L={l}")

    def text(self) -> str:
        return "\n".join([*self.lines, *MODELS, ".end"]) + "\n"


def ladder20() -> str:
    """Twenty-node reference bench: a bias ladder feeding two gain stages."""
    b = _Builder("ladder20 bias ladder with common-source stages")
    taps = []
    prev = "vdd"
    for _ in range(10):
        t = b.node("t")
        b.r(prev, t, "2k")
        taps.append(t)
        prev = t
    b.r(prev, "0", "2k")
    o1 = b.node("o")
    b.r("vdd", o1, "20k")
    b.m(o1, "in", "0", "nmod", "2u", "1u")
    o2 = b.node("o")
    b.r("vdd", o2, "10k")
    s2 = b.node("s")
    b.m(o2, o1, s2, "nmod", "1u", "1u")
    b.r(s2, "0", "1k")
    f = b.node("f")
    b.m("vdd", o2, f, "nmod", "2u", "1u")
    b.r(f, "0", "20k")
    p = b.node("p")
    b.m(p, taps[3], "vdd", "pmod", "1u", "1u")
    b.r(p, "0", "50k")
    x = b.node("x")
    b.r(taps[6], x, "5k")
    b.c(x, "0", "1p")
    y = b.node("y")
    b.r(f, y, "1k")
    b.r(y, "0", "100k")
    z = b.node("z")
    b.r(o1, z, "10k")
    b.r(z, "0", "40k")
    assert len(b.nodes) == 20, len(b.nodes)
    return b.text()


def thresh() -> str:
    """Threshold benchmark with a stiff output and a high-impedance sense node.

    ``out`` sits at 1.5 V behind a 15 ohm Thevenin resistance, so small
    inserted parts barely move it. ``sense`` sits at 1.5 V behind 750 kOhm.
    A resistor string from ``in`` to ``vdd`` keeps every tap at or above the
    input voltage.
    """
    b = _Builder("thresh threshold-trigger benchmark")
    out = "out"
    b.nodes.append(out)
    b.r("vdd", out, "20")
    b.r(out, "0", "60")
    sense = "sense"
    b.nodes.append(sense)
    b.r("vdd", sense, "1meg")
    b.r(sense, "0", "3meg")
    prev = "in"
    for _ in range(14):
        t = b.node("k")
        b.r(prev, t, "10k")
        prev = t
    b.r(prev, "vdd", "10k")
    d = b.node("d")
    b.r("vdd", d, "50k")
    b.m(d, "in", "0", "nmod", "1u", "1u")
    return b.text()


def opamp() -> str:
    """Two-stage operational amplifier with resistor loads and a tail resistor."""
    b = _Builder("opamp two-stage amplifier with resistive loads")
    vref, tail, d1, d2, out, cz = "vref", "tail", "d1", "d2", "out", "cz"
    b.nodes += [vref, tail, d1, d2, out, cz]
    b.r("vdd", vref, "100k")
    b.r(vref, "0", "100k")
    b.m(d1, "in", tail, "nmod", "4u", "1u")
    b.m(d2, vref, tail, "nmod", "4u", "1u")
    b.r(tail, "0", "10k")
    b.r("vdd", d1, "60k")
    b.r("vdd", d2, "60k")
    b.m(out, d2, "vdd", "pmod", "8u", "1u")
    b.r(out, "0", "20k")
    b.r(d2, cz, "2k")
    b.c(cz, out, "1p")
    b.c(out, "0", "2p")
    # bias ladder and output buffer
    prev = "vdd"
    for _ in range(5):
        t = b.node("bl")
        b.r(prev, t, "40k")
        prev = t
    b.r(prev, "0", "40k")
    buf = b.node("buf")
    b.m("vdd", out, buf, "nmod", "4u", "1u")
    b.r(buf, "0", "10k")
    fb = b.node("fb")
    b.r(buf, fb, "10k")
    b.r(fb, "0", "10k")
    return b.text()


def synthetic(name: str, n_nodes: int, seed: int) -> str:
    """Random mix of resistive ladders and single-transistor stages.

    Every new node gets a resistive path to a rail when it is created, so
    the circuit always has a DC solution.
    """
    rng = random.Random(seed)
    b = _Builder(f"{name} synthetic analog block")
    driven = ["in"]

    def res() -> str:
        return rng.choice(("1k", "2k", "5k", "10k", "20k", "50k"))

    def size() -> str:
        return rng.choice(("1u", "2u", "4u"))

    while len(b.nodes) < n_nodes:
        room = n_nodes - len(b.nodes)
        kind = rng.choice(("ladder", "cs", "pcs", "follower", "rc"))
        if kind == "ladder" and room >= 3:
            prev = "vdd"
            for _ in range(rng.randint(2, min(4, room - 1))):
                t = b.node("t")
                b.r(prev, t, res())
                driven.append(t)
                prev = t
            b.r(prev, "0", res())
        elif kind == "cs" and room >= 2:
            g = rng.choice(driven)
            o = b.node("o")
            s = b.node("s")
            b.r("vdd", o, res())
            b.m(o, g, s, "nmod", size(), "1u")
            b.r(s, "0", "1k")
            driven.append(o)
        elif kind == "pcs":
            g = rng.choice(driven)
            o = b.node("p")
            b.m(o, g, "vdd", "pmod", size(), "1u")
            b.r(o, "0", res())
            driven.append(o)
        elif kind == "follower":
            g = rng.choice(driven)
            o = b.node("f")
            b.m("vdd", g, o, "nmod", size(), "1u")
            b.r(o, "0", res())
            driven.append(o)
        else:
            a = rng.choice(driven)
            x = b.node("x")
            b.r(a, x, res())
            b.r(x, "0", "100k")
            b.c(x, "0", rng.choice(("100f", "1p", "5p")))
            driven.append(x)
    return b.text()


def widest_swing_node(n: Netlist, trace: SimTrace) -> tuple[str, float]:
    """Transistor terminal whose voltage moves most over the sweep, and that swing."""
    stage = {node for e in n.elements if e.kind.is_mosfet for node in (e.nodes[0], e.nodes[2])}
    candidates = [v for v in trace.nodes if v in stage and v not in ("in", "vdd")]
    best, swing = "in", -1.0
    for node in candidates or trace.nodes:
        v = trace.v(node)
        if float(v.max() - v.min()) > swing + 1e-9:
            best, swing = node, float(v.max() - v.min())
    return best, swing


def _responsive(name: str, size: int, seed: int, min_swing: float = 0.1) -> tuple[str, str]:
    """First synthetic draw from ``seed`` onward whose output follows the input."""
    while True:
        text = synthetic(name, size, seed)
        n = parse(text)
        node, swing = widest_swing_node(n, dc_sweep(n, SweepSpec("VIN", 0.0, 2.0, 26)))
        if swing >= min_swing:
            return text, node
        seed += 7919


SYNTH_SIZES = (18, 19, 20, 21, 22, 23, 24, 25, 18, 20, 22, 24, 25)


def build_corpus() -> list[tuple[str, str, str]]:
    """(name, netlist text, output node) for every bundled benchmark."""
    out = [("ladder20", ladder20(), "o12"), ("thresh", thresh(), "out"), ("opamp", opamp(), "out")]
    for i, size in enumerate(SYNTH_SIZES):
        name = f"synth{i + 1:02d}"
        out.append((name, *_responsive(name, size, 1000 + i)))
    out.append(("bandgap265", *_responsive("bandgap265", 265, 265)))
    out.append(("ldo1655", *_responsive("ldo1655", 1655, 1655)))
    return out


def write_corpus(root: str | Path) -> BenchmarkManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, text, output in build_corpus():
        (root / f"{name}.sp").write_text(text)
        n = parse(text)
        entries.append(BenchmarkEntry(name, f"{name}.sp", output, "VIN", float(f"{mosfet_area(n):.12g}"),
                                      node_count(n)))
    manifest = BenchmarkManifest(tuple(entries), CORPUS_VERSION, root)
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest
