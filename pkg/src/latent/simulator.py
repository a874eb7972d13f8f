"""DC operating points and DC sweeps by modified nodal analysis.

Unknowns are the non-ground node voltages followed by one branch current per
voltage source. Nonlinear elements (level-1 MOSFETs) are handled by damped
Newton-Raphson with gmin stepping and source stepping as fallbacks.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .netlist import GROUND, ElementKind, Netlist, node_inventory

logger = logging.getLogger(__name__)

TOL_RES = 1e-9
TOL_DV = 1e-6
MAX_ITER = 200
MAX_HALVINGS = 8
CAP_GMIN = 1e-12
GMIN_LADDER = tuple(10.0 ** -k for k in range(3, 13))
DENSE_LIMIT = 400


class SimulationError(RuntimeError):
    pass


class NonConvergence(SimulationError):
    def __init__(self, iterations: int, best_residual: float, detail: str = ""):
        self.iterations = iterations
        self.best_residual = best_residual
        super().__init__(
            f"Newton did not converge after {iterations} iterations "
            f"(best residual {best_residual:.3g}){': ' + detail if detail else ''}"
        )


class SingularMatrix(SimulationError):
    def __init__(self, nodes: Sequence[str], detail: str = ""):
        self.nodes = tuple(nodes)
        msg = "singular MNA matrix"
        if self.nodes:
            msg += f"; floating nodes: {', '.join(self.nodes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass(frozen=True)
class SolverOptions:
    tol_res: float = TOL_RES
    tol_dv: float = TOL_DV
    max_iter: int = MAX_ITER
    max_halvings: int = MAX_HALVINGS
    cap_gmin: float = CAP_GMIN
    # "error": capacitor-only islands raise SingularMatrix;
    # "ignore": they are dropped from the solve and the trace
    floating_caps: str = "error"


# --------------------------------------------------------------------------
# device model


def level1_current(vgs, vds, vto, beta):
    """Square-law drain current and its partials for ``vds >= 0``.

    Works elementwise on arrays. Returns ``(id, d_id/d_vgs, d_id/d_vds)``.
    No channel-length modulation.
    """
    vgs, vds, vto, beta = np.broadcast_arrays(*map(np.asarray, (vgs, vds, vto, beta)))
    vov = vgs - vto
    on = vov > 0
    sat = on & (vds >= vov)
    tri = on & ~sat
    i = np.zeros(vov.shape)
    gm = np.zeros(vov.shape)
    gds = np.zeros(vov.shape)
    i[sat] = 0.5 * beta[sat] * vov[sat] ** 2
    gm[sat] = beta[sat] * vov[sat]
    i[tri] = beta[tri] * (vov[tri] * vds[tri] - 0.5 * vds[tri] ** 2)
    gm[tri] = beta[tri] * vds[tri]
    gds[tri] = beta[tri] * (vov[tri] - vds[tri])
    return i, gm, gds


def mosfet_region(polarity: int, vd: float, vg: float, vs: float, vto: float) -> str:
    """'cutoff', 'triode' or 'saturation' for one device at given terminal voltages."""
    if polarity * (vd - vs) < 0:
        vd, vs = vs, vd
    vgs = polarity * (vg - vs)
    vds = polarity * (vd - vs)
    vov = vgs - polarity * vto
    if vov <= 0:
        return "cutoff"
    return "saturation" if vds >= vov else "triode"


# --------------------------------------------------------------------------
# compiled MNA system


def _dc_islands(n: Netlist, nodes: Sequence[str]) -> list[str]:
    """Nodes with no DC conduction path to ground, in inventory order."""
    parent = {node: node for node in nodes}
    parent[GROUND] = GROUND

    def find(a: str) -> str:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in n.elements:
        if e.kind in (ElementKind.RESISTOR, ElementKind.VSOURCE):
            a, b = e.nodes
        elif e.kind.is_mosfet:
            a, b = e.nodes[0], e.nodes[2]
        else:
            continue
        parent[find(a)] = find(b)
    root = find(GROUND)
    return [node for node in nodes if find(node) != root]


class MnaSystem:
    """Netlist compiled to index arrays for fast residual/Jacobian assembly."""

    def __init__(self, n: Netlist, options: SolverOptions = SolverOptions()):
        self.netlist = n
        self.options = options
        inventory = node_inventory(n)
        floating = _dc_islands(n, inventory)
        self.dropped: tuple[str, ...] = ()
        if floating:
            cap_only = all(
                all(e.kind is ElementKind.CAPACITOR for e in n.elements if node in e.nodes)
                for node in floating
            )
            if options.floating_caps == "ignore" and cap_only:
                self.dropped = tuple(floating)
            else:
                raise SingularMatrix(floating, "no DC path to ground")
        self.nodes = [node for node in inventory if node not in self.dropped]
        self.n = len(self.nodes)
        idx = {node: k for k, node in enumerate(self.nodes)}
        idx[GROUND] = self.n
        for node in self.dropped:
            idx[node] = self.n  # open circuit; its capacitors carry no current anyway
        self.node_index = idx

        res, caps, vs, isrc, mos = [], [], [], [], []
        for e in n.elements:
            k = e.kind
            if k is ElementKind.RESISTOR:
                res.append((idx[e.nodes[0]], idx[e.nodes[1]], 1.0 / e.params["R"]))
            elif k is ElementKind.CAPACITOR:
                caps.append((idx[e.nodes[0]], idx[e.nodes[1]], options.cap_gmin))
            elif k is ElementKind.VSOURCE:
                vs.append((idx[e.nodes[0]], idx[e.nodes[1]], e.params["dc"], e.id))
            elif k is ElementKind.ISOURCE:
                isrc.append((idx[e.nodes[0]], idx[e.nodes[1]], e.params["dc"], e.id))
            else:
                pol = 1 if k is ElementKind.NMOS else -1
                beta = e.params["Kp"] * e.params["W"] / e.params["L"]
                mos.append((idx[e.nodes[0]], idx[e.nodes[1]], idx[e.nodes[2]], pol,
                            e.params["Vto"], beta))
        self.m = len(vs)
        self.size = self.n + 1 + self.m
        self.vs_ids = [v[3] for v in vs]
        self.is_ids = [i[3] for i in isrc]
        self._vs = np.array([v[:2] for v in vs], dtype=int).reshape(-1, 2)
        self.vs_dc = np.array([v[2] for v in vs], dtype=float)
        self._is = np.array([i[:2] for i in isrc], dtype=int).reshape(-1, 2)
        self.is_dc = np.array([i[2] for i in isrc], dtype=float)
        g_lin = res + caps
        self._g = np.array([g[:2] for g in g_lin], dtype=int).reshape(-1, 2)
        self._gval = np.array([g[2] for g in g_lin], dtype=float)
        if mos:
            arr = np.array(mos, dtype=float)
            self._md, self._mg, self._ms = (arr[:, j].astype(int) for j in range(3))
            self._mpol, self._mvto, self._mbeta = arr[:, 3], arr[:, 4], arr[:, 5]
        else:
            self._md = self._mg = self._ms = np.zeros(0, dtype=int)
            self._mpol = self._mvto = self._mbeta = np.zeros(0)
        self.nonlinear = bool(mos)
        self.sparse = self.size > DENSE_LIMIT + 1
        self._keep = np.array([j for j in range(self.size) if j != self.n], dtype=int)
        self._lin_rows, self._lin_cols, self._lin_vals = self._linear_stamps()

    # -- stamps ----------------------------------------------------------

    def _linear_stamps(self):
        rows, cols, vals = [], [], []
        a, b = self._g[:, 0], self._g[:, 1]
        g = self._gval
        for r, c, v in ((a, a, g), (b, b, g), (a, b, -g), (b, a, -g)):
            rows.append(r)
            cols.append(c)
            vals.append(v)
        br = self.n + 1 + np.arange(self.m)
        a, b = self._vs[:, 0], self._vs[:, 1]
        one = np.ones(self.m)
        for r, c, v in ((a, br, one), (b, br, -one), (br, a, one), (br, b, -one)):
            rows.append(r)
            cols.append(c)
            vals.append(v)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    def _mos_eval(self, x: np.ndarray):
        vd, vg, vs = x[self._md], x[self._mg], x[self._ms]
        p = self._mpol
        swap = p * (vd - vs) < 0
        ed = np.where(swap, vs, vd)
        es = np.where(swap, vd, vs)
        f, fg, fd = level1_current(p * (vg - es), p * (ed - es), p * self._mvto, self._mbeta)
        sign = np.where(swap, -1.0, 1.0)
        cur = p * sign * f
        # partials of the drain-to-source current w.r.t. vd, vg, vs
        dg = np.where(swap, -fg, fg)
        dd = np.where(swap, fg + fd, fd)
        ds = np.where(swap, -fd, -(fg + fd))
        return cur, dd, dg, ds

    def residual(self, x: np.ndarray, scale: float = 1.0, gmin: float = 0.0) -> np.ndarray:
        """KCL residual (current leaving each node) and source constraint rows."""
        F = np.zeros(self.size)
        a, b = self._g[:, 0], self._g[:, 1]
        i_g = self._gval * (x[a] - x[b])
        np.add.at(F, a, i_g)
        np.add.at(F, b, -i_g)
        br = x[self.n + 1:]
        np.add.at(F, self._vs[:, 0], br)
        np.add.at(F, self._vs[:, 1], -br)
        F[self.n + 1:] = x[self._vs[:, 0]] - x[self._vs[:, 1]] - scale * self.vs_dc
        np.add.at(F, self._is[:, 0], scale * self.is_dc)
        np.add.at(F, self._is[:, 1], -scale * self.is_dc)
        if self.nonlinear:
            cur = self._mos_eval(x)[0]
            np.add.at(F, self._md, cur)
            np.add.at(F, self._ms, -cur)
        if gmin:
            F[: self.n] += gmin * x[: self.n]
        F[self.n] = 0.0
        return F

    def jacobian(self, x: np.ndarray, gmin: float = 0.0):
        rows, cols, vals = [self._lin_rows], [self._lin_cols], [self._lin_vals]
        if self.nonlinear:
            _, dd, dg, ds = self._mos_eval(x)
            for node, sgn in ((self._md, 1.0), (self._ms, -1.0)):
                for col, dv in ((self._md, dd), (self._mg, dg), (self._ms, ds)):
                    rows.append(node)
                    cols.append(col)
                    vals.append(sgn * dv)
        if gmin:
            diag = np.arange(self.n)
            rows.append(diag)
            cols.append(diag)
            vals.append(np.full(self.n, gmin))
        r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        keep = (r != self.n) & (c != self.n)
        r, c, v = r[keep], c[keep], v[keep]
        # shift indices past the ground slot
        r = r - (r > self.n)
        c = c - (c > self.n)
        dim = self.size - 1
        if self.sparse:
            return sp.csc_matrix((v, (r, c)), shape=(dim, dim))
        J = np.zeros((dim, dim))
        np.add.at(J, (r, c), v)
        return J

    def solve_linear(self, J, rhs: np.ndarray) -> np.ndarray:
        try:
            if self.sparse:
                with np.errstate(all="ignore"):
                    out = spla.spsolve(J, rhs)
            else:
                out = np.linalg.solve(J, rhs)
        except (np.linalg.LinAlgError, RuntimeError) as err:
            raise SingularMatrix((), str(err)) from None
        if not np.all(np.isfinite(out)):
            raise SingularMatrix((), "non-finite solution")
        return out

    def full(self, reduced: np.ndarray) -> np.ndarray:
        x = np.zeros(self.size)
        x[self._keep] = reduced
        return x

    # -- extraction --------------------------------------------------------

    def element_currents(self, x: np.ndarray, scale: float = 1.0) -> dict[str, float]:
        """Current through each element, flowing from its first node to its last."""
        n = self.netlist
        idx = self.node_index
        out: dict[str, float] = {}
        br = dict(zip(self.vs_ids, x[self.n + 1:]))
        mos_cur = self._mos_eval(x)[0] if self.nonlinear else []
        k_mos = 0
        for e in n.elements:
            k = e.kind
            if k is ElementKind.RESISTOR:
                out[e.id] = (x[idx[e.nodes[0]]] - x[idx[e.nodes[1]]]) / e.params["R"]
            elif k is ElementKind.CAPACITOR:
                out[e.id] = 0.0
            elif k is ElementKind.VSOURCE:
                out[e.id] = float(br[e.id])
            elif k is ElementKind.ISOURCE:
                out[e.id] = scale * e.params["dc"]
            else:
                out[e.id] = float(mos_cur[k_mos])
                k_mos += 1
        return out

    def node_voltages(self, x: np.ndarray) -> dict[str, float]:
        return {node: float(x[k]) for k, node in enumerate(self.nodes)}

    def state_vector(self, node_v: Mapping[str, float], vs_i: Mapping[str, float]) -> np.ndarray:
        x = np.zeros(self.size)
        for k, node in enumerate(self.nodes):
            x[k] = node_v[node]
        for k, vid in enumerate(self.vs_ids):
            x[self.n + 1 + k] = vs_i[vid]
        return x

    def with_inputs(self, inputs: Mapping[str, float]) -> None:
        for vid, val in inputs.items():
            if vid in self.vs_ids:
                self.vs_dc[self.vs_ids.index(vid)] = val
            elif vid in self.is_ids:
                self.is_dc[self.is_ids.index(vid)] = val
            else:
                raise KeyError(f"unknown source {vid!r}")


# --------------------------------------------------------------------------
# Newton-Raphson


@dataclass
class _Attempt:
    x: np.ndarray
    ok: bool
    iterations: int
    residual: float


def _newton(sys: MnaSystem, x0: np.ndarray, scale: float, gmin: float,
            opts: SolverOptions) -> _Attempt:
    """Damped Newton on the circuit with ``gmin`` to ground at every node."""
    x = x0.copy()
    F = sys.residual(x, scale, gmin)
    norm = np.max(np.abs(F))
    best = norm
    for it in range(1, opts.max_iter + 1):
        J = sys.jacobian(x, gmin)
        dx = sys.full(sys.solve_linear(J, -F[sys._keep]))
        alpha = 1.0
        for halving in range(opts.max_halvings + 1):
            x_try = x + alpha * dx
            F_try = sys.residual(x_try, scale, gmin)
            n_try = np.max(np.abs(F_try))
            if n_try <= norm or not sys.nonlinear or halving == opts.max_halvings:
                break
            alpha *= 0.5
        x, F, norm = x_try, F_try, n_try
        best = min(best, norm)
        step = np.max(np.abs(alpha * dx[: sys.n])) if sys.n else 0.0
        if norm <= opts.tol_res and step <= opts.tol_dv:
            return _Attempt(x, True, it, norm)
    return _Attempt(x, False, opts.max_iter, best)


@dataclass
class OperatingPoint:
    node_v: dict[str, float]
    elem_i: dict[str, float]
    iterations: int
    residual: float
    x: np.ndarray = field(repr=False)

    def __iter__(self) -> Iterator[dict[str, float]]:
        yield self.node_v
        yield self.elem_i

    def v(self, node: str) -> float:
        return 0.0 if node == GROUND else self.node_v[node]


def _solve(sys: MnaSystem, x0: np.ndarray | None, opts: SolverOptions) -> _Attempt:
    """Plain Newton, then gmin stepping, then source stepping."""
    if x0 is None:
        x0 = np.zeros(sys.size)
    total = 0
    best = math.inf
    singular: SingularMatrix | None = None

    def attempt(x, scale, gmin):
        nonlocal total, best, singular
        try:
            res = _newton(sys, x, scale, gmin, opts)
        except SingularMatrix as err:
            singular = err
            return None
        total += res.iterations
        best = min(best, res.residual)
        return res

    def finish(x):
        # polish without gmin; keep the gmin solution if it already satisfies KCL
        polished = attempt(x, 1.0, 0.0)
        if polished is not None and polished.ok:
            return polished
        norm = float(np.max(np.abs(sys.residual(x, 1.0, 0.0))))
        if norm <= opts.tol_res:
            return _Attempt(x, True, total, norm)
        return None

    res = attempt(x0, 1.0, 0.0)
    if res is not None and res.ok:
        return res

    x = x0
    for g in GMIN_LADDER:
        res = attempt(x, 1.0, g)
        if res is None or not res.ok:
            break
        x = res.x
    else:
        done = finish(x)
        if done is not None:
            return done

    x = np.zeros(sys.size)
    lam, dlam = 0.0, 0.1
    g = GMIN_LADDER[-1]
    while lam < 1.0 and dlam > 1e-4:
        target = min(1.0, lam + dlam)
        step = attempt(x, target, g)
        if step is not None and step.ok:
            x, lam = step.x, target
            dlam = min(0.25, dlam * 1.5)
        else:
            dlam *= 0.5
    if lam >= 1.0:
        done = finish(x)
        if done is not None:
            return done
    if singular is not None and not math.isfinite(best):
        raise singular
    raise NonConvergence(total, best)


def dc_operating_point(n: Netlist, fixed_inputs: Mapping[str, float] | None = None,
                       options: SolverOptions = SolverOptions(),
                       x0: np.ndarray | None = None) -> OperatingPoint:
    """Solve the DC operating point; capacitors are open circuits.

    ``fixed_inputs`` overrides the DC value of named independent sources.
    """
    sys = MnaSystem(n, options)
    sys.with_inputs(fixed_inputs or {})
    res = _solve(sys, x0, options)
    return OperatingPoint(sys.node_voltages(res.x), sys.element_currents(res.x),
                          res.iterations, res.residual, res.x)


# --------------------------------------------------------------------------
# sweeps and traces


@dataclass(frozen=True)
class SweepSpec:
    """Uniform DC sweep of one independent source, endpoints included."""

    source_id: str
    start: float = 0.0
    stop: float = 2.0
    points: int = 26

    def __post_init__(self) -> None:
        if not self.start < self.stop:
            raise ValueError("sweep start must be below stop")
        if self.points < 2:
            raise ValueError("sweep needs at least two points")

    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.points)

    def to_dict(self) -> dict:
        return {"source": self.source_id, "start": self.start, "stop": self.stop,
                "points": self.points}

    @classmethod
    def from_dict(cls, d: Mapping) -> SweepSpec:
        return cls(str(d["source"]), float(d.get("start", 0.0)), float(d.get("stop", 2.0)),
                   int(d.get("points", 26)))


@dataclass
class SimTrace:
    """Node voltages and element currents at every sweep point.

    Rows follow ascending sweep value. Rows of points that failed to converge
    hold NaN and are flagged in ``converged``.
    """

    sweep: SweepSpec
    values: np.ndarray
    nodes: tuple[str, ...]
    elements: tuple[str, ...]
    node_v: np.ndarray
    elem_i: np.ndarray
    converged: np.ndarray

    def __post_init__(self) -> None:
        self._node_col = {node: k for k, node in enumerate(self.nodes)}
        self._elem_col = {eid: k for k, eid in enumerate(self.elements)}

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    def v(self, node: str) -> np.ndarray:
        if node == GROUND:
            return np.zeros(len(self.values))
        return self.node_v[:, self._node_col[node]]

    def i(self, eid: str) -> np.ndarray:
        return self.elem_i[:, self._elem_col[eid]]

    def has_node(self, node: str) -> bool:
        return node == GROUND or node in self._node_col

    # CSV: header ``sweep,V(<node>)...,I(<element>)...``

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sweep", *(f"V({n})" for n in self.nodes), *(f"I({e})" for e in self.elements)])
        for k, val in enumerate(self.values):
            row = [repr(float(val))]
            row += [repr(float(v)) for v in self.node_v[k]]
            row += [repr(float(i)) for i in self.elem_i[k]]
            w.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path, source_id: str = "") -> SimTrace:
        text = Path(source).read_text() if isinstance(source, Path) or "\n" not in str(source) else str(source)
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        if header[0] != "sweep":
            raise ValueError("trace CSV must start with a 'sweep' column")
        nodes = tuple(h[2:-1] for h in header[1:] if h.startswith("V("))
        elements = tuple(h[2:-1] for h in header[1:] if h.startswith("I("))
        data = np.array([[float(c) for c in r] for r in body], dtype=float).reshape(len(body), len(header))
        values = data[:, 0]
        nv = data[:, 1:1 + len(nodes)]
        ei = data[:, 1 + len(nodes):]
        conv = np.all(np.isfinite(data), axis=1)
        spec = SweepSpec(source_id, float(values[0]), float(values[-1]), len(values))
        return cls(spec, values, nodes, elements, nv, ei, conv)


def dc_sweep(n: Netlist, spec: SweepSpec, options: SolverOptions = SolverOptions(),
             warm_start: bool = True) -> SimTrace:
    """Operating point at each grid value of the swept source.

    Each point is warm-started from the last converged solution. A point that
    fails is recorded as a NaN row; the sweep continues.
    """
    sys = MnaSystem(n, options)
    if spec.source_id not in sys.vs_ids and spec.source_id not in sys.is_ids:
        raise KeyError(f"swept source {spec.source_id!r} not in netlist")
    values = spec.values()
    elements = tuple(e.id for e in n.elements)
    node_v = np.full((len(values), sys.n), np.nan)
    elem_i = np.full((len(values), len(elements)), np.nan)
    conv = np.zeros(len(values), dtype=bool)
    x = None
    for k, val in enumerate(values):
        sys.with_inputs({spec.source_id: float(val)})
        try:
            res = _solve(sys, x if warm_start else None, options)
        except SimulationError as err:
            logger.debug("sweep point %s=%g failed: %s", spec.source_id, val, err)
            continue
        x = res.x
        node_v[k] = res.x[: sys.n]
        cur = sys.element_currents(res.x)
        elem_i[k] = [cur[e] for e in elements]
        conv[k] = True
    return SimTrace(spec, values, tuple(sys.nodes), elements, node_v, elem_i, conv)


def trace_state(sys: MnaSystem, trace: SimTrace, k: int) -> np.ndarray:
    """Rebuild the full MNA unknown vector of sweep point ``k`` from a trace."""
    node_v = {node: trace.node_v[k, j] for j, node in enumerate(trace.nodes)}
    vs_i = {vid: trace.i(vid)[k] for vid in sys.vs_ids}
    return sys.state_vector(node_v, vs_i)


def kcl_residual(n: Netlist, trace: SimTrace, k: int) -> float:
    """Largest net current into any node at sweep point ``k``, relative to the
    largest branch current (absolute when all branches carry < 1 A)."""
    net: dict[str, float] = {}
    biggest = 0.0
    for e in n.elements:
        i = trace.i(e.id)[k]
        biggest = max(biggest, abs(i))
        a, b = e.nodes[0], e.nodes[-1]
        net[a] = net.get(a, 0.0) + i
        net[b] = net.get(b, 0.0) - i
    worst = max((abs(v) for node, v in net.items() if node != GROUND), default=0.0)
    return worst / max(1.0, biggest)
