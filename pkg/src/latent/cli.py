"""Command-line entry point: ``latent {simulate,detect,campaign,baseline,report}``.

Exit codes: 0 on success, 1 on input or configuration errors, 2 when the
run finished but some sweep points failed to converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .agent import CampaignConfig, EmptyCua, NodeExhaustion, run_campaign
from .baselines import PATTERNS, PlacementFailure, place_baseline
from .corpus import BenchmarkEntry, ManifestError, load_manifest, mosfet_area, widest_swing_node
from .detector import DetectorConfig, RuleDetector, diagnosis_summary
from .metrics import CSV_COLUMNS, MetricsRecord, compare, records_csv
from .netlist import ElementKind, Netlist, NetlistError, parse, serialize
from .simulator import SimTrace, SimulationError, SweepSpec, dc_sweep

log = logging.getLogger("latent")

EXIT_OK, EXIT_INPUT, EXIT_PARTIAL = 0, 1, 2


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as err:
        raise InputError(f"cannot read config {path}: {err}") from err
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InputError(f"config {path} must be a mapping")
    return data


def _load_netlist(path: str) -> Netlist:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise InputError(f"cannot read {path}: {err}") from err
    return parse(text, source=path)


def _default_sweep(n: Netlist) -> SweepSpec:
    """Sweep VIN if present, else the first voltage source, over 0 to 2 V."""
    sources = [e.id for e in n.elements if e.kind is ElementKind.VSOURCE]
    if not sources:
        raise InputError("netlist has no voltage source to sweep")
    src = "VIN" if "VIN" in sources else sources[-1]
    return SweepSpec(src, 0.0, 2.0, 26)


def _sweep_from_args(args, n: Netlist, cfg: dict) -> SweepSpec:
    if args.sweep:
        src, start, stop, points = args.sweep
        try:
            return SweepSpec(src, float(start), float(stop), int(points))
        except ValueError as err:
            raise InputError(f"bad --sweep: {err}") from err
    if "sweep" in cfg:
        return SweepSpec.from_dict(cfg["sweep"])
    return _default_sweep(n)


def _find_entry(args, cfg: dict) -> tuple[BenchmarkEntry | None, Path | None]:
    """Manifest entry for ``--benchmark`` or for a netlist path listed in the manifest."""
    manifest_path = args.manifest or cfg.get("manifest")
    if getattr(args, "benchmark", None) is None and manifest_path is None:
        return None, None
    manifest = load_manifest(manifest_path)
    if getattr(args, "benchmark", None):
        entry = manifest.get(args.benchmark)
        return entry, manifest.resolve(entry)
    target = Path(args.netlist).resolve()
    for entry in manifest:
        if manifest.resolve(entry).resolve() == target:
            return entry, target
    return None, None


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


def _dumps(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n"


def _json_safe(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


# --------------------------------------------------------------------------
# verbs


def cmd_simulate(args) -> int:
    cfg = _read_config(args.config)
    n = _load_netlist(args.netlist)
    trace = dc_sweep(n, _sweep_from_args(args, n, cfg))
    out = _out_dir(args) / (args.output or f"{Path(args.netlist).stem}.trace.csv")
    _write(out, trace.to_csv())
    bad = int(np.sum(~trace.converged))
    if bad:
        print(f"warning: {bad} of {len(trace.values)} sweep points did not converge", file=sys.stderr)
        return EXIT_PARTIAL
    print(out)
    return EXIT_OK


def _detector_cfg(args, cfg: dict, reference: SimTrace | None = None) -> DetectorConfig:
    dcfg = DetectorConfig.from_dict(cfg.get("detector", {}), reference=reference)
    toggles = {}
    for kind in ("capacitive", "mosfet", "resistor"):
        flag = getattr(args, f"no_{kind}_rules", False)
        if flag:
            toggles[f"{kind}_rules"] = False
    return replace(dcfg, **toggles) if toggles else dcfg


def cmd_detect(args) -> int:
    cfg = _read_config(args.config)
    n = _load_netlist(args.netlist)
    if args.trace:
        trace = SimTrace.from_csv(Path(args.trace))
    else:
        trace = dc_sweep(n, _sweep_from_args(args, n, cfg))
    reference = SimTrace.from_csv(Path(args.reference)) if args.reference else None
    if args.detector == "llm":
        from .llm import LLMDetector

        report = LLMDetector.from_env().detect(n, trace)
    else:
        report = RuleDetector(_detector_cfg(args, cfg, reference)).detect(n, trace)
    out = _out_dir(args) / (args.output or f"{Path(args.netlist).stem}.report.json")
    _write(out, report.to_json())
    print(diagnosis_summary(report, len(trace.values)))
    return EXIT_OK if trace.all_converged else EXIT_PARTIAL


def _campaign_config(args, cfg: dict, n: Netlist, entry: BenchmarkEntry | None) -> CampaignConfig:
    raw = {k: v for k, v in cfg.items()}
    if args.sweep or "sweep" not in raw:
        raw["sweep"] = _sweep_from_args(args, n, cfg).to_dict()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.policy:
        raw["policy"] = args.policy
    if entry is not None:
        raw.setdefault("output_node", entry.output_node)
        raw.setdefault("area", entry.area)
    det = dict(raw.get("detector", {}))
    det.pop("backend", None)
    det.pop("golden", None)
    raw["detector"] = det
    try:
        return CampaignConfig.from_dict(raw)
    except (ValueError, KeyError, TypeError) as err:
        raise InputError(f"bad campaign config: {err}") from err


def _metrics_for(name: str, n: Netlist, clean: SimTrace, trojan: SimTrace, elems, output: str | None,
                 area: float | None, **kw) -> MetricsRecord:
    output = output or widest_swing_node(n, clean)[0]
    area = area if area is not None else mosfet_area(n)
    return compare(name, clean, trojan, output, elems, area, **kw)


def cmd_campaign(args) -> int:
    cfg = _read_config(args.config)
    entry, path = _find_entry(args, cfg)
    if path is None:
        if args.netlist is None:
            raise InputError("campaign needs a netlist path or --benchmark")
        path = Path(args.netlist)
    n = _load_netlist(str(path))
    name = entry.name if entry else path.stem
    ccfg = _campaign_config(args, cfg, n, entry)

    det_cfg = cfg.get("detector", {})
    backend = args.detector or det_cfg.get("backend", "rules")
    if backend == "llm":
        from .llm import LLMDetector

        detector = LLMDetector.from_env()
    else:
        reference = dc_sweep(n, ccfg.sweep) if det_cfg.get("golden") else None
        detector = RuleDetector(_detector_cfg(args, cfg, reference))

    res = run_campaign(n, ccfg, detector=detector)
    record = _metrics_for(name, n, res.clean_trace, res.final_trace, res.trojan_elements(),
                          ccfg.output_node, ccfg.area, n_it=res.n_it, r_evade=res.r_evade,
                          l_max=res.l_max)
    out = _out_dir(args) / name
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "final.sp", serialize(res.final))
    _write(out / "history.jsonl", res.history_jsonl())
    _write(out / "metrics.csv", records_csv([record]))
    bundle = {"kind": "campaign", "netlist": name, "seed": ccfg.seed, "policy": ccfg.policy,
              "detector": backend, "record": record.to_dict(), **res.summary()}
    _write(out / "metrics.json", _dumps(bundle))
    print(f"{name}: {res.reason.value} after {res.n_it} iterations, "
          f"L_T={res.l_t}/{res.l_max}, R_evade={res.r_evade:g}")
    return EXIT_OK if res.final_trace.all_converged else EXIT_PARTIAL


def cmd_baseline(args) -> int:
    cfg = _read_config(args.config)
    entry, path = _find_entry(args, cfg)
    if path is None:
        if args.netlist is None:
            raise InputError("baseline needs a netlist path or --benchmark")
        path = Path(args.netlist)
    n = _load_netlist(str(path))
    name = entry.name if entry else path.stem
    sweep = _sweep_from_args(args, n, cfg)
    clean = dc_sweep(n, sweep)
    output = cfg.get("output_node") or (entry.output_node if entry else widest_swing_node(n, clean)[0])
    area = cfg.get("area") or (entry.area if entry else mosfet_area(n))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    res = place_baseline(n, args.pattern, sweep, output, float(area), seed=seed, name=name,
                         max_attempts=args.attempts)
    out = _out_dir(args) / f"{name}.{args.pattern}"
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "trojan.sp", serialize(res.netlist))
    _write(out / "metrics.csv", records_csv([res.record]))
    bundle = {"kind": "baseline", "netlist": name, "pattern": args.pattern, "seed": seed,
              "victim": res.victim, "triggers": list(res.triggers), "attempts": res.attempts,
              "record": res.record.to_dict(), "r_evade_series": []}
    _write(out / "metrics.json", _dumps(bundle))
    print(f"{name} {args.pattern}: triggers {', '.join(res.triggers)}, "
          f"activation {res.record.activation_range_pct:.4g}%")
    return EXIT_OK


def _load_bundles(dirs: Sequence[str]) -> list[dict]:
    found = []
    for d in dirs:
        root = Path(d)
        if not root.exists():
            raise InputError(f"no such results directory: {d}")
        paths = [root] if (root / "metrics.json").is_file() else sorted(root.glob("*/metrics.json"))
        for p in paths:
            p = p if p.name == "metrics.json" else p / "metrics.json"
            found.append(json.loads(p.read_text()))
    if not found:
        raise InputError("no result bundles (metrics.json) found")
    return found


def _restore(rec: dict) -> MetricsRecord:
    return MetricsRecord.from_dict({k: (math.nan if v is None else v) for k, v in rec.items()})


def aggregate(bundles: Sequence[dict]) -> tuple[list[dict], dict]:
    """Per-bundle table rows plus an Average row (NaN cells are skipped)."""
    rows = []
    for b in bundles:
        row = _restore(b["record"]).row()
        if b.get("kind") == "baseline":
            row["netlist"] = f"{row['netlist']} [{b['pattern']}]"
        rows.append(row)
    avg: dict = {"netlist": "Average", "trojan_types": ""}
    for col in CSV_COLUMNS[2:]:
        vals = [float(r[col]) for r in rows]
        finite = [v for v in vals if not math.isnan(v)]
        avg[col] = f"{sum(finite) / len(finite):.4g}" if finite else "nan"
    return rows, avg


def _table(rows: list[dict]) -> str:
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in CSV_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in CSV_COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in CSV_COLUMNS))
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in CSV_COLUMNS))
    return "\n".join(lines)


def cmd_report(args) -> int:
    bundles = _load_bundles(args.results)
    rows, avg = aggregate(bundles)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows([*rows, avg])
    text = [_table([*rows, avg]), "", "R_evade per iteration"]
    for b in bundles:
        if b.get("kind") == "campaign":
            series = " ".join(f"{v:g}" for v in b.get("r_evade_series", []))
            text.append(f"{b['netlist']} ({b.get('reason', '')}): {series}")
    out = _out_dir(args)
    _write(out / "report.csv", buf.getvalue())
    _write(out / "report.txt", "\n".join(text) + "\n")
    print("\n".join(text))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Sub-commands accept the global flags too; SUPPRESS keeps their unset
    # defaults from clobbering values given before the verb.
    def default(v):
        return argparse.SUPPRESS if suppress else v

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=default(None), help="random seed")
    g.add_argument("--config", default=default(None), help="YAML or JSON config file")
    g.add_argument("--out-dir", default=default("."), help="directory for outputs")
    g.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="latent", parents=[_global_flags(suppress=False)],
                                description="Closed-loop analog Trojan insertion toolkit.")
    sub = p.add_subparsers(dest="verb", required=True)

    def sweep_opt(sp):
        sp.add_argument("--sweep", nargs=4, metavar=("SOURCE", "START", "STOP", "POINTS"))

    def rule_opts(sp):
        for kind in ("capacitive", "mosfet", "resistor"):
            sp.add_argument(f"--no-{kind}-rules", action="store_true",
                            help=f"disable {kind} detection rules")

    s = sub.add_parser("simulate", parents=[common], help="DC sweep to a trace CSV")
    s.add_argument("netlist")
    s.add_argument("-o", "--output", help="file name inside --out-dir")
    sweep_opt(s)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("detect", parents=[common], help="run the detector on a netlist")
    d.add_argument("netlist")
    d.add_argument("--trace", help="existing trace CSV (otherwise simulate)")
    d.add_argument("--reference", help="golden trace CSV for the deviation rule")
    d.add_argument("--detector", choices=("rules", "llm"), default="rules")
    d.add_argument("-o", "--output", help="file name inside --out-dir")
    sweep_opt(d)
    rule_opts(d)
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("campaign", parents=[common], help="run a full insertion campaign")
    c.add_argument("netlist", nargs="?")
    c.add_argument("--benchmark", help="bundled benchmark name")
    c.add_argument("--manifest", help="benchmark manifest (defaults to the bundled corpus)")
    c.add_argument("--policy", choices=("heuristic", "llm"))
    c.add_argument("--detector", choices=("rules", "llm"))
    sweep_opt(c)
    rule_opts(c)
    c.set_defaults(func=cmd_campaign)

    b = sub.add_parser("baseline", parents=[common], help="insert a static reference Trojan")
    b.add_argument("netlist", nargs="?")
    b.add_argument("--pattern", choices=PATTERNS, required=True)
    b.add_argument("--benchmark", help="bundled benchmark name")
    b.add_argument("--manifest", help="benchmark manifest (defaults to the bundled corpus)")
    b.add_argument("--attempts", type=int, default=5, help="placements to try")
    sweep_opt(b)
    b.set_defaults(func=cmd_baseline)

    r = sub.add_parser("report", parents=[common], help="aggregate result bundles")
    r.add_argument("results", nargs="+", help="result directories")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, NetlistError, ManifestError, EmptyCua, PlacementFailure,
            NodeExhaustion) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except SimulationError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INPUT
    except KeyError as err:
        print(f"error: unknown name {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
