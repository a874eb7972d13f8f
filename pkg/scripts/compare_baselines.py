"""Activation range of LATENT campaigns against the static baseline patterns.

Usage: python3 scripts/compare_baselines.py [--benchmark thresh] [--seeds 1 2 3 4 5]

For every seed, runs a heuristic campaign and places each baseline pattern on
the same benchmark, then prints the output-node activation range, ΔP and ΔA.
"""

import argparse

from latent.agent import CampaignConfig, run_campaign
from latent.baselines import PATTERNS, place_baseline
from latent.corpus import load_manifest
from latent.metrics import compare


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--benchmark", default="thresh")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    args = ap.parse_args()

    manifest = load_manifest()
    entry = manifest.get(args.benchmark)
    cua = manifest.load(entry)
    print(f"{'seed':>4}  {'design':12s} {'activation%':>11} {'dP%':>8} {'dA%':>8} {'R_evade':>8}")
    for seed in args.seeds:
        res = run_campaign(cua, CampaignConfig(sweep=entry.sweep(), seed=seed))
        rec = compare(entry.name, res.clean_trace, res.final_trace, entry.output_node,
                      res.trojan_elements(), entry.area, n_it=res.n_it, r_evade=res.r_evade)
        rows = [("LATENT", rec)]
        for pattern in PATTERNS:
            b = place_baseline(cua, pattern, entry.sweep(), entry.output_node, entry.area, seed=seed)
            rows.append((pattern, b.record))
        for label, r in rows:
            print(f"{seed:>4}  {label:12s} {r.activation_range_pct:11.2f} {r.delta_p_pct:8.3f} "
                  f"{r.delta_a_pct:8.1f} {r.r_evade_final_pct:8.1f}")


if __name__ == "__main__":
    main()
