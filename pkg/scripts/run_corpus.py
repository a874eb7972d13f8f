"""Run one campaign per bundled benchmark, fanned out over worker threads.

Usage: python3 scripts/run_corpus.py [--seed 42] [--workers 4] [--out-dir results]

Each benchmark gets its own result bundle (the same files ``latent campaign``
writes); an aggregate report is written at the end.
"""

import argparse
import time
from concurrent.futures import ThreadPoolExecutor

from latent.cli import main as cli
from latent.corpus import load_manifest


def run(name: str, seed: int, out_dir: str) -> tuple[str, int, float]:
    t0 = time.perf_counter()
    code = cli(["--out-dir", out_dir, "campaign", "--benchmark", name, "--seed", str(seed)])
    return name, code, time.perf_counter() - t0


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--out-dir", default="results/corpus")
    args = ap.parse_args()

    names = [e.name for e in load_manifest()]
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        done = list(pool.map(lambda nm: run(nm, args.seed, args.out_dir), names))
    for name, code, secs in done:
        print(f"{name:12s} exit={code} {secs:6.2f}s")
    cli(["--out-dir", args.out_dir, "report", args.out_dir])


if __name__ == "__main__":
    main()
