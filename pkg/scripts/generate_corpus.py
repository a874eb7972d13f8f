"""Regenerate the bundled benchmark corpus and its manifest.

Usage: python3 scripts/generate_corpus.py [OUT_DIR]
"""

import sys
from pathlib import Path

from latent.corpus import write_corpus

DEFAULT = Path(__file__).resolve().parents[1] / "src" / "latent" / "data" / "corpus"


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT
    manifest = write_corpus(out)
    for e in manifest:
        print(f"{e.name:12s} N={e.expected_nodes:5d} out={e.output_node:8s} area={e.area:.3g}")
    print(f"{len(manifest)} netlists written to {out}")


if __name__ == "__main__":
    main()
