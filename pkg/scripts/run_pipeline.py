"""Run the full pipeline (synth -> refine-graph -> train -> evaluate ->
estimate) from one YAML config, training on the refined graph.

    python3 scripts/run_pipeline.py --config configs/desk.yaml --out out
"""

import argparse
import sys
import time

from graphcf import cli

REFINED = [
    "--set", "paths.graph_edges=refined.edges.tsv",
    "--set", "paths.graph_features=refined.features.tsv",
]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/desk.yaml")
    parser.add_argument("--out", default="out")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)

    seed = [] if args.seed is None else ["--seed", str(args.seed)]
    start = time.monotonic()
    for cmd, extra in (
        ("synth", []),
        ("refine-graph", []),
        ("train", REFINED),
        ("evaluate", REFINED),
        ("estimate", REFINED),
    ):
        code = cli.main([cmd, "--config", args.config, "--out", args.out, *seed, *extra])
        if code != 0:
            print(f"{cmd} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"pipeline finished in {time.monotonic() - start:.1f}s -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
