"""Solve empty boards with the jitted kernels and with the plain-Python fallback.

    python3 benchmarks/bench_solver.py [--games "connect_four 4x4 win4" ...]
"""

import argparse

from mavplan.bench import solver_run
from mavplan.game import GameId

DEFAULT_GAMES = ["connect_four 4x4 win4", "connect_four 4x5 win4", "hex 3x3", "hex 4x4"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--games", nargs="*", default=DEFAULT_GAMES)
    args = ap.parse_args()
    print("game\tkernel\tscore\tentries\tcold_s\twarm_s")
    for name in args.games:
        g = GameId.parse_header(name)
        runs = {kernel: solver_run(g, kernel == "python") for kernel in ("numba", "python")}
        if runs["numba"]["score"] != runs["python"]["score"]:
            raise SystemExit(f"{name}: kernels disagree {runs}")
        for kernel, r in runs.items():
            print(f"{name}\t{kernel}\t{r['score']}\t{r['entries']}\t{r['cold']:.3f}\t{r['warm']:.3f}")
        print(f"{name}\twarm speedup\t\t\t\t{runs['python']['warm'] / runs['numba']['warm']:.1f}x")


if __name__ == "__main__":
    main()
