"""Timing helpers: per-search elapsed time, and jitted vs plain solver kernels."""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time

import numpy as np

from .async_search import AsyncConfig, async_search
from .game import GameId
from .oracle import ScriptedOracle, generate_positions
from .search import SearchConfig, search


def search_timings(game: GameId, sims, n_positions: int, seed: int, batch_size: int = 16):
    """Mean seconds and oracle calls per search, serial and async, per simulation count."""
    oracle = ScriptedOracle()
    pool = generate_positions(game, 0.4, max(1, n_positions), seed)
    rng = np.random.default_rng(seed)
    positions = [pool[i] for i in rng.choice(len(pool), size=n_positions, replace=False)]
    rows = []
    for m in sims:
        for mode in ("serial", "async"):
            secs, calls = [], []
            for i, s in enumerate(positions):
                cfg = SearchConfig(simulations=m, seed=seed + i)
                t0 = time.perf_counter()
                if mode == "serial":
                    _, st = search(s, oracle, cfg)
                else:
                    _, st = async_search(s, oracle, AsyncConfig(base=cfg, batch_size=batch_size))
                secs.append(time.perf_counter() - t0)
                calls.append(st.oracle_calls)
            rows.append({"mode": mode, "simulations": m, "searches": len(positions),
                         "mean_seconds": round(float(np.mean(secs)), 6),
                         "mean_oracle_calls": round(float(np.mean(calls)), 2)})
    return rows


_SOLVE_SNIPPET = """
import json, sys, time
from mavplan.game import GameId
from mavplan.solver import Solver
g = GameId.parse_header(sys.argv[1])
s = g.initial_state()
t0 = time.perf_counter()
score = Solver(g).score(s)
cold = time.perf_counter() - t0
solver = Solver(g)
t0 = time.perf_counter()
assert solver.score(s) == score
print(json.dumps({"score": score, "entries": solver.entries, "cold": cold,
                  "warm": time.perf_counter() - t0}))
"""


def solver_run(game: GameId, disable_numba: bool) -> dict:
    """Solve the empty board in a fresh interpreter.

    ``cold`` includes numba compilation; ``warm`` repeats the solve with an empty table.
    """
    env = dict(os.environ)
    env["MAVPLAN_DISABLE_NUMBA"] = "1" if disable_numba else "0"
    out = subprocess.run([sys.executable, "-c", _SOLVE_SNIPPET, game.header], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout)
