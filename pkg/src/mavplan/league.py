"""Seat-swapped matches, tournaments with a resumable record store, and Elo.

Ratings come from a maximum-likelihood logistic model (base 10, scale 400)
with draws counted as half wins. Every agent also gets ``lam`` pseudo-draws
against the anchor, which keeps undefeated or winless agents finite and
vanishes as ``lam -> 0``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import protocol as P
from .async_search import AsyncConfig, async_search
from .game import GameId, GameState, Outcome, apply, encode_state, is_legal, legal_actions
from .internal import TraceParams, build_tree
from .oracle import FaultSpec, FaultyOracle, NoisyOracle, ScriptedOracle, StdioOracle, stable_hash
from .search import SearchConfig, basic_mcts, reuse_subtree, search
from .solver import DRAW as SOLVED_DRAW, WIN as SOLVED_WIN, solver_for

SCHEMA_VERSION = 1
ELO_SCALE = 400.0
LN10 = math.log(10.0)
DEFAULT_THRESHOLD = 0.985  # centipawn_to_win(1200) / 100, rounded
CERTAIN = "certain"

KINDS = ("raw_oracle_argmax", "serial_mcts", "async_mcts", "internal_search", "uniform_random",
         "basic_mcts")
FIRST, SECOND, DRAWN = "first", "second", "draw"


# -- agents ----------------------------------------------------------------------


@dataclass
class AgentSpec:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    oracle: str = "scripted"
    oracle_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")

    @property
    def simulations(self) -> int | None:
        if self.kind in ("serial_mcts", "async_mcts", "basic_mcts"):
            return int(self.params.get("simulations", 100))
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentSpec":
        return cls(**d)


_ORACLES: dict = {}


def make_oracle(name: str, params: dict | None = None):
    """Shared oracle instance per (name, params), so caches persist across games."""
    params = dict(params or {})
    key = (name, json.dumps(params, sort_keys=True))
    if key in _ORACLES:
        return _ORACLES[key]
    if name == "scripted":
        o = ScriptedOracle()
    elif name == "noisy":
        o = NoisyOracle(**params)
    elif name == "faulty":
        inner = make_oracle(params.pop("inner", "scripted"), params.pop("inner_params", None))
        modes = tuple(params.pop("modes", ())) or None
        spec = FaultSpec(**params) if modes is None else FaultSpec(modes=modes, **params)
        o = FaultyOracle(spec, inner)
    elif name == "stdio":
        o = StdioOracle(list(params["command"]))
    else:
        raise ValueError(f"unknown oracle {name!r}")
    _ORACLES[key] = o
    return o


def _search_config(params: dict, seed: int) -> SearchConfig:
    fields = {k: v for k, v in params.items() if k in SearchConfig.__dataclass_fields__}
    fields["seed"] = seed
    return SearchConfig(**fields)


class Agent:
    """One agent for one game; ``act`` returns an action and a small stats dict."""

    def __init__(self, spec: AgentSpec, game_seed: int):
        self.spec = spec
        self.game_seed = game_seed
        self.oracle = None if spec.kind in ("uniform_random", "basic_mcts") else make_oracle(
            spec.oracle, spec.oracle_params)
        self._root = None
        self._our_move = None

    def move_seed(self, ply: int) -> int:
        return stable_hash(self.spec.seed, self.game_seed, ply) % (2 ** 32)

    def act(self, state: GameState) -> tuple[int, dict]:
        kind, p = self.spec.kind, self.spec.params
        seed = self.move_seed(state.ply)
        if kind == "uniform_random":
            legal = legal_actions(state)
            return legal[int(np.random.default_rng(seed).integers(len(legal)))], {}
        if kind == "basic_mcts":
            return basic_mcts(state, int(p.get("simulations", 100)), seed), {}
        if kind == "raw_oracle_argmax":
            return self._argmax(state, p.get("scoring", "mean"))
        if kind == "internal_search":
            tree = build_tree(state, TraceParams(int(p.get("depth", 1)), int(p.get("breadth", 3))),
                              self.oracle)
            return state.game.parse_action(tree.chosen), {}
        if kind == "serial_mcts":
            cfg = _search_config(p, seed)
            root = self._reused_root(state) if cfg.reuse_tree else None
            action, stats = search(state, self.oracle, cfg, root=root, move_index=state.ply)
        else:
            base = _search_config(p.get("base", p), seed)
            extra = {k: v for k, v in p.items() if k in AsyncConfig.__dataclass_fields__
                     and k != "base"}
            cfg = AsyncConfig(base=base, **extra)
            root = self._reused_root(state) if base.reuse_tree else None
            action, stats = async_search(state, self.oracle, cfg, root=root, move_index=state.ply)
        self._root, self._our_move = stats.root, state.game.action_text(action)
        return action, {"oracle_calls": stats.oracle_calls, "parse_failures": stats.parse_failures,
                        "elapsed": round(stats.elapsed, 6)}

    def _reused_root(self, state: GameState):
        if self._root is None or state.last_action is None:
            return None
        g = state.game
        last = state.last_action % g.cols if g.name == "connect_four" else state.last_action
        return reuse_subtree(self._root, self._our_move, g.action_text(last))

    def _argmax(self, state: GameState, scoring: str) -> tuple[int, dict]:
        g = state.game
        req = P.MavRequest(g, state=encode_state(state), top_k=P.ALL)
        resp = P.parse_response(self.oracle.evaluate(P.render_request(req)), req)
        scored = resp.scored(scoring)
        best = max(scored, key=lambda av: (av[1], -g.parse_action(av[0])))[0]
        return g.parse_action(best), {"oracle_calls": 1}


# -- matches -----------------------------------------------------------------------


@dataclass
class MatchRecord:
    game: str
    opening_id: str
    opening: list
    first: str
    second: str
    result: str
    moves: list
    termination: str
    ticket: str = ""
    move_stats: list = field(default_factory=list)
    note: str = ""
    schema: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MatchRecord":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported record schema {d.get('schema')!r}")
        return cls(**d)

    def score_for(self, agent_id: str) -> float:
        if self.result == DRAWN:
            return 0.5
        winner = self.first if self.result == FIRST else self.second
        return 1.0 if winner == agent_id else 0.0


def _adjudicate(state: GameState, adjudication, judge) -> Outcome | None:
    """Outcome to declare early, or None to keep playing."""
    if adjudication is None:
        return None
    if adjudication == CERTAIN:
        v = solver_for(state.game).solve(state).value
        if v == SOLVED_DRAW:
            return None
        return Outcome.win_for(state.to_move if v == SOLVED_WIN else 1 - state.to_move)
    req = P.MavRequest(state.game, state=encode_state(state), top_k=1)
    resp = P.parse_response(judge.evaluate(P.render_request(req)), req)
    best = resp.scored("mean")[0][1] / 100.0
    if best >= adjudication:
        return Outcome.win_for(state.to_move)
    if best <= 1.0 - adjudication:
        return Outcome.win_for(1 - state.to_move)
    return None


def play_game(game: GameId, first: AgentSpec, second: AgentSpec, opening, opening_id: str = "",
              adjudication=None, game_seed: int = 0, ticket: str = "") -> MatchRecord:
    """One game with ``first`` moving first after the opening moves."""
    state = game.initial_state()
    opening = list(opening)
    for a in opening:
        state = apply(state, a)
    agents = {0: Agent(first, game_seed), 1: Agent(second, game_seed)}
    # the agent playing seat 0 is whoever moves at ply 0
    moves, stats, termination, note = [], [], "natural", ""
    outcome = state.outcome
    judge = make_oracle("scripted")
    while outcome is Outcome.ONGOING:
        seat = state.to_move
        try:
            action, info = agents[seat].act(state)
        except Exception as exc:  # a crashing agent forfeits; the league carries on
            outcome, termination = Outcome.win_for(1 - seat), "crash_forfeit"
            note = f"{type(exc).__name__}: {exc}"
            break
        if not isinstance(action, (int, np.integer)) or not is_legal(state, int(action)):
            outcome, termination = Outcome.win_for(1 - seat), "illegal_forfeit"
            note = f"illegal move {action!r}"
            break
        moves.append(int(action))
        stats.append(info)
        state = apply(state, int(action))
        outcome = state.outcome
        if outcome is Outcome.ONGOING:
            verdict = _adjudicate(state, adjudication, judge)
            if verdict is not None:
                outcome, termination = verdict, "adjudicated"
    result = {Outcome.P0_WINS: FIRST, Outcome.P1_WINS: SECOND, Outcome.DRAW: DRAWN}[outcome]
    return MatchRecord(game.header, opening_id, opening, first.id, second.id, result, moves,
                       termination, ticket, stats, note)


def run_match(a: AgentSpec, b: AgentSpec, opening, game: GameId, adjudication=None,
              opening_id: str = "", game_seed: int = 0, ticket: str = "") -> tuple:
    """Both seat orientations of one opening."""
    r1 = play_game(game, a, b, opening, opening_id, adjudication, game_seed, f"{ticket}:0")
    r2 = play_game(game, b, a, opening, opening_id, adjudication, game_seed + 1, f"{ticket}:1")
    return r1, r2


def replay_record(rec: MatchRecord) -> GameState:
    """Re-play a stored game from the initial position; raises on any illegal move."""
    game = GameId.parse_header(rec.game)
    s = game.initial_state()
    for a in list(rec.opening) + list(rec.moves):
        s = apply(s, a)
    return s


# -- openings ----------------------------------------------------------------------


def opening_book(game: GameId, plies: int = 2) -> list[list[int]]:
    """All 1-ply openings, plus 2-ply openings that keep the starting verdict."""
    s0 = game.initial_state()
    book = [[a] for a in legal_actions(s0)]
    if plies < 2:
        return book
    solver = solver_for(game)
    start = solver.solve(s0).value
    for a in legal_actions(s0):
        s1 = apply(s0, a)
        for b in legal_actions(s1):
            s2 = apply(s1, b)
            if s2.outcome is not Outcome.ONGOING:
                continue
            # the side to move at ply 2 is the side that moved first
            if solver.solve(s2).value == start:
                book.append([a, b])
    return book


def save_book(game: GameId, book, path) -> None:
    lines = [f"# {game.header}"] + [" ".join(game.action_text(a) for a in o) for o in book]
    Path(path).write_text("\n".join(lines) + "\n")


def load_book(game: GameId, path) -> list[list[int]]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append([game.parse_action(t) for t in line.split()])
    return out


# -- record store ------------------------------------------------------------------


class RecordStore:
    """Append-only newline-delimited records, one per game."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def load(self) -> list[MatchRecord]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text().splitlines():
            if line.strip():
                try:
                    out.append(MatchRecord.from_dict(json.loads(line)))
                except json.JSONDecodeError:
                    # a write cut short by an interruption; that game will be replayed
                    continue
        return out

    def tickets(self) -> set:
        return {r.ticket for r in self.load()}

    def append(self, rec: MatchRecord) -> None:
        torn = False
        if self.path.exists() and self.path.stat().st_size:
            with open(self.path, "rb") as fh:
                fh.seek(-1, os.SEEK_END)
                torn = fh.read(1) != b"\n"
        with open(self.path, "a") as fh:
            # never glue a record onto a line cut short by an interruption
            fh.write(("\n" if torn else "") + rec.to_json() + "\n")
            fh.flush()
            os.fsync(fh.fileno())


def sample_pairings(n_agents: int, n_pairings: int, n_openings: int, seed: int) -> list:
    """``(i, j, opening index)`` triples with uniform unordered pairs ``i < j``."""
    if n_agents < 2:
        raise ValueError("a tournament needs at least two agents")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_pairings):
        i, j = sorted(int(x) for x in rng.choice(n_agents, size=2, replace=False))
        out.append((i, j, int(rng.integers(n_openings))))
    return out


def run_tournament(pool: list[AgentSpec], openings, n_pairings: int, seed: int, game: GameId,
                   store: RecordStore | None = None, adjudication=None, progress=None) -> list:
    """Play ``n_pairings`` random pairings, each opening both ways.

    With a store, finished games (by ticket) are skipped, so an interrupted
    tournament resumes where it stopped. Returns all records for the run.
    """
    ids = [a.id for a in pool]
    if len(set(ids)) != len(ids):
        raise ValueError("agent ids must be unique")
    done = {}
    if store is not None:
        done = {r.ticket: r for r in store.load()}
    records = []
    for n, (i, j, o) in enumerate(sample_pairings(len(pool), n_pairings, len(openings), seed)):
        opening = openings[o]
        oid = " ".join(game.action_text(a) for a in opening)
        for side, (x, y) in enumerate(((pool[i], pool[j]), (pool[j], pool[i]))):
            ticket = f"{seed}:{n}:{side}"
            if ticket in done:
                records.append(done[ticket])
                continue
            gseed = stable_hash(seed, n, side) % (2 ** 32)
            rec = play_game(game, x, y, opening, oid, adjudication, gseed, ticket)
            if store is not None:
                store.append(rec)
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


# -- ratings -----------------------------------------------------------------------


@dataclass
class RatingTable:
    ids: list
    ratings: dict
    anchor: str
    games: dict
    wins: np.ndarray  # wins[i, j]: games i won against j
    draws: np.ndarray

    def rating(self, agent_id: str) -> float:
        return self.ratings[agent_id]


def tally(records, ids=None):
    ids = list(ids) if ids is not None else sorted({r.first for r in records} |
                                                   {r.second for r in records})
    index = {a: k for k, a in enumerate(ids)}
    n = len(ids)
    wins, draws = np.zeros((n, n), int), np.zeros((n, n), int)
    for r in records:
        i, j = index[r.first], index[r.second]
        if r.result == FIRST:
            wins[i, j] += 1
        elif r.result == SECOND:
            wins[j, i] += 1
        else:
            draws[i, j] += 1
            draws[j, i] += 1
    return ids, wins, draws


def fit_elo(records, anchor: str, lam: float = 1.0, ids=None) -> RatingTable:
    records = list(records)
    if not records:
        raise ValueError("no games to rate")
    ids, wins, draws = tally(records, ids)
    if anchor not in ids:
        raise ValueError(f"anchor {anchor!r} has no games")
    games_m = wins + wins.T + draws
    n = len(ids)
    played = games_m.sum(axis=1)
    if (played == 0).any():
        raise ValueError(f"agents without games: {[ids[k] for k in np.flatnonzero(played == 0)]}")
    n_comp, labels = connected_components(csr_matrix(games_m > 0), directed=False)
    if n_comp > 1:
        comps = [[ids[k] for k in np.flatnonzero(labels == c)] for c in range(n_comp)]
        raise ValueError(f"comparison graph is disconnected: {comps}")
    score = wins + 0.5 * draws  # score[i, j]: points i took from j
    a = ids.index(anchor)
    # pseudo-draws with the anchor
    extra = np.zeros((n, n))
    extra[:, a] += lam
    extra[a, :] += lam
    extra[a, a] = 0.0
    pts = score + 0.5 * extra
    free = [k for k in range(n) if k != a]

    def unpack(x):
        full = np.zeros(n)
        full[free] = x
        return full

    def nll(x):
        t = unpack(x)
        d = t[:, None] - t[None, :]
        q = 1.0 / (1.0 + np.exp(d))  # probability that j beats i
        value = float((pts * np.logaddexp(0.0, -d)).sum())
        g = (pts * q).sum(axis=0) - (pts * q).sum(axis=1)
        return value, g[free]

    res = minimize(nll, np.zeros(n - 1), jac=True, method="BFGS",
                   options={"gtol": 1e-10, "maxiter": 10_000})
    logits = unpack(res.x)
    ratings = {ids[k]: float(logits[k] * ELO_SCALE / LN10) for k in range(n)}
    ratings[anchor] = 0.0
    return RatingTable(ids, ratings, anchor, {ids[k]: int(played[k]) for k in range(n)},
                       wins, draws)


def expected_score(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / ELO_SCALE))


def synthetic_records(true_ratings: dict, n_games: int, seed: int, draw_rate: float = 0.0,
                      game: str = "synthetic") -> list[MatchRecord]:
    """Games between random pairs with outcomes drawn from the logistic model."""
    rng = np.random.default_rng(seed)
    ids = list(true_ratings)
    out = []
    for k in range(n_games):
        i, j = rng.choice(len(ids), size=2, replace=False)
        a, b = ids[i], ids[j]
        p = expected_score(true_ratings[a], true_ratings[b])
        # draws take equal mass from both sides so the expected score stays p
        half_draw = draw_rate * min(p, 1.0 - p)
        u = rng.random()
        res = FIRST if u < p - half_draw else DRAWN if u < p + half_draw else SECOND
        out.append(MatchRecord(game, "", [], a, b, res, [], "natural", f"syn:{k}"))
    return out


@dataclass
class Calibration:
    slope: float
    intercept: float
    residuals: dict
    flagged: list

    def __call__(self, internal: float) -> float:
        return self.slope * internal + self.intercept


def calibrate_external(table: RatingTable, anchors, flag_above: float = 50.0) -> Calibration:
    """Least-squares line from internal to external ratings over ``anchors``."""
    anchors = list(anchors)
    if len(anchors) < 2:
        raise ValueError("calibration needs at least two anchors")
    x = np.array([table.ratings[a] for a, _ in anchors])
    y = np.array([float(e) for _, e in anchors])
    if np.ptp(x) == 0:
        raise ValueError("anchors share one internal rating")
    slope, intercept = np.polyfit(x, y, 1)
    res = {a: float(e - (slope * table.ratings[a] + intercept)) for a, e in anchors}
    flagged = [a for a, r in res.items() if abs(r) > flag_above]
    return Calibration(float(slope), float(intercept), res, flagged)


# -- reports -----------------------------------------------------------------------


def report(records, table: RatingTable, calibration: Calibration | None = None,
           pool: list[AgentSpec] | None = None) -> dict:
    """Tab-separated tables keyed ``matrix``, ``ratings`` and ``series``."""
    ids, wins, draws = tally(records, table.ids)
    head = "agent\t" + "\t".join(ids)
    rows = [head]
    for i, a in enumerate(ids):
        cells = ["" if i == j else f"{wins[i, j]}-{draws[i, j]}-{wins[j, i]}"
                 for j in range(len(ids))]
        rows.append(a + "\t" + "\t".join(cells))
    matrix = "\n".join(rows) + "\n"

    rlines = ["agent\tgames\twins\tdraws\tlosses\twin_rate\telo" +
              ("\texternal" if calibration else "")]
    for a in sorted(ids, key=lambda x: -table.ratings[x]):
        k = ids.index(a)
        w, d, l = wins[k].sum(), draws[k].sum(), wins[:, k].sum()
        g = w + d + l
        line = f"{a}\t{g}\t{w}\t{d}\t{l}\t{(w + 0.5 * d) / g if g else 0:.4f}\t{table.ratings[a]:.1f}"
        if calibration:
            line += f"\t{calibration(table.ratings[a]):.1f}"
        rlines.append(line)
    ratings = "\n".join(rlines) + "\n"

    slines = ["agent\tkind\tsimulations\tlog2_simulations\telo"]
    for spec in sorted(pool or [], key=lambda s: (s.kind, s.simulations or 0)):
        if spec.simulations is None or spec.id not in table.ratings:
            continue
        m = spec.simulations
        slines.append(f"{spec.id}\t{spec.kind}\t{m}\t{math.log2(m):.4f}\t"
                      f"{table.ratings[spec.id]:.1f}")
    return {"matrix": matrix, "ratings": ratings, "series": "\n".join(slines) + "\n"}


def write_report(tables: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in tables.items():
        p = out / f"{name}.tsv"
        p.write_text(text)
        paths.append(p)
    return paths


def win_rate(records, agent_id: str) -> tuple[float, float, int]:
    """Score fraction for ``agent_id`` with a normal-approximation 95% half-width."""
    scores = [r.score_for(agent_id) for r in records if agent_id in (r.first, r.second)]
    n = len(scores)
    if n == 0:
        return 0.0, 0.0, 0
    m = float(np.mean(scores))
    half = 1.96 * float(np.std(scores, ddof=1)) / math.sqrt(n) if n > 1 else 1.0
    return m, half, n

