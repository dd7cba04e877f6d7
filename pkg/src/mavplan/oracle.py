"""Text oracles that speak the multi-action-value protocol, plus data generators.

``ScriptedOracle`` answers from the exact solver. ``FaultyOracle`` and
``NoisyOracle`` wrap another oracle to imitate decoding hallucinations and
imprecise value heads; ``StallingOracle`` imitates slow inference. Every
oracle is a callable ``evaluate(request_text) -> response_text`` and is
safe to call from several threads.
"""

from __future__ import annotations

import functools
import hashlib
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import protocol as P
from .errors import IllegalMove, ParseError
from .game import GameId, GameState, Outcome, apply, decode_state, encode_state, legal_actions
from .solver import DRAW, WIN, solver_for

WIN_DECAY = 0.25  # win percentage given up per ply to the end of the game
WIN_FLOOR = 87.6
LOSS_CEIL = 100.0 - WIN_FLOOR
BEST_ACTION_THRESHOLD = 99.0
BEST_ACTION_WINDOW = 5

FAULT_MODES = ("truncate", "illegal_move", "malformed_token", "corrupt_state", "drop_move")


class Oracle(Protocol):
    def evaluate(self, request: str) -> str: ...


def stable_hash(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def surrogate_win(value: int, depth: int) -> float:
    """Win percentage standing in for an engine evaluation of an exact result."""
    if value == WIN:
        return max(100.0 - WIN_DECAY * depth, WIN_FLOOR)
    if value == DRAW:
        return 50.0
    return min(WIN_DECAY * depth, LOSS_CEIL)


def best_action_tiebreak(values, principal):
    """Pick the action a compliant oracle names under ``%best_action``.

    ``values`` is a list of ``(action, win_percent)``. When every one of the
    top five values (or all of them, if fewer) is above 99% the solver's
    principal move decides; otherwise the first maximum wins.
    """
    if not values:
        raise ValueError("no values")
    top = sorted((v for _, v in values), reverse=True)[:BEST_ACTION_WINDOW]
    if all(v > BEST_ACTION_THRESHOLD for v in top):
        return principal
    best = max(v for _, v in values)
    return next(a for a, v in values if v == best)


def resolve_start(req: P.MavRequest) -> GameState:
    """Starting state of a request; raises IllegalMove / ParseError."""
    if req.state is not None:
        return decode_state(req.state)
    prev = decode_state(req.prev_state)
    return apply(prev, req.game.parse_action(req.prev_action))


@dataclass(frozen=True)
class ActionValue:
    action: int
    win: float


def exact_action_values(state: GameState) -> tuple[list[ActionValue], int]:
    """Surrogate values for every legal action in canonical order, plus the principal move."""
    res = solver_for(state.game).solve(state)
    vals = [ActionValue(a, surrogate_win(*res.action_values[a])) for a in legal_actions(state)]
    return vals, res.principal


class ScriptedOracle:
    """Perfect oracle: legal moves, transitions and values from the solver."""

    def __init__(self, cache_size: int = 200_000):
        self._cached = functools.lru_cache(maxsize=cache_size)(self._evaluate)

    def evaluate(self, request: str) -> str:
        return self._cached(request)

    __call__ = evaluate

    def _evaluate(self, request: str) -> str:
        try:
            req = P.parse_request(request)
        except ParseError as exc:
            return P.error_response(f"unparseable request ({exc.category})")
        try:
            state = resolve_start(req)
        except (IllegalMove, ValueError) as exc:
            return P.error_response(f"cannot resolve starting state: {exc}")
        return P.render_response(self.respond(req, state))

    def respond(self, req: P.MavRequest, state: GameState) -> P.MavResponse:
        g = state.game
        out = P.MavResponse([])
        if req.want_state_echo:
            out.inferred_state = encode_state(state)
        if state.outcome is not Outcome.ONGOING:
            out.outcome = state.outcome
            return out
        vals, principal = exact_action_values(state)
        best = best_action_tiebreak([(v.action, v.win) for v in vals], principal)
        order = sorted(vals, key=lambda v: (-v.win, v.action != best, v.action))
        for v in order[: req.k_limit(len(vals))]:
            out.move_values.append((g.action_text(v.action), P.BucketDistribution.for_win(v.win)))
        if req.want_best_action:
            out.best_action = g.action_text(best)
        return out


def scripted_evaluate(request: str) -> str:
    return _DEFAULT_SCRIPTED.evaluate(request)


_DEFAULT_SCRIPTED = ScriptedOracle()


# -- fault injection ----------------------------------------------------------


@dataclass(frozen=True)
class FaultSpec:
    rate: float = 0.0
    modes: tuple = FAULT_MODES
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("fault rate must be in [0, 1]")
        bad = set(self.modes) - set(FAULT_MODES)
        if bad or not self.modes:
            raise ValueError(f"unknown fault modes {sorted(bad)}")


def faulty_evaluate(request: str, spec: FaultSpec, inner: Oracle | None = None) -> str:
    inner = inner or _DEFAULT_SCRIPTED
    clean = inner.evaluate(request)
    rng = np.random.default_rng([spec.seed, stable_hash(request)])
    if rng.random() >= spec.rate:
        return clean
    mode = spec.modes[int(rng.integers(len(spec.modes)))]
    return inject_fault(request, clean, mode, rng)


class FaultyOracle:
    def __init__(self, spec: FaultSpec, inner: Oracle | None = None):
        self.spec = spec
        self.inner = inner or ScriptedOracle()

    def evaluate(self, request: str) -> str:
        return faulty_evaluate(request, self.spec, self.inner)

    __call__ = evaluate


def _move_line_indices(lines):
    return [i for i, ln in enumerate(lines) if ln.startswith("[%top_") and " invalid : " not in ln]


def _renumber(lines):
    n = 0
    out = []
    for ln in lines:
        if ln.startswith("[%top_"):
            n += 1
            ln = f"[%top_{n} " + ln.split(" ", 1)[1]
        out.append(ln)
    return out


def _illegal_action_text(request: str, listed: set) -> str:
    try:
        req = P.parse_request(request)
        state = resolve_start(req)
        g = state.game
        legal = set(legal_actions(state))
        for a in range(g.n_actions):
            if a not in legal and g.action_text(a) not in listed:
                return g.action_text(a)
    except (ParseError, IllegalMove, ValueError):
        return "zz99"
    # every in-bounds action is legal: fall back to one just off the board
    if g.name == "connect_four":
        return str(g.cols)
    return f"a{g.rows + 1}"


def inject_fault(request: str, clean: str, mode: str, rng: np.random.Generator) -> str:
    """Corrupt a clean response the way a decoder might."""
    lines = clean.rstrip("\n").split("\n")
    moves = _move_line_indices(lines)
    if mode == "truncate":
        cut = int(rng.integers(0, max(1, len(clean) - len(P.TERMINATOR) - 1)))
        return clean[:cut]
    if mode == "illegal_move":
        listed = {ln.split(" ")[1] for ln in (lines[i] for i in moves)}
        bad = _illegal_action_text(request, listed)
        if not moves:
            at = next(i for i, ln in enumerate(lines) if ln == P.TERMINATOR)
            lines.insert(at, f"[%top_2 {bad} : <ctrl32>]")
        else:
            i = moves[int(rng.integers(len(moves)))]
            head, _, tail = lines[i].partition(" : ")
            lines[i] = head.rsplit(" ", 1)[0] + f" {bad} : " + tail
        return "\n".join(lines) + "\n"
    if mode == "malformed_token":
        token_lines = [i for i in moves] or [
            i for i, ln in enumerate(lines) if " invalid : " in ln]
        if not token_lines:
            return clean[: len(clean) // 2]
        i = token_lines[int(rng.integers(len(token_lines)))]
        if " invalid : " in lines[i]:
            lines[i] = lines[i].replace('"1-0"', '"2-0"').replace('"0-1"', '"0-2"').replace(
                '"1/2-1/2"', '"1/3-1/3"')
        else:
            junk = ("<ctrl64>", "<ctrl>", "<ctr17>", "ctrl12")[int(rng.integers(4))]
            head, _, _ = lines[i].partition(" : ")
            lines[i] = f"{head} : {junk}]"
        return "\n".join(lines) + "\n"
    if mode == "corrupt_state":
        if lines and lines[0] == "%state":
            # board rows start after '%state', the game line and the turn line
            end = next(i for i, ln in enumerate(lines) if ln.startswith("[") or ln == P.TERMINATOR)
            rows = list(range(3, end))
            r = rows[int(rng.integers(len(rows)))] if rows else 2
            chars = [j for j, ch in enumerate(lines[r]) if ch in ".XO"] or [0]
            j = chars[int(rng.integers(len(chars)))]
            lines[r] = lines[r][:j] + "#" + lines[r][j + 1:]
        else:
            lines = ["%state", "# corrupted"] + lines
        return "\n".join(lines) + "\n"
    if mode == "drop_move":
        if len(moves) <= 1:
            lines = [ln for i, ln in enumerate(lines) if i not in moves and " invalid : " not in ln]
        else:
            drop = moves[int(rng.integers(len(moves)))]
            lines = _renumber([ln for i, ln in enumerate(lines) if i != drop])
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown fault mode {mode!r}")


# -- imprecise values ---------------------------------------------------------


class NoisyOracle:
    """Scripted transitions with blurred, sampled value distributions.

    Each exact value is first pulled towards 50% by ``shrink`` and shifted by
    a fixed per-(state, action) error of ``bias`` buckets (standard
    deviation); the emitted distribution is then a histogram of ``samples``
    draws around it with ``sigma`` buckets of spread, clipped to
    +-``spread`` buckets. The
    histogram's mode is a noisier summary than its mean, as with a real
    value head. Draws are keyed on (seed, state, action), so identical
    questions get identical answers.
    """

    def __init__(self, shrink: float = 0.1, sigma: float = 2.0, samples: int = 6,
                 spread: int = 3, seed: int = 0, bias: float = 0.0,
                 inner: ScriptedOracle | None = None):
        self.shrink = shrink
        self.bias = bias
        self.sigma = sigma
        self.samples = samples
        self.spread = spread
        self.seed = seed
        self.inner = inner or ScriptedOracle()
        self._cached = functools.lru_cache(maxsize=200_000)(self._evaluate)

    def evaluate(self, request: str) -> str:
        return self._cached(request)

    __call__ = evaluate

    def distribution(self, state_text: str, action_text: str, win: float) -> P.BucketDistribution:
        rng = np.random.default_rng([self.seed, stable_hash(state_text, action_text)])
        centre = 50.0 + (win - 50.0) * self.shrink
        x = centre * P.N_BUCKETS / 100.0 - 0.5 + self.bias * rng.standard_normal()
        mid = int(round(x))
        lo, hi = max(0, mid - self.spread), min(P.N_BUCKETS - 1, mid + self.spread)
        draws = np.clip(np.rint(x + self.sigma * rng.standard_normal(self.samples)), lo, hi)
        probs = np.bincount(draws.astype(int), minlength=P.N_BUCKETS).astype(float)
        return P.BucketDistribution(probs / probs.sum())

    def _evaluate(self, request: str) -> str:
        try:
            req = P.parse_request(request)
            state = resolve_start(req)
        except (ParseError, IllegalMove, ValueError) as exc:
            return P.error_response(f"cannot resolve request: {exc}")
        out = P.MavResponse([])
        if req.want_state_echo:
            out.inferred_state = encode_state(state)
        if state.outcome is not Outcome.ONGOING:
            out.outcome = state.outcome
            return P.render_response(out)
        g = state.game
        key = encode_state(state)
        vals, _ = exact_action_values(state)
        dists = [(v.action, self.distribution(key, g.action_text(v.action), v.win)) for v in vals]
        dists.sort(key=lambda ad: (-P.score_mean(ad[1]), ad[0]))
        for a, d in dists[: req.k_limit(len(dists))]:
            out.move_values.append((g.action_text(a), d))
        if req.want_best_action:
            out.best_action = g.action_text(dists[0][0])
        return P.render_response(out)


class StallingOracle:
    """Sleeps for ``delay`` seconds on a deterministic ``p`` fraction of calls."""

    def __init__(self, inner: Oracle, p: float, delay: float, seed: int = 0):
        self.inner, self.p, self.delay, self.seed = inner, p, delay, seed

    def evaluate(self, request: str) -> str:
        rng = np.random.default_rng([self.seed, stable_hash(request)])
        if rng.random() < self.p:
            time.sleep(self.delay)
        return self.inner.evaluate(request)

    __call__ = evaluate


# -- stdio transport -----------------------------------------------------------


def read_block(stream) -> str | None:
    """Read lines up to and including a ``%%%`` line; None at end of stream."""
    lines = []
    for line in stream:
        lines.append(line if line.endswith("\n") else line + "\n")
        if line.rstrip("\n") == P.TERMINATOR:
            return "".join(lines)
    return "".join(lines) if lines else None


def serve_stdio(oracle: Oracle, stdin=None, stdout=None) -> int:
    """Answer request blocks from ``stdin`` until it closes."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    n = 0
    while True:
        block = read_block(stdin)
        if block is None:
            return n
        stdout.write(oracle.evaluate(block))
        stdout.flush()
        n += 1


class StdioOracle:
    """Talks to an external oracle process over line-delimited stdio."""

    def __init__(self, command: list[str]):
        self.proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     text=True, bufsize=1)
        self._lock = threading.Lock()

    def evaluate(self, request: str) -> str:
        with self._lock:
            self.proc.stdin.write(request if request.endswith("\n") else request + "\n")
            self.proc.stdin.flush()
            block = read_block(self.proc.stdout)
        return block or ""

    __call__ = evaluate

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- training data -------------------------------------------------------------


def generate_positions(game: GameId, epsilon: float, n_games: int, seed: int) -> list[GameState]:
    """Self-play with epsilon-greedy moves; greedy moves are uniform over solver-optimal ones.

    Returns every non-terminal position visited, in play order.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    solver = solver_for(game)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_games):
        s = game.initial_state()
        while s.outcome is Outcome.ONGOING:
            out.append(s)
            legal = legal_actions(s)
            if rng.random() < epsilon:
                a = legal[int(rng.integers(len(legal)))]
            else:
                opt = solver.solve(s).optimal_actions
                a = opt[int(rng.integers(len(opt)))]
            s = apply(s, a)
    return out


@dataclass(frozen=True)
class TrainingExample:
    prompt: str
    target: str
    k_used: object
    move_order_seed: int


def previous_state(state: GameState) -> tuple[GameState, int] | None:
    """Undo the last stone if it is known; used for the transition prompt form."""
    if state.last_action is None:
        return None
    g = state.game
    cells = list(state.cells)
    cells[state.last_action] = 0
    prev = GameState(g, tuple(cells), 1 - state.to_move, state.ply - 1)
    action = state.last_action % g.cols if g.name == "connect_four" else state.last_action
    return prev, action


def make_training_example(position: GameState, seed: int,
                          oracle: ScriptedOracle | None = None) -> TrainingExample:
    """One prompt/target pair with random k and a random move order."""
    oracle = oracle or _DEFAULT_SCRIPTED
    rng = np.random.default_rng(seed)
    g = position.game
    n_legal = len(legal_actions(position))
    choices = list(range(1, n_legal + 4)) + [P.ALL]
    k = choices[int(rng.integers(len(choices)))]
    prev = previous_state(position)
    if prev is not None and rng.random() < 0.5:
        req = P.MavRequest(g, prev_state=encode_state(prev[0]), prev_action=g.action_text(prev[1]),
                           top_k=k, want_best_action=True, want_state_echo=True)
    else:
        req = P.MavRequest(g, state=encode_state(position), top_k=k, want_best_action=True)
    resp = oracle.respond(req, position)
    order_seed = int(rng.integers(2 ** 31))
    perm = np.random.default_rng(order_seed).permutation(len(resp.move_values))
    resp.move_values = [resp.move_values[i] for i in perm]
    return TrainingExample(P.render_request(req), P.render_response(resp), k, order_seed)


if __name__ == "__main__":
    serve_stdio(ScriptedOracle())
