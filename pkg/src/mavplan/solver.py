"""Exact game-theoretic values for small boards.

One ``Solver`` per board configuration keeps a transposition table of
alpha-beta bounds keyed on the full board (both player masks), so repeated
queries from oracles and searches become table lookups. Use
``solver_for(game)`` to share one table per configuration.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import SolverBudgetExceeded
from .game import GameId, GameState, Outcome, apply, legal_actions

WIN, DRAW, LOSS = 1, 0, -1
VALUE_NAMES = {WIN: "win", DRAW: "draw", LOSS: "loss"}

DEFAULT_BUDGET = 20_000_000


@dataclass(frozen=True)
class SolveResult:
    value: int
    optimal_actions: tuple
    depth_to_end: int
    principal: int
    action_values: dict  # action -> (value, depth_to_end after playing it)

    @property
    def value_name(self) -> str:
        return VALUE_NAMES[self.value]


def score_value(score: int) -> int:
    return WIN if score > 0 else LOSS if score < 0 else DRAW


def score_end_ply(score: int) -> int:
    return K.WIN_BASE - abs(score)


class Solver:
    def __init__(self, game: GameId, budget: int = DEFAULT_BUDGET, capacity: int = 1 << 16):
        if game.rows * (game.cols + 1) > 63:
            raise SolverBudgetExceeded(
                f"{game.rows}x{game.cols} board does not fit the 63-bit solver layout")
        self.game = game
        self.budget = budget
        self.kind = K.CONNECT_FOUR if game.name == "connect_four" else K.HEX
        self.k = game.win_length
        self._order = K.move_order(self.kind, game.rows, game.cols)
        self._full = K.board_mask(game.rows, game.cols)
        self._counts = np.zeros(2, dtype=np.int64)
        self._alloc(_next_prime(capacity))
        self._lock = threading.RLock()

    def _alloc(self, cap: int) -> None:
        self._keys0 = np.full(cap, K.EMPTY_KEY, dtype=np.int64)
        self._keys1 = np.full(cap, K.EMPTY_KEY, dtype=np.int64)
        self._bounds = np.zeros((cap, 2), dtype=np.int16)

    def _grow(self) -> None:
        old = (self._keys0, self._keys1, self._bounds)
        self._alloc(_next_prime(2 * old[0].shape[0]))
        K.tt_rehash(*old, self._keys0, self._keys1, self._bounds)

    @property
    def entries(self) -> int:
        return int(self._counts[0])

    def score(self, state: GameState) -> int:
        """Exact kernel score of a non-terminal state (side to move)."""
        if state.game != self.game:
            raise ValueError("state belongs to a different game")
        p0, p1 = state.bitboards
        with self._lock:
            while True:
                self._counts[1] = 0
                cap = self._keys0.shape[0]
                s = K.negamax(np.int64(p0), np.int64(p1), state.to_move, -K.INF, K.INF,
                              self.kind, self.game.rows, self.game.cols, self.k,
                              self._order, self._full, self._keys0, self._keys1,
                              self._bounds, self._counts, int(cap * 0.7), self.budget)
                status = self._counts[1]
                if status == K.STATUS_OK:
                    return int(s)
                if status == K.STATUS_BUDGET:
                    raise SolverBudgetExceeded(
                        f"more than {self.budget} table entries for {self.game.header}")
                self._grow()

    def action_score(self, state: GameState, action: int) -> int:
        child = apply(state, action)
        out = child.outcome
        if out is Outcome.DRAW:
            return 0
        if out is not Outcome.ONGOING:
            return K.WIN_BASE - child.ply
        return -self.score(child)

    def solve(self, state: GameState) -> SolveResult:
        legal = legal_actions(state)
        if not legal:
            raise ValueError("cannot solve a terminal state")
        scores = {a: self.action_score(state, a) for a in legal}
        best_score = max(scores.values())
        best_value = score_value(best_score)
        optimal = tuple(a for a in legal if score_value(scores[a]) == best_value)
        principal = next(a for a in legal if scores[a] == best_score)
        action_values = {a: (score_value(s), self._depth(state, s)) for a, s in scores.items()}
        return SolveResult(best_value, optimal, self._depth(state, best_score), principal,
                           action_values)

    def _depth(self, state: GameState, score: int) -> int:
        if score == 0:
            # drawn games run until the board is full
            return state.game.cells - state.ply
        return score_end_ply(score) - state.ply


_SOLVERS: dict = {}
_SOLVERS_LOCK = threading.Lock()


def solver_for(game: GameId) -> Solver:
    with _SOLVERS_LOCK:
        if game not in _SOLVERS:
            _SOLVERS[game] = Solver(game)
        return _SOLVERS[game]


def solve(state: GameState) -> SolveResult:
    return solver_for(state.game).solve(state)


def _next_prime(n: int) -> int:
    n |= 1
    while True:
        if all(n % p for p in range(3, int(n ** 0.5) + 1, 2)):
            return n
        n += 2
