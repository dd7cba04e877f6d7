"""Reference implementations that share no code with the package.

Everything here works on plain lists of cells and is deliberately naive:
line scans for Connect Four, breadth-first search for Hex, memoised
exhaustive minimax for game values.
"""

from __future__ import annotations

import math
from collections import deque
from functools import lru_cache

CP_SCALE = 0.00368208


def win_percent(cp: float) -> float:
    # logistic form; equals 50 + 50 tanh(x / 2)
    return 100.0 / (1.0 + math.exp(-CP_SCALE * cp))


def c4_winner(cells, rows, cols, k):
    """0 / 1 for a completed line of that player's stones, else None."""
    for r in range(rows):
        for c in range(cols):
            v = cells[r * cols + c]
            if v == 0:
                continue
            for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
                rr, cc = r + (k - 1) * dr, c + (k - 1) * dc
                if not (0 <= rr < rows and 0 <= cc < cols):
                    continue
                if all(cells[(r + i * dr) * cols + c + i * dc] == v for i in range(k)):
                    return v - 1
    return None


def hex_winner(cells, rows, cols):
    """Player 0 joins top and bottom, player 1 joins left and right."""
    nbrs = ((-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0))
    for player, starts, done in (
        (0, [(0, c) for c in range(cols)], lambda r, c: r == rows - 1),
        (1, [(r, 0) for r in range(rows)], lambda r, c: c == cols - 1),
    ):
        want = player + 1
        seen = set()
        q = deque(p for p in starts if cells[p[0] * cols + p[1]] == want)
        seen.update(q)
        while q:
            r, c = q.popleft()
            if done(r, c):
                return player
            for dr, dc in nbrs:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols and (rr, cc) not in seen \
                        and cells[rr * cols + cc] == want:
                    seen.add((rr, cc))
                    q.append((rr, cc))
    return None


def moves(kind, cells, rows, cols):
    if kind == "hex":
        return [i for i, v in enumerate(cells) if v == 0]
    return [c for c in range(cols) if cells[c] == 0]


def play(kind, cells, rows, cols, action, player):
    cells = list(cells)
    if kind == "hex":
        cells[action] = player + 1
    else:
        r = max(r for r in range(rows) if cells[r * cols + action] == 0)
        cells[r * cols + action] = player + 1
    return tuple(cells)


def winner(kind, cells, rows, cols, k):
    return hex_winner(cells, rows, cols) if kind == "hex" else c4_winner(cells, rows, cols, k)


def minimax(kind, cells, rows, cols, k, player):
    """+1 / 0 / -1 for ``player`` to move, by exhaustive search."""

    @lru_cache(maxsize=None)
    def value(cs, p):
        w = winner(kind, cs, rows, cols, k)
        if w is not None:
            return 1 if w == p else -1
        ms = moves(kind, cs, rows, cols)
        if not ms:
            return 0
        return max(-value(play(kind, cs, rows, cols, a, p), 1 - p) for a in ms)

    return value(tuple(cells), player)


def distance_score(kind, cells, rows, cols, k, player):
    """Negamax score preferring quick wins and slow losses.

    ``+(B - end_ply)`` for a win, ``-(B - end_ply)`` for a loss, 0 for a
    draw, with ``B = rows * cols + 1`` and ``end_ply`` counted in stones on
    the board when the game ends.
    """
    big = rows * cols + 1

    @lru_cache(maxsize=None)
    def value(cs, p):
        ms = moves(kind, cs, rows, cols)
        if not ms:
            return 0
        best = -big
        for a in ms:
            nxt = play(kind, cs, rows, cols, a, p)
            if winner(kind, nxt, rows, cols, k) is not None:
                v = big - sum(1 for c in nxt if c)
            else:
                v = -value(nxt, 1 - p)
            best = max(best, v)
        return best

    return value(tuple(cells), player), big


def action_values(kind, cells, rows, cols, k, player):
    """Exhaustive value of every legal action for the mover."""
    out = {}
    for a in moves(kind, cells, rows, cols):
        nxt = play(kind, cells, rows, cols, a, player)
        w = winner(kind, nxt, rows, cols, k)
        if w is not None:
            out[a] = 1 if w == player else -1
        elif not moves(kind, nxt, rows, cols):
            out[a] = 0
        else:
            out[a] = -minimax(kind, nxt, rows, cols, k, 1 - player)
    return out


def tree_size(kind, cells, rows, cols, k, player, cap=10 ** 6):
    """Nodes in the full game tree below a position (paths, not positions)."""
    if winner(kind, cells, rows, cols, k) is not None:
        return 1
    n = 1
    for a in moves(kind, cells, rows, cols):
        n += tree_size(kind, play(kind, cells, rows, cols, a, player), rows, cols, k,
                       1 - player, cap - n)
        if n > cap:
            return n
    return n


def elo_gap(p: float) -> float:
    """Rating difference that gives expected score ``p``."""
    return 400.0 * math.log10(p / (1.0 - p))


def state_args(state):
    """Unpack a package GameState into the plain arguments used above."""
    g = state.game
    kind = "hex" if g.name == "hex" else "c4"
    return kind, tuple(state.cells), g.rows, g.cols, g.win_length, state.to_move
