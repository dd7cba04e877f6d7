"""Bitboard kernels for the exhaustive solver.

Boards are packed into two int64 masks, one per player. Cell ``(r, c)``
lives at bit ``r * (cols + 1) + c``; the extra column per row stays empty
so horizontal and diagonal shifts never wrap into the next row. Row 0 is
the top of the board.

Scores are from the side to move and keyed on the absolute ply at which
the game ends: a win finishing with ``e`` stones on the board scores
``WIN_BASE - e``, the matching loss ``-(WIN_BASE - e)``, a draw 0. Because
``e`` does not depend on whose turn it is, a parent's score is the plain
negation of its child's, and faster wins / slower losses rank higher.
"""

import numpy as np

from ._jit import jit

CONNECT_FOUR = 0
HEX = 1

WIN_BASE = 100
NO_SCORE = -32000
INF = 1000
EMPTY_KEY = -1

STATUS_OK = 0
STATUS_GROW = 1
STATUS_BUDGET = 2

LOWER = 0
UPPER = 1


@jit
def bit_of(r, c, cols):
    return np.int64(1) << np.int64(r * (cols + 1) + c)


@jit
def board_mask(rows, cols):
    m = np.int64(0)
    for r in range(rows):
        for c in range(cols):
            m |= bit_of(r, c, cols)
    return m


@jit
def row_mask(r, cols):
    m = np.int64(0)
    for c in range(cols):
        m |= bit_of(r, c, cols)
    return m


@jit
def col_mask(c, rows, cols):
    m = np.int64(0)
    for r in range(rows):
        m |= bit_of(r, c, cols)
    return m


@jit
def has_run(stones, cols, k):
    """True when ``stones`` contains ``k`` in a row in any direction."""
    w = cols + 1
    for d in (1, w, w + 1, w - 1):
        m = stones
        for i in range(1, k):
            m &= stones >> np.int64(i * d)
            if m == 0:
                break
        if m != 0:
            return True
    return False


@jit
def flood(seed, stones, cols):
    """Connected component of ``stones`` (hex adjacency) grown from ``seed``."""
    w = cols + 1
    reach = seed & stones
    while True:
        nb = (reach << np.int64(1)) | (reach >> np.int64(1))
        nb |= (reach << np.int64(w)) | (reach >> np.int64(w))
        nb |= (reach << np.int64(w - 1)) | (reach >> np.int64(w - 1))
        grown = reach | (nb & stones)
        if grown == reach:
            return reach
        reach = grown


@jit
def hex_connected(stones, player, rows, cols):
    """Player 0 joins top to bottom, player 1 joins left to right."""
    if player == 0:
        start = row_mask(0, cols)
        goal = row_mask(rows - 1, cols)
    else:
        start = col_mask(0, rows, cols)
        goal = col_mask(cols - 1, rows, cols)
    return (flood(start, stones, cols) & goal) != 0


@jit
def winner(p0, p1, kind, rows, cols, k):
    """-1 when nobody has won, otherwise the winning player."""
    if kind == CONNECT_FOUR:
        if has_run(p0, cols, k):
            return 0
        if has_run(p1, cols, k):
            return 1
        return -1
    if hex_connected(p0, 0, rows, cols):
        return 0
    if hex_connected(p1, 1, rows, cols):
        return 1
    return -1


@jit
def action_bit(occ, action, kind, rows, cols):
    """Bit the action places a stone on, or 0 if the action is illegal."""
    if kind == CONNECT_FOUR:
        if action < 0 or action >= cols:
            return np.int64(0)
        for r in range(rows - 1, -1, -1):
            b = bit_of(r, action, cols)
            if occ & b == 0:
                return b
        return np.int64(0)
    if action < 0 or action >= rows * cols:
        return np.int64(0)
    b = bit_of(action // cols, action % cols, cols)
    if occ & b != 0:
        return np.int64(0)
    return b


@jit
def wins_with(own, b, kind, rows, cols, k, player):
    """Whether placing ``b`` (already included in ``own``) wins for ``player``."""
    if kind == CONNECT_FOUR:
        return has_run(own, cols, k)
    group = flood(b, own, cols)
    if player == 0:
        return (group & row_mask(0, cols)) != 0 and (group & row_mask(rows - 1, cols)) != 0
    return (group & col_mask(0, rows, cols)) != 0 and (group & col_mask(cols - 1, rows, cols)) != 0


@jit
def _slot(keys0, keys1, k0, k1):
    cap = keys0.shape[0]
    h = ((k0 % cap) * 31 + (k1 % cap) * 7919) % cap
    while keys0[h] != EMPTY_KEY:
        if keys0[h] == k0 and keys1[h] == k1:
            return h
        h += 1
        if h == cap:
            h = 0
    return h


@jit
def tt_bounds(keys0, keys1, bounds, k0, k1):
    """Stored ``(lower, upper)`` bounds, or ``(-INF, INF)`` if unseen."""
    h = _slot(keys0, keys1, k0, k1)
    if keys0[h] == EMPTY_KEY:
        return -INF, INF
    return bounds[h, LOWER], bounds[h, UPPER]


@jit
def _tt_tighten(keys0, keys1, bounds, counts, k0, k1, lo, hi):
    h = _slot(keys0, keys1, k0, k1)
    if keys0[h] == EMPTY_KEY:
        keys0[h] = k0
        keys1[h] = k1
        bounds[h, LOWER] = lo
        bounds[h, UPPER] = hi
        counts[0] += 1
        return
    if lo > bounds[h, LOWER]:
        bounds[h, LOWER] = lo
    if hi < bounds[h, UPPER]:
        bounds[h, UPPER] = hi


@jit
def tt_rehash(keys0, keys1, bounds, new0, new1, newb):
    for i in range(keys0.shape[0]):
        if keys0[i] != EMPTY_KEY:
            h = _slot(new0, new1, keys0[i], keys1[i])
            new0[h] = keys0[i]
            new1[h] = keys1[i]
            newb[h, LOWER] = bounds[i, LOWER]
            newb[h, UPPER] = bounds[i, UPPER]


@jit
def popcount(x):
    n = 0
    while x != 0:
        x &= x - 1
        n += 1
    return n


@jit
def move_order(kind, rows, cols):
    """Centre-first action order; pruning only, results do not depend on it."""
    n = cols if kind == CONNECT_FOUR else rows * cols
    keys = np.empty(n, dtype=np.float64)
    for a in range(n):
        if kind == CONNECT_FOUR:
            keys[a] = abs(a - (cols - 1) / 2.0) + a * 1e-6
        else:
            r = a // cols
            c = a % cols
            keys[a] = abs(r - (rows - 1) / 2.0) + abs(c - (cols - 1) / 2.0) + a * 1e-6
    return np.argsort(keys)


# numba's on-disk cache segfaults when reloading self-recursive functions
@jit(cache=False)
def negamax(p0, p1, mover, alpha, beta, kind, rows, cols, k, order, full,
            keys0, keys1, bounds, counts, grow_at, budget):
    """Fail-soft alpha-beta returning the exact score inside ``(alpha, beta)``.

    ``counts = [entries, abort]``. When the table passes ``grow_at`` (or
    ``budget``) the abort flag is raised and the search unwinds without
    storing anything further; every stored bound stays valid.
    """
    occ = p0 | p1
    ply = popcount(occ)
    n = order.shape[0]
    for i in range(n):
        b = action_bit(occ, order[i], kind, rows, cols)
        if b == 0:
            continue
        own = (p0 if mover == 0 else p1) | b
        if wins_with(own, b, kind, rows, cols, k, mover):
            return WIN_BASE - (ply + 1)

    lo, hi = tt_bounds(keys0, keys1, bounds, p0, p1)
    # no immediate win: the earliest possible win is two plies later,
    # the earliest possible loss is on the opponent's reply
    best_possible = WIN_BASE - (ply + 3)
    worst_possible = -(WIN_BASE - (ply + 2))
    if hi > best_possible:
        hi = best_possible
    if lo < worst_possible:
        lo = worst_possible
    if lo >= beta:
        return lo
    if hi <= alpha:
        return hi
    if lo == hi:
        return lo
    a0 = alpha
    b0 = beta
    if lo > alpha:
        alpha = lo
    if hi < beta:
        beta = hi

    best = -INF
    for i in range(n):
        b = action_bit(occ, order[i], kind, rows, cols)
        if b == 0:
            continue
        if (occ | b) == full:
            score = 0
        elif mover == 0:
            score = -negamax(p0 | b, p1, 1, -beta, -alpha, kind, rows, cols, k, order,
                             full, keys0, keys1, bounds, counts, grow_at, budget)
        else:
            score = -negamax(p0, p1 | b, 0, -beta, -alpha, kind, rows, cols, k, order,
                             full, keys0, keys1, bounds, counts, grow_at, budget)
        if counts[1] != 0:
            return 0
        if score > best:
            best = score
        if best > alpha:
            alpha = best
        if alpha >= beta:
            break

    if best <= a0:
        _tt_tighten(keys0, keys1, bounds, counts, p0, p1, -INF, best)
    elif best >= b0:
        _tt_tighten(keys0, keys1, bounds, counts, p0, p1, best, INF)
    else:
        _tt_tighten(keys0, keys1, bounds, counts, p0, p1, best, best)
    if counts[0] >= budget:
        counts[1] = STATUS_BUDGET
    elif counts[0] >= grow_at:
        counts[1] = STATUS_GROW
    return best
