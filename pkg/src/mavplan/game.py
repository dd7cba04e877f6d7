"""Rules, state text and transitions for Connect Four and Hex.

States are immutable; ``apply`` returns a new state. Cells are stored
row-major with row 0 at the top, as ``EMPTY``/``P0``/``P1``.

Hex is played on a ``rows x cols`` parallelogram: player 0 (``X``) joins
the top and bottom edges, player 1 (``O``) joins left and right.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

from .errors import IllegalMove, ParseError

EMPTY, P0, P1 = 0, 1, 2
GLYPHS = {EMPTY: ".", P0: "X", P1: "O"}
_FROM_GLYPH = {v: k for k, v in GLYPHS.items()}

HEX_NEIGHBOURS = ((-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0))


class Outcome(enum.Enum):
    ONGOING = "ongoing"
    P0_WINS = "p0_wins"
    P1_WINS = "p1_wins"
    DRAW = "draw"

    @property
    def result_token(self) -> str:
        """Score string used in the terminal-position form of the protocol."""
        return _RESULT_TOKENS[self]

    @classmethod
    def from_result_token(cls, token: str) -> "Outcome":
        for k, v in _RESULT_TOKENS.items():
            if v == token:
                return k
        raise ValueError(token)

    @classmethod
    def win_for(cls, player: int) -> "Outcome":
        return cls.P0_WINS if player == 0 else cls.P1_WINS

    def value_for(self, player: int) -> float:
        """1 / 0.5 / 0 from ``player``'s point of view."""
        if self is Outcome.DRAW:
            return 0.5
        if self is Outcome.ONGOING:
            raise ValueError("game is not over")
        return 1.0 if self is Outcome.win_for(player) else 0.0


_RESULT_TOKENS = {
    Outcome.P0_WINS: "1-0",
    Outcome.P1_WINS: "0-1",
    Outcome.DRAW: "1/2-1/2",
    Outcome.ONGOING: "*",
}


@dataclass(frozen=True)
class GameId:
    name: str
    rows: int
    cols: int
    win_length: int = 0

    def __post_init__(self):
        if self.name not in ("connect_four", "hex"):
            raise ValueError(f"unknown game {self.name!r}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("board dimensions must be positive")
        if self.name == "connect_four":
            if not 1 <= self.win_length <= max(self.rows, self.cols):
                raise ValueError("win_length must be in 1..max(rows, cols)")
        elif self.win_length != 0:
            raise ValueError("win_length only applies to connect_four")

    @classmethod
    def connect_four(cls, rows: int = 6, cols: int = 7, win_length: int = 4) -> "GameId":
        return cls("connect_four", rows, cols, win_length)

    @classmethod
    def hex(cls, rows: int = 3, cols: int | None = None) -> "GameId":
        return cls("hex", rows, rows if cols is None else cols)

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    @property
    def n_actions(self) -> int:
        return self.cols if self.name == "connect_four" else self.cells

    @property
    def header(self) -> str:
        h = f"game {self.name} {self.rows}x{self.cols}"
        if self.name == "connect_four":
            h += f" win{self.win_length}"
        return h

    @classmethod
    def parse_header(cls, text: str) -> "GameId":
        """Inverse of ``header`` (the leading ``game `` word optional)."""
        m = _HEADER_RE.fullmatch(text.strip())
        if not m:
            raise ValueError(f"bad game header {text!r}")
        name, rows, cols, win = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
        if name == "connect_four":
            if win is None:
                raise ValueError("connect_four header needs win<k>")
            return cls(name, rows, cols, int(win))
        if win is not None:
            raise ValueError("hex header takes no win<k>")
        return cls(name, rows, cols)

    def initial_state(self) -> "GameState":
        return GameState(self, (EMPTY,) * self.cells, 0, 0)

    # -- action text ------------------------------------------------------

    def action_text(self, action: int) -> str:
        if self.name == "connect_four":
            return str(action)
        r, c = divmod(action, self.cols)
        return f"{_col_letters(c)}{r + 1}"

    def parse_action(self, text: str) -> int:
        """Syntax and bounds only; legality is a separate question."""
        if self.name == "connect_four":
            if not re.fullmatch(r"\d+", text):
                raise ValueError(f"bad column {text!r}")
            a = int(text)
            if a >= self.cols:
                raise ValueError(f"column {a} off the board")
            return a
        m = re.fullmatch(r"([a-z]+)(\d+)", text)
        if not m:
            raise ValueError(f"bad cell {text!r}")
        c = _letters_col(m.group(1))
        r = int(m.group(2)) - 1
        if not (0 <= r < self.rows and 0 <= c < self.cols) or m.group(2).startswith("0"):
            raise ValueError(f"cell {text!r} off the board")
        return r * self.cols + c


_HEADER_RE = re.compile(r"(?:game )?(connect_four|hex) (\d+)x(\d+)(?: win(\d+))?")


def _col_letters(c: int) -> str:
    s = ""
    c += 1
    while c:
        c, rem = divmod(c - 1, 26)
        s = chr(ord("a") + rem) + s
    return s


def _letters_col(s: str) -> int:
    n = 0
    for ch in s:
        n = n * 26 + (ord(ch) - ord("a") + 1)
    return n - 1


@dataclass(frozen=True)
class GameState:
    game: GameId
    cells: tuple
    to_move: int
    ply: int
    last_action: int | None = field(default=None, compare=False)

    def cell(self, r: int, c: int) -> int:
        return self.cells[r * self.game.cols + c]

    @cached_property
    def bitboards(self) -> tuple[int, int]:
        """Per-player masks in the padded layout used by ``kernels``."""
        w = self.game.cols + 1
        p0 = p1 = 0
        for i, v in enumerate(self.cells):
            if v == EMPTY:
                continue
            r, c = divmod(i, self.game.cols)
            if v == P0:
                p0 |= 1 << (r * w + c)
            else:
                p1 |= 1 << (r * w + c)
        return p0, p1

    @cached_property
    def outcome(self) -> Outcome:
        return _outcome(self)

    def __str__(self) -> str:
        return encode_state(self)


# -- rules ---------------------------------------------------------------


def legal_actions(state: GameState) -> list[int]:
    """Ascending column (Connect Four) or row-major cell (Hex); empty when over."""
    if state.outcome is not Outcome.ONGOING:
        return []
    g = state.game
    if g.name == "connect_four":
        return [c for c in range(g.cols) if state.cells[c] == EMPTY]
    return [i for i, v in enumerate(state.cells) if v == EMPTY]


def is_legal(state: GameState, action: int) -> bool:
    return action in legal_actions(state)


def apply(state: GameState, action: int) -> GameState:
    g = state.game
    if state.outcome is not Outcome.ONGOING:
        raise IllegalMove(_describe(g, action), "game is over")
    if g.name == "connect_four":
        if not (isinstance(action, int) and 0 <= action < g.cols):
            raise IllegalMove(_describe(g, action), "column off the board")
        idx = None
        for r in range(g.rows - 1, -1, -1):
            if state.cells[r * g.cols + action] == EMPTY:
                idx = r * g.cols + action
                break
        if idx is None:
            raise IllegalMove(_describe(g, action), "column is full")
    else:
        if not (isinstance(action, int) and 0 <= action < g.cells):
            raise IllegalMove(_describe(g, action), "cell off the board")
        if state.cells[action] != EMPTY:
            raise IllegalMove(_describe(g, action), "cell is occupied")
        idx = action
    cells = list(state.cells)
    cells[idx] = P0 if state.to_move == 0 else P1
    return GameState(g, tuple(cells), 1 - state.to_move, state.ply + 1, idx)


def replay(game: GameId, actions: Sequence[int], start: GameState | None = None) -> GameState:
    s = game.initial_state() if start is None else start
    for a in actions:
        s = apply(s, a)
    return s


def terminal(state: GameState) -> Outcome:
    return state.outcome


def _describe(g: GameId, action) -> str:
    try:
        return g.action_text(action)
    except Exception:
        return repr(action)


def _outcome(state: GameState) -> Outcome:
    g = state.game
    if g.name == "connect_four":
        if state.last_action is not None:
            # only the stone just placed can complete a run
            mover = state.cells[state.last_action]
            if _c4_run_through(state, state.last_action):
                return Outcome.win_for(0 if mover == P0 else 1)
        else:
            for idx, v in enumerate(state.cells):
                if v != EMPTY and _c4_run_through(state, idx):
                    return Outcome.win_for(0 if v == P0 else 1)
        if EMPTY not in state.cells:
            return Outcome.DRAW
        return Outcome.ONGOING
    for player in (0, 1):
        if hex_connected(state, player):
            return Outcome.win_for(player)
    return Outcome.ONGOING


def _c4_run_through(state: GameState, idx: int) -> bool:
    g = state.game
    r0, c0 = divmod(idx, g.cols)
    who = state.cells[idx]
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        n = 1
        for sign in (1, -1):
            r, c = r0 + sign * dr, c0 + sign * dc
            while 0 <= r < g.rows and 0 <= c < g.cols and state.cells[r * g.cols + c] == who:
                n += 1
                r += sign * dr
                c += sign * dc
        if n >= g.win_length:
            return True
    return False


class UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))
        self.rank = [0] * size

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> bool:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return False
        if self.rank[ri] < self.rank[rj]:
            ri, rj = rj, ri
        self.parent[rj] = ri
        if self.rank[ri] == self.rank[rj]:
            self.rank[ri] += 1
        return True


def hex_connected(state: GameState, player: int) -> bool:
    """Whether ``player`` links their two edges, via union-find with edge nodes."""
    g = state.game
    n = g.cells
    start, goal = n, n + 1
    uf = UnionFind(n + 2)
    stone = P0 if player == 0 else P1
    for idx, v in enumerate(state.cells):
        if v != stone:
            continue
        r, c = divmod(idx, g.cols)
        if player == 0:
            if r == 0:
                uf.union(idx, start)
            if r == g.rows - 1:
                uf.union(idx, goal)
        else:
            if c == 0:
                uf.union(idx, start)
            if c == g.cols - 1:
                uf.union(idx, goal)
        for dr, dc in HEX_NEIGHBOURS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < g.rows and 0 <= cc < g.cols and state.cells[rr * g.cols + cc] == stone:
                uf.union(idx, rr * g.cols + cc)
    return uf.find(start) == uf.find(goal)


# -- state text ------------------------------------------------------------


def encode_state(state: GameState) -> str:
    g = state.game
    lines = [g.header, f"turn {state.to_move}"]
    for r in range(g.rows):
        row = " ".join(GLYPHS[state.cell(r, c)] for c in range(g.cols))
        indent = " " * r if g.name == "hex" else ""
        lines.append(indent + row)
    return "\n".join(lines) + "\n"


def decode_state(text: str, base_offset: int = 0) -> GameState:
    """Parse the frozen state grammar; ``ParseError.offset`` is a byte offset."""
    pos = 0
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def fail(msg, at):
        raise ParseError(msg, base_offset + at, "bad_state")

    if len(lines) < 2:
        fail("state needs a game line and a turn line", len(text))
    try:
        game = GameId.parse_header(lines[0]) if lines[0].startswith("game ") else None
    except ValueError as exc:
        fail(str(exc), 0)
    if game is None:
        fail("expected 'game <name> <rows>x<cols>'", 0)
    pos = len(lines[0]) + 1
    m = re.fullmatch(r"turn ([01])", lines[1])
    if not m:
        fail("expected 'turn 0' or 'turn 1'", pos)
    to_move = int(m.group(1))
    pos += len(lines[1]) + 1
    if len(lines) != 2 + game.rows:
        fail(f"expected {game.rows} board rows, got {len(lines) - 2}", pos)
    cells = []
    for r in range(game.rows):
        line = lines[2 + r]
        indent = r if game.name == "hex" else 0
        if line[:indent] != " " * indent:
            fail("row indentation does not match row index", pos)
        body = line[indent:]
        toks = body.split(" ")
        if len(toks) != game.cols:
            fail(f"row {r} has {len(toks)} cells, expected {game.cols}", pos)
        col_pos = pos + indent
        for tok in toks:
            if tok not in _FROM_GLYPH:
                fail(f"bad cell token {tok!r}", col_pos)
            cells.append(_FROM_GLYPH[tok])
            col_pos += len(tok) + 1
        pos += len(line) + 1
    n0, n1 = cells.count(P0), cells.count(P1)
    if n0 - n1 not in (0, 1) or n0 - n1 != to_move:
        fail(f"piece counts X={n0} O={n1} inconsistent with turn {to_move}", len(lines[0]) + 1)
    if game.name == "connect_four":
        for c in range(game.cols):
            seen_empty_below = False
            for r in range(game.rows - 1, -1, -1):
                v = cells[r * game.cols + c]
                if v == EMPTY:
                    seen_empty_below = True
                elif seen_empty_below:
                    fail(f"floating piece in column {c}", 0)
    return GameState(game, tuple(cells), to_move, n0 + n1)


def compact_state(state: GameState) -> str:
    """Single-line variant: turn digit then rows joined by ``/``."""
    g = state.game
    rows = [" ".join(GLYPHS[state.cell(r, c)] for c in range(g.cols)) for r in range(g.rows)]
    return f"{state.to_move} | " + " / ".join(rows)


def parse_compact(game: GameId, text: str) -> GameState:
    m = re.fullmatch(r"([01]) \| (.*)", text)
    if not m:
        raise ParseError(f"bad compact state {text!r}", 0, "bad_state")
    rows = m.group(2).split(" / ")
    body = "\n".join((" " * r if game.name == "hex" else "") + row for r, row in enumerate(rows))
    return decode_state(f"{game.header}\nturn {m.group(1)}\n{body}\n")
