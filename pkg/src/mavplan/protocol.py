"""Multi-action-value text protocol: value arithmetic and request/response codec.

A request is a block of ``%`` commands closed by a ``%%%`` line::

    %game connect_four 4x4 win4
    %prev_state
    game connect_four 4x4 win4
    turn 0
    . . . .
    . . . .
    . . . .
    . . . .
    %prev_action 2
    %state
    %top_k 3
    %best_action
    %%%

A response optionally echoes the inferred state after ``%state``, lists
``[%top_i <action> : <value>]`` lines, optionally ``[%best_action <a>]``,
and ends with ``%%%``. A value is a single bucket token ``<ctrlN>`` or a
distribution written as ``<ctrlN>@p`` pairs. A terminal starting state is
answered with ``[%top_1 invalid : "1-0"]`` and no move list.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ParseError
from .game import GameId, Outcome, decode_state

N_BUCKETS = 64
ALL = "all"
TERMINATOR = "%%%"
CP_SCALE = 0.00368208

_TOKEN_RE = re.compile(r"<ctrl(0|[1-9][0-9]?)>")
_MOVE_RE = re.compile(r"\[%top_(\d+) (\S+) : (.+)\]")
_BEST_RE = re.compile(r"\[%best_action (\S+)\]")


# -- value arithmetic ---------------------------------------------------------


def centipawn_to_win(cp: float) -> float:
    """Win percentage for the side to move; 50 at cp = 0."""
    # 2 / (1 + e^-x) - 1 == tanh(x / 2), which cannot overflow
    return 50.0 + 50.0 * math.tanh(CP_SCALE * cp / 2.0)


def win_to_bucket(p: float) -> int:
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"win percentage {p} outside [0, 100]")
    return min(int(math.floor(p * N_BUCKETS / 100.0)), N_BUCKETS - 1)


def bucket_midpoint(i: int) -> float:
    return 100.0 * (i + 0.5) / N_BUCKETS


MIDPOINTS = np.array([bucket_midpoint(i) for i in range(N_BUCKETS)])


def bucket_token(i: int) -> str:
    if not 0 <= i < N_BUCKETS:
        raise ValueError(f"bucket {i} out of range")
    return f"<ctrl{i}>"


def token_bucket(text: str) -> int:
    m = _TOKEN_RE.fullmatch(text)
    if not m or int(m.group(1)) >= N_BUCKETS:
        raise ParseError(f"not a bucket token: {text!r}", 0, "bad_token")
    return int(m.group(1))


class BucketDistribution:
    """Probabilities over the 64 value buckets."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        p = np.asarray(probs, dtype=np.float64)
        if p.shape != (N_BUCKETS,):
            raise ValueError("need exactly 64 probabilities")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        self.probs = p

    @classmethod
    def point(cls, i: int) -> "BucketDistribution":
        p = np.zeros(N_BUCKETS)
        p[i] = 1.0
        return cls(p)

    @classmethod
    def for_win(cls, p: float) -> "BucketDistribution":
        return cls.point(win_to_bucket(p))

    def is_point(self) -> bool:
        return np.count_nonzero(self.probs) == 1

    def mode(self) -> int:
        return int(np.argmax(self.probs))

    def render(self) -> str:
        nz = np.flatnonzero(self.probs)
        if len(nz) == 1 and self.probs[nz[0]] == 1.0:
            return bucket_token(int(nz[0]))
        return " ".join(f"{bucket_token(int(i))}@{float(self.probs[i])!r}" for i in nz)

    @classmethod
    def parse(cls, text: str) -> "BucketDistribution":
        parts = text.split(" ")
        if len(parts) == 1 and "@" not in parts[0]:
            return cls.point(token_bucket(parts[0]))
        p = np.zeros(N_BUCKETS)
        for part in parts:
            tok, sep, w = part.partition("@")
            if not sep:
                raise ParseError(f"weighted bucket needs '@': {part!r}", 0, "bad_token")
            i = token_bucket(tok)
            try:
                wv = float(w)
            except ValueError:
                raise ParseError(f"bad probability {w!r}", 0, "bad_token") from None
            if not math.isfinite(wv) or wv <= 0 or p[i] != 0:
                raise ParseError(f"bad probability entry {part!r}", 0, "bad_token")
            p[i] = wv
        try:
            return cls(p)
        except ValueError as exc:
            raise ParseError(str(exc), 0, "bad_token") from None

    def __eq__(self, other):
        return isinstance(other, BucketDistribution) and np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"BucketDistribution({self.render()})"


def score_max(d: BucketDistribution) -> float:
    """Midpoint of the most likely bucket; ties go to the lower bucket."""
    return bucket_midpoint(d.mode())


def score_mean(d: BucketDistribution) -> float:
    return float(np.dot(d.probs, MIDPOINTS))


SCORERS = {"max": score_max, "mean": score_mean}


def score(d: BucketDistribution, method: str) -> float:
    return SCORERS[method](d)


# -- requests -----------------------------------------------------------------


TopK = Union[int, str]


@dataclass(frozen=True)
class MavRequest:
    game: GameId
    state: str | None = None
    prev_state: str | None = None
    prev_action: str | None = None
    top_k: TopK = ALL
    want_best_action: bool = False
    want_state_echo: bool = False

    def __post_init__(self):
        direct = self.state is not None
        prev = self.prev_state is not None or self.prev_action is not None
        if direct == prev:
            raise ValueError("exactly one start form: state, or prev_state + prev_action")
        if prev and (self.prev_state is None or self.prev_action is None):
            raise ValueError("prev_state and prev_action go together")
        if direct and self.want_state_echo:
            raise ValueError("state echo only applies to the prev_state form")
        if self.top_k != ALL and not (isinstance(self.top_k, int) and self.top_k >= 1):
            raise ValueError(f"top_k must be a positive integer or {ALL!r}")

    def k_limit(self, n_legal: int) -> int:
        return n_legal if self.top_k == ALL else min(self.top_k, n_legal)


def _state_block(text: str) -> list[str]:
    return text.rstrip("\n").split("\n")


def render_request(r: MavRequest) -> str:
    lines = ["%" + r.game.header]
    if r.state is not None:
        lines.append("%state")
        lines += _state_block(r.state)
    else:
        lines.append("%prev_state")
        lines += _state_block(r.prev_state)
        lines.append(f"%prev_action {r.prev_action}")
        if r.want_state_echo:
            lines.append("%state")
    lines.append("%top_all" if r.top_k == ALL else f"%top_k {r.top_k}")
    if r.want_best_action:
        lines.append("%best_action")
    lines.append(TERMINATOR)
    return "\n".join(lines) + "\n"


class _Lines:
    """Line cursor that remembers byte offsets for error reporting."""

    def __init__(self, text: str, category: str):
        self.lines = text.split("\n")
        self.offsets = []
        off = 0
        for ln in self.lines:
            self.offsets.append(off)
            off += len(ln.encode()) + 1
        self.i = 0
        self.category = category

    def peek(self):
        return self.lines[self.i] if self.i < len(self.lines) else None

    def take(self):
        ln = self.peek()
        self.i += 1
        return ln

    @property
    def offset(self):
        if self.i < len(self.offsets):
            return self.offsets[self.i]
        return self.offsets[-1] if self.offsets else 0

    def fail(self, msg, category=None, at=None):
        raise ParseError(msg, self.offset if at is None else at, category or self.category)

    def block(self, stop):
        """Lines up to (not including) the first one for which ``stop`` holds."""
        start = self.offset
        out = []
        while self.peek() is not None and not stop(self.peek()):
            out.append(self.take())
        return "\n".join(out) + "\n", start


def _check_state(text: str, game: GameId, offset: int, category: str) -> str:
    try:
        s = decode_state(text, offset)
    except ParseError as exc:
        raise ParseError(str(exc), exc.offset, category) from None
    if s.game != game:
        raise ParseError("state game does not match the header", offset, category)
    return text


def parse_request(text: str) -> MavRequest:
    cur = _Lines(text, "bad_request")
    first = cur.take()
    if first is None or not first.startswith("%game "):
        cur.fail("request must start with %game", at=0)
    try:
        game = GameId.parse_header(first[1:])
    except ValueError as exc:
        cur.fail(str(exc), at=0)
    fields = {}
    seen = set()
    while True:
        ln = cur.peek()
        if ln is None:
            cur.fail("missing %%% terminator")
        at = cur.offset
        cur.take()
        if ln == TERMINATOR:
            break
        cmd = ln.split(" ", 1)[0]
        if cmd in seen:
            cur.fail(f"duplicate command {cmd}", at=at)
        seen.add(cmd)
        if cmd == "%state":
            if ln != "%state":
                cur.fail("%state takes no arguments", at=at)
            if "%prev_state" in seen:
                if "%prev_action" not in seen or "%top_k" in seen or "%top_all" in seen:
                    cur.fail("%state echo must follow %prev_action", at=at)
                fields["want_state_echo"] = True
            else:
                body, off = cur.block(lambda s: s.startswith("%"))
                fields["state"] = _check_state(body, game, off, "bad_request")
        elif cmd == "%prev_state":
            if ln != "%prev_state" or "%state" in seen:
                cur.fail("both start forms given" if "%state" in seen else "bad %prev_state", at=at)
            body, off = cur.block(lambda s: s.startswith("%"))
            fields["prev_state"] = _check_state(body, game, off, "bad_request")
        elif cmd == "%prev_action":
            if "%prev_state" not in seen:
                cur.fail("%prev_action without %prev_state", at=at)
            arg = ln[len("%prev_action "):]
            try:
                game.parse_action(arg)
            except ValueError as exc:
                cur.fail(str(exc), at=at)
            fields["prev_action"] = arg
        elif cmd in ("%top_k", "%top_all"):
            if "%top_k" in seen and "%top_all" in seen:
                cur.fail("only one of %top_k / %top_all", at=at)
            if cmd == "%top_all":
                if ln != "%top_all":
                    cur.fail("%top_all takes no arguments", at=at)
                fields["top_k"] = ALL
            else:
                m = re.fullmatch(r"%top_k ([1-9][0-9]*)", ln)
                if not m:
                    cur.fail(f"bad %top_k line {ln!r}", at=at)
                fields["top_k"] = int(m.group(1))
        elif cmd == "%best_action":
            if ln != "%best_action" or not ({"%top_k", "%top_all"} & seen):
                cur.fail("%best_action must follow %top_k", at=at)
            fields["want_best_action"] = True
        else:
            cur.fail(f"unknown command {cmd!r}", at=at)
    if "top_k" not in fields:
        cur.fail("missing %top_k")
    rest = "\n".join(cur.lines[cur.i:])
    if rest.strip():
        cur.fail("text after %%% terminator")
    try:
        return MavRequest(game, **fields)
    except ValueError as exc:
        raise ParseError(str(exc), 0, "bad_request") from None


# -- responses ----------------------------------------------------------------


@dataclass
class MavResponse:
    move_values: list  # [(action text, BucketDistribution)]
    inferred_state: str | None = None
    outcome: Outcome | None = None
    best_action: str | None = None

    def scored(self, method: str) -> list[tuple[str, float]]:
        return [(a, score(d, method)) for a, d in self.move_values]

    def __eq__(self, other):
        return (isinstance(other, MavResponse)
                and self.inferred_state == other.inferred_state
                and self.outcome == other.outcome
                and self.best_action == other.best_action
                and len(self.move_values) == len(other.move_values)
                and all(a == b and da == db for (a, da), (b, db)
                        in zip(self.move_values, other.move_values)))


def render_response(r: MavResponse) -> str:
    lines = []
    if r.inferred_state is not None:
        lines.append("%state")
        lines += _state_block(r.inferred_state)
    if r.outcome is not None:
        lines.append(f'[%top_1 invalid : "{r.outcome.result_token}"]')
    for i, (a, d) in enumerate(r.move_values, 1):
        lines.append(f"[%top_{i} {a} : {d.render()}]")
    if r.best_action is not None:
        lines.append(f"[%best_action {r.best_action}]")
    lines.append(TERMINATOR)
    return "\n".join(lines) + "\n"


def error_response(reason: str) -> str:
    """What an oracle answers to a request it cannot interpret."""
    return f"%error {reason}\n{TERMINATOR}\n"


def parse_response(text: str, expected: MavRequest) -> MavResponse:
    """Strict parse of an oracle completion against the request it answers.

    Checks structure only: syntax, bounds, counts and duplicates. Whether
    the listed actions are legal is for the caller to audit.
    """
    body = text.rstrip("\n")
    if not (body == TERMINATOR or body.endswith("\n" + TERMINATOR)):
        raise ParseError("response does not end with %%%", len(text.encode()), "truncated")
    cur = _Lines(body[: len(body) - len(TERMINATOR)].rstrip("\n"), "bad_move_list")
    if cur.lines == [""]:
        cur.lines, cur.offsets = [], []
    game = expected.game
    out = MavResponse([])

    if cur.peek() is not None and cur.peek().startswith("%error"):
        cur.fail(f"oracle reported {cur.peek()!r}", "bad_state")
    if expected.want_state_echo:
        if cur.peek() != "%state":
            cur.fail("missing %state echo", "bad_state")
        cur.take()
        block, off = cur.block(lambda s: s.startswith("["))
        out.inferred_state = _check_state(block, game, off, "bad_state")
    elif cur.peek() is not None and cur.peek().startswith("%state"):
        cur.fail("unrequested %state block", "bad_state")

    seen = set()
    limit = None if expected.top_k == ALL else expected.top_k
    while cur.peek() is not None and cur.peek().startswith("[%top_"):
        at = cur.offset
        ln = cur.take()
        m = _MOVE_RE.fullmatch(ln)
        if not m:
            cur.fail(f"malformed move line {ln!r}", at=at)
        idx, act, val = int(m.group(1)), m.group(2), m.group(3)
        if idx != len(out.move_values) + 1 or (out.outcome is not None):
            cur.fail(f"move index {idx} out of sequence", at=at)
        if act == "invalid":
            if idx != 1 or not re.fullmatch(r'"[^"]*"', val):
                cur.fail("outcome form must be the only entry", at=at)
            try:
                out.outcome = Outcome.from_result_token(val[1:-1])
            except ValueError:
                cur.fail(f"unknown result {val}", "bad_token", at=at)
            if out.outcome is Outcome.ONGOING:
                cur.fail("outcome form with an ongoing result", "bad_token", at=at)
            continue
        try:
            game.parse_action(act)
        except ValueError as exc:
            cur.fail(str(exc), at=at)
        if act in seen:
            cur.fail(f"action {act} listed twice", "duplicate_action", at=at)
        seen.add(act)
        try:
            dist = BucketDistribution.parse(val)
        except ParseError as exc:
            raise ParseError(str(exc).split(": ", 1)[-1], at, "bad_token") from None
        out.move_values.append((act, dist))
        if limit is not None and len(out.move_values) > limit:
            cur.fail(f"more than top_k={limit} moves", at=at)

    if out.outcome is None and not out.move_values:
        cur.fail("no moves and no outcome")
    if cur.peek() is not None and cur.peek().startswith("[%best_action"):
        at = cur.offset
        ln = cur.take()
        m = _BEST_RE.fullmatch(ln)
        if not m or not expected.want_best_action or out.outcome is not None:
            cur.fail(f"unexpected best-action line {ln!r}", at=at)
        try:
            game.parse_action(m.group(1))
        except ValueError as exc:
            cur.fail(str(exc), at=at)
        out.best_action = m.group(1)
    elif expected.want_best_action and out.outcome is None:
        cur.fail("missing best-action line")
    if cur.peek() is not None:
        cur.fail(f"unexpected line {cur.peek()!r}")
    return out
