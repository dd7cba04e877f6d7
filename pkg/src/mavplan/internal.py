"""Bounded minimax traces: build, back up, linearize, parse and check.

A trace is a depth-first, pre-order rendering of a small minimax tree. Every
line after the header carries the path of the node it describes, so a
broken trace can be reported precisely::

    %search game connect_four 4x4 win4 depth 1 breadth 2
    [root] state 0 | . . . . / . . . . / . . . . / X O . .
    [root] eval 1:<ctrl40> 2:<ctrl38> 0:<ctrl30> 3:<ctrl20>
    [root] expand 1 2
    [root/1] state 1 | ...
    [root/1] eval 2:<ctrl33> ...
    [root/1] value <ctrl33>
    [root/2] state 1 | ...
    [root/2] eval ...
    [root/2] value <ctrl28>
    [root] value <ctrl35> best 2
    %best_action 2

Values live on the [0, 1] scale as bucket midpoints ``(i + 0.5) / 64``
(rendered as bucket tokens) or as exact terminal results ``1 / 0.5 / 0``
(rendered ``win`` / ``draw`` / ``loss``). Both sets are closed under
``v -> 1 - v`` and the arithmetic is exact in binary floating point.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import protocol as P
from .errors import IllegalMove, ParseError
from .game import (GameId, GameState, Outcome, apply, compact_state, encode_state,
                   parse_compact)
from .oracle import Oracle

MAX_DEPTH, MIN_BREADTH, MAX_BREADTH = 3, 2, 5
EXACT = {1.0: "win", 0.5: "draw", 0.0: "loss"}
_EXACT_BACK = {v: k for k, v in EXACT.items()}
MAV_SHARE = 0.6


class TreeBuildError(RuntimeError):
    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class TraceParams:
    depth: int
    breadth: int
    master: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.master:
            return
        if not 1 <= self.depth <= MAX_DEPTH or not MIN_BREADTH <= self.breadth <= MAX_BREADTH:
            raise ValueError(f"depth must be 1..{MAX_DEPTH} and breadth {MIN_BREADTH}..{MAX_BREADTH}")
        if (self.depth, self.breadth) == (MAX_DEPTH, MAX_BREADTH):
            raise ValueError("depth 3 with breadth 5 is reserved for master trees")

    @classmethod
    def make_master(cls, depth: int = MAX_DEPTH, breadth: int = MAX_BREADTH) -> "TraceParams":
        return cls(depth, breadth, master=True)

    @staticmethod
    def grid() -> list["TraceParams"]:
        return [TraceParams(d, b) for d in range(1, MAX_DEPTH + 1)
                for b in range(MIN_BREADTH, MAX_BREADTH + 1) if (d, b) != (MAX_DEPTH, MAX_BREADTH)]


@dataclass
class TraceNode:
    path: tuple
    state: str  # compact form
    moves: list | None = None  # [(action, bucket)] best first; None at terminals
    outcome: Outcome | None = None
    expanded: list = field(default_factory=list)
    children: dict = field(default_factory=dict)
    value: float | None = None
    best: str | None = None

    @property
    def label(self) -> str:
        return "/".join(("root",) + self.path)

    @property
    def depth(self) -> int:
        return len(self.path)

    def walk(self):
        yield self
        for a in self.expanded:
            yield from self.children[a].walk()


@dataclass
class SearchTree:
    game: GameId
    params: TraceParams
    root: TraceNode

    @property
    def chosen(self) -> str | None:
        return self.root.best

    def nodes(self):
        return self.root.walk()


@dataclass(frozen=True)
class Trace:
    text: str
    params: TraceParams
    chosen: str


def value_token(v: float) -> str:
    if v in EXACT:
        return EXACT[v]
    i = v * P.N_BUCKETS - 0.5
    if not (0 <= i < P.N_BUCKETS and i == int(i)):
        raise ValueError(f"{v} is neither a bucket midpoint nor an exact result")
    return P.bucket_token(int(i))


def token_value(tok: str) -> float:
    if tok in _EXACT_BACK:
        return _EXACT_BACK[tok]
    return (P.token_bucket(tok) + 0.5) / P.N_BUCKETS


def _rank(game: GameId, moves) -> list:
    return sorted(moves, key=lambda m: (-m[1], game.parse_action(m[0])))


# -- building --------------------------------------------------------------------


def evaluate_node(state: GameState, oracle: Oracle, label: str) -> list:
    """``[(action, mode bucket)]`` ranked best first, from one top_all question."""
    req = P.MavRequest(state.game, state=encode_state(state), top_k=P.ALL)
    try:
        resp = P.parse_response(oracle.evaluate(P.render_request(req)), req)
    except ParseError as exc:
        raise TreeBuildError(f"unparseable oracle answer ({exc})", label) from exc
    if resp.outcome is not None or not resp.move_values:
        raise TreeBuildError("oracle reported a live position as finished", label)
    return _rank(state.game, [(a, d.mode()) for a, d in resp.move_values])


def build_tree(state: GameState, params: TraceParams, oracle: Oracle) -> SearchTree:
    if state.outcome is not Outcome.ONGOING:
        raise ValueError("cannot build a tree from a finished position")

    def grow(s: GameState, path: tuple) -> TraceNode:
        node = TraceNode(path, compact_state(s))
        if s.outcome is not Outcome.ONGOING:
            node.outcome = s.outcome
            return node
        node.moves = evaluate_node(s, oracle, node.label)
        if len(path) < params.depth:
            node.expanded = [a for a, _ in node.moves[: params.breadth]]
            for a in node.expanded:
                try:
                    child = apply(s, s.game.parse_action(a))
                except (IllegalMove, ValueError) as exc:
                    raise TreeBuildError(f"oracle listed illegal move {a}: {exc}",
                                         node.label) from exc
                node.children[a] = grow(child, path + (a,))
        return node

    tree = SearchTree(state.game, params, grow(state, ()))
    minimax_backup(tree)
    return tree


def minimax_backup(tree: SearchTree) -> None:
    game = tree.game

    def back(node: TraceNode, player: int) -> float:
        if node.outcome is not None:
            node.value, node.best = node.outcome.value_for(player), None
        elif not node.expanded:
            node.value = (node.moves[0][1] + 0.5) / P.N_BUCKETS
            node.best = None
        else:
            scored = [(1.0 - back(node.children[a], 1 - player), -game.parse_action(a), a)
                      for a in node.expanded]
            v, _, a = max(scored)
            node.value, node.best = v, a
        return node.value

    root_player = int(tree.root.state.split(" ", 1)[0])
    back(tree.root, root_player)


# -- text form ---------------------------------------------------------------------


def linearize(tree: SearchTree) -> Trace:
    if tree.root.value is None:
        minimax_backup(tree)
    p = tree.params
    out = [f"%search {tree.game.header} depth {p.depth} breadth {p.breadth}"]

    def emit(node: TraceNode):
        tag = f"[{node.label}]"
        out.append(f"{tag} state {node.state}")
        if node.outcome is not None:
            out.append(f"{tag} eval outcome {node.outcome.result_token}")
            out.append(f"{tag} value {value_token(node.value)}")
            return
        out.append(f"{tag} eval " + " ".join(f"{a}:{P.bucket_token(b)}" for a, b in node.moves))
        if not node.expanded:
            out.append(f"{tag} value {value_token(node.value)}")
            return
        out.append(f"{tag} expand " + " ".join(node.expanded))
        for a in node.expanded:
            emit(node.children[a])
        out.append(f"{tag} value {value_token(node.value)} best {node.best}")

    emit(tree.root)
    out.append(f"%best_action {tree.root.best}")
    return Trace("\n".join(out) + "\n", p, tree.root.best)


_HEAD_RE = re.compile(r"%search (.+) depth (\d+) breadth (\d+)")
_LINE_RE = re.compile(r"\[([^\]]+)\] (state|eval|expand|value) (.*)")
_VALUE_RE = re.compile(r"(\S+)(?: best (\S+))?")


class _Reader:
    def __init__(self, text: str):
        if not text.endswith("\n"):
            raise ParseError("trace must end with a newline", len(text), "bad_trace", "root")
        self.lines = text[:-1].split("\n")
        self.i = 0

    def fail(self, msg: str, path: str):
        raise ParseError(f"line {self.i + 1}: {msg}", self.i, "bad_trace", path)

    def expect(self, label: str, kind: str) -> str:
        if self.i >= len(self.lines):
            self.fail(f"trace ends before {kind} line", label)
        m = _LINE_RE.fullmatch(self.lines[self.i])
        if not m or m.group(1) != label or m.group(2) != kind:
            self.fail(f"expected '[{label}] {kind} ...'", label)
        self.i += 1
        return m.group(3)

    def peek_kind(self, label: str) -> str | None:
        if self.i >= len(self.lines):
            return None
        m = _LINE_RE.fullmatch(self.lines[self.i])
        return m.group(2) if m and m.group(1) == label else None


def parse_trace(text: str) -> SearchTree:
    rd = _Reader(text)
    m = _HEAD_RE.fullmatch(rd.lines[0]) if rd.lines else None
    if not m:
        rd.fail("bad %search header", "root")
    try:
        game = GameId.parse_header(m.group(1))
        d, b = int(m.group(2)), int(m.group(3))
        params = TraceParams(d, b) if (d, b) != (MAX_DEPTH, MAX_BREADTH) else TraceParams.make_master()
    except (ValueError, ParseError) as exc:
        rd.fail(str(exc), "root")
    rd.i = 1

    def node(path: tuple) -> TraceNode:
        label = "/".join(("root",) + path)
        st = rd.expect(label, "state")
        try:
            parse_compact(game, st)
        except ParseError as exc:
            rd.i -= 1
            rd.fail(f"bad state: {exc}", label)
        n = TraceNode(path, st)
        ev = rd.expect(label, "eval")
        if ev.startswith("outcome "):
            try:
                n.outcome = Outcome.from_result_token(ev[len("outcome "):])
            except ValueError:
                rd.i -= 1
                rd.fail("bad outcome", label)
        else:
            n.moves = []
            for item in ev.split(" "):
                a, sep, tok = item.partition(":")
                try:
                    game.parse_action(a)
                    n.moves.append((a, P.token_bucket(tok)))
                except (ValueError, ParseError):
                    rd.i -= 1
                    rd.fail(f"bad evaluation entry {item!r}", label)
            if len({a for a, _ in n.moves}) != len(n.moves):
                rd.i -= 1
                rd.fail("repeated move in evaluation", label)
            if rd.peek_kind(label) == "expand":
                n.expanded = rd.expect(label, "expand").split(" ")
                listed = {a for a, _ in n.moves}
                if len(set(n.expanded)) != len(n.expanded) or not set(n.expanded) <= listed:
                    rd.i -= 1
                    rd.fail("expanded moves must be distinct evaluated moves", label)
                for a in n.expanded:
                    n.children[a] = node(path + (a,))
        vm = _VALUE_RE.fullmatch(rd.expect(label, "value"))
        try:
            if not vm:
                raise ValueError("bad value line")
            n.value = token_value(vm.group(1))
        except (ValueError, ParseError) as exc:
            rd.i -= 1
            rd.fail(str(exc), label)
        n.best = vm.group(2)
        if (n.best is not None) != bool(n.expanded) or (n.best and n.best not in n.expanded):
            rd.i -= 1
            rd.fail("'best' must name an expanded child exactly when children exist", label)
        return n

    root = node(())
    if rd.i >= len(rd.lines) or rd.lines[rd.i] != f"%best_action {root.best}":
        rd.fail("missing or inconsistent %best_action line", "root")
    if rd.i + 1 != len(rd.lines):
        rd.i += 1
        rd.fail("trailing lines after %best_action", "root")
    return SearchTree(game, params, root)


# -- checks ------------------------------------------------------------------------


def verify_shape(trace: Trace | SearchTree | str, legal_counts: dict | None = None) -> bool:
    """Each live node above the depth bound expands ``min(breadth, legal)`` children.

    ``legal_counts`` maps node labels (``root/3/1``) to true legal-move counts;
    by default the evaluation line's length stands in for it.
    """
    tree = _as_tree(trace)
    p = tree.params
    for n in tree.nodes():
        if n.depth > p.depth:
            return False
        if n.outcome is not None:
            if n.expanded:
                return False
            continue
        legal = len(n.moves) if legal_counts is None else legal_counts.get(n.label, len(n.moves))
        want = min(p.breadth, legal) if n.depth < p.depth else 0
        if len(n.expanded) != want:
            return False
    return True


def check_backups(trace: Trace | SearchTree | str) -> str | None:
    """Label of the first node whose recorded value or best move is wrong, else None."""
    tree = _as_tree(trace)
    recorded = [(n.label, n.value, n.best) for n in tree.nodes()]
    fresh = parse_trace(linearize(tree).text) if isinstance(trace, SearchTree) else _as_tree(trace)
    minimax_backup(fresh)
    for (label, v, b), n in zip(recorded, fresh.nodes()):
        if (v, b) != (n.value, n.best):
            return label
    return None


def verify_backups(trace: Trace | SearchTree | str) -> bool:
    return check_backups(trace) is None


def _as_tree(trace) -> SearchTree:
    if isinstance(trace, SearchTree):
        return trace
    return parse_trace(trace.text if isinstance(trace, Trace) else trace)


def subsample_tree(master: SearchTree, params: TraceParams, seed: int = 0) -> SearchTree:
    """Cut a master tree down to ``params``: best children first, then depth.

    Ranking is deterministic, so ``seed`` only matters to callers that
    shuffle which positions get which parameters.
    """
    del seed
    if params.depth > master.params.depth or params.breadth > master.params.breadth:
        raise ValueError("cannot subsample beyond the master tree")

    def cut(n: TraceNode) -> TraceNode:
        keep = n.expanded[: params.breadth] if n.depth < params.depth else []
        return TraceNode(n.path, n.state, None if n.moves is None else list(n.moves), n.outcome,
                         list(keep), {a: cut(n.children[a]) for a in keep})

    tree = SearchTree(master.game, params, cut(master.root))
    minimax_backup(tree)
    return tree


# -- corpus ------------------------------------------------------------------------


def token_count(text: str) -> int:
    return len(text.split())


def trace_record(trace: Trace) -> dict:
    head, root_state, rest = trace.text.split("\n", 2)
    prompt = f"{head}\n{root_state}\n"
    return {"kind": "search", "prompt": prompt, "target": rest, "depth": trace.params.depth,
            "breadth": trace.params.breadth, "token_count": token_count(trace.text)}


def corpus_stats(traces) -> dict:
    """Token counts keyed by ``(depth, breadth)``: count, mean, min and max."""
    groups: dict = {}
    for t in traces:
        rec = t if isinstance(t, dict) else trace_record(t)
        groups.setdefault((rec["depth"], rec["breadth"]), []).append(rec["token_count"])
    if not groups:
        raise ValueError("empty corpus")
    return {key: {"count": len(v), "mean": float(np.mean(v)), "min": int(min(v)),
                  "max": int(max(v))} for key, v in sorted(groups.items())}


def mix_corpus(mav_records: list, search_records: list, n: int, seed: int,
               mav_share: float = MAV_SHARE) -> list:
    """``n`` records, ``round(n * mav_share)`` MAV and the rest search, shuffled."""
    if not mav_records or not search_records:
        raise ValueError("both sources must be non-empty")
    rng = np.random.default_rng(seed)
    n_mav = int(round(n * mav_share))

    def draw(pool, k):
        idx = rng.choice(len(pool), size=k, replace=k > len(pool))
        return [pool[i] for i in idx]

    mixed = draw(mav_records, n_mav) + draw(search_records, n - n_mav)
    order = rng.permutation(len(mixed))
    return [mixed[i] for i in order]


def mav_record(example) -> dict:
    return {"kind": "mav", "prompt": example.prompt, "target": example.target, "depth": 0,
            "breadth": 0, "token_count": token_count(example.prompt + example.target)}


def trace_corpus(positions, oracle: Oracle, seed: int, params_grid=None) -> list:
    """One trace per position, parameters drawn per position from the grid."""
    grid = params_grid or TraceParams.grid()
    master = TraceParams.make_master(max(p.depth for p in grid), max(p.breadth for p in grid))
    out = []
    for i, s in enumerate(positions):
        rng = np.random.default_rng([seed, i])
        params = grid[int(rng.integers(len(grid)))]
        tree = subsample_tree(build_tree(s, master, oracle), params)
        out.append(linearize(tree))
    return out
