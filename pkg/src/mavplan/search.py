"""External Monte-Carlo tree search driven entirely through oracle text.

Each node stores its cumulative value from the perspective of the player to
move at that node, and the visit count of the edge leading into it. A
parent reads a child as ``(visits - value_sum) / (visits + virtual)``, i.e.
one minus the child's mean with pending virtual visits counted as losses.

In engine-backed mode transitions and legality come from ``game``; in
state-tracking mode the oracle infers every child state from the parent
state and action, and a response that fails to parse poisons the node.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import protocol as P
from .errors import ContractViolation, IllegalMove, ParseError
from .game import GameId, GameState, Outcome, apply, decode_state, encode_state, legal_actions
from .oracle import Oracle

NEG_INF = float("-inf")


@dataclass
class SearchConfig:
    simulations: int = 100
    k: int = 5
    epsilon: float = 0.05
    tau: float = 0.1
    c_puct: float = 1.5
    scoring: str = "mean"
    state_tracking: bool = False
    reuse_tree: bool = False
    seed: int = 0
    # >1 re-asks a failed root question with an equivalent top_k
    root_attempts: int = 1
    tau_schedule: Callable[[int], float] | None = None

    def __post_init__(self):
        if self.simulations < 1 or self.k < 1:
            raise ValueError("simulations and k must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if self.tau <= 0 or self.c_puct <= 0:
            raise ValueError("tau and c_puct must be positive")
        if self.scoring not in P.SCORERS:
            raise ValueError(f"scoring must be one of {sorted(P.SCORERS)}")

    def tau_at(self, move_index: int) -> float:
        return self.tau if self.tau_schedule is None else self.tau_schedule(move_index)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "simulations", "k", "epsilon", "tau", "c_puct", "scoring", "state_tracking",
            "reuse_tree", "seed", "root_attempts")}
        return d


class Node:
    __slots__ = ("player", "state_text", "game_state", "legal", "value_sum", "visits",
                 "virtual", "prior", "children", "poisoned", "parent", "action",
                 "terminal_value", "failed_text")

    def __init__(self, player: int, parent: "Node | None" = None, action: str | None = None,
                 prior: float = 0.0):
        self.player = player
        self.parent = parent
        self.action = action
        self.prior = prior
        self.state_text: str | None = None
        self.game_state: GameState | None = None
        self.legal: list[str] | None = None
        self.value_sum = 0.0
        self.visits = 0
        self.virtual = 0
        self.children: dict[str, Node] = {}
        self.poisoned = False
        self.terminal_value: float | None = None
        self.failed_text: str | None = None

    @property
    def is_terminal(self) -> bool:
        return self.terminal_value is not None

    @property
    def expanded(self) -> bool:
        return bool(self.children)

    @property
    def depth(self) -> int:
        d, n = 0, self
        while n.parent is not None:
            d += 1
            n = n.parent
        return d

    def mean(self) -> float:
        """Mean value from this node's own perspective (0 when unvisited)."""
        return self.value_sum / self.visits if self.visits else 0.0

    def value_for_parent(self) -> float:
        n = self.visits + self.virtual
        return (self.visits - self.value_sum) / n if n else 0.0

    def iter_nodes(self):
        stack = [self]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(n.children.values())

    def __repr__(self):
        return (f"Node(action={self.action}, player={self.player}, N={self.visits}, "
                f"W={self.value_sum:.3f}, P={self.prior:.3f}, poisoned={self.poisoned})")


@dataclass
class SearchStats:
    oracle_calls: int = 0
    parse_failures: int = 0
    root_failures: int = 0  # the part of parse_failures spent on root retries
    transport_failures: int = 0
    simulations: int = 0
    attempts: int = 0
    max_depth: int = 0
    visits: dict = field(default_factory=dict)
    chosen: str | None = None
    elapsed: float = 0.0
    root: Node | None = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        return {
            "oracle_calls": self.oracle_calls,
            "parse_failures": self.parse_failures,
            "root_failures": self.root_failures,
            "transport_failures": self.transport_failures,
            "simulations": self.simulations,
            "attempts": self.attempts,
            "max_depth": self.max_depth,
            "visits": dict(self.visits),
            "chosen": self.chosen,
            "elapsed": round(self.elapsed, 6),
        }


class RootEvaluationError(RuntimeError):
    pass


# -- prior ---------------------------------------------------------------------


def compute_prior(values, legal, k: int, epsilon: float, tau: float) -> dict:
    """Epsilon-mix of a temperature softmax over the top-k values and a uniform policy.

    ``values`` are ``(action, win_percent)`` pairs covering ``legal`` exactly.
    Every action tied with the k-th best value joins the greedy set.
    """
    if not legal:
        raise ContractViolation("prior over an empty action list")
    if tau <= 0:
        raise ContractViolation("temperature must be positive")
    vals = dict(values)
    if set(vals) != set(legal) or len(vals) != len(legal):
        raise ContractViolation("values must cover the legal actions exactly")
    win = np.array([vals[a] / 100.0 for a in legal])
    kth = np.sort(win)[::-1][min(k, len(legal)) - 1]
    greedy = win >= kth
    logits = np.where(greedy, win / tau, -np.inf)
    logits -= logits[greedy].max()
    g = np.exp(logits)
    g /= g.sum()
    p = (1.0 - epsilon) * g + epsilon / len(legal)
    return dict(zip(legal, p.tolist()))


# -- tree primitives -------------------------------------------------------------


def expand(parent: Node, prior: dict) -> None:
    if parent.legal is None or not parent.legal:
        raise ContractViolation("expand needs legal actions")
    if parent.children:
        raise ContractViolation("node already expanded")
    for a in parent.legal:
        parent.children[a] = Node(1 - parent.player, parent, a, prior[a])


class _LazyRng:
    """Builds the generator only if a tie actually has to be broken."""

    __slots__ = ("seed", "_rng")

    def __init__(self, seed):
        self.seed = seed
        self._rng = None

    def integers(self, n):
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)
        return int(self._rng.integers(n))


def select_puct(parent: Node, c_puct: float, rng) -> str | None:
    """PUCT choice among non-poisoned children; None when every child is poisoned."""
    kids = [c for c in parent.children.values() if not c.poisoned]
    if not kids:
        return None
    total = sum(c.visits + c.virtual for c in parent.children.values())
    # the exploration term vanishes at a fresh node without the floor
    sqrt_n = math.sqrt(max(total, 1))
    best, ties = NEG_INF, []
    for c in kids:
        s = c.value_for_parent() + c_puct * c.prior * sqrt_n / (1 + c.visits + c.virtual)
        if s > best:
            best, ties = s, [c.action]
        elif s == best:
            ties.append(c.action)
    if len(ties) == 1:
        return ties[0]
    return ties[rng.integers(len(ties))]


def backprop(node: Node, q: float) -> None:
    """Add ``q`` (from ``node``'s perspective) up to, not including, the root."""
    v = q
    while node.parent is not None:
        node.value_sum += v
        node.visits += 1
        v = 1.0 - v
        node = node.parent


def final_move_selection(root: Node, game: GameId | None = None) -> str:
    """Most visited child; ties by value from the root's side, then canonical order."""
    kids = list(root.children.values())
    if not kids:
        raise ContractViolation("root has no children")
    live = [c for c in kids if not c.poisoned]
    visited = [c for c in live if c.visits > 0]
    if not visited:
        if len(live) == len(kids):
            raise ContractViolation("no simulation has completed")
        if not live:
            live = kids
        return max(live, key=lambda c: (c.prior, -_order_key(game, c.action))).action

    def key(c):
        return (c.visits, 1.0 - c.mean(), -_order_key(game, c.action))

    return max(visited, key=key).action


def _order_key(game: GameId | None, action: str) -> int:
    if game is None:
        return 0
    try:
        return game.parse_action(action)
    except ValueError:
        return 1 << 30


def reuse_subtree(old_root: Node | None, our_move: str, their_move: str) -> Node | None:
    """Grandchild reached by the two moves, detached as a new root; None if unusable."""
    if old_root is None:
        return None
    child = old_root.children.get(our_move)
    if child is None:
        return None
    grand = child.children.get(their_move)
    if grand is None or grand.poisoned or grand.is_terminal or not grand.expanded:
        return None
    grand.parent = None
    grand.action = None
    return grand


# -- oracle plumbing ---------------------------------------------------------------


@dataclass
class Evaluation:
    """Parsed oracle answer for one node."""
    state_text: str | None = None
    game_state: GameState | None = None
    terminal: Outcome | None = None
    legal: list | None = None
    values: list | None = None  # (action, win percent)
    error: ParseError | None = None
    raw: str | None = None


def request_for(node: Node, action: str | None, game: GameId, config: SearchConfig,
                attempt: int = 0) -> P.MavRequest | None:
    """Question to ask about the child of ``node`` via ``action`` (or ``node`` itself)."""
    top_k = P.ALL if attempt == 0 else P.N_BUCKETS + attempt
    if action is None:
        return P.MavRequest(game, state=node.state_text, top_k=top_k)
    if config.state_tracking:
        return P.MavRequest(game, prev_state=node.state_text, prev_action=action, top_k=top_k,
                            want_state_echo=True)
    return None


def interpret(raw: str, req: P.MavRequest, config: SearchConfig,
              known: GameState | None) -> Evaluation:
    """Turn a completion into an Evaluation; parse or cross-check failures become ``error``."""
    ev = Evaluation(raw=raw)
    try:
        resp = P.parse_response(raw, req)
        if resp.inferred_state is not None:
            ev.state_text = resp.inferred_state
        if resp.outcome is not None:
            ev.terminal = resp.outcome
            return ev
        ev.values = [(a, P.score(d, config.scoring)) for a, d in resp.move_values]
        ev.legal = [a for a, _ in ev.values]
        if known is not None:
            g = known.game
            truth = [g.action_text(a) for a in legal_actions(known)]
            if sorted(ev.legal) != sorted(truth):
                raise ParseError("listed moves disagree with the engine's legal moves", 0,
                                 "bad_move_list")
            order = {a: i for i, a in enumerate(truth)}
            ev.legal.sort(key=order.__getitem__)
    except ParseError as exc:
        ev.error = exc
    return ev


def evaluate_child(node: Node, action: str, oracle: Oracle, game: GameId, config: SearchConfig,
                   stats: SearchStats) -> Evaluation:
    """Ask about the state reached from ``node`` by ``action``."""
    if config.state_tracking:
        req = request_for(node, action, game, config)
        stats.oracle_calls += 1
        raw = oracle.evaluate(P.render_request(req))
        return interpret(raw, req, config, None)
    child_state = apply(node.game_state, game.parse_action(action))
    if child_state.outcome is not Outcome.ONGOING:
        return Evaluation(state_text=encode_state(child_state), game_state=child_state,
                          terminal=child_state.outcome)
    text = encode_state(child_state)
    req = P.MavRequest(game, state=text, top_k=P.ALL)
    stats.oracle_calls += 1
    raw = oracle.evaluate(P.render_request(req))
    ev = interpret(raw, req, config, child_state)
    ev.state_text, ev.game_state = text, child_state
    return ev


def install(child: Node, ev: Evaluation, config: SearchConfig, tau: float) -> float:
    """Store a successful evaluation on ``child``; returns the value to back up."""
    child.state_text = ev.state_text
    child.game_state = ev.game_state
    if ev.terminal is not None:
        child.legal = []
        child.terminal_value = ev.terminal.value_for(child.player)
        return child.terminal_value
    child.legal = list(ev.legal)
    expand(child, compute_prior(ev.values, child.legal, config.k, config.epsilon, tau))
    return max(v for _, v in ev.values) / 100.0


def poison(node: Node, ev: Evaluation | None = None) -> None:
    node.poisoned = True
    if ev is not None:
        node.failed_text = ev.raw


def descend(root: Node, config: SearchConfig, rng) -> tuple[Node, str | None]:
    """Walk down by PUCT to ``(parent, action)`` of the first unevaluated child.

    Returns ``(terminal_node, None)`` when the walk ends on a known terminal
    node and ``(dead_node, None)`` with the node poisoned when every child
    of an interior node is poisoned.
    """
    node = root
    while True:
        if node.is_terminal:
            return node, None
        a = select_puct(node, config.c_puct, rng)
        if a is None:
            if node is not root:
                poison(node)
            return node, None
        child = node.children[a]
        if child.state_text is None:
            return node, a
        node = child


# -- search ----------------------------------------------------------------------


def evaluate_root(root_state, oracle: Oracle, config: SearchConfig,
                  stats: SearchStats, move_index: int = 0) -> Node:
    if isinstance(root_state, str):
        root_state = decode_state(root_state)
    if root_state.outcome is not Outcome.ONGOING:
        raise ContractViolation("search needs a non-terminal root")
    game = root_state.game
    root = Node(root_state.to_move)
    root.state_text = encode_state(root_state)
    root.game_state = root_state
    # the caller holds the real root position, so its move list is always checked
    known = root_state
    last = None
    for attempt in range(max(1, config.root_attempts)):
        req = request_for(root, None, game, config, attempt)
        stats.oracle_calls += 1
        ev = interpret(oracle.evaluate(P.render_request(req)), req, config, known)
        if ev.error is None and ev.terminal is None:
            root.legal = ev.legal
            expand(root, compute_prior(ev.values, root.legal, config.k, config.epsilon,
                                       config.tau_at(move_index)))
            return root
        stats.parse_failures += ev.error is not None
        stats.root_failures += ev.error is not None
        last = ev
    reason = last.error if last.error is not None else "oracle called the root terminal"
    raise RootEvaluationError(f"root evaluation failed: {reason}")


def simulate(root: Node, oracle: Oracle, config: SearchConfig, stats: SearchStats, rng,
             game: GameId, tau: float) -> bool:
    """One simulation; True if a value was backed up."""
    node, action = descend(root, config, rng)
    if action is None:
        if node.is_terminal:
            backprop(node, node.terminal_value)
            stats.max_depth = max(stats.max_depth, node.depth)
            return True
        return False
    child = node.children[action]
    try:
        ev = evaluate_child(node, action, oracle, game, config, stats)
    except (IllegalMove, ValueError) as exc:
        ev = Evaluation(error=ParseError(str(exc), 0, "bad_move_list"))
    except Exception:
        stats.transport_failures += 1
        return False
    if ev.error is not None:
        stats.parse_failures += 1
        poison(child, ev)
        return False
    q = install(child, ev, config, tau)
    backprop(child, q)
    stats.max_depth = max(stats.max_depth, child.depth)
    return True


def search(root_state, oracle: Oracle, config: SearchConfig, root: Node | None = None,
           move_index: int = 0) -> tuple[int, SearchStats]:
    """Run ``config.simulations`` simulations and pick the robust child.

    Pass a previously built ``root`` (see ``reuse_subtree``) to keep its
    statistics; it then needs no fresh root evaluation.
    """
    t0 = time.perf_counter()
    if isinstance(root_state, str):
        root_state = decode_state(root_state)
    game = root_state.game
    stats = SearchStats()
    if root is None or not root.expanded:
        root = evaluate_root(root_state, oracle, config, stats, move_index)
    elif root.game_state is None:
        root.game_state = root_state
    tau = config.tau_at(move_index)
    for m in range(config.simulations):
        rng = _LazyRng([config.seed, m, 0])
        stats.attempts += 1
        if simulate(root, oracle, config, stats, rng, game, tau):
            stats.simulations += 1
        if all(c.poisoned for c in root.children.values()):
            break
    action = final_move_selection(root, game)
    stats.chosen = action
    stats.visits = {a: c.visits for a, c in root.children.items()}
    stats.elapsed = time.perf_counter() - t0
    stats.root = root
    return game.parse_action(action), stats


# -- baseline ----------------------------------------------------------------------


def basic_mcts(state: GameState, simulations: int = 100, seed: int = 0,
               c_puct: float = 1.5) -> int:
    """Engine-driven MCTS with a uniform prior and random-rollout values."""
    rng = np.random.default_rng(seed)
    root = Node(state.to_move)
    root.game_state = state
    root.state_text = ""

    def open_node(n: Node):
        acts = legal_actions(n.game_state)
        n.legal = [str(a) for a in acts]
        for a in acts:
            c = Node(1 - n.player, n, str(a), 1.0 / len(acts))
            n.children[str(a)] = c

    open_node(root)
    for _ in range(simulations):
        node = root
        while node.children:
            a = select_puct(node, c_puct, rng)
            node = node.children[a]
            if node.game_state is None:
                node.game_state = apply(node.parent.game_state, int(a))
                break
        s = node.game_state
        if s.outcome is Outcome.ONGOING:
            if not node.children:
                open_node(node)
            while s.outcome is Outcome.ONGOING:
                acts = legal_actions(s)
                s = apply(s, acts[int(rng.integers(len(acts)))])
        backprop(node, s.outcome.value_for(node.player))
    best = max(root.children.values(), key=lambda c: (c.visits, 1.0 - c.mean(), -int(c.action)))
    return int(best.action)
