"""Batched asynchronous MCTS with static or dynamic virtual counts.

The coordinator queues up to ``batch_size`` descents, marking the edges on
each path with virtual counts so later descents in the same batch spread
out, then waits (up to ``timeout``) for the oracle calls running in a thread
pool. Results are folded back in ticket order, so the outcome does not depend
on which thread finishes first. Only the coordinator touches the tree.
"""

from __future__ import annotations

import concurrent.futures as cf
import itertools
import time
from dataclasses import dataclass, field

from .errors import ContractViolation, IllegalMove, ParseError
from .game import decode_state
from .oracle import Oracle
from .search import (Evaluation, Node, SearchConfig, SearchStats, _LazyRng, backprop, descend,
                     evaluate_child, evaluate_root, final_move_selection, install, poison)

STATIC, DYNAMIC = "static", "dynamic"
ATTEMPT_FACTOR = 3


def n_max_for(simulations: int) -> int:
    if simulations <= 500:
        return 8
    return 16 if simulations <= 1000 else 32


@dataclass
class AsyncConfig:
    base: SearchConfig = field(default_factory=SearchConfig)
    batch_size: int = 16
    timeout: float | None = 60.0  # None waits forever
    virtual_mode: str = DYNAMIC
    n_c: int = 10
    n_min: int = 2
    n_max: int | None = None  # None picks from the simulation count

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.virtual_mode not in (STATIC, DYNAMIC):
            raise ValueError("virtual_mode must be 'static' or 'dynamic'")
        if self.timeout is not None and self.timeout <= 0:
            raise ValueError("timeout must be positive")

    @property
    def resolved_n_max(self) -> int:
        return self.n_max if self.n_max is not None else n_max_for(self.base.simulations)

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "timeout": self.timeout,
                "virtual_mode": self.virtual_mode, "n_c": self.n_c, "n_min": self.n_min,
                "n_max": self.resolved_n_max, **self.base.to_dict()}


def dynamic_virtual_count(depth_child: int, depth_leaf: int, n_min: int, n_max: int) -> int:
    """``n_max`` at the leaf, halved per step toward the root, never below ``n_min``."""
    if depth_child > depth_leaf:
        raise ContractViolation("edge lies below the leaf")
    return max(n_min, (n_max << depth_child) >> depth_leaf)


def path_edges(node: Node) -> list[Node]:
    """Child endpoints of the edges from the root down to ``node`` (root first)."""
    out = []
    while node.parent is not None:
        out.append(node)
        node = node.parent
    out.reverse()
    return out


def virtual_amounts(path: list[Node], config: AsyncConfig) -> list[int]:
    if config.virtual_mode == STATIC:
        return [config.n_c] * len(path)
    leaf = len(path)
    n_max = config.resolved_n_max
    return [dynamic_virtual_count(d, leaf, config.n_min, n_max) for d in range(1, leaf + 1)]


def apply_virtual_counts(path: list[Node], amounts: list[int]) -> None:
    for node, n in zip(path, amounts, strict=True):
        node.virtual += n


def remove_virtual_counts(path: list[Node], amounts: list[int]) -> None:
    for node, n in zip(path, amounts, strict=True):
        if node.virtual < n:
            raise ContractViolation("removing virtual counts that were never applied")
    for node, n in zip(path, amounts):
        node.virtual -= n


@dataclass
class PendingEvaluation:
    ticket: int
    parent: Node
    action: str
    path: list
    amounts: list
    issued_at: float
    future: cf.Future
    stats: SearchStats


@dataclass
class AsyncStats(SearchStats):
    batches: int = 0
    timeouts: int = 0
    collisions: int = 0
    residual_virtual: int = 0
    batch_seconds: list = field(default_factory=list)

    def to_record(self) -> dict:
        rec = super().to_record()
        lat = self.batch_seconds
        rec.update(batches=self.batches, timeouts=self.timeouts, collisions=self.collisions,
                   residual_virtual=self.residual_virtual,
                   mean_batch_seconds=round(sum(lat) / len(lat), 6) if lat else 0.0)
        return rec


def residual_virtual(root: Node) -> int:
    return sum(n.virtual for n in root.iter_nodes())


def _run(parent, action, oracle, game, base, local):
    return evaluate_child(parent, action, oracle, game, base, local)


def _collect(p: PendingEvaluation, done: set, base: SearchConfig, stats: AsyncStats,
             tau: float) -> bool:
    remove_virtual_counts(p.path, p.amounts)
    stats.oracle_calls += p.stats.oracle_calls
    if p.future not in done:
        stats.timeouts += 1
        p.future.cancel()
        return False
    child = p.path[-1]
    try:
        ev = p.future.result()
    except (IllegalMove, ValueError) as exc:
        ev = Evaluation(error=ParseError(str(exc), 0, "bad_move_list"))
    except Exception:
        stats.transport_failures += 1
        return False
    if child.state_text is not None or child.poisoned:
        # an earlier ticket already settled this leaf
        return False
    if ev.error is not None:
        stats.parse_failures += 1
        poison(child, ev)
        return False
    q = install(child, ev, base, tau)
    backprop(child, q)
    stats.max_depth = max(stats.max_depth, len(p.path))
    return True


def async_search(root_state, oracle: Oracle, config: AsyncConfig, root: Node | None = None,
                 move_index: int = 0) -> tuple[int, AsyncStats]:
    t_start = time.perf_counter()
    if isinstance(root_state, str):
        root_state = decode_state(root_state)
    base = config.base
    game = root_state.game
    stats = AsyncStats()
    if root is None or not root.expanded:
        root = evaluate_root(root_state, oracle, base, stats, move_index)
    elif root.game_state is None:
        root.game_state = root_state
    tau = base.tau_at(move_index)
    target, cap = base.simulations, ATTEMPT_FACTOR * base.simulations
    tickets = itertools.count()
    pool = cf.ThreadPoolExecutor(max_workers=config.batch_size, thread_name_prefix="mav-eval")
    try:
        for batch in itertools.count():
            if stats.simulations >= target or stats.attempts >= cap:
                break
            if all(c.poisoned for c in root.children.values()):
                break
            t_batch = time.perf_counter()
            stats.batches += 1
            pending: list[PendingEvaluation] = []
            queued: set[int] = set()
            room = min(config.batch_size, target - stats.simulations, cap - stats.attempts)
            for slot in range(room):
                stats.attempts += 1
                node, action = descend(root, base, _LazyRng([base.seed, batch, slot]))
                if action is None:
                    if node.is_terminal:
                        backprop(node, node.terminal_value)
                        stats.simulations += 1
                        stats.max_depth = max(stats.max_depth, node.depth)
                    continue
                child = node.children[action]
                if id(child) in queued:
                    stats.collisions += 1
                    continue
                queued.add(id(child))
                path = path_edges(child)
                amounts = virtual_amounts(path, config)
                apply_virtual_counts(path, amounts)
                local = SearchStats()
                fut = pool.submit(_run, node, action, oracle, game, base, local)
                pending.append(PendingEvaluation(next(tickets), node, action, path, amounts,
                                                 time.perf_counter(), fut, local))
            if pending:
                done, _ = cf.wait([p.future for p in pending], timeout=config.timeout)
                for p in sorted(pending, key=lambda p: p.ticket):
                    if _collect(p, done, base, stats, tau):
                        stats.simulations += 1
            stats.batch_seconds.append(time.perf_counter() - t_batch)
    finally:
        pool.shutdown(wait=False, cancel_futures=True)
    stats.residual_virtual = residual_virtual(root)
    action = final_move_selection(root, game)
    stats.chosen = action
    stats.visits = {a: c.visits for a, c in root.children.items()}
    stats.elapsed = time.perf_counter() - t_start
    stats.root = root
    return game.parse_action(action), stats
