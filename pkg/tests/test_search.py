import math

import numpy as np
import pytest

from mavplan import protocol as P
from mavplan.errors import ContractViolation
from mavplan.game import GameId, apply, encode_state, legal_actions, replay
from mavplan.oracle import FaultSpec, FaultyOracle, ScriptedOracle, generate_positions
from mavplan.search import (Node, RootEvaluationError, SearchConfig, backprop, basic_mcts,
                            compute_prior, expand, final_move_selection, reuse_subtree, search,
                            select_puct)
from mavplan.solver import solve

import oracles

C4 = GameId.connect_four(4, 4, 4)
C4_5 = GameId.connect_four(5, 5, 4)
HEX3 = GameId.hex(3)


class FixedRng:
    def __init__(self, pick=0):
        self.pick = pick
        self.calls = 0

    def integers(self, n):
        self.calls += 1
        return self.pick % n


def make_parent(priors, player=0):
    root = Node(player)
    root.legal = [str(i) for i in range(len(priors))]
    expand(root, dict(zip(root.legal, priors)))
    return root


# -- prior ----------------------------------------------------------------------------------


def test_prior_top1_example():
    p = compute_prior([("0", 90.0), ("1", 40.0), ("2", 30.0), ("3", 10.0)],
                      ["0", "1", "2", "3"], k=1, epsilon=0.05, tau=0.1)
    assert p["0"] == pytest.approx(0.9625, abs=1e-12)
    for a in "123":
        assert p[a] == pytest.approx(0.0125, abs=1e-12)


def test_prior_uniform_cases():
    legal = ["0", "1", "2"]
    vals = [("0", 99.0), ("1", 50.0), ("2", 1.0)]
    assert all(v == pytest.approx(1 / 3) for v in compute_prior(vals, legal, 2, 1.0, 0.1).values())
    flat = [(a, 42.0) for a in legal]
    assert all(v == pytest.approx(1 / 3) for v in compute_prior(flat, legal, 3, 0.05, 0.1).values())


def test_prior_softmax_matches_hand_computation():
    legal = ["a", "b", "c"]
    vals = [("a", 80.0), ("b", 60.0), ("c", 20.0)]
    p = compute_prior(vals, legal, k=2, epsilon=0.1, tau=0.5)
    ea, eb = math.exp(0.8 / 0.5), math.exp(0.6 / 0.5)
    assert p["a"] == pytest.approx(0.9 * ea / (ea + eb) + 0.1 / 3)
    assert p["b"] == pytest.approx(0.9 * eb / (ea + eb) + 0.1 / 3)
    assert p["c"] == pytest.approx(0.1 / 3)


def test_prior_ties_at_kth_value_all_included():
    legal = ["0", "1", "2", "3"]
    vals = [("0", 70.0), ("1", 50.0), ("2", 50.0), ("3", 10.0)]
    p = compute_prior(vals, legal, k=2, epsilon=0.0, tau=0.1)
    assert p["1"] == p["2"] > 0 and p["3"] == 0
    # permuting how values are listed changes nothing
    assert compute_prior(vals[::-1], legal, 2, 0.0, 0.1) == p


def test_prior_support_and_normalisation():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 10))
        legal = [str(i) for i in range(n)]
        vals = list(zip(legal, (rng.random(n) * 100).tolist()))
        eps = float(rng.random())
        p = compute_prior(vals, legal, int(rng.integers(1, 8)), eps, float(rng.uniform(0.01, 2)))
        assert abs(sum(p.values()) - 1) <= 1e-9
        assert min(p.values()) >= eps / n - 1e-15


def test_prior_contract():
    with pytest.raises(ContractViolation):
        compute_prior([], [], 5, 0.05, 0.1)
    with pytest.raises(ContractViolation):
        compute_prior([("0", 50.0)], ["0", "1"], 5, 0.05, 0.1)


# -- expand / select / backprop ------------------------------------------------------------


def test_expand():
    root = make_parent([1 / 7] * 7)
    assert len(root.children) == 7
    assert all(c.visits == 0 and c.state_text is None and c.player == 1
               for c in root.children.values())
    assert sum(c.prior for c in root.children.values()) == pytest.approx(1)
    with pytest.raises(ContractViolation):
        expand(root, {a: 1 / 7 for a in root.legal})


def test_player_alternation():
    root = make_parent([1.0])
    child = root.children["0"]
    child.legal = ["0"]
    expand(child, {"0": 1.0})
    assert (root.player, child.player, child.children["0"].player) == (0, 1, 0)


def test_select_examples():
    assert select_puct(make_parent([1.0]), 1.5, FixedRng()) == "0"
    assert select_puct(make_parent([0.2, 0.5, 0.3]), 1.5, FixedRng()) == "1"
    # both children worth 0.8 to the parent, one visited once and one three times
    root = make_parent([0.5, 0.5])
    for a, n in (("0", 1), ("1", 3)):
        c = root.children[a]
        c.visits, c.value_sum = n, 0.2 * n
    assert select_puct(root, 1.5, FixedRng()) == "0"


def test_select_ties_use_rng():
    root = make_parent([0.25] * 4)
    rng = FixedRng(pick=2)
    assert select_puct(root, 1.5, rng) == "2" and rng.calls == 1


def test_poisoned_children_skipped():
    root = make_parent([0.9, 0.1])
    root.children["0"].poisoned = True
    assert select_puct(root, 1.5, FixedRng()) == "1"
    root.children["1"].poisoned = True
    assert select_puct(root, 1.5, FixedRng()) is None


def test_backprop_perspective():
    root = make_parent([1.0])
    a = root.children["0"]
    a.legal = ["0"]
    expand(a, {"0": 1.0})
    b = a.children["0"]
    b.legal = ["0"]
    expand(b, {"0": 1.0})
    leaf = b.children["0"]
    backprop(leaf, 0.9)
    assert (leaf.value_sum, b.value_sum, a.value_sum) == pytest.approx((0.9, 0.1, 0.9))
    assert leaf.visits == b.visits == a.visits == 1
    assert root.visits == 0 and root.value_sum == 0
    # parent-perspective reading is one minus the child's own mean
    assert a.value_for_parent() == pytest.approx(1 - a.mean())


def test_final_move_selection_examples():
    root = make_parent([1 / 3] * 3)
    for a, n in zip("012", (10, 5, 1)):
        root.children[a].visits = n
    assert final_move_selection(root) == "0"
    root = make_parent([0.5, 0.5])
    # means 0.7 and 0.4 from the root's side
    for a, n, m in (("0", 5, 0.7), ("1", 5, 0.4)):
        root.children[a].visits, root.children[a].value_sum = n, n * (1 - m)
    assert final_move_selection(root) == "0"
    root = make_parent([0.5, 0.5])
    for a in "01":
        root.children[a].visits, root.children[a].value_sum = 3, 1.5
    assert final_move_selection(root, C4) == "0"


def test_final_move_skips_poison():
    root = make_parent([0.4, 0.3, 0.3])
    root.children["0"].poisoned = True
    root.children["0"].visits = 50
    root.children["2"].visits = 1
    assert final_move_selection(root) == "2"
    root = make_parent([0.4, 0.3, 0.3])
    with pytest.raises(ContractViolation):
        final_move_selection(root)
    root.children["1"].poisoned = True
    assert final_move_selection(root) == "0"


# -- full searches -------------------------------------------------------------------------


def test_win_in_one_with_one_simulation():
    s = replay(C4, [0, 1, 0, 1, 0, 2])
    a, stats = search(s, ScriptedOracle(), SearchConfig(simulations=1))
    assert a == 0
    assert stats.oracle_calls <= 2


def test_first_simulation_expands_one_leaf():
    s = replay(C4_5, [2])
    _, stats = search(s, ScriptedOracle(), SearchConfig(simulations=1))
    assert stats.oracle_calls == 2 and stats.simulations == 1
    root = stats.root
    assert sum(c.expanded for c in root.children.values()) == 1


@pytest.mark.parametrize("tracking", [False, True])
def test_oracle_calls_bounded_and_visits_conserved(tracking):
    s = replay(C4_5, [2, 2, 1])
    for m in (1, 10, 60):
        _, st = search(s, ScriptedOracle(), SearchConfig(simulations=m, state_tracking=tracking))
        assert st.oracle_calls <= m + 1
        assert sum(st.visits.values()) == st.simulations


def test_deterministic_under_seed():
    s = replay(C4_5, [2, 1])
    runs = [search(s, ScriptedOracle(), SearchConfig(simulations=80, seed=5)) for _ in range(2)]
    (a1, s1), (a2, s2) = runs
    assert a1 == a2 and s1.to_record() | {"elapsed": 0} == s2.to_record() | {"elapsed": 0}


def test_state_tracking_matches_engine_mode_with_clean_oracle():
    for s in generate_positions(C4, 0.5, 2, seed=8)[:6]:
        a1, s1 = search(s, ScriptedOracle(), SearchConfig(simulations=40, seed=1))
        a2, s2 = search(s, ScriptedOracle(), SearchConfig(simulations=40, seed=1,
                                                          state_tracking=True))
        assert a1 == a2 and s1.visits == s2.visits


def test_terminal_children_back_up_exact_values():
    s = replay(C4, [0, 1, 0, 1, 0, 2])
    _, st = search(s, ScriptedOracle(), SearchConfig(simulations=30))
    win = st.root.children["0"]
    assert win.is_terminal and win.terminal_value == 0.0
    assert win.value_for_parent() == 1.0


def test_string_root_and_terminal_root():
    s = replay(HEX3, [4])
    a, _ = search(encode_state(s), ScriptedOracle(), SearchConfig(simulations=20))
    assert a in legal_actions(s)
    with pytest.raises(ContractViolation):
        search(replay(C4, [0, 1, 0, 1, 0, 1, 0]), ScriptedOracle(), SearchConfig())


class BrokenOracle:
    def evaluate(self, request):
        return "[%top_1 0 : <ctrl99>]\n%%%\n"


def test_root_failure_is_hard_error():
    with pytest.raises(RootEvaluationError):
        search(C4.initial_state(), BrokenOracle(), SearchConfig(simulations=5, root_attempts=3))


def test_poisoning_under_faults_keeps_moves_legal():
    oracle = FaultyOracle(FaultSpec(0.2, seed=3))
    failures = 0
    for i, s in enumerate(generate_positions(C4_5, 0.5, 3, seed=6)[:25]):
        if len(legal_actions(s)) < 2:
            continue
        cfg = SearchConfig(simulations=40, seed=i, state_tracking=True, root_attempts=4)
        a, st = search(s, oracle, cfg)
        assert a in legal_actions(s)
        failures += st.parse_failures
        poisoned = [c for c in st.root.children.values() if c.poisoned]
        assert st.root.children[st.chosen] not in poisoned or len(poisoned) == len(st.root.children)
        for n in st.root.iter_nodes():
            if n.poisoned:
                assert not n.expanded or all(c.poisoned for c in n.children.values())
    assert failures > 0


def test_small_instance_optimality_sample():
    oracle = ScriptedOracle()
    checked = 0
    for s in generate_positions(C4, 0.5, 6, seed=1):
        if len(legal_actions(s)) < 2:
            continue
        size = oracles.tree_size(*oracles.state_args(s), cap=200)
        if size > 200:
            continue
        opt = solve(s).optimal_actions
        for seed in range(5):
            a, _ = search(s, oracle, SearchConfig(simulations=4 * size, seed=seed))
            assert a in opt
        checked += 1
    assert checked >= 5


# -- subtree reuse -----------------------------------------------------------------------------


def test_reuse_keeps_grandchild_statistics():
    s = replay(C4_5, [2])
    _, st = search(s, ScriptedOracle(), SearchConfig(simulations=200, seed=0))
    root = st.root
    mine = st.chosen
    theirs = max(root.children[mine].children.values(), key=lambda c: c.visits).action
    grand = root.children[mine].children[theirs]
    n = grand.visits
    new = reuse_subtree(root, mine, theirs)
    assert new is grand and new.parent is None and new.visits == n > 0
    s2 = apply(apply(s, int(mine)), int(theirs))
    _, st2 = search(s2, ScriptedOracle(), SearchConfig(simulations=20), root=new)
    assert st2.oracle_calls <= 20


def test_reuse_with_unexpanded_reply_is_fresh():
    s = replay(C4_5, [2])
    _, st = search(s, ScriptedOracle(), SearchConfig(simulations=3))
    unvisited = next(a for a, c in st.root.children.items() if not c.expanded)
    assert reuse_subtree(st.root, unvisited, "0") is None
    assert reuse_subtree(None, "0", "0") is None


# -- baseline ------------------------------------------------------------------------------


def test_basic_mcts_finds_immediate_win_and_is_seeded():
    s = replay(C4, [0, 1, 0, 1, 0, 2])
    assert basic_mcts(s, 200, seed=0) == 0
    t = replay(C4_5, [2, 2])
    assert basic_mcts(t, 50, seed=3) == basic_mcts(t, 50, seed=3)
    assert basic_mcts(t, 50, seed=3) in legal_actions(t)


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(simulations=0)
    with pytest.raises(ValueError):
        SearchConfig(scoring="median")
    cfg = SearchConfig(tau_schedule=lambda m: 0.1 if m < 4 else 0.05)
    assert cfg.tau_at(0) == 0.1 and cfg.tau_at(9) == 0.05
    assert SearchConfig().to_dict()["k"] == 5


def test_request_uses_top_all():
    # the search asks for every move so priors see the whole legal set
    seen = []

    class Spy(ScriptedOracle):
        def evaluate(self, request):
            seen.append(P.parse_request(request).top_k)
            return super().evaluate(request)

    search(C4.initial_state(), Spy(), SearchConfig(simulations=3))
    assert set(seen) == {P.ALL}
