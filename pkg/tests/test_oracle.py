import io
import sys

import numpy as np
import pytest

from mavplan import protocol as P
from mavplan.errors import ParseError
from mavplan.game import GameId, Outcome, apply, decode_state, encode_state, legal_actions, replay
from mavplan.oracle import (FAULT_MODES, FaultSpec, FaultyOracle, NoisyOracle, ScriptedOracle,
                            StallingOracle, StdioOracle, best_action_tiebreak, generate_positions,
                            inject_fault, make_training_example, scripted_evaluate, serve_stdio,
                            surrogate_win)
from mavplan.solver import DRAW, LOSS, WIN, solve

C4 = GameId.connect_four(4, 4, 4)
C4_5 = GameId.connect_four(5, 5, 4)
HEX3 = GameId.hex(3)


def ask(oracle, state, top_k=P.ALL, best=False):
    req = P.MavRequest(state.game, state=encode_state(state), top_k=top_k, want_best_action=best)
    return P.parse_response(oracle.evaluate(P.render_request(req)), req)


def test_surrogate_ordering():
    assert surrogate_win(WIN, 1) > surrogate_win(WIN, 3) > surrogate_win(DRAW, 0)
    assert surrogate_win(DRAW, 9) == 50.0
    assert surrogate_win(LOSS, 2) < surrogate_win(LOSS, 8) < 50.0
    assert surrogate_win(WIN, 1000) == 87.6
    assert surrogate_win(LOSS, 1000) == pytest.approx(12.4)


def test_tiebreak_rule():
    assert best_action_tiebreak([(0, 100), (1, 100), (2, 100), (3, 100), (4, 100)], 3) == 3
    assert best_action_tiebreak([(0, 80), (1, 60), (2, 40)], 2) == 0
    assert best_action_tiebreak([(0, 100), (1, 99.5)], 1) == 1
    # one of the top five at or below 99 turns the rule off
    assert best_action_tiebreak([(0, 100), (1, 99.5), (2, 98)], 1) == 0
    with pytest.raises(ValueError):
        best_action_tiebreak([], 0)


def test_win_in_one_listed_first():
    s = replay(C4, [0, 1, 0, 1, 0, 2])
    resp = ask(ScriptedOracle(), s, best=True)
    assert resp.move_values[0] == ("0", P.BucketDistribution.point(63))
    assert resp.best_action == "0"


def test_fast_win_preferred_by_best_action():
    # X can win at once in column 0
    s = replay(C4_5, [0, 4, 0, 4, 0, 3])
    resp = ask(ScriptedOracle(), s, best=True)
    assert resp.best_action == s.game.action_text(solve(s).principal)
    assert solve(s).action_values[int(resp.best_action)][1] == 1


def test_terminal_outcome_form():
    s = replay(C4, [0, 1, 0, 1, 0, 1, 0])
    req = P.MavRequest(C4, state=encode_state(s), top_k=3)
    text = scripted_evaluate(P.render_request(req))
    assert text == '[%top_1 invalid : "1-0"]\n%%%\n'


def test_fewer_legal_moves_than_k():
    s = replay(C4_5, [0] * 5 + [1] * 5 + [2] * 5)
    assert len(legal_actions(s)) == 2
    resp = ask(ScriptedOracle(), s, top_k=9)
    assert len(resp.move_values) == 2


def test_prev_state_form_and_echo():
    prev = replay(HEX3, [4])
    req = P.MavRequest(HEX3, prev_state=encode_state(prev), prev_action="a1", top_k=P.ALL,
                       want_state_echo=True)
    resp = P.parse_response(ScriptedOracle().evaluate(P.render_request(req)), req)
    assert decode_state(resp.inferred_state) == apply(prev, 0)
    assert len(resp.move_values) == 7


@pytest.mark.parametrize("game", [C4, HEX3, C4_5], ids=lambda g: g.header)
def test_scripted_soundness(game):
    oracle = ScriptedOracle()
    for s in generate_positions(game, 0.5, 3, seed=2)[::3]:
        resp = ask(oracle, s, best=True)
        acts = [a for a, _ in resp.move_values]
        assert sorted(game.parse_action(a) for a in acts) == legal_actions(s)
        assert resp.best_action in acts
        r = solve(s)
        for a, d in resp.move_values:
            v, _ = r.action_values[game.parse_action(a)]
            assert np.sign(P.score_max(d) - 50.0) == v or (v == DRAW and d.mode() == 32)
        scores = [P.score_max(d) for _, d in resp.move_values]
        assert scores == sorted(scores, reverse=True)


def test_unparseable_request_gets_error_line():
    out = ScriptedOracle().evaluate("%game chess 8x8\n%%%\n")
    assert out.startswith("%error")
    with pytest.raises(ParseError):
        P.parse_response(out, P.MavRequest(C4, state=encode_state(C4.initial_state())))


# -- faults ----------------------------------------------------------------------------


def _request(state, **kw):
    kw.setdefault("top_k", P.ALL)
    return P.MavRequest(state.game, state=encode_state(state), **kw)


def test_rate_zero_is_identity():
    clean = ScriptedOracle()
    faulty = FaultyOracle(FaultSpec(0.0, seed=5))
    for s in generate_positions(C4, 0.5, 2, seed=0):
        text = P.render_request(_request(s, want_best_action=True))
        assert faulty.evaluate(text) == clean.evaluate(text)


def test_fault_spec_validation():
    with pytest.raises(ValueError):
        FaultSpec(1.5)
    with pytest.raises(ValueError):
        FaultSpec(0.1, modes=("explode",))


def test_forced_malformed_token():
    s = replay(C4, [1, 2])
    req = _request(s)
    text = P.render_request(req)
    for seed in range(20):
        bad = FaultyOracle(FaultSpec(1.0, ("malformed_token",), seed)).evaluate(text)
        with pytest.raises(ParseError) as err:
            P.parse_response(bad, req)
        assert err.value.category == "bad_token"


def test_forced_illegal_move_fails_engine_audit():
    s = replay(C4, [0, 0, 0, 0, 1])  # column 0 is full
    req = _request(s)
    bad = FaultyOracle(FaultSpec(1.0, ("illegal_move",), 0)).evaluate(P.render_request(req))
    resp = P.parse_response(bad, req)
    listed = {C4.parse_action(a) for a, _ in resp.move_values}
    assert not listed <= set(legal_actions(s))


@pytest.mark.parametrize("mode", FAULT_MODES)
def test_every_mode_breaks_something(mode):
    rng = np.random.default_rng(0)
    oracle = ScriptedOracle()
    for s in generate_positions(C4_5, 0.5, 2, seed=4)[:12]:
        req = P.MavRequest(C4_5, prev_state=encode_state(s), prev_action="0", top_k=P.ALL,
                           want_state_echo=True) if 0 in legal_actions(s) else _request(s)
        text = P.render_request(req)
        clean = oracle.evaluate(text)
        bad = inject_fault(text, clean, mode, rng)
        assert bad != clean
        try:
            resp = P.parse_response(bad, req)
        except ParseError:
            continue
        # anything that still parses must disagree with the truth
        truth = P.parse_response(clean, req)
        assert resp != truth


def test_faults_deterministic_per_request():
    spec = FaultSpec(0.5, seed=9)
    a, b = FaultyOracle(spec), FaultyOracle(spec)
    texts = [P.render_request(_request(s)) for s in generate_positions(C4, 0.5, 3, seed=1)]
    assert [a.evaluate(t) for t in texts] == [b.evaluate(t) for t in reversed(texts)][::-1]
    hit = sum(a.evaluate(t) != ScriptedOracle().evaluate(t) for t in texts)
    assert 0 < hit < len(texts)


# -- noisy and stalling -------------------------------------------------------------------


def test_noisy_oracle_spread_and_determinism():
    s = replay(C4_5, [2, 2])
    o1, o2 = NoisyOracle(seed=3, bias=2.0), NoisyOracle(seed=3, bias=2.0)
    r1, r2 = ask(o1, s, best=True), ask(o2, s, best=True)
    assert r1 == r2
    for _, d in r1.move_values:
        nz = np.flatnonzero(d.probs)
        assert nz.max() - nz.min() <= 6
    means = [P.score_mean(d) for _, d in r1.move_values]
    assert means == sorted(means, reverse=True)
    assert r1.best_action == r1.move_values[0][0]
    assert ask(NoisyOracle(seed=4, bias=2.0), s) != r1


def test_noisy_oracle_keeps_transitions_exact():
    s = replay(HEX3, [4, 0, 1])
    resp = ask(NoisyOracle(seed=1), s)
    assert sorted(HEX3.parse_action(a) for a, _ in resp.move_values) == legal_actions(s)
    terminal = replay(C4, [0, 1, 0, 1, 0, 1, 0])
    assert ask(NoisyOracle(), terminal).outcome is Outcome.P0_WINS


def test_stalling_oracle_passes_through():
    text = P.render_request(_request(C4.initial_state()))
    assert StallingOracle(ScriptedOracle(), 1.0, 0.01).evaluate(text) == scripted_evaluate(text)


# -- stdio -------------------------------------------------------------------------------


def test_serve_stdio_in_process():
    reqs = [P.render_request(_request(s)) for s in (C4.initial_state(), replay(HEX3, [4]))]
    out = io.StringIO()
    n = serve_stdio(ScriptedOracle(), io.StringIO("".join(reqs)), out)
    assert n == 2
    assert out.getvalue() == "".join(scripted_evaluate(r) for r in reqs)


def test_stdio_oracle_subprocess():
    text = P.render_request(_request(replay(C4, [1, 1])))
    with StdioOracle([sys.executable, "-m", "mavplan.oracle"]) as o:
        assert o.evaluate(text) == scripted_evaluate(text)
        assert o.evaluate(text) == scripted_evaluate(text)


# -- data generation ----------------------------------------------------------------------


def test_epsilon_zero_plays_optimally():
    ps = generate_positions(C4, 0.0, 5, seed=0)
    for s, nxt in zip(ps, ps[1:]):
        if nxt.ply == s.ply + 1:
            a = nxt.last_action % C4.cols
            assert a in solve(s).optimal_actions


def test_generation_reproducible():
    a = generate_positions(C4, 0.4, 10, seed=12)
    b = generate_positions(C4, 0.4, 10, seed=12)
    assert [s.cells for s in a] == [s.cells for s in b]
    assert [s.cells for s in a] != [s.cells for s in generate_positions(C4, 0.4, 10, seed=13)]
    with pytest.raises(ValueError):
        generate_positions(C4, 1.2, 1, 0)


def test_epsilon_one_is_uniform_over_legal():
    ps = generate_positions(C4, 1.0, 300, seed=0)
    firsts = [s.last_action % 4 for s in ps if s.ply == 1]
    counts = np.bincount(firsts, minlength=4)
    assert counts.min() > 50


def test_training_examples_valid_and_varied():
    positions = generate_positions(C4, 0.4, 20, seed=3)
    ks, orders = set(), 0
    for i, s in enumerate(positions):
        ex = make_training_example(s, seed=i)
        req = P.parse_request(ex.prompt)
        resp = P.parse_response(ex.target, req)
        n_legal = len(legal_actions(s))
        assert len(resp.move_values) == req.k_limit(n_legal)
        if ex.k_used != P.ALL and ex.k_used > n_legal:
            ks.add("over")
        listed = [P.score_max(d) for _, d in resp.move_values]
        orders += listed != sorted(listed, reverse=True)
    assert "over" in ks and orders > 0


def test_terminal_training_example():
    s = replay(C4, [0, 1, 0, 1, 0, 1, 0])
    ex = make_training_example(s, seed=0)
    resp = P.parse_response(ex.target, P.parse_request(ex.prompt))
    assert resp.outcome is Outcome.P0_WINS and not resp.move_values


def test_two_seeds_same_values_different_order():
    s = replay(C4_5, [2])
    full = []
    for seed in range(60):
        ex = make_training_example(s, seed)
        req = P.parse_request(ex.prompt)
        if ex.k_used == P.ALL and req.state is not None:
            full.append(P.parse_response(ex.target, req).move_values)
    assert len(full) >= 2
    key = sorted((a, d.mode()) for a, d in full[0])
    assert all(sorted((a, d.mode()) for a, d in mv) == key for mv in full)
    assert any(mv != full[0] for mv in full[1:])
