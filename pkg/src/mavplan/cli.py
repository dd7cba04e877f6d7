"""Command-line entry point: ``mavplan <subcommand> [flags]``.

Every run first prints its resolved configuration (``# config {...}`` on
stderr in text mode, a leading ``{"config": ...}`` record with
``--format records``), so any
output can be reproduced from its own header. Store and output paths can be
set through ``MAVPLAN_STORE`` and ``MAVPLAN_OUT``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from . import protocol as P
from .errors import IllegalMove, ParseError
from .game import GameId, Outcome, apply, decode_state, legal_actions, parse_compact, compact_state

ENV_STORE = "MAVPLAN_STORE"
ENV_OUT = "MAVPLAN_OUT"
DEFAULT_GAME = "connect_four 5x5 win4"


class CliError(Exception):
    pass


# -- shared helpers ----------------------------------------------------------------


def game_from(args) -> GameId:
    try:
        return GameId.parse_header(args.game)
    except (ValueError, ParseError) as exc:
        raise CliError(f"bad --game {args.game!r}: {exc}") from exc


def position_from(args, game: GameId):
    if getattr(args, "state_file", None):
        return decode_state(Path(args.state_file).read_text())
    s = game.initial_state()
    for tok in (args.moves or "").split():
        try:
            s = apply(s, game.parse_action(tok))
        except (IllegalMove, ValueError) as exc:
            raise CliError(f"bad move {tok!r} in --moves: {exc}") from exc
    return s


class Out:
    def __init__(self, args, stream=None):
        self.records = args.format == "records"
        self.stream = stream or sys.stdout

    def config(self, cfg: dict):
        if self.records:
            self.record({"config": cfg})
        else:
            # stderr keeps data outputs (traces, position files) clean
            print("# config " + json.dumps(cfg, sort_keys=True), file=sys.stderr)

    def record(self, rec: dict):
        self.stream.write(json.dumps(rec, sort_keys=True) + "\n")

    def line(self, text: str = ""):
        self.stream.write(text + "\n")

    def emit(self, rec: dict, text: str):
        if self.records:
            self.record(rec)
        else:
            self.line(text)


def resolved(args) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _add_game(p, positional=False):
    p.add_argument("--game", default=DEFAULT_GAME,
                   help="board, e.g. 'connect_four 5x5 win4' or 'hex 3x3'")
    p.add_argument("--moves", default="", help="space-separated actions from the empty board")
    p.add_argument("--state-file", help="position in the protocol's state format")


def _add_search(p):
    g = p.add_argument_group("search")
    g.add_argument("--simulations", type=int, default=100)
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--epsilon", type=float, default=0.05)
    g.add_argument("--tau", type=float, default=0.1)
    g.add_argument("--c-puct", type=float, default=1.5)
    g.add_argument("--scoring", choices=sorted(P.SCORERS), default="mean")
    g.add_argument("--state-tracking", action="store_true")
    g.add_argument("--reuse-tree", action="store_true")
    g.add_argument("--root-attempts", type=int, default=1)
    a = p.add_argument_group("async")
    a.add_argument("--async", dest="use_async", action="store_true")
    a.add_argument("--batch-size", type=int, default=16)
    a.add_argument("--timeout", type=float, default=60.0, help="seconds per batch; 0 waits forever")
    a.add_argument("--virtual", choices=("static", "dynamic"), default="dynamic")
    a.add_argument("--n-c", type=int, default=10)
    a.add_argument("--n-min", type=int, default=2)
    a.add_argument("--n-max", type=int, default=None)
    o = p.add_argument_group("oracle")
    o.add_argument("--oracle", choices=("scripted", "noisy", "faulty"), default="scripted")
    o.add_argument("--fault-rate", type=float, default=0.1)
    o.add_argument("--oracle-seed", type=int, default=0)


def search_config(args):
    from .search import SearchConfig
    return SearchConfig(simulations=args.simulations, k=args.k, epsilon=args.epsilon, tau=args.tau,
                        c_puct=args.c_puct, scoring=args.scoring,
                        state_tracking=args.state_tracking, reuse_tree=args.reuse_tree,
                        seed=args.seed, root_attempts=args.root_attempts)


def async_config(args):
    from .async_search import AsyncConfig
    return AsyncConfig(base=search_config(args), batch_size=args.batch_size, timeout=args.timeout or None,
                       virtual_mode=args.virtual, n_c=args.n_c, n_min=args.n_min,
                       n_max=args.n_max)


def oracle_from(args):
    from .league import make_oracle
    if args.oracle == "noisy":
        return make_oracle("noisy", {"seed": args.oracle_seed})
    if args.oracle == "faulty":
        return make_oracle("faulty", {"rate": args.fault_rate, "seed": args.oracle_seed})
    return make_oracle("scripted")


def _read_jsonl(path) -> list[dict]:
    recs = [json.loads(ln) for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.startswith("#")]
    return [r for r in recs if "config" not in r]


def _positions(path, game: GameId | None = None):
    out = []
    for rec in _read_jsonl(path):
        g = GameId.parse_header(rec["game"])
        out.append(parse_compact(g, rec["state"]))
    return out


def _store_path(args) -> str:
    path = args.store or os.environ.get(ENV_STORE)
    if not path:
        raise CliError(f"no record store: pass --store or set {ENV_STORE}")
    return path


def _out_dir(args) -> str:
    return args.out or os.environ.get(ENV_OUT) or "."


# -- subcommands -------------------------------------------------------------------


def cmd_solve(args, out: Out) -> int:
    from .solver import VALUE_NAMES, solve
    game = game_from(args)
    s = position_from(args, game)
    out.config(resolved(args))
    if s.outcome is not Outcome.ONGOING:
        out.emit({"outcome": s.outcome.result_token}, f"game over: {s.outcome.result_token}")
        return 0
    r = solve(s)
    acts = [game.action_text(a) for a in r.optimal_actions]
    per = {game.action_text(a): {"value": VALUE_NAMES[v], "depth": d}
           for a, (v, d) in r.action_values.items()}
    out.emit({"value": r.value_name, "optimal": acts, "principal": game.action_text(r.principal),
              "depth_to_end": r.depth_to_end, "actions": per},
             f"value {r.value_name}\noptimal {' '.join(acts)}\n"
             f"principal {game.action_text(r.principal)}\ndepth {r.depth_to_end}")
    return 0


def _search_record(game, action, stats) -> dict:
    rec = stats.to_record()
    rec.pop("elapsed", None)
    rec.pop("mean_batch_seconds", None)
    rec["action"] = game.action_text(action)
    return rec


def cmd_search(args, out: Out) -> int:
    from .async_search import async_search
    from .search import search
    game = game_from(args)
    s = position_from(args, game)
    out.config(resolved(args))
    if s.outcome is not Outcome.ONGOING:
        raise CliError("position is already decided")
    oracle = oracle_from(args)
    if args.use_async:
        action, stats = async_search(s, oracle, async_config(args))
    else:
        action, stats = search(s, oracle, search_config(args))
    rec = _search_record(game, action, stats)
    visits = " ".join(f"{a}:{n}" for a, n in rec["visits"].items())
    out.emit(rec, f"action {rec['action']}\nvisits {visits}\noracle_calls {rec['oracle_calls']}\n"
                  f"parse_failures {rec['parse_failures']}\nmax_depth {rec['max_depth']}")
    return 0


def render_board(state) -> str:
    g = state.game
    lines = []
    for r in range(g.rows):
        pad = " " * r if g.name == "hex" else ""
        lines.append(pad + " ".join(".XO"[state.cell(r, c)] for c in range(g.cols)))
    if g.name == "connect_four":
        lines.append(" ".join(str(c) for c in range(g.cols)))
    return "\n".join(lines)


def cmd_play(args, out: Out, stdin=None) -> int:
    from .league import Agent, AgentSpec
    stdin = stdin or sys.stdin
    game = game_from(args)
    s = position_from(args, game)
    out.config(resolved(args))
    params = {"simulations": args.simulations, "scoring": args.scoring}
    spec = AgentSpec("agent", args.agent, params, seed=args.seed)
    agent = Agent(spec, args.seed)
    while s.outcome is Outcome.ONGOING:
        out.line(render_board(s))
        if s.to_move == args.human_seat:
            while True:
                out.stream.write(f"your move ({'X' if s.to_move == 0 else 'O'}): ")
                out.stream.flush()
                line = stdin.readline()
                if not line:
                    out.line("\ninput closed")
                    return 1
                try:
                    a = game.parse_action(line.strip())
                    s = apply(s, a)
                    break
                except (ValueError, IllegalMove) as exc:
                    out.line(f"not a legal move ({exc}); legal: "
                             + " ".join(game.action_text(x) for x in legal_actions(s)))
        else:
            a, _ = agent.act(s)
            out.line(f"agent plays {game.action_text(a)}")
            s = apply(s, a)
    out.line(render_board(s))
    out.line(f"result {s.outcome.result_token}")
    return 0


def cmd_trace_gen(args, out: Out) -> int:
    from .internal import TraceParams, build_tree, linearize, trace_record
    from .league import make_oracle
    game = game_from(args)
    positions = _positions(args.positions) if args.positions else [position_from(args, game)]
    params = TraceParams(args.depth, args.breadth)
    out.config(resolved(args))
    oracle = make_oracle("scripted")
    for s in positions:
        if s.outcome is not Outcome.ONGOING:
            continue
        t = linearize(build_tree(s, params, oracle))
        if out.records:
            out.record(trace_record(t))
        else:
            out.stream.write(t.text)
    return 0


def cmd_trace_verify(args, out: Out) -> int:
    from .internal import check_backups, parse_trace, verify_shape
    text = Path(args.trace).read_text()
    try:
        tree = parse_trace(text)
    except ParseError as exc:
        raise CliError(f"trace does not parse at node {exc.path}: {exc}") from exc
    if not verify_shape(tree):
        raise CliError("trace has the wrong shape")
    bad = check_backups(tree)
    if bad is not None:
        raise CliError(f"backed-up value disagrees at node {bad}")
    out.emit({"ok": True, "chosen": tree.chosen}, f"ok chosen {tree.chosen}")
    return 0


def cmd_gen_positions(args, out: Out) -> int:
    from .oracle import generate_positions
    game = game_from(args)
    out.config(resolved(args))
    for s in generate_positions(game, args.epsilon, args.games, args.seed):
        out.record({"game": game.header, "state": compact_state(s)})
    return 0


def cmd_gen_examples(args, out: Out) -> int:
    from .internal import mav_record, mix_corpus, trace_corpus, trace_record
    from .league import make_oracle
    from .oracle import generate_positions, make_training_example
    game = game_from(args)
    out.config(resolved(args))
    positions = (_positions(args.positions) if args.positions
                 else generate_positions(game, args.epsilon, args.games, args.seed))
    mav = [mav_record(make_training_example(p, args.seed * 1_000_003 + i))
           for i, p in enumerate(positions)]
    if args.search_share > 0:
        live = positions[: max(1, args.trace_positions)]
        traces = [trace_record(t) for t in trace_corpus(live, make_oracle("scripted"), args.seed)]
        mixed = mix_corpus(mav, traces, args.n or len(mav), args.seed, 1.0 - args.search_share)
    else:
        mixed = mav
    for rec in mixed:
        out.record(rec)
    return 0


def _pool(path):
    from .league import AgentSpec
    return [AgentSpec.from_dict(d) for d in json.loads(Path(path).read_text())]


def cmd_tournament(args, out: Out) -> int:
    from .league import RecordStore, load_book, opening_book, run_tournament
    game = game_from(args)
    pool = _pool(args.agents)
    book = load_book(game, args.book) if args.book else opening_book(game, args.book_plies)
    store = RecordStore(_store_path(args))
    adj = None
    if args.adjudicate:
        adj = args.adjudicate if args.adjudicate == "certain" else float(args.adjudicate)
    out.config(resolved(args))
    recs = run_tournament(pool, book, args.pairings, args.seed, game, store, adj)
    out.emit({"games": len(recs), "store": str(store.path)},
             f"{len(recs)} games recorded in {store.path}")
    return 0


def _table(args):
    from .league import RecordStore, fit_elo
    recs = RecordStore(_store_path(args)).load()
    return recs, fit_elo(recs, args.anchor, args.lam)


def _anchors(pairs) -> list:
    out = []
    for item in pairs or []:
        name, _, val = item.partition("=")
        if not val:
            raise CliError(f"external anchor must look like id=rating, got {item!r}")
        out.append((name, float(val)))
    return out


def cmd_rate(args, out: Out) -> int:
    out.config(resolved(args))
    _, table = _table(args)
    for a in sorted(table.ids, key=lambda x: -table.ratings[x]):
        out.emit({"agent": a, "elo": round(table.ratings[a], 3), "games": table.games[a]},
                 f"{a}\t{table.ratings[a]:.1f}\t{table.games[a]}")
    return 0


def cmd_calibrate(args, out: Out) -> int:
    from .league import calibrate_external
    out.config(resolved(args))
    _, table = _table(args)
    cal = calibrate_external(table, _anchors(args.external), args.flag_above)
    out.emit({"slope": cal.slope, "intercept": cal.intercept, "residuals": cal.residuals,
              "flagged": cal.flagged},
             f"slope {cal.slope:.6f}\nintercept {cal.intercept:.3f}\n" +
             "\n".join(f"residual {a} {r:.3f}" for a, r in cal.residuals.items()) +
             (f"\nflagged {' '.join(cal.flagged)}" if cal.flagged else ""))
    return 0


def cmd_report(args, out: Out) -> int:
    from .league import calibrate_external, report, write_report
    out.config(resolved(args))
    recs, table = _table(args)
    cal = calibrate_external(table, _anchors(args.external)) if args.external else None
    pool = _pool(args.agents) if args.agents else None
    paths = write_report(report(recs, table, cal, pool), _out_dir(args))
    out.emit({"files": [str(p) for p in paths]}, "\n".join(str(p) for p in paths))
    return 0


def cmd_bench(args, out: Out) -> int:
    from .bench import search_timings
    game = game_from(args)
    out.config(resolved(args))
    sims = [int(x) for x in args.sims.split(",")]
    for row in search_timings(game, sims, args.positions_n, args.seed, args.batch_size):
        out.emit(row, "\t".join(str(row[k]) for k in ("mode", "simulations", "searches",
                                                       "mean_seconds", "mean_oracle_calls")))
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="mavplan", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--format", choices=("text", "records"), default="text")
    common.add_argument("--config", help="JSON file of flag defaults (keys use underscores)")
    sub = top.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("solve", cmd_solve, "exact value and optimal moves of a position")
    _add_game(p)
    p = add("search", cmd_search, "one external MCTS search")
    _add_game(p)
    _add_search(p)
    p = add("play", cmd_play, "play against an agent in the terminal")
    _add_game(p)
    p.add_argument("--agent", default="serial_mcts")
    p.add_argument("--human-seat", type=int, choices=(0, 1), default=0)
    p.add_argument("--simulations", type=int, default=100)
    p.add_argument("--scoring", choices=sorted(P.SCORERS), default="mean")
    p = add("trace-gen", cmd_trace_gen, "internal-search traces")
    _add_game(p)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--breadth", type=int, default=3)
    p.add_argument("--positions", help="positions file from gen-positions")
    p = add("trace-verify", cmd_trace_verify, "check a trace's shape and backups")
    p.add_argument("trace")
    p = add("gen-positions", cmd_gen_positions, "epsilon-greedy self-play positions")
    p.add_argument("--game", default=DEFAULT_GAME)
    p.add_argument("--epsilon", type=float, default=0.4)
    p.add_argument("--games", type=int, default=10)
    p = add("gen-examples", cmd_gen_examples, "protocol training examples, optionally mixed")
    p.add_argument("--game", default=DEFAULT_GAME)
    p.add_argument("--positions")
    p.add_argument("--epsilon", type=float, default=0.4)
    p.add_argument("--games", type=int, default=10)
    p.add_argument("--search-share", type=float, default=0.0)
    p.add_argument("--trace-positions", type=int, default=20)
    p.add_argument("--n", type=int, default=0)
    p = add("tournament", cmd_tournament, "run a league into the record store")
    p.add_argument("--game", default=DEFAULT_GAME)
    p.add_argument("--agents", required=True, help="JSON list of agent specs")
    p.add_argument("--pairings", type=int, default=10)
    p.add_argument("--book")
    p.add_argument("--book-plies", type=int, default=2)
    p.add_argument("--store")
    p.add_argument("--adjudicate", help="'certain' or a win-probability threshold")
    for name, func, help_ in (("rate", cmd_rate, "fit internal Elo"),
                              ("report", cmd_report, "win matrix, ratings and Elo series"),
                              ("calibrate", cmd_calibrate, "map internal Elo onto external")):
        p = add(name, func, help_)
        p.add_argument("--store")
        p.add_argument("--anchor", required=True)
        p.add_argument("--lam", type=float, default=1.0)
        if name != "rate":
            p.add_argument("--external", nargs="*", default=None, help="id=rating pairs")
        if name == "report":
            p.add_argument("--agents")
            p.add_argument("--out")
        if name == "calibrate":
            p.add_argument("--flag-above", type=float, default=50.0)
    p = add("bench", cmd_bench, "elapsed time per search for the local oracle")
    p.add_argument("--game", default=DEFAULT_GAME)
    p.add_argument("--sims", default="16,64,256")
    p.add_argument("--positions-n", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=16)
    return top


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]
        unknown = set(cfg) - set(vars(args))
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**cfg)
        # flags given explicitly still win over the file
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    out = Out(args)
    try:
        return args.func(args, out)
    except (CliError, ParseError, ValueError, OSError) as exc:
        print(f"mavplan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
