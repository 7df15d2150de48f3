"""Command-line front end: ``stmaddpg <subcommand> ...``.

Output directories default to ``$STMADDPG_OUTPUT_ROOT/<subcommand>`` (root
``runs`` when the variable is unset). Existing directories are never
overwritten without ``--force``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import quadratic_games as qg
from .envs import ENV_PRESETS, make_env, random_disturbance_eval
from .evaluation import (ActorPolicy, TournamentSpec, run_tournament, summarize, write_scores_csv,
                         write_summary_json)
from .fencing import DWELL_MODES, read_ticks_csv, referee_trace
from .marl import (METRIC_COLUMNS, CheckpointError, TrainerConfig, TrainingDiverged, load_pair,
                   save_pair, train)
from .stackelberg import StackelbergDynamics, check_dse, stable_learning_rate

log = logging.getLogger("stmaddpg")

OUTPUT_ROOT_VAR = "STMADDPG_OUTPUT_ROOT"
CONFIG_SECTIONS = ("env", "trainer", "tournament", "out", "seeds")
TOURNAMENT_KEYS = ("games", "seed")


class UsageError(Exception):
    pass


# config handling

def load_config(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"{path}: unknown config section(s) {sorted(unknown)}")
    return data


def resolve_train_config(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    env = dict(cfg.get("env") or {})
    trainer = dict(cfg.get("trainer") or {})
    tournament = dict(cfg.get("tournament") or {})
    bad = set(tournament) - set(TOURNAMENT_KEYS)
    if bad:
        raise UsageError(f"unknown tournament key(s) {sorted(bad)}")
    flag_map = {"mode": args.mode, "leader_id": args.leader, "regularization": args.lam,
                "episodes": args.episodes, "max_total_steps": args.max_steps,
                "warmup_steps": args.warmup, "seed": args.seed}
    trainer.update({k: v for k, v in flag_map.items() if v is not None})
    if args.env is not None:
        env["name"] = args.env
    env.setdefault("name", "cartpoles-sym")
    if env["name"] not in ENV_PRESETS:
        raise UsageError(f"unknown environment {env['name']!r}; choose from {sorted(ENV_PRESETS)}")
    try:
        tc = TrainerConfig.from_dict(trainer)
        overrides = {k: v for k, v in env.items() if k != "name"}
        make_env(env["name"], **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    seeds = args.seeds if args.seeds is not None else cfg.get("seeds", [tc.seed])
    return {"env": env, "trainer": tc.to_dict(), "tournament": tournament,
            "seeds": [int(s) for s in seeds]}


# output directories

def output_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_VAR, "runs")) / command


class Staging:
    """Write into a sibling temp directory; move into place on success."""

    def __init__(self, target: Path, force: bool):
        self.target = Path(target)
        if self.target.exists() and not force:
            raise UsageError(f"{self.target} exists; use --force to overwrite")
        self.force = force
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))

    def commit(self) -> Path:
        if self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self.path, self.target)
        return self.target

    def discard(self) -> None:
        shutil.rmtree(self.path, ignore_errors=True)


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["episode"], r["steps"], repr(float(r["score_p1"])),
                        repr(float(r["critic_loss_mean"])), r["cg_fallbacks"]])


def write_timing(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "wall_ms"])
        for r in rows:
            w.writerow([r["episode"], f"{r['wall_ms']:.3f}"])


# train

def _train_one(resolved: dict, seed: int, dest: str) -> tuple[int, str]:
    env_cfg = dict(resolved["env"])
    name = env_cfg.pop("name")
    env = make_env(name, **env_cfg)
    tc = TrainerConfig.from_dict({**resolved["trainer"], "seed": seed})
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    try:
        pair = train(env, tc, env_name=name)
        status, msg = 0, "ok"
    except TrainingDiverged as exc:
        pair, status, msg = exc.last_good, 3, f"diverged: {exc}"
        save_pair(pair, dest / "last_good.npz")
    if status == 0:
        save_pair(pair, dest / "checkpoint.npz")
    if tc.episodes > 0:
        write_metrics(dest / "metrics.csv", pair.metrics)
        write_timing(dest / "timing.csv", pair.timing)
    return status, msg


def cmd_train(args) -> int:
    resolved = resolve_train_config(args)
    stage = Staging(output_dir(args, "train"), args.force)
    try:
        with open(stage.path / "config.yaml", "w") as fh:
            yaml.safe_dump(resolved, fh, sort_keys=True)
        seeds = resolved["seeds"]
        dests = [stage.path if len(seeds) == 1 else stage.path / f"seed_{s}" for s in seeds]
        if args.jobs > 1 and len(seeds) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_train_one, [resolved] * len(seeds), seeds, map(str, dests)))
        else:
            results = [_train_one(resolved, s, str(d)) for s, d in zip(seeds, dests)]
    except BaseException:
        stage.discard()
        raise
    out = stage.commit()
    status = max(r[0] for r in results)
    for s, (code, msg) in zip(seeds, results):
        print(f"seed {s}: {msg}")
    print(f"wrote {out}")
    return status


# tournament

def _load_pool(paths):
    pairs = []
    for p in paths:
        try:
            pairs.append(load_pair(p))
        except (CheckpointError, OSError) as exc:
            raise UsageError(str(exc)) from None
    return pairs


def cmd_tournament(args) -> int:
    p1_paths = args.p1 or args.checkpoints
    p2_paths = args.p2 or args.checkpoints
    if not p1_paths or not p2_paths:
        raise UsageError("give checkpoints positionally or via --p1/--p2")
    p1_pairs, p2_pairs = _load_pool(p1_paths), _load_pool(p2_paths)
    env_name = args.env or p1_pairs[0].env_name
    if env_name is None:
        raise UsageError("checkpoint has no environment name; pass --env")
    env = make_env(env_name)
    problems = []
    for path, pair in list(zip(p1_paths, p1_pairs)) + list(zip(p2_paths, p2_pairs)):
        b = pair.bundle
        if b.obs_dim != env.obs_dim or tuple(b.act_dims) != tuple(env.act_dims):
            problems.append(f"{path}: dimensions {b.obs_dim}/{b.act_dims} do not fit {env_name}")
        elif args.env is None and pair.env_name not in (None, env_name):
            problems.append(f"{path}: trained on {pair.env_name}, tournament uses {env_name}")
    if problems:
        raise UsageError("incompatible checkpoints:\n  " + "\n  ".join(problems))
    spec = TournamentSpec([ActorPolicy(p.bundle, 1) for p in p1_pairs],
                          [ActorPolicy(p.bundle, 2) for p in p2_pairs], args.games, args.seed,
                          [Path(p).stem if Path(p).stem != "checkpoint" else Path(p).parent.name
                           for p in p1_paths],
                          [Path(p).stem if Path(p).stem != "checkpoint" else Path(p).parent.name
                           for p in p2_paths])
    _dedupe_ids(spec)
    stage = Staging(output_dir(args, "tournament"), args.force)
    try:
        result = run_tournament(spec, env, record=args.trajectories, jobs=args.jobs)
        write_scores_csv(stage.path / "scores.csv", result)
        write_summary_json(stage.path / "summary.json", summarize(result.scores), env=env_name,
                           games_per_pair=args.games, seed=args.seed)
        if args.trajectories:
            tdir = stage.path / "trajectories"
            tdir.mkdir()
            for (a, b, g), rows in result.trajectories.items():
                with open(tdir / f"{a}__{b}__{g}.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(env.trajectory_header)
                    w.writerows(rows)
        with open(stage.path / "config.yaml", "w") as fh:
            yaml.safe_dump({"p1": list(map(str, p1_paths)), "p2": list(map(str, p2_paths)),
                            "env": env_name, "games": args.games, "seed": args.seed}, fh)
    except BaseException:
        stage.discard()
        raise
    out = stage.commit()
    s = summarize(result.scores)
    print(f"{s.count} games, mean {s.mean:.3f}, std {s.std:.3f}, min {s.min:g}, max {s.max:g}")
    print(f"wrote {out}")
    return 0


def _dedupe_ids(spec):
    for attr in ("player1_ids", "player2_ids"):
        ids = list(getattr(spec, attr))
        if len(set(ids)) != len(ids):
            setattr(spec, attr, [f"{x}#{i}" for i, x in enumerate(ids)])


# quadratic games

def _vec(x):
    return [float(v) for v in np.ravel(x)]


def _load_game(path):
    try:
        return qg.load(path)
    except qg.FormatError as exc:
        raise UsageError(f"{path}: {exc}") from None
    except OSError as exc:
        raise UsageError(str(exc)) from None


def cmd_solve_quadratic(args) -> int:
    game = _load_game(args.instance)
    try:
        nash = qg.analytic_nash(game)
        dse = qg.analytic_dse(game)
    except qg.PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return 1
    start1, start2 = np.zeros(game.d1), np.zeros(game.d2)

    def lr_for(mode, point):
        if args.lr is not None:
            return args.lr
        try:
            return stable_learning_rate(game, *point, mode, regularization=args.lam)
        except ValueError:
            return 0.01

    common = dict(max_iter=args.max_iter, tol=args.tol)
    st_lr, sim_lr = lr_for("stackelberg", dse), lr_for("simultaneous", nash)
    st = StackelbergDynamics("stackelberg", st_lr, st_lr, regularization=args.lam,
                             cg_iters=max(5, 2 * game.d2), **common).fit(game, start1, start2)
    sim = StackelbergDynamics("simultaneous", sim_lr, sim_lr, **common).fit(game, start1, start2)
    report = check_dse(game, *dse)
    out = {
        "nash": {"theta1": _vec(nash[0]), "theta2": _vec(nash[1]),
                 "leader_value": float(game.value(*nash))},
        "dse": {"theta1": _vec(dse[0]), "theta2": _vec(dse[1]),
                "leader_value": float(game.value(*dse))},
        "stackelberg_dynamics": {"theta1": _vec(st.theta1_), "theta2": _vec(st.theta2_),
                                 "leader_value": st.leader_value_, "iterations": st.n_iter_,
                                 "learning_rate": st_lr,
                                 "converged": bool(st.converged_)},
        "simultaneous_dynamics": {"theta1": _vec(sim.theta1_), "theta2": _vec(sim.theta2_),
                                  "leader_value": sim.leader_value_, "iterations": sim.n_iter_,
                                  "learning_rate": sim_lr,
                                  "converged": bool(sim.converged_)},
        "dse_report": _report_dict(report),
    }
    _emit_json(out, args)
    return 0


def _report_dict(r) -> dict:
    return {
        "is_dse": bool(r.is_dse),
        "leader_total_grad_norm": float(r.leader_total_grad_norm),
        "follower_grad_norm": float(r.follower_grad_norm),
        "leader_curvature_ok": bool(r.leader_curvature_ok),
        "follower_curvature_ok": bool(r.follower_curvature_ok),
        "leader_curvature_eigs": None if r.leader_curvature_eigs is None else _vec(r.leader_curvature_eigs),
        "follower_min_eig": float(r.follower_min_eig),
        "convention": r.convention,
    }


def _emit_json(obj, args) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if getattr(args, "out", None):
        out = Path(args.out)
        if out.exists() and not args.force:
            raise UsageError(f"{out} exists; use --force to overwrite")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")


def cmd_verify_dse(args) -> int:
    game = _load_game(args.instance)
    if args.theta1 is None and args.theta2 is None:
        try:
            t1, t2 = qg.analytic_dse(game)
        except qg.PreconditionError as exc:
            print(f"precondition failed: {exc}", file=sys.stderr)
            return 1
    elif args.theta1 is None or args.theta2 is None:
        raise UsageError("give both --theta1 and --theta2, or neither")
    else:
        t1, t2 = np.array(args.theta1, dtype=float), np.array(args.theta2, dtype=float)
        if t1.size != game.d1 or t2.size != game.d2:
            raise UsageError(f"point must have {game.d1} + {game.d2} coordinates")
    report = check_dse(game, t1, t2, tol=args.tol)
    _emit_json({"theta1": _vec(t1), "theta2": _vec(t2), **_report_dict(report)}, args)
    return 1 if (args.strict and not report.is_dse) else 0


# referee

def cmd_referee(args) -> int:
    try:
        ticks = read_ticks_csv(args.ticks)
    except (ValueError, OSError) as exc:
        raise UsageError(f"{args.ticks}: {exc}") from None
    if len(ticks) > args.horizon:
        raise UsageError(f"{len(ticks)} ticks exceed the horizon of {args.horizon}")
    w = csv.writer(sys.stdout)
    w.writerow(["t", "delta", "score"])
    score = 0
    for t, (state, delta) in enumerate(referee_trace(ticks, dwell_mode=args.dwell_mode)):
        w.writerow([t, delta, state.score])
        score = state.score
    print(f"final score: {score}")
    return 0


# disturbance evaluation

def cmd_disturb_eval(args) -> int:
    (pair,) = _load_pool([args.checkpoint])
    env = make_env("cartpole-adv")
    if pair.bundle.obs_dim != env.obs_dim:
        raise UsageError(f"{args.checkpoint}: not a cartpole-adv checkpoint")
    policy = ActorPolicy(pair.bundle, 1)
    stage = Staging(output_dir(args, "disturb-eval"), args.force)
    summary = {}
    try:
        with open(stage.path / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["magnitude", "trial", "score"])
            for m in args.magnitude:
                scores = random_disturbance_eval(policy, env, m, args.trials, args.seed)
                for i, s in enumerate(scores):
                    w.writerow([repr(float(m)), i, repr(float(s))])
                summary[repr(float(m))] = dataclasses.asdict(summarize(scores))
        with open(stage.path / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        with open(stage.path / "config.yaml", "w") as fh:
            yaml.safe_dump({"checkpoint": str(args.checkpoint), "magnitudes": list(args.magnitude),
                            "trials": args.trials, "seed": args.seed}, fh)
    except BaseException:
        stage.discard()
        raise
    out = stage.commit()
    for m, s in summary.items():
        print(f"magnitude {m}: mean {s['mean']:.2f} std {s['std']:.2f} over {s['count']} trials")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stmaddpg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def outputs(sp):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output")

    t = sub.add_parser("train", help="train a MADDPG / ST-MADDPG pair")
    t.add_argument("--config", help="YAML run config")
    t.add_argument("--env", help=f"environment preset ({', '.join(ENV_PRESETS)})")
    t.add_argument("--mode", choices=("maddpg", "st_maddpg", "approx_st"))
    t.add_argument("--leader", type=int, choices=(1, 2))
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--episodes", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", type=int, nargs="+", help="train one pair per seed")
    t.add_argument("--jobs", type=int, default=1)
    outputs(t)
    t.set_defaults(func=cmd_train)

    tt = sub.add_parser("tournament", help="play every p1 against every p2")
    tt.add_argument("checkpoints", nargs="*", help="pairs contributing both players")
    tt.add_argument("--p1", nargs="+", help="checkpoints supplying player 1")
    tt.add_argument("--p2", nargs="+", help="checkpoints supplying player 2")
    tt.add_argument("--games", type=int, default=20)
    tt.add_argument("--seed", type=int, default=0)
    tt.add_argument("--env")
    tt.add_argument("--trajectories", action="store_true")
    tt.add_argument("--jobs", type=int, default=1)
    outputs(tt)
    tt.set_defaults(func=cmd_tournament)

    q = sub.add_parser("solve-quadratic", help="analytic and iterated equilibria of a quadratic game")
    q.add_argument("instance")
    q.add_argument("--lr", type=float, default=None,
                   help="shared step size; default picks a locally stable one per dynamics")
    q.add_argument("--lambda", dest="lam", type=float, default=0.0)
    q.add_argument("--max-iter", type=int, default=200_000)
    q.add_argument("--tol", type=float, default=1e-13)
    outputs(q)
    q.set_defaults(func=cmd_solve_quadratic)

    v = sub.add_parser("verify-dse", help="check the DSE conditions at a point")
    v.add_argument("instance")
    v.add_argument("--theta1", type=float, nargs="+")
    v.add_argument("--theta2", type=float, nargs="+")
    v.add_argument("--tol", type=float, default=1e-8)
    v.add_argument("--strict", action="store_true", help="exit 1 when the point is not a DSE")
    outputs(v)
    v.set_defaults(func=cmd_verify_dse)

    r = sub.add_parser("referee", help="score a fencing tick stream")
    r.add_argument("ticks")
    r.add_argument("--dwell-mode", choices=DWELL_MODES, default="once")
    r.add_argument("--horizon", type=int, default=1000)
    r.set_defaults(func=cmd_referee)

    d = sub.add_parser("disturb-eval", help="protagonist under random tip disturbances")
    d.add_argument("checkpoint")
    d.add_argument("--magnitude", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    d.add_argument("--trials", type=int, default=20)
    d.add_argument("--seed", type=int, default=0)
    outputs(d)
    d.set_defaults(func=cmd_disturb_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
