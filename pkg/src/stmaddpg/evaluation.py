"""Tournament protocol, score statistics and the rank-sum test."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .envs import rollout

__all__ = [
    "ActorPolicy",
    "GameScore",
    "TournamentSpec",
    "TournamentResult",
    "ScoreSummary",
    "game_seed",
    "run_tournament",
    "summarize",
    "rank_sum_test",
    "write_scores_csv",
    "write_summary_json",
]

SCORE_COLUMNS = ("p1_id", "p2_id", "game_index", "seed", "score", "steps")


class ActorPolicy:
    """Picklable deterministic policy: one actor of a trained bundle."""

    def __init__(self, bundle, player: int):
        if player not in (1, 2):
            raise ValueError("player must be 1 or 2")
        self.bundle = bundle
        self.player = player
        self.obs_dim = bundle.obs_dim
        self.act_dim = bundle.act_dims[player - 1]

    def __call__(self, obs):
        return self.bundle.act(self.player, obs)[0]


@dataclass
class TournamentSpec:
    player1_pool: Sequence[Callable]
    player2_pool: Sequence[Callable]
    games_per_pair: int = 20
    seed: int = 0
    player1_ids: Sequence[str] | None = None
    player2_ids: Sequence[str] | None = None

    def __post_init__(self):
        if not self.player1_pool or not self.player2_pool:
            raise ValueError("both pools must be nonempty")
        if self.games_per_pair < 1:
            raise ValueError("games_per_pair must be >= 1")
        if self.player1_ids is None:
            self.player1_ids = [f"p1_{i}" for i in range(len(self.player1_pool))]
        if self.player2_ids is None:
            self.player2_ids = [f"p2_{j}" for j in range(len(self.player2_pool))]
        if len(self.player1_ids) != len(self.player1_pool) or len(self.player2_ids) != len(self.player2_pool):
            raise ValueError("pool ids must match pool sizes")


@dataclass(frozen=True)
class GameScore:
    p1_id: str
    p2_id: str
    game_index: int
    seed: int
    score: float
    steps: int


@dataclass
class TournamentResult:
    games: list
    trajectories: dict = field(default_factory=dict)

    @property
    def scores(self) -> np.ndarray:
        return np.array([g.score for g in self.games])


def game_seed(seed: int, i: int, j: int, game: int) -> int:
    """Seed for game ``game`` of pair ``(i, j)``; independent of pool sizes."""
    return int(np.random.SeedSequence([seed, i, j, game]).generate_state(1)[0])


def _check_policy(policy, env, player: int) -> None:
    dim = getattr(policy, "obs_dim", None)
    if dim is not None and dim != env.obs_dim:
        raise ValueError(f"player {player} policy expects {dim} observations, env provides {env.obs_dim}")
    a = np.asarray(policy(np.zeros(env.obs_dim)), dtype=np.float64).reshape(-1)
    if a.size != env.act_dims[player - 1] or not np.all(np.isfinite(a)):
        raise ValueError(f"player {player} policy returned an invalid action {a!r}")


def _play(args):
    env, p1, p2, seed, record = args
    score, steps, rows = rollout(env, p1, p2, seed, record)
    return score, steps, rows


def run_tournament(spec: TournamentSpec, env, record: bool = False, jobs: int = 1) -> TournamentResult:
    """Every (p1, p2) pair plays ``games_per_pair`` noise-free seeded games."""
    for p in spec.player1_pool:
        _check_policy(p, env, 1)
    for p in spec.player2_pool:
        _check_policy(p, env, 2)
    keys, tasks = [], []
    for i, p1 in enumerate(spec.player1_pool):
        for j, p2 in enumerate(spec.player2_pool):
            for g in range(spec.games_per_pair):
                seed = game_seed(spec.seed, i, j, g)
                keys.append((spec.player1_ids[i], spec.player2_ids[j], g, seed))
                tasks.append((env, p1, p2, seed, record))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_play, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_play(t) for t in tasks]
    games, trajectories = [], {}
    for (p1_id, p2_id, g, seed), (score, steps, rows) in zip(keys, results):
        games.append(GameScore(p1_id, p2_id, g, seed, float(score), int(steps)))
        if record:
            trajectories[(p1_id, p2_id, g)] = rows
    return TournamentResult(games, trajectories)


@dataclass(frozen=True)
class ScoreSummary:
    mean: float
    std: float
    min: float
    max: float
    count: int


def summarize(scores) -> ScoreSummary:
    x = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("cannot summarize an empty score list")
    std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return ScoreSummary(float(np.mean(x)), std, float(x[0]), float(x[-1]), int(x.size))


def rank_sum_test(xs, ys) -> tuple[float, float]:
    """Mann-Whitney ``U`` of ``xs`` and a two-sided normal-approximation p-value.

    Ties get midranks and the variance its tie correction; a 0.5 continuity
    correction is applied. Identical pooled values give ``p = 1``.
    """
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size < 2 or y.size < 2:
        raise ValueError("rank_sum_test needs at least two values per sample")
    n1, n2 = x.size, y.size
    pooled = np.concatenate([x, y])
    ranks = rankdata(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    _, counts = np.unique(pooled, return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    z = (abs(u - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return u, min(1.0, p)


def write_scores_csv(path, result: TournamentResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for g in result.games:
            w.writerow([g.p1_id, g.p2_id, g.game_index, g.seed, repr(g.score), g.steps])


def write_summary_json(path, summary: ScoreSummary, **extra) -> None:
    with open(path, "w") as fh:
        json.dump({**asdict(summary), **extra}, fh, indent=2, sort_keys=True)
        fh.write("\n")
