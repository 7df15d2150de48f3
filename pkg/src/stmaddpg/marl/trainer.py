"""MADDPG / ST-MADDPG training loop and its estimator wrapper."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..validation import check_observations
from .core import (
    ActorCriticBundle,
    NonFiniteError,
    ReplayBuffer,
    Transition,
    actor_gradients,
    critic_update,
    polyak_update,
    stackelberg_gradients,
)

__all__ = ["TrainerConfig", "TrainedPair", "TrainingDiverged", "Adam", "train", "StackelbergMADDPG",
           "METRIC_COLUMNS"]

log = logging.getLogger(__name__)

MODES = ("maddpg", "st_maddpg", "approx_st")
METRIC_COLUMNS = ("episode", "steps", "score_p1", "critic_loss_mean", "cg_fallbacks")


@dataclass
class TrainerConfig:
    mode: str = "maddpg"
    leader_id: int = 1
    regularization: float = 1.0
    cg_iters: int = 5
    cg_tol: float = 1e-10
    follower_hessian: str = "exact"
    derivative_route: str = "action_space"
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    critic_optimizer: str = "sgd"
    batch_size: int = 100
    buffer_size: int = 1_000_000
    warmup_steps: int = 10_000
    noise_start: float = 0.3
    noise_end: float = 0.05
    follower_extra_updates: int = 10
    episodes: int = 100
    max_total_steps: int | None = None
    horizon: int | None = None
    tau: float = 0.01
    gamma: float = 0.99
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    critic_activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.leader_id not in (1, 2):
            raise ValueError("leader_id must be 1 or 2")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")
        if self.follower_hessian not in ("exact", "actor_curvature"):
            raise ValueError("follower_hessian must be 'exact' or 'actor_curvature'")
        if self.derivative_route not in ("action_space", "composite"):
            raise ValueError("derivative_route must be 'action_space' or 'composite'")
        if self.critic_optimizer not in ("sgd", "adam"):
            raise ValueError("critic_optimizer must be 'sgd' or 'adam'")
        if self.batch_size < 1 or self.cg_iters < 1 or self.follower_extra_updates < 1:
            raise ValueError("batch_size, cg_iters and follower_extra_updates must be >= 1")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: "TrainedPair"):
        super().__init__(message)
        self.last_good = last_good


class Adam:
    """Adam moment estimates producing a parameter delta for a descent step."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return -self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainedPair:
    """Trained bundle plus the configuration that produced it."""

    bundle: ActorCriticBundle
    config: TrainerConfig
    env_name: str | None = None
    metrics: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    total_steps: int = 0

    def policy(self, player: int):
        bundle = self.bundle

        def act(obs):
            return bundle.act(player, obs)[0]

        return act

    def snapshot(self) -> "TrainedPair":
        b = self.bundle
        clone = ActorCriticBundle(b.obs_dim, b.act_dims, b.action_bounds, b.actor_hidden,
                                  b.critic_hidden, b.critic_activation, b.tau, b.gamma)
        clone.live = b.live.copy()
        clone.target = b.target.copy()
        clone.cg_fallbacks = b.cg_fallbacks
        return TrainedPair(clone, self.config, self.env_name, list(self.metrics),
                           list(self.timing), self.total_steps)


def _move(bundle: ActorCriticBundle, player: int, direction: np.ndarray, lr: float) -> None:
    seg = "actor1" if player == 1 else "actor2"
    sign = 1.0 if player == 1 else -1.0
    bundle.live.set_segment(seg, bundle.live.segment(seg) + sign * lr * direction)


def _policy_update(bundle: ActorCriticBundle, batch, cfg: TrainerConfig) -> None:
    lr = cfg.actor_lr
    if cfg.mode == "maddpg":
        g1, g2 = actor_gradients(bundle, batch)
        _move(bundle, 1, g1, lr)
        _move(bundle, 2, g2, lr)
    elif cfg.mode == "st_maddpg":
        leader, follower = cfg.leader_id, 3 - cfg.leader_id
        sg = stackelberg_gradients(bundle, batch, leader, cfg.regularization, cfg.cg_iters,
                                   cfg.cg_tol, cfg.follower_hessian, cfg.derivative_route)
        _move(bundle, leader, sg.leader_total, lr)
        _move(bundle, follower, sg.follower, lr)
    else:
        leader, follower = cfg.leader_id, 3 - cfg.leader_id
        for _ in range(cfg.follower_extra_updates):
            g = actor_gradients(bundle, batch)[follower - 1]
            _move(bundle, follower, g, lr)
        g = actor_gradients(bundle, batch)[leader - 1]
        _move(bundle, leader, g, lr)


def train(env, config: TrainerConfig, env_name: str | None = None, callback=None) -> TrainedPair:
    """Run the training loop; returns the trained pair with per-episode metrics.

    ``callback(pair, row)`` is invoked after every episode when given.
    """
    cfg = config
    if cfg.horizon is not None:
        env = dataclasses.replace(env, horizon=int(cfg.horizon))
    bounds = np.asarray(env.action_bounds, dtype=np.float64)
    init_ss, env_ss, noise_ss, sample_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    env_rng = np.random.default_rng(env_ss)
    noise_rng = np.random.default_rng(noise_ss)
    sample_rng = np.random.default_rng(sample_ss)

    bundle = ActorCriticBundle(env.obs_dim, env.act_dims, env.action_bounds, cfg.actor_hidden,
                               cfg.critic_hidden, cfg.critic_activation, cfg.tau, cfg.gamma,
                               rng=np.random.default_rng(init_ss))
    pair = TrainedPair(bundle, cfg, env_name)
    if cfg.episodes == 0:
        return pair

    buffer = ReplayBuffer(env.obs_dim, env.act_dims, min(cfg.buffer_size, _step_budget(env, cfg)))
    critic_opt = None
    if cfg.critic_optimizer == "adam":
        critic_opt = Adam(bundle.layout.segment_size("critic"), cfg.critic_lr)
    schedule = max(1, _step_budget(env, cfg) - cfg.warmup_steps)
    last_good = pair.snapshot()
    steps = 0

    for episode in range(cfg.episodes):
        if cfg.max_total_steps is not None and steps >= cfg.max_total_steps:
            break
        t0 = time.perf_counter()
        obs = env.reset(int(env_rng.integers(2 ** 31)))
        score, losses, fallbacks0, ep_steps = 0.0, [], bundle.cg_fallbacks, 0
        while True:
            if steps < cfg.warmup_steps:
                a1 = noise_rng.uniform(-bounds[0], bounds[0], size=env.act_dims[0])
                a2 = noise_rng.uniform(-bounds[1], bounds[1], size=env.act_dims[1])
            else:
                frac = min(1.0, (steps - cfg.warmup_steps) / schedule)
                sigma = cfg.noise_start + frac * (cfg.noise_end - cfg.noise_start)
                a1 = bundle.act(1, obs)[0] + sigma * bounds[0] * noise_rng.standard_normal(env.act_dims[0])
                a2 = bundle.act(2, obs)[0] + sigma * bounds[1] * noise_rng.standard_normal(env.act_dims[1])
                a1 = np.clip(a1, -bounds[0], bounds[0])
                a2 = np.clip(a2, -bounds[1], bounds[1])
            res = env.step(a1, a2)
            buffer.add(Transition(obs, a1, a2, res.reward, res.obs, res.info.get("terminal", False)))
            score += res.reward
            steps += 1
            ep_steps += 1
            if len(buffer) >= cfg.batch_size:
                batch = buffer.sample(cfg.batch_size, sample_rng)
                try:
                    losses.append(critic_update(bundle, batch, cfg.critic_lr, critic_opt))
                    _policy_update(bundle, batch, cfg)
                except NonFiniteError as exc:
                    raise TrainingDiverged(str(exc), last_good) from exc
                polyak_update(bundle)
                if not np.all(np.isfinite(bundle.live.values)):
                    raise TrainingDiverged(f"non-finite parameters at step {steps}", last_good)
            obs = res.obs
            if res.done or (cfg.max_total_steps is not None and steps >= cfg.max_total_steps):
                break
        row = {
            "episode": episode,
            "steps": ep_steps,
            "score_p1": score,
            "critic_loss_mean": float(np.mean(losses)) if losses else math.nan,
            "cg_fallbacks": bundle.cg_fallbacks - fallbacks0,
        }
        pair.metrics.append(row)
        pair.timing.append({"episode": episode, "wall_ms": (time.perf_counter() - t0) * 1e3})
        pair.total_steps = steps
        last_good = pair.snapshot()
        log.debug("episode %d steps %d score %.1f", episode, ep_steps, score)
        if callback is not None:
            callback(pair, row)
    return pair


def _step_budget(env, cfg) -> int:
    horizon = cfg.horizon or env.horizon
    budget = cfg.episodes * horizon
    if cfg.max_total_steps is not None:
        budget = min(budget, cfg.max_total_steps)
    return max(1, budget)


class StackelbergMADDPG(BaseEstimator):
    """Estimator front end for :func:`train`.

    ``fit(env)`` trains a leader/follower pair; ``predict(obs, player)``
    returns that player's deterministic actions for a batch of observations.
    """

    def __init__(self, mode="st_maddpg", leader_id=1, regularization=1.0, cg_iters=5,
                 cg_tol=1e-10, follower_hessian="exact", derivative_route="action_space",
                 actor_lr=1e-3, critic_lr=1e-3, critic_optimizer="sgd", batch_size=100, buffer_size=1_000_000,
                 warmup_steps=10_000, noise_start=0.3, noise_end=0.05, follower_extra_updates=10,
                 episodes=100, max_total_steps=None, horizon=None, tau=0.01, gamma=0.99,
                 actor_hidden=(64, 64), critic_hidden=(64, 64), critic_activation="tanh", seed=0):
        self.mode = mode
        self.leader_id = leader_id
        self.regularization = regularization
        self.cg_iters = cg_iters
        self.cg_tol = cg_tol
        self.follower_hessian = follower_hessian
        self.derivative_route = derivative_route
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.critic_optimizer = critic_optimizer
        self.batch_size = batch_size
        self.buffer_size = buffer_size
        self.warmup_steps = warmup_steps
        self.noise_start = noise_start
        self.noise_end = noise_end
        self.follower_extra_updates = follower_extra_updates
        self.episodes = episodes
        self.max_total_steps = max_total_steps
        self.horizon = horizon
        self.tau = tau
        self.gamma = gamma
        self.actor_hidden = actor_hidden
        self.critic_hidden = critic_hidden
        self.critic_activation = critic_activation
        self.seed = seed

    def fit(self, env, y=None):
        self.config_ = TrainerConfig(**self.get_params())
        self.pair_ = train(env, self.config_)
        self.metrics_ = self.pair_.metrics
        self.obs_dim_ = env.obs_dim
        return self

    def predict(self, X, player=1):
        if not hasattr(self, "pair_"):
            raise NotFittedError("StackelbergMADDPG is not fitted yet")
        X = check_observations(X, self.obs_dim_)
        return self.pair_.bundle.act(player, X)
