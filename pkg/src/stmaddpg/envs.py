"""Seedable cart-pole environments for two-player zero-sum training.

``CompetitiveCartpolesEnv``: two cart-poles on a shared track joined by a
spring. ``AdversarialCartpoleEnv``: one cart-pole (the protagonist) with an
adversary pushing horizontally on the pole tip. Both expose the same
two-player interface: ``reset(seed) -> obs`` and ``step(a1, a2) -> StepResult``
where the reward is player 1's and player 2 receives its negation.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "CartpoleParams",
    "StepResult",
    "cartpole_accelerations",
    "cartpole_step",
    "cartpole_energy",
    "CompetitiveCartpolesEnv",
    "AdversarialCartpoleEnv",
    "make_env",
    "ENV_PRESETS",
    "random_disturbance_eval",
    "rollout",
    "write_trajectory_csv",
]


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    gravity: float = 9.8
    dt: float = 0.02
    fall_angle: float = 0.2095
    track_limit: float = 2.4


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def cartpole_accelerations(x_dot, phi, phi_dot, cart_force, tip_force, p: CartpoleParams):
    """Cart and pole accelerations; ``phi`` is measured from upright.

    ``tip_force`` is a horizontal force at the pole tip (distance
    ``2 * half_length`` from the pivot). It enters the cart equation directly
    and the pole equation through its moment ``2 l cos(phi) tip_force``.
    """
    m, M, l = p.pole_mass, p.cart_mass, p.half_length
    total = m + M
    sin, cos = math.sin(phi), math.cos(phi)
    temp = (cart_force + tip_force + m * l * phi_dot * phi_dot * sin) / total
    torque_term = 2.0 * cos * tip_force / m
    phi_acc = (p.gravity * sin + torque_term - cos * temp) / (l * (4.0 / 3.0 - m * cos * cos / total))
    x_acc = temp - m * l * phi_acc * cos / total
    return x_acc, phi_acc


def cartpole_step(state, cart_force, tip_force, p: CartpoleParams):
    """One semi-implicit Euler step of ``(x, x_dot, phi, phi_dot)``."""
    x, x_dot, phi, phi_dot = state
    x_acc, phi_acc = cartpole_accelerations(x_dot, phi, phi_dot, cart_force, tip_force, p)
    x_dot = x_dot + p.dt * x_acc
    x = x + p.dt * x_dot
    phi_dot = phi_dot + p.dt * phi_acc
    phi = phi + p.dt * phi_dot
    return (x, x_dot, phi, phi_dot)


def cartpole_energy(state, p: CartpoleParams) -> float:
    """Total mechanical energy of one cart-pole (uniform rod pole)."""
    _, x_dot, phi, phi_dot = state
    m, M, l = p.pole_mass, p.cart_mass, p.half_length
    kinetic = (0.5 * (M + m) * x_dot ** 2 + m * l * math.cos(phi) * x_dot * phi_dot
               + 0.5 * (4.0 / 3.0) * m * l * l * phi_dot ** 2)
    return kinetic + m * p.gravity * l * math.cos(phi)


def _fallen(state, p: CartpoleParams) -> bool:
    return abs(state[2]) > p.fall_angle or abs(state[0]) > p.track_limit


def _check_action(a, name) -> float:
    v = float(np.asarray(a, dtype=np.float64).reshape(-1)[0])
    if not math.isfinite(v):
        raise ValueError(f"non-finite action for {name}: {a!r}")
    return v


@dataclass
class CompetitiveCartpolesEnv:
    """Two spring-coupled cart-poles; reward is +1 for player 1 while only
    player 2 has fallen, -1 while only player 1 has fallen, 0 otherwise."""

    spring_k: float = 2.0
    rest_length: float = 1.0
    force_max: tuple = (10.0, 10.0)
    horizon: int = 1000
    init_x: tuple = (-0.5, 0.5)
    init_noise: float = 0.05
    params: CartpoleParams = field(default_factory=CartpoleParams)

    obs_dim = 8
    act_dims = (1, 1)

    def __post_init__(self):
        self.force_max = tuple(float(f) for f in self.force_max)
        self._rng = np.random.default_rng()
        self.states = [(0.0,) * 4, (0.0,) * 4]
        self.fallen = [False, False]
        self.t = 0

    @property
    def action_bounds(self):
        return self.force_max

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        u = self._rng.uniform(-self.init_noise, self.init_noise, size=(2, 4))
        self.states = [
            (self.init_x[i] + u[i, 0], u[i, 1], u[i, 2], u[i, 3]) for i in range(2)
        ]
        self.fallen = [False, False]
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.array(self.states[0] + self.states[1], dtype=np.float64)

    def spring_force(self) -> float:
        return self.spring_k * ((self.states[1][0] - self.states[0][0]) - self.rest_length)

    def step(self, a1, a2) -> StepResult:
        f1 = float(np.clip(_check_action(a1, "player 1"), -self.force_max[0], self.force_max[0]))
        f2 = float(np.clip(_check_action(a2, "player 2"), -self.force_max[1], self.force_max[1]))
        F = self.spring_force()
        forces = (f1 + F, f2 - F)
        for i in range(2):
            if not self.fallen[i]:
                self.states[i] = cartpole_step(self.states[i], forces[i], 0.0, self.params)
                if _fallen(self.states[i], self.params):
                    self.fallen[i] = True
        self.t += 1
        down1, down2 = self.fallen
        r = 0.0
        if down2 and not down1:
            r = 1.0
        elif down1 and not down2:
            r = -1.0
        done = (down1 and down2) or self.t >= self.horizon
        info = {"fallen": (down1, down2), "spring_force": F, "reward_p2": -r,
                "terminal": bool(down1 and down2), "actions": (f1, f2)}
        return StepResult(self.observe(), r, done, info)

    def trajectory_row(self, result: StepResult) -> list:
        s = result.obs
        f1, f2 = result.info["actions"]
        return [self.t, *s.tolist(), f1, f2, result.info["spring_force"], result.reward]

    trajectory_header = ["t", "x1", "x1_dot", "phi1", "phi1_dot", "x2", "x2_dot", "phi2",
                         "phi2_dot", "a1", "a2", "spring_force", "r"]


@dataclass
class AdversarialCartpoleEnv:
    """Protagonist balances a cart-pole (player 1, cart force); the adversary
    (player 2) applies a bounded horizontal force at the pole tip. Player 1
    earns +1 for every step that ends balanced; the episode ends on a fall."""

    force_max: float = 10.0
    adv_max: float = 0.5
    horizon: int = 1000
    init_noise: float = 0.05
    params: CartpoleParams = field(default_factory=CartpoleParams)

    obs_dim = 4
    act_dims = (1, 1)

    def __post_init__(self):
        self._rng = np.random.default_rng()
        self.state = (0.0,) * 4
        self.t = 0

    @property
    def action_bounds(self):
        return (float(self.force_max), float(self.adv_max))

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.state = tuple(self._rng.uniform(-self.init_noise, self.init_noise, size=4))
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.array(self.state, dtype=np.float64)

    def step(self, a_pro, a_adv) -> StepResult:
        f = float(np.clip(_check_action(a_pro, "protagonist"), -self.force_max, self.force_max))
        d = float(np.clip(_check_action(a_adv, "adversary"), -self.adv_max, self.adv_max))
        self.state = cartpole_step(self.state, f, d, self.params)
        self.t += 1
        down = _fallen(self.state, self.params)
        r = 0.0 if down else 1.0
        done = down or self.t >= self.horizon
        info = {"fallen": (down,), "reward_p2": -r, "terminal": down, "actions": (f, d)}
        return StepResult(self.observe(), r, done, info)

    def trajectory_row(self, result: StepResult) -> list:
        f, d = result.info["actions"]
        return [self.t, *result.obs.tolist(), f, d, result.reward]

    trajectory_header = ["t", "x", "x_dot", "phi", "phi_dot", "a_pro", "a_adv", "r"]


ENV_PRESETS: dict[str, Callable] = {
    "cartpoles-sym": lambda: CompetitiveCartpolesEnv(),
    "cartpoles-asym": lambda: CompetitiveCartpolesEnv(force_max=(3.0, 10.0)),
    "cartpole-adv": lambda: AdversarialCartpoleEnv(),
}


def make_env(name: str, **overrides):
    if name not in ENV_PRESETS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_PRESETS)}")
    env = ENV_PRESETS[name]()
    return dataclasses.replace(env, **overrides) if overrides else env


def rollout(env, policy1, policy2, seed, record: bool = False):
    """Play one episode with deterministic policies; returns ``(score, steps, rows)``."""
    obs = env.reset(seed)
    score = 0.0
    rows = []
    while True:
        res = env.step(policy1(obs), policy2(obs))
        score += res.reward
        if record:
            rows.append(env.trajectory_row(res))
        obs = res.obs
        if res.done:
            return score, env.t, rows


def write_trajectory_csv(path, env, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(env.trajectory_header)
        w.writerows(rows)


def random_disturbance_eval(policy, env: AdversarialCartpoleEnv, magnitude: float, trials: int,
                            seed: int) -> np.ndarray:
    """Protagonist scores when the adversary is replaced by uniform random tip
    forces in ``[-magnitude, magnitude]``."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    env = dataclasses.replace(env, adv_max=float(magnitude))
    ss = np.random.SeedSequence(seed)
    scores = np.empty(trials)
    for i, child in enumerate(ss.spawn(trials)):
        reset_seed, noise_seed = child.generate_state(2)
        noise = np.random.default_rng(noise_seed)
        scores[i], _, _ = rollout(env, policy,
                                  lambda obs: noise.uniform(-magnitude, magnitude), int(reset_seed))
    return scores
