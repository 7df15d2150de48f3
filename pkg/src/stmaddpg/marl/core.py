"""Replay buffer, actor/critic networks and the per-batch update operations.

Everything here works on a :class:`ActorCriticBundle`, whose live and target
parameters are flat :class:`~stmaddpg.diffcore.ParameterVector` objects with
segments ``actor1``, ``actor2`` and ``critic``.

Sign convention: the critic estimates player 1's return, player 1 ascends
``J(theta1, theta2) = mean_s Q(s, mu1(s), mu2(s))`` and player 2 descends it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..diffcore import Graph, Layout, ParameterVector, Session
from ..stackelberg import CGError, conjugate_gradient

__all__ = [
    "Transition",
    "Batch",
    "ReplayBuffer",
    "ActorCriticBundle",
    "build_layout",
    "critic_update",
    "actor_gradients",
    "leader_total_gradient",
    "stackelberg_gradients",
    "critic_action_derivatives",
    "actor_jvp",
    "critic_action_gradient",
    "ActorPass",
    "polyak_update",
    "NonFiniteError",
]

ACTORS = ("actor1", "actor2")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Transition:
    s: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool = False


@dataclass
class Batch:
    s: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.s.shape[0]


class ReplayBuffer:
    """Fixed-capacity FIFO ring storage with uniform sampling over filled slots."""

    def __init__(self, obs_dim: int, act_dims=(1, 1), capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.a1 = np.zeros((capacity, act_dims[0]))
        self.a2 = np.zeros((capacity, act_dims[1]))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.seq = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        self.pos = 0
        self.count = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> None:
        if not math.isfinite(tr.r):
            raise ValueError("reward must be finite")
        i = self.pos
        self.s[i] = tr.s
        self.a1[i] = tr.a1
        self.a2[i] = tr.a2
        self.r[i] = tr.r
        self.s_next[i] = tr.s_next
        self.done[i] = float(tr.done)
        self.seq[i] = self.count
        self.count += 1
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(n, rng)
        return Batch(self.s[idx], self.a1[idx], self.a2[idx], self.r[idx], self.s_next[idx],
                     self.done[idx])


def _mlp_arrays(prefix_in, in_dims, hidden, out_dim):
    arrays = [(f"W1_{name}", (d, hidden[0])) for name, d in zip(prefix_in, in_dims)]
    arrays.append(("b1", (hidden[0],)))
    for k in range(1, len(hidden)):
        arrays += [(f"W{k + 1}", (hidden[k - 1], hidden[k])), (f"b{k + 1}", (hidden[k],))]
    n = len(hidden) + 1
    arrays += [(f"W{n}", (hidden[-1], out_dim)), (f"b{n}", (out_dim,))]
    return arrays


def build_layout(obs_dim, act_dims, actor_hidden=(64, 64), critic_hidden=(64, 64)) -> Layout:
    return Layout({
        "actor1": _mlp_arrays(["s"], [obs_dim], actor_hidden, act_dims[0]),
        "actor2": _mlp_arrays(["s"], [obs_dim], actor_hidden, act_dims[1]),
        "critic": _mlp_arrays(["s", "a1", "a2"], [obs_dim, act_dims[0], act_dims[1]],
                              critic_hidden, 1),
    })


def _mlp_var(P, inputs: dict, n_hidden: int, act):
    """Traced MLP: ``inputs`` maps input name to Var; ``act`` hidden nonlinearity."""
    names = list(inputs)
    h = act(dc.affine([inputs[k] for k in names], [P[f"W1_{k}"] for k in names], P["b1"]))
    for k in range(2, n_hidden + 1):
        h = act(dc.affine([h], [P[f"W{k}"]], P[f"b{k}"]))
    n = n_hidden + 1
    return dc.affine([h], [P[f"W{n}"]], P[f"b{n}"])


_NP_ACT = {"tanh": np.tanh, "relu": lambda x: np.maximum(x, 0.0)}
_VAR_ACT = {"tanh": dc.tanh, "relu": dc.relu}


def _mlp_np(params: ParameterVector, seg: str, inputs: dict, n_hidden: int, act):
    h = sum(inputs[k] @ params.array(seg, f"W1_{k}") for k in inputs) + params.array(seg, "b1")
    h = act(h)
    for k in range(2, n_hidden + 1):
        h = act(h @ params.array(seg, f"W{k}") + params.array(seg, f"b{k}"))
    n = n_hidden + 1
    return h @ params.array(seg, f"W{n}") + params.array(seg, f"b{n}")


class ActorCriticBundle:
    """Two deterministic actors, one centralized critic and their targets.

    Actor outputs are ``bound * tanh(z)``; the critic sees actions divided by
    their bounds so its inputs live in ``[-1, 1]``.
    """

    def __init__(self, obs_dim: int, act_dims=(1, 1), action_bounds=(1.0, 1.0),
                 actor_hidden=(64, 64), critic_hidden=(64, 64), critic_activation="tanh",
                 tau: float = 0.01, gamma: float = 0.99, rng: np.random.Generator | None = None):
        if not 0 < tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if critic_activation not in _NP_ACT:
            raise ValueError(f"unknown critic activation {critic_activation!r}")
        self.obs_dim = int(obs_dim)
        self.act_dims = tuple(int(d) for d in act_dims)
        self.action_bounds = tuple(float(b) for b in action_bounds)
        self.actor_hidden = tuple(actor_hidden)
        self.critic_hidden = tuple(critic_hidden)
        self.critic_activation = critic_activation
        self.tau = float(tau)
        self.gamma = float(gamma)
        self.layout = build_layout(obs_dim, self.act_dims, self.actor_hidden, self.critic_hidden)
        self.live = ParameterVector(self.layout)
        if rng is not None:
            self._init_params(rng)
        self.target = self.live.copy()
        self.cg_fallbacks = 0
        self._build_graphs()

    def _init_params(self, rng):
        """Uniform fan-in initialization; output layers start near zero."""
        for seg, arrays in self.layout.segments.items():
            names = list(arrays)
            last_w, last_b = names[-2], names[-1]
            fan_in = {}
            for name, shape in arrays.items():
                if name.startswith("W"):
                    fan_in[name[1:].split("_")[0]] = fan_in.get(name[1:].split("_")[0], 0) + shape[0]
            for name, shape in arrays.items():
                layer = name[1:].split("_")[0]
                if name in (last_w, last_b):
                    bound = 3e-3
                else:
                    bound = 1.0 / math.sqrt(fan_in[layer])
                a, b = self.layout.offsets[seg][name]
                self.live.values[a:b] = rng.uniform(-bound, bound, size=b - a)

    def _build_graphs(self):
        nh_a, nh_c = len(self.actor_hidden), len(self.critic_hidden)
        act_c = _VAR_ACT[self.critic_activation]
        inv1, inv2 = 1.0 / self.action_bounds[0], 1.0 / self.action_bounds[1]
        b1, b2 = self.action_bounds
        od, (d1, d2) = self.obs_dim, self.act_dims

        def actor(P, s, bound):
            return dc.mul(dc.tanh(_mlp_var(P, {"s": s}, nh_a, dc.tanh)), bound)

        def critic(P, s, a1, a2):
            return _mlp_var(P, {"s": s, "a1": dc.mul(a1, inv1), "a2": dc.mul(a2, inv2)}, nh_c, act_c)

        def joint(P, X):
            s = X["s"]
            q = critic(P["critic"], s, actor(P["actor1"], s, b1), actor(P["actor2"], s, b2))
            return dc.mean_over_batch(q)

        def critic_loss(P, X):
            q = critic(P["critic"], X["s"], X["a1"], X["a2"])
            return dc.mean_over_batch(dc.square(dc.sub(q, X["y"])))

        def q_mean(P, X):
            return dc.mean_over_batch(critic(P["critic"], X["s"], X["a1"], X["a2"]))

        self.joint_graph = Graph(joint, self.layout, {"s": (None, od)})
        self.critic_graph = Graph(critic_loss, self.layout,
                                  {"s": (None, od), "a1": (None, d1), "a2": (None, d2), "y": (None, 1)})
        self.q_graph = Graph(q_mean, self.layout, {"s": (None, od), "a1": (None, d1), "a2": (None, d2)})
        self._surrogates = {}

    def surrogate_graph(self, seg: str, quadratic: bool) -> Graph:
        """Actor-only objective ``mean <c, mu> (+ 1/2 (mu - a0)^T C (mu - a0))``.

        With ``c = dQ/da`` and ``C = d2Q/da2`` taken at ``a0 = mu(s)`` its
        gradient and Hessian at the current parameters equal those of ``J``
        in the actor's own parameter block.
        """
        key = (seg, quadratic)
        if key in self._surrogates:
            return self._surrogates[key]
        i = ACTORS.index(seg)
        bound, d = self.action_bounds[i], self.act_dims[i]
        nh = len(self.actor_hidden)
        eye = np.eye(d)
        sel = [eye[:, [j]] for j in range(d)]
        sel2 = np.eye(d * d)

        def fn(P, X):
            mu = dc.mul(dc.tanh(_mlp_var(P[seg], {"s": X["s"]}, nh, dc.tanh)), bound)
            out = dc.mean_over_batch(dc.mul(mu, X["c"]))
            if quadratic:
                diff = dc.sub(mu, X["a0"])
                cols = [dc.matmul(diff, e) for e in sel]
                quad = None
                for j in range(d):
                    for k in range(d):
                        cjk = dc.matmul(X["C"], sel2[:, [j * d + k]])
                        term = dc.mul(dc.mul(cols[j], cols[k]), cjk)
                        quad = term if quad is None else dc.add(quad, term)
                out = dc.add(out, dc.mul(dc.mean_over_batch(quad), 0.5))
            return out

        inputs = {"s": (None, self.obs_dim), "c": (None, d)}
        if quadratic:
            inputs.update({"C": (None, d * d), "a0": (None, d)})
        g = self._surrogates[key] = Graph(fn, self.layout, inputs)
        return g

    # numpy fast paths (no gradient tracking) for acting and targets

    def act(self, player: int, s, target: bool = False) -> np.ndarray:
        params = self.target if target else self.live
        seg = ACTORS[player - 1]
        z = _mlp_np(params, seg, {"s": np.atleast_2d(s)}, len(self.actor_hidden), np.tanh)
        return self.action_bounds[player - 1] * np.tanh(z)

    def q_value(self, s, a1, a2, target: bool = False) -> np.ndarray:
        params = self.target if target else self.live
        inputs = {"s": np.atleast_2d(s), "a1": np.atleast_2d(a1) / self.action_bounds[0],
                  "a2": np.atleast_2d(a2) / self.action_bounds[1]}
        return _mlp_np(params, "critic", inputs, len(self.critic_hidden),
                       _NP_ACT[self.critic_activation])[:, 0]

    def td_targets(self, batch: Batch) -> np.ndarray:
        s2 = batch.s_next
        q_next = self.q_value(s2, self.act(1, s2, True), self.act(2, s2, True), target=True)
        return batch.r + self.gamma * (1.0 - batch.done) * q_next

    def config(self) -> dict:
        return {"obs_dim": self.obs_dim, "act_dims": list(self.act_dims),
                "action_bounds": list(self.action_bounds), "actor_hidden": list(self.actor_hidden),
                "critic_hidden": list(self.critic_hidden),
                "critic_activation": self.critic_activation, "tau": self.tau, "gamma": self.gamma}


def _finite(*arrays):
    return all(np.all(np.isfinite(a)) for a in arrays)


def critic_update(bundle: ActorCriticBundle, batch: Batch, lr: float = 1e-3, optimizer=None) -> float:
    """One gradient step on the mean squared Bellman error; returns the pre-step loss.

    Terminal transitions (``done``) use ``y = r``. ``optimizer`` (optional)
    maps a gradient to a parameter delta; plain gradient descent otherwise.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = bundle.td_targets(batch)[:, None]
    sess = Session(bundle.critic_graph, bundle.live,
                   {"s": batch.s, "a1": batch.a1, "a2": batch.a2, "y": y})
    loss = float(sess.value)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite critic loss {loss}")
    g = sess.gradient("critic")
    delta = -lr * g if optimizer is None else optimizer.step(g)
    bundle.live.set_segment("critic", bundle.live.segment("critic") + delta)
    return loss


def _act_derivs(z):
    t = np.tanh(z)
    d1 = 1.0 - t * t
    return t, d1, -2.0 * t * d1


_ACT_DERIVS = {
    "tanh": _act_derivs,
    "relu": lambda z: (np.maximum(z, 0.0), (z > 0).astype(np.float64), np.zeros_like(z)),
}


def critic_action_gradient(bundle: ActorCriticBundle, s, a1, a2) -> np.ndarray:
    """Per-sample ``dQ/da`` of the live critic, shape ``(N, d1 + d2)``."""
    P, seg = bundle.live, "critic"
    b1, b2 = bundle.action_bounds
    act = _ACT_DERIVS[bundle.critic_activation]
    n = len(bundle.critic_hidden)
    zs = [s @ P.array(seg, "W1_s") + (a1 / b1) @ P.array(seg, "W1_a1")
          + (a2 / b2) @ P.array(seg, "W1_a2") + P.array(seg, "b1")]
    slopes = []
    for k in range(1, n + 1):
        h, s1, _ = act(zs[-1])
        slopes.append(s1)
        if k < n:
            zs.append(h @ P.array(seg, f"W{k + 1}") + P.array(seg, f"b{k + 1}"))
    delta = np.broadcast_to(P.array(seg, f"W{n + 1}")[:, 0], slopes[-1].shape)
    for k in range(n, 0, -1):
        dz = slopes[k - 1] * delta
        if k > 1:
            delta = dz @ P.array(seg, f"W{k}").T
    return np.hstack([dz @ P.array(seg, "W1_a1").T / b1, dz @ P.array(seg, "W1_a2").T / b2])


def critic_action_derivatives(bundle: ActorCriticBundle, s, a1, a2):
    """Per-sample ``Q``, ``dQ/da`` and ``d2Q/da2`` of the live critic.

    ``a = (a1, a2)`` in raw (unscaled) units; shapes ``(N,)``, ``(N, D)`` and
    ``(N, D, D)`` with ``D = d1 + d2``. Computed by forward-mode propagation
    of the ``D`` action directions through the MLP.
    """
    P, seg = bundle.live, "critic"
    b1, b2 = bundle.action_bounds
    wa = np.vstack([P.array(seg, "W1_a1") / b1, P.array(seg, "W1_a2") / b2])
    z = s @ P.array(seg, "W1_s") + (a1 / b1) @ P.array(seg, "W1_a1") + (a2 / b2) @ P.array(seg, "W1_a2")
    z = z + P.array(seg, "b1")
    dz = np.broadcast_to(wa, (len(s),) + wa.shape)
    d2z = None
    act = _ACT_DERIVS[bundle.critic_activation]
    n = len(bundle.critic_hidden)
    for k in range(1, n + 1):
        h, s1, s2 = act(z)
        dh = s1[:, None, :] * dz
        d2h = s2[:, None, None, :] * dz[:, :, None, :] * dz[:, None, :, :]
        if d2z is not None:
            d2h = d2h + s1[:, None, None, :] * d2z
        W, b = P.array(seg, f"W{k + 1}"), P.array(seg, f"b{k + 1}")
        # 2-D matmuls: batched small-matrix products are much slower in numpy
        z = h @ W + b
        dz = (dh.reshape(-1, W.shape[0]) @ W).reshape(dh.shape[:-1] + (W.shape[1],))
        d2z = (d2h.reshape(-1, W.shape[0]) @ W).reshape(d2h.shape[:-1] + (W.shape[1],))
    return z[:, 0], dz[:, :, 0], d2z[:, :, :, 0]


class ActorPass:
    """Cached forward pass of one live actor with closed-form derivatives.

    ``backward(delta)`` is the vector-Jacobian product for a per-sample
    cotangent on the actions; ``jvp(v)`` the Jacobian-vector product;
    ``surrogate_hvp(v, c, C)`` Pearlmutter's R-operator applied to
    ``mean <c, mu> + 1/2 (mu - mu0)^T C (mu - mu0)`` at the current point.
    These agree with the reverse-mode engine on ``surrogate_graph``.
    """

    def __init__(self, bundle: ActorCriticBundle, player: int, s):
        self.seg = seg = ACTORS[player - 1]
        self.layout = bundle.layout
        self.bound = bundle.action_bounds[player - 1]
        self.n = len(bundle.actor_hidden) + 1
        P = bundle.live
        self.W = [P.array(seg, "W1_s")] + [P.array(seg, f"W{k}") for k in range(2, self.n + 1)]
        self.b = [P.array(seg, f"b{k}") for k in range(1, self.n + 1)]
        self.h = [np.asarray(s, dtype=np.float64)]
        for k in range(self.n - 1):
            self.h.append(np.tanh(self.h[-1] @ self.W[k] + self.b[k]))
        t = np.tanh(self.h[-1] @ self.W[-1] + self.b[-1])
        self.out_t = t
        self.mu = self.bound * t
        self.g1 = self.bound * (1.0 - t * t)
        self.g2 = -2.0 * t * self.g1

    def _split(self, v):
        offs = self.layout.offsets[self.seg]
        start = self.layout.bounds[self.seg][0]
        parts = [v[a - start:b - start].reshape(shape)
                 for (a, b), shape in zip(offs.values(), self.layout.segments[self.seg].values())]
        return parts[0::2], parts[1::2]

    def _pack(self, gW, gb):
        return np.concatenate([x.ravel() for pair in zip(gW, gb) for x in pair])

    def _forward_r(self, dW, db):
        rh = [None]
        rz = self.h[0] @ dW[0] + db[0]
        for k in range(1, self.n):
            hk = self.h[k]
            rh.append((1.0 - hk * hk) * rz)
            rz = rh[k] @ self.W[k] + hk @ dW[k] + db[k]
        return rh, rz

    def jvp(self, v) -> np.ndarray:
        dW, db = self._split(v)
        _, rz = self._forward_r(dW, db)
        return self.g1 * rz

    def backward(self, delta) -> np.ndarray:
        dz = self.g1 * delta
        gW, gb = [None] * self.n, [None] * self.n
        for k in range(self.n - 1, -1, -1):
            gW[k] = self.h[k].T @ dz
            gb[k] = dz.sum(axis=0)
            if k:
                dh = dz @ self.W[k].T
                dz = (1.0 - self.h[k] ** 2) * dh
        return self._pack(gW, gb)

    def surrogate_hvp(self, v, c, C=None) -> np.ndarray:
        N = len(self.h[0])
        dW, db = self._split(v)
        rh, rz = self._forward_r(dW, db)
        delta = c / N
        rdelta = 0.0 if C is None else np.einsum("nij,nj->ni", C, self.g1 * rz) / N
        dz = self.g1 * delta
        rdz = self.g2 * rz * delta + self.g1 * rdelta
        gW, gb = [None] * self.n, [None] * self.n
        for k in range(self.n - 1, -1, -1):
            hk = self.h[k]
            gW[k] = hk.T @ rdz if k == 0 else hk.T @ rdz + rh[k].T @ dz
            gb[k] = rdz.sum(axis=0)
            if k:
                dh = dz @ self.W[k].T
                rdh = rdz @ self.W[k].T + dz @ dW[k].T
                s1 = 1.0 - hk * hk
                rdz = s1 * rdh - 2.0 * hk * rh[k] * dh
                dz = s1 * dh
        return self._pack(gW, gb)


def actor_jvp(bundle: ActorCriticBundle, player: int, s, v) -> np.ndarray:
    """Directional derivative ``J_mu v`` of the live actor's actions, shape ``(N, d)``."""
    return ActorPass(bundle, player, s).jvp(v)


def _split_segment(layout: Layout, seg: str, v) -> list:
    v = np.asarray(v, dtype=np.float64).ravel()
    out, pos = [], 0
    for shape in layout.segments[seg].values():
        n = int(np.prod(shape, dtype=np.int64))
        out.append(v[pos:pos + n].reshape(shape))
        pos += n
    return out


class _ActionSpaceView:
    """Actor-parameter derivatives of ``J`` routed through the action space.

    The critic depends on actor parameters only through the actions, so with
    ``c = dQ/da`` and ``C = d2Q/da2`` evaluated once per batch,
    ``grad J = E[J_mu^T c]``, ``H_FF = E[J_F^T C_FF J_F + sum_k c_k d2 mu_k]``
    and the mixed block is ``E[J_L^T C_LF J_F]``. All products are exact.
    """

    def __init__(self, bundle: ActorCriticBundle, s, second_order: bool = True):
        self.bundle = bundle
        self.s = s
        self.actors = (ActorPass(bundle, 1, s), ActorPass(bundle, 2, s))
        d1 = bundle.act_dims[0]
        self.sl = (slice(0, d1), slice(d1, None))
        a1, a2 = self.actors[0].mu, self.actors[1].mu
        if second_order:
            _, qa, self.qaa = critic_action_derivatives(bundle, s, a1, a2)
        else:
            qa = critic_action_gradient(bundle, s, a1, a2)
            self.qaa = None
        self.c = (qa[:, :d1], qa[:, d1:])
        self.N = len(s)

    def gradient(self, player: int, extra=None) -> np.ndarray:
        c = self.c[player - 1] if extra is None else self.c[player - 1] + extra
        return self.actors[player - 1].backward(c / self.N)

    def hvp(self, player: int, v, curvature: bool = True) -> np.ndarray:
        sl = self.sl[player - 1]
        C = self.qaa[:, sl, sl] if curvature else None
        return self.actors[player - 1].surrogate_hvp(v, self.c[player - 1], C)

    def mixed_coefficient(self, leader: int, follower: int, w) -> np.ndarray:
        u = self.actors[follower - 1].jvp(w)
        c_lf = self.qaa[:, self.sl[leader - 1], self.sl[follower - 1]]
        return np.einsum("nij,nj->ni", c_lf, u)

    def mixed(self, leader: int, follower: int, w) -> np.ndarray:
        """``d/dtheta_L <grad_F J, w>``."""
        return self.actors[leader - 1].backward(self.mixed_coefficient(leader, follower, w) / self.N)


def actor_gradients(bundle: ActorCriticBundle, batch: Batch):
    """Batch-mean deterministic policy gradients ``(g1, g2)`` of ``J``.

    Both actions are re-evaluated from the live policies, so the gradients
    are exact derivatives of ``mean_s Q(s, mu1(s), mu2(s))``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    view = _ActionSpaceView(bundle, batch.s, second_order=False)
    g1, g2 = view.gradient(1), view.gradient(2)
    if not _finite(g1, g2):
        raise NonFiniteError("non-finite actor gradient")
    return g1, g2


@dataclass
class StackelbergGradients:
    leader_total: np.ndarray
    leader_plain: np.ndarray
    follower: np.ndarray
    fallback: bool
    residual: float


def stackelberg_gradients(bundle: ActorCriticBundle, batch: Batch, leader_id: int = 1,
                          regularization: float = 1.0, cg_iters: int = 5, cg_tol: float = 1e-10,
                          follower_hessian: str = "exact",
                          route: str = "action_space") -> StackelbergGradients:
    """Leader total derivative plus both partial gradients for one batch.

    The follower's own objective is ``J`` for player 2 (minimizer) and ``-J``
    for player 1 (maximizer); with ``s_F`` the follower's sign the linear
    system is ``(s_F H_FF + lam I) w = s_F grad_F J`` and the leader direction
    (in terms of ``J``) is ``grad_L J - d/dtheta_L <grad_F J, w>``.
    ``follower_hessian="actor_curvature"`` keeps only the ``dQ/da * d2 mu`` part
    of ``H_FF``.

    ``route="action_space"`` (default) factors every product through the
    critic's action derivatives; ``route="composite"`` differentiates the
    composite graph ``Q(s, mu1(s), mu2(s))`` twice. Both are exact.
    """
    if leader_id not in (1, 2):
        raise ValueError("leader_id must be 1 or 2")
    if follower_hessian not in ("exact", "actor_curvature"):
        raise ValueError(f"unknown follower_hessian {follower_hessian!r}")
    if len(batch) == 0:
        raise ValueError("empty batch")
    if route not in ("action_space", "composite"):
        raise ValueError(f"unknown route {route!r}")
    follower_id = 3 - leader_id
    s_f = 1.0 if leader_id == 1 else -1.0
    curvature = follower_hessian == "exact"
    if route == "action_space":
        view = _ActionSpaceView(bundle, batch.s)
        g_lead, g_foll = view.gradient(leader_id), view.gradient(follower_id)
        hess = lambda v: view.hvp(follower_id, v, curvature)
        correct = lambda w: view.gradient(leader_id, -view.mixed_coefficient(leader_id, follower_id, w))
    else:
        lead, foll = ACTORS[leader_id - 1], ACTORS[follower_id - 1]
        sess = Session(bundle.joint_graph, bundle.live, {"s": batch.s})
        sess.gradient_vars(lead, foll)
        g_lead, g_foll = sess.gradient(lead), sess.gradient(foll)
        if curvature:
            hess = lambda v: sess.hvp(foll, v)
        else:
            view = _ActionSpaceView(bundle, batch.s)
            hess = lambda v: view.hvp(follower_id, v, False)
        correct = lambda w: g_lead - sess.mixed(lead, foll, w)
    if not _finite(g_lead, g_foll):
        raise NonFiniteError("non-finite actor gradient")

    lam = float(regularization)
    try:
        w, res = conjugate_gradient(lambda v: s_f * hess(v) + lam * v, s_f * g_foll, cg_iters, cg_tol)
        total = correct(w)
        if not _finite(total):
            raise CGError("non-finite total derivative", math.nan, cg_iters)
        return StackelbergGradients(total, g_lead, g_foll, False, res)
    except CGError as exc:
        bundle.cg_fallbacks += 1
        return StackelbergGradients(g_lead.copy(), g_lead, g_foll, True, exc.residual)


def leader_total_gradient(bundle: ActorCriticBundle, batch: Batch, leader_id: int = 1,
                          regularization: float = 1.0, cg_iters: int = 5, cg_tol: float = 1e-10,
                          follower_hessian: str = "exact", route: str = "action_space") -> np.ndarray:
    """Regularized total derivative of ``J`` for the leader's actor parameters.

    Falls back to the plain leader gradient (and bumps
    ``bundle.cg_fallbacks``) when conjugate gradient breaks down.
    """
    return stackelberg_gradients(bundle, batch, leader_id, regularization, cg_iters, cg_tol,
                                 follower_hessian, route).leader_total


def polyak_update(bundle: ActorCriticBundle) -> None:
    """``target <- tau * live + (1 - tau) * target`` for every segment."""
    tau = bundle.tau
    bundle.target.values *= 1.0 - tau
    bundle.target.values += tau * bundle.live.values
