"""Two-player Stackelberg gradient dynamics over a differentiable game.

Sign convention used throughout: player 1 (the leader) maximizes the game
objective ``J`` and player 2 (the follower) minimizes it. The leader's update
direction is the regularized total derivative

    grad_1 J - (d/dtheta_1 grad_2 J) (H_22 + lam I)^{-1} grad_2 J

where ``H_22`` is the follower Hessian. The inverse-Hessian-vector product is
obtained with unpreconditioned conjugate gradient started from zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np
from sklearn.base import BaseEstimator

from .diffcore import Graph, Layout, ParameterVector, Session

__all__ = [
    "CGError",
    "DifferentiableGame",
    "GraphGame",
    "StackelbergConfig",
    "DSEReport",
    "conjugate_gradient",
    "total_derivative",
    "stable_learning_rate",
    "stackelberg_step",
    "simultaneous_step",
    "check_dse",
    "run_dynamics",
    "StackelbergDynamics",
]


class CGError(RuntimeError):
    """Conjugate gradient broke down; ``residual`` is the last residual norm."""

    def __init__(self, message: str, residual: float = math.nan, iterations: int = 0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


@runtime_checkable
class DifferentiableGame(Protocol):
    """Scalar objective ``J(theta1, theta2)`` with first and second order products."""

    def value(self, theta1: np.ndarray, theta2: np.ndarray) -> float: ...

    def grad1(self, theta1: np.ndarray, theta2: np.ndarray) -> np.ndarray: ...

    def grad2(self, theta1: np.ndarray, theta2: np.ndarray) -> np.ndarray: ...

    def hvp2(self, theta1: np.ndarray, theta2: np.ndarray, v: np.ndarray) -> np.ndarray: ...

    def mixed12(self, theta1: np.ndarray, theta2: np.ndarray, v: np.ndarray) -> np.ndarray: ...


class GraphGame:
    """Adapter exposing a diffcore :class:`Graph` as a :class:`DifferentiableGame`.

    The graph must have exactly the parameter segments ``leader_segment`` and
    ``follower_segment``. The last traced point is cached so a CG solve does
    not retrace the forward pass for every Hessian-vector product.
    """

    def __init__(self, graph: Graph, leader_segment: str = "theta1",
                 follower_segment: str = "theta2", inputs=None):
        self.graph = graph
        self.s1 = leader_segment
        self.s2 = follower_segment
        self.inputs = inputs or {}
        self._key = None
        self._session = None

    @classmethod
    def from_function(cls, fn: Callable, d1: int, d2: int) -> "GraphGame":
        """Build from ``fn(theta1_var, theta2_var) -> Var`` over flat vectors."""
        layout = Layout({"theta1": [("p", (d1,))], "theta2": [("p", (d2,))]})
        graph = Graph(lambda P, X: fn(P["theta1"]["p"], P["theta2"]["p"]), layout)
        return cls(graph)

    def _at(self, theta1, theta2) -> Session:
        t1 = np.asarray(theta1, dtype=np.float64).ravel()
        t2 = np.asarray(theta2, dtype=np.float64).ravel()
        key = (t1.tobytes(), t2.tobytes())
        if key != self._key:
            params = ParameterVector(self.graph.layout)
            params.set_segment(self.s1, t1)
            params.set_segment(self.s2, t2)
            self._session = Session(self.graph, params, self.inputs)
            self._key = key
        return self._session

    def value(self, theta1, theta2):
        return float(self._at(theta1, theta2).value)

    def grad1(self, theta1, theta2):
        return self._at(theta1, theta2).gradient(self.s1)

    def grad2(self, theta1, theta2):
        return self._at(theta1, theta2).gradient(self.s2)

    def hvp2(self, theta1, theta2, v):
        return self._at(theta1, theta2).hvp(self.s2, v)

    def mixed12(self, theta1, theta2, v):
        return self._at(theta1, theta2).mixed(self.s1, self.s2, v)


@dataclass
class StackelbergConfig:
    leader_lr: float = 0.01
    follower_lr: float = 0.01
    regularization: float = 0.0
    cg_iters: int = 5
    cg_tol: float = 1e-10

    def __post_init__(self):
        if self.leader_lr <= 0 or self.follower_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.regularization < 0:
            raise ValueError("regularization must be non-negative")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")


@dataclass
class DSEReport:
    """Outcome of :func:`check_dse`.

    ``leader_curvature_eigs`` are eigenvalues of the symmetrized Jacobian of
    the leader's total derivative of ``J`` (maximization convention: all
    negative at a strict local maximum). ``leader_cost_curvature_eigs`` is the
    same spectrum for the leader cost ``-J`` (minimization convention: all
    positive). ``follower_min_eig`` is the smallest eigenvalue of
    ``H_22 = d^2 J / d theta2^2`` (the follower minimizes ``J``).
    """

    leader_total_grad_norm: float
    follower_grad_norm: float
    leader_curvature_ok: bool
    follower_curvature_ok: bool
    is_dse: bool
    leader_curvature_eigs: np.ndarray = None
    follower_min_eig: float = math.nan
    convention: str = "player 1 maximizes J, player 2 minimizes J"

    @property
    def leader_cost_curvature_eigs(self):
        return None if self.leader_curvature_eigs is None else -self.leader_curvature_eigs


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b, iters: int = 5,
                       tol: float = 1e-10):
    """Solve ``matvec(x) = b`` for a symmetric positive-definite operator.

    Starts at ``x = 0`` with no preconditioner and stops once the residual norm
    drops to ``tol`` or after ``iters`` iterations. Returns ``(x, residual)``.

    Raises :class:`CGError` when an iterate goes non-finite, when a search
    direction has non-positive curvature (the operator is not positive
    definite there), or when the final residual exceeds the initial one.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    rs = float(r @ r)
    r0 = math.sqrt(rs)
    if r0 <= tol:
        return x, r0
    p = r.copy()
    k = 0
    for k in range(1, iters + 1):
        Ap = np.asarray(matvec(p), dtype=np.float64)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise CGError("non-finite curvature in conjugate gradient", math.sqrt(rs), k)
        if pAp <= 0.0:
            raise CGError("operator is not positive definite along a search direction",
                          math.sqrt(rs), k)
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new) or not np.all(np.isfinite(x)):
            raise CGError("non-finite iterate in conjugate gradient", math.sqrt(rs), k)
        if math.sqrt(rs_new) <= tol:
            rs = rs_new
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    res = math.sqrt(rs)
    if res > r0:
        raise CGError("conjugate gradient residual grew", res, k)
    return x, res


def _solve_follower(game, t1, t2, lam, iters, tol):
    g2 = game.grad2(t1, t2)
    if lam == 0.0:
        op = lambda v: game.hvp2(t1, t2, v)
    else:
        op = lambda v: game.hvp2(t1, t2, v) + lam * v
    w, _ = conjugate_gradient(op, g2, iters, tol)
    return w


def total_derivative(game: DifferentiableGame, theta1, theta2, regularization: float = 0.0,
                     cg_iters: int = 5, cg_tol: float = 1e-10) -> np.ndarray:
    """Leader's regularized total derivative of ``J`` at ``(theta1, theta2)``."""
    if regularization < 0:
        raise ValueError("regularization must be non-negative")
    t1 = np.asarray(theta1, dtype=np.float64)
    t2 = np.asarray(theta2, dtype=np.float64)
    g1 = game.grad1(t1, t2)
    w = _solve_follower(game, t1, t2, float(regularization), cg_iters, cg_tol)
    return g1 - game.mixed12(t1, t2, w)


def stackelberg_step(game: DifferentiableGame, theta1, theta2, config: StackelbergConfig):
    """Leader ascends its total derivative, follower descends its partial gradient."""
    t1 = np.asarray(theta1, dtype=np.float64)
    t2 = np.asarray(theta2, dtype=np.float64)
    d1 = total_derivative(game, t1, t2, config.regularization, config.cg_iters, config.cg_tol)
    g2 = game.grad2(t1, t2)
    return t1 + config.leader_lr * d1, t2 - config.follower_lr * g2


def simultaneous_step(game: DifferentiableGame, theta1, theta2, leader_lr: float,
                      follower_lr: float):
    t1 = np.asarray(theta1, dtype=np.float64)
    t2 = np.asarray(theta2, dtype=np.float64)
    if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2))):
        raise ValueError("parameters must be finite")
    g1 = game.grad1(t1, t2)
    g2 = game.grad2(t1, t2)
    return t1 + leader_lr * g1, t2 - follower_lr * g2


def _follower_hessian(game, t1, t2) -> np.ndarray:
    d2 = t2.size
    H = np.column_stack([game.hvp2(t1, t2, e) for e in np.eye(d2)])
    return 0.5 * (H + H.T)


def check_dse(game: DifferentiableGame, theta1, theta2, tol: float = 1e-8,
              fd_step: float = 1e-5, cg_iters: int | None = None) -> DSEReport:
    """Test the differential Stackelberg equilibrium conditions at a point.

    First-order conditions use the unregularized total derivative and the
    follower gradient. Leader curvature comes from central finite differences
    of the total derivative along coordinate directions; follower curvature
    from the follower Hessian assembled out of Hessian-vector probes.
    """
    t1 = np.asarray(theta1, dtype=np.float64).ravel()
    t2 = np.asarray(theta2, dtype=np.float64).ravel()
    iters = cg_iters if cg_iters is not None else max(5, 2 * t2.size)

    g2 = game.grad2(t1, t2)
    follower_norm = float(np.linalg.norm(g2))
    H22 = _follower_hessian(game, t1, t2)
    min_eig = float(np.linalg.eigvalsh(H22).min())
    follower_ok = min_eig > 0.0

    def td(x):
        return total_derivative(game, x, t2, 0.0, iters, 0.0)

    try:
        leader_norm = float(np.linalg.norm(td(t1)))
        d1 = t1.size
        cols = []
        for i in range(d1):
            e = np.zeros(d1)
            e[i] = fd_step
            cols.append((td(t1 + e) - td(t1 - e)) / (2 * fd_step))
        S = np.column_stack(cols)
        eigs = np.linalg.eigvalsh(0.5 * (S + S.T))
        leader_ok = bool(np.all(eigs < 0.0))
    except CGError:
        leader_norm, eigs, leader_ok = math.nan, None, False

    is_dse = bool(leader_ok and follower_ok and leader_norm <= tol and follower_norm <= tol)
    return DSEReport(leader_norm, follower_norm, leader_ok, follower_ok, is_dse, eigs, min_eig)


def stable_learning_rate(game: DifferentiableGame, theta1, theta2, mode: str = "stackelberg",
                         regularization: float = 0.0, safety: float = 0.5) -> float:
    """Shared step size for which the linearized dynamics contract near a point.

    The update field ``(total_derivative, -grad2)`` (or ``(grad1, -grad2)``
    for simultaneous play) is linearized by unit probes along coordinate
    directions, which is exact for quadratic games.
    For eigenvalues ``mu`` with negative real part, ``theta + a * field`` is
    locally contracting iff ``a < -2 Re(mu) / |mu|^2``; the returned rate is
    ``safety`` times the smallest such bound. Raises ``ValueError`` when some
    eigenvalue has a non-negative real part, i.e. no step size is stable.
    """
    if not 0.0 < safety < 1.0:
        raise ValueError("safety must lie in (0, 1)")
    t1 = np.asarray(theta1, dtype=np.float64).ravel()
    t2 = np.asarray(theta2, dtype=np.float64).ravel()
    d1 = t1.size
    iters = max(5, 2 * t2.size)

    def field(z):
        a, b = z[:d1], z[d1:]
        if mode == "stackelberg":
            g1 = total_derivative(game, a, b, regularization, iters, 0.0)
        elif mode == "simultaneous":
            g1 = game.grad1(a, b)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return np.concatenate([g1, -game.grad2(a, b)])

    z0 = np.concatenate([t1, t2])
    f0 = field(z0)
    L = np.column_stack([field(z0 + e) - f0 for e in np.eye(z0.size)])
    mu = np.linalg.eigvals(L)
    if np.any(mu.real >= 0.0):
        raise ValueError("linearized dynamics have an eigenvalue with non-negative real part")
    return float(safety * np.min(-2.0 * mu.real / np.abs(mu) ** 2))


def run_dynamics(step: Callable, theta1, theta2, max_iter: int = 100_000, tol: float = 1e-12):
    """Iterate ``step(t1, t2) -> (t1, t2)`` until the update norm is below ``tol``.

    Returns ``(theta1, theta2, n_iter, converged)``.
    """
    t1 = np.asarray(theta1, dtype=np.float64)
    t2 = np.asarray(theta2, dtype=np.float64)
    for k in range(1, max_iter + 1):
        n1, n2 = step(t1, t2)
        delta = max(np.max(np.abs(n1 - t1), initial=0.0), np.max(np.abs(n2 - t2), initial=0.0))
        t1, t2 = n1, n2
        if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2))):
            return t1, t2, k, False
        if delta <= tol:
            return t1, t2, k, True
    return t1, t2, max_iter, False


class StackelbergDynamics(BaseEstimator):
    """Estimator wrapper running leader/follower dynamics to a fixed point.

    ``fit(game, theta1, theta2)`` runs either the Stackelberg dynamics
    (``mode="stackelberg"``) or simultaneous gradient play
    (``mode="simultaneous"``) and stores ``theta1_``, ``theta2_``,
    ``n_iter_`` and ``converged_``.
    """

    def __init__(self, mode="stackelberg", leader_lr=0.01, follower_lr=0.01,
                 regularization=0.0, cg_iters=5, cg_tol=1e-10, max_iter=100_000, tol=1e-12):
        self.mode = mode
        self.leader_lr = leader_lr
        self.follower_lr = follower_lr
        self.regularization = regularization
        self.cg_iters = cg_iters
        self.cg_tol = cg_tol
        self.max_iter = max_iter
        self.tol = tol

    def _step_fn(self, game):
        if self.mode == "stackelberg":
            cfg = StackelbergConfig(self.leader_lr, self.follower_lr, self.regularization,
                                    self.cg_iters, self.cg_tol)
            return lambda a, b: stackelberg_step(game, a, b, cfg)
        if self.mode == "simultaneous":
            return lambda a, b: simultaneous_step(game, a, b, self.leader_lr, self.follower_lr)
        raise ValueError(f"unknown mode {self.mode!r}")

    def fit(self, game, theta1, theta2):
        step = self._step_fn(game)
        self.theta1_, self.theta2_, self.n_iter_, self.converged_ = run_dynamics(
            step, theta1, theta2, self.max_iter, self.tol)
        self.leader_value_ = float(game.value(self.theta1_, self.theta2_))
        return self

    def predict(self, game=None):
        """Return the fitted ``(theta1, theta2)`` point."""
        if not hasattr(self, "theta1_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("StackelbergDynamics is not fitted yet")
        return self.theta1_, self.theta2_
