"""Zero-sum quadratic games with closed-form Nash and Stackelberg points.

``J(t1, t2) = t1'A t1 + t1'B t2 + t2'C t2 + a't1 + c't2`` with player 1
maximizing and player 2 minimizing. The follower best response is
``t2*(t1) = -C^{-1}(B't1 + c)/2`` and the leader's reduced objective has
Hessian ``2A - B C^{-1} B'/2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuadraticGame",
    "PreconditionError",
    "analytic_follower_best_response",
    "analytic_dse",
    "analytic_nash",
    "random_instance",
    "loads",
    "dumps",
    "load",
    "FormatError",
]


class PreconditionError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _is_pd(M: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(0.5 * (M + M.T))
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass(frozen=True)
class QuadraticGame:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    a: np.ndarray = field(default=None)
    c: np.ndarray = field(default=None)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        d1, d2 = A.shape[0], C.shape[0]
        B = np.asarray(self.B, dtype=np.float64).reshape(d1, d2)
        a = np.zeros(d1) if self.a is None else np.asarray(self.a, dtype=np.float64).reshape(d1)
        c = np.zeros(d2) if self.c is None else np.asarray(self.c, dtype=np.float64).reshape(d2)
        if A.shape != (d1, d1) or C.shape != (d2, d2):
            raise ValueError("A and C must be square")
        if not np.allclose(A, A.T) or not np.allclose(C, C.T):
            raise ValueError("A and C must be symmetric")
        for name, val in (("A", A), ("B", B), ("C", C), ("a", a), ("c", c)):
            object.__setattr__(self, name, val)

    @property
    def d1(self) -> int:
        return self.A.shape[0]

    @property
    def d2(self) -> int:
        return self.C.shape[0]

    def value(self, theta1, theta2) -> float:
        t1 = np.asarray(theta1, dtype=np.float64)
        t2 = np.asarray(theta2, dtype=np.float64)
        return float(t1 @ self.A @ t1 + t1 @ self.B @ t2 + t2 @ self.C @ t2
                     + self.a @ t1 + self.c @ t2)

    def grad1(self, theta1, theta2):
        return 2 * self.A @ theta1 + self.B @ theta2 + self.a

    def grad2(self, theta1, theta2):
        return self.B.T @ theta1 + 2 * self.C @ theta2 + self.c

    def hvp2(self, theta1, theta2, v):
        return 2 * self.C @ np.asarray(v, dtype=np.float64)

    def mixed12(self, theta1, theta2, v):
        return self.B @ np.asarray(v, dtype=np.float64)

    def reduced_hessian(self) -> np.ndarray:
        """Hessian of ``t1 -> J(t1, t2*(t1))``."""
        self._require_follower_pd()
        return 2 * self.A - 0.5 * self.B @ np.linalg.solve(self.C, self.B.T)

    def swapped(self) -> "QuadraticGame":
        """Same game with the players' roles exchanged (new player 1 = old player 2)."""
        return QuadraticGame(-self.C, -self.B.T, -self.A, -self.c, -self.a)

    def _require_follower_pd(self):
        if not _is_pd(self.C):
            raise PreconditionError("C must be positive definite (follower problem strongly convex)")


def analytic_follower_best_response(game: QuadraticGame, theta1) -> np.ndarray:
    game._require_follower_pd()
    t1 = np.asarray(theta1, dtype=np.float64).reshape(game.d1)
    return -0.5 * np.linalg.solve(game.C, game.B.T @ t1 + game.c)


def analytic_dse(game: QuadraticGame):
    R = game.reduced_hessian()
    if not _is_pd(-R):
        raise PreconditionError("leader reduced objective is not strictly concave")
    rhs = game.a - 0.5 * game.B @ np.linalg.solve(game.C, game.c)
    t1 = -np.linalg.solve(R, rhs)
    return t1, analytic_follower_best_response(game, t1)


def analytic_nash(game: QuadraticGame):
    d1 = game.d1
    K = np.block([[2 * game.A, game.B], [game.B.T, 2 * game.C]])
    rhs = -np.concatenate([game.a, game.c])
    try:
        z = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError("stacked first-order system is singular") from exc
    if not np.all(np.isfinite(z)):
        raise PreconditionError("stacked first-order system is singular")
    return z[:d1], z[d1:]


def random_instance(rng: np.random.Generator, d1: int, d2: int) -> QuadraticGame:
    """Well-conditioned instance with ``C = M'M + 0.1 I`` and ``A = -(N'N + 0.1 I)``."""
    M = rng.normal(size=(d2, d2)) / np.sqrt(d2)
    N = rng.normal(size=(d1, d1)) / np.sqrt(d1)
    C = M.T @ M + 0.1 * np.eye(d2)
    A = -(N.T @ N + 0.1 * np.eye(d1))
    B = rng.normal(size=(d1, d2))
    return QuadraticGame(A, B, C, rng.normal(size=d1), rng.normal(size=d2))


# text format:
#   d1 d2
#   A (d1 rows), B (d1 rows), C (d2 rows), a (1 row), c (1 row)
# blank lines and '#' comments are ignored

def loads(text: str) -> QuadraticGame:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append((lineno, [float(tok) for tok in line.split()]))
        except ValueError:
            raise FormatError(f"non-numeric entry in {raw.strip()!r}", lineno) from None
    last = rows[-1][0] if rows else 1
    if not rows:
        raise FormatError("empty instance", 1)
    lineno, head = rows[0]
    if len(head) != 2 or any(v != int(v) or v < 1 for v in head):
        raise FormatError("header must be two positive integers 'd1 d2'", lineno)
    d1, d2 = int(head[0]), int(head[1])
    pos = 1

    def take(nrows, ncols, name):
        nonlocal pos
        out = []
        for _ in range(nrows):
            if pos >= len(rows):
                raise FormatError(f"unexpected end of file while reading {name}", last)
            ln, vals = rows[pos]
            if len(vals) != ncols:
                raise FormatError(f"{name} row needs {ncols} values, got {len(vals)}", ln)
            out.append(vals)
            pos += 1
        return np.array(out)

    A = take(d1, d1, "A")
    B = take(d1, d2, "B")
    C = take(d2, d2, "C")
    a = take(1, d1, "a")[0]
    c = take(1, d2, "c")[0]
    if pos != len(rows):
        raise FormatError("trailing data after c", rows[pos][0])
    try:
        return QuadraticGame(A, B, C, a, c)
    except ValueError as exc:
        raise FormatError(str(exc), rows[0][0]) from None


def load(path) -> QuadraticGame:
    with open(path) as fh:
        return loads(fh.read())


def dumps(game: QuadraticGame) -> str:
    fmt = lambda row: " ".join(repr(float(v)) for v in row)
    lines = [f"{game.d1} {game.d2}", "# A"]
    lines += [fmt(r) for r in game.A]
    lines.append("# B")
    lines += [fmt(r) for r in game.B]
    lines.append("# C")
    lines += [fmt(r) for r in game.C]
    lines += ["# a", fmt(game.a), "# c", fmt(game.c)]
    return "\n".join(lines) + "\n"
