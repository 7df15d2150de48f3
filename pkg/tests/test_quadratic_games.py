import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from stmaddpg.quadratic_games import (FormatError, PreconditionError, QuadraticGame,
                                      analytic_dse, analytic_follower_best_response,
                                      analytic_nash, dumps, load, loads, random_instance)
from stmaddpg.stackelberg import check_dse


def scalar(a=0.0, c=0.0):
    return QuadraticGame([[-1.0]], [[1.0]], [[1.0]], [a], [c])


def test_best_response_scalar():
    br = analytic_follower_best_response(scalar(), [1.0])
    assert br[0] == pytest.approx(-0.5, abs=1e-15)


def test_best_response_uncoupled_is_zero():
    g = QuadraticGame(-np.eye(2), np.zeros((2, 3)), np.eye(3))
    for t1 in ([1.0, 2.0], [-5.0, 0.3]):
        assert np.all(analytic_follower_best_response(g, t1) == 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_best_response_is_stationary(seed):
    rng = np.random.default_rng(seed)
    g = random_instance(rng, 3, 4)
    t1 = rng.normal(size=3)
    br = analytic_follower_best_response(g, t1)
    assert np.max(np.abs(g.grad2(t1, br))) <= 1e-12 * max(1.0, np.abs(g.c).max() + np.abs(g.B).max())


def test_dse_scalar():
    t1, t2 = analytic_dse(scalar())
    assert t1[0] == 0.0 and t2[0] == 0.0


def test_dse_linear_term_matches_grid_search():
    g = scalar(a=-2.5)
    grid = np.arange(-50000, 50001) * 1e-4
    # reduced objective with the follower at its best response -t1/2
    reduced = -grid ** 2 + grid * (-grid / 2) + (grid / 2) ** 2 - 2.5 * grid
    best = grid[np.argmax(reduced)]
    t1, t2 = analytic_dse(g)
    assert abs(t1[0] - best) <= 1e-4
    assert t2[0] == pytest.approx(-t1[0] / 2)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3), st.integers(1, 3))
def test_swapped_roles_against_numeric_bilevel(seed, d1, d2):
    # player 2 leads: minimize J(t1*(t2), t2) where player 1 best-responds by maximizing
    g = random_instance(np.random.default_rng(seed), d1, d2)

    def p1_response(t2):
        return -0.5 * np.linalg.solve(g.A, g.B @ t2 + g.a)

    res = minimize(lambda t2: g.value(p1_response(t2), t2), np.zeros(d2), method="BFGS",
                   options={"gtol": 1e-11})
    s1, s2 = analytic_dse(g.swapped())
    np.testing.assert_allclose(s1, res.x, atol=1e-5)
    np.testing.assert_allclose(s2, p1_response(res.x), atol=1e-5)
    twice = g.swapped().swapped()
    for name in "ABCac":
        np.testing.assert_array_equal(getattr(twice, name), getattr(g, name))


def test_nash_zero_linear_terms():
    t1, t2 = analytic_nash(QuadraticGame(-np.eye(2), np.ones((2, 2)), 2 * np.eye(2)))
    assert np.all(t1 == 0) and np.all(t2 == 0)


def test_nash_scalar_residual():
    g = scalar(a=1.0)
    t1, t2 = analytic_nash(g)
    assert abs(g.grad1(t1, t2)[0]) <= 1e-12 and abs(g.grad2(t1, t2)[0]) <= 1e-12


def test_nash_decoupled():
    A, C = -np.diag([1.0, 2.0]), np.diag([3.0, 0.5])
    a, c = np.array([1.0, -1.0]), np.array([2.0, 4.0])
    t1, t2 = analytic_nash(QuadraticGame(A, np.zeros((2, 2)), C, a, c))
    np.testing.assert_allclose(t1, -np.linalg.solve(A, a) / 2)
    np.testing.assert_allclose(t2, -np.linalg.solve(C, c) / 2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 5), st.integers(1, 5))
def test_dse_passes_check_and_beats_nash(seed, d1, d2):
    g = random_instance(np.random.default_rng(seed), d1, d2)
    dse = analytic_dse(g)
    assert check_dse(g, *dse).is_dse
    assert g.value(*dse) >= g.value(*analytic_nash(g)) - 1e-9


def test_random_instance_preconditions():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = random_instance(rng, 3, 2)
        assert np.linalg.eigvalsh(g.C).min() >= 0.1 - 1e-12
        assert np.linalg.eigvalsh(g.A).max() <= -0.1 + 1e-12


def test_preconditions_rejected():
    with pytest.raises(PreconditionError):
        analytic_follower_best_response(QuadraticGame([[-1.0]], [[1.0]], [[-1.0]]), [1.0])
    with pytest.raises(PreconditionError):
        analytic_dse(QuadraticGame([[1.0]], [[0.0]], [[1.0]]))
    with pytest.raises(PreconditionError):
        analytic_nash(QuadraticGame([[0.0]], [[0.0]], [[1.0]]))
    with pytest.raises(ValueError):
        QuadraticGame([[1.0, 2.0], [0.0, 1.0]], np.zeros((2, 1)), [[1.0]])


def test_text_format_roundtrip(tmp_path):
    g = random_instance(np.random.default_rng(3), 2, 3)
    back = loads(dumps(g))
    for name in "ABCac":
        np.testing.assert_array_equal(getattr(back, name), getattr(g, name))
    path = tmp_path / "g.txt"
    path.write_text("# comment\n1 1\n-1\n\n1\n1  # C\n0\n0\n")
    h = load(path)
    assert h.A[0, 0] == -1.0 and h.C[0, 0] == 1.0


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("1 x\n", 1),
    ("1.5 1\n", 1),
    ("1 1\n-1\n1 2\n", 3),
    ("1 1\n-1\n1\n1\n0\n", 5),
    ("1 1\n-1\n1\n1\n0\n0\n7\n", 7),
    ("1 1\n-1\n1\n1\nabc\n0\n", 5),
])
def test_format_errors_report_line(text, line):
    with pytest.raises(FormatError) as info:
        loads(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)
