import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from stmaddpg import diffcore as dc
from stmaddpg.quadratic_games import QuadraticGame, analytic_dse, analytic_nash, random_instance
from stmaddpg.stackelberg import (CGError, GraphGame, StackelbergConfig, StackelbergDynamics,
                                  check_dse, conjugate_gradient, simultaneous_step,
                                  stable_learning_rate, stackelberg_step, total_derivative)

from oracles import angle, random_spd, rel_err


def scalar_game(a=0.0):
    # J = -t1^2 + t1 t2 + t2^2 + a t1
    return QuadraticGame(np.array([[-1.0]]), np.array([[1.0]]), np.array([[1.0]]), np.array([a]),
                         np.array([0.0]))


def graph_scalar_game():
    def fn(t1, t2):
        x, y = dc.vsum(t1), dc.vsum(t2)
        return dc.add(dc.sub(dc.mul(x, y), dc.square(x)), dc.square(y))
    return GraphGame.from_function(fn, 1, 1)


one = np.array([1.0])


@pytest.mark.parametrize("game", [scalar_game(), graph_scalar_game()], ids=["quadratic", "graph"])
def test_total_derivative_hand_values(game):
    assert total_derivative(game, one, one, 0.0)[0] == pytest.approx(-2.5, abs=1e-12)
    assert total_derivative(game, one, one, 2.0)[0] == pytest.approx(-1.75, abs=1e-12)


@pytest.mark.parametrize("game", [scalar_game(), graph_scalar_game()], ids=["quadratic", "graph"])
def test_stackelberg_step_hand_values(game):
    t1, t2 = stackelberg_step(game, one, one, StackelbergConfig(0.1, 0.1, 0.0))
    assert t1[0] == pytest.approx(0.75, abs=1e-12)
    assert t2[0] == pytest.approx(0.7, abs=1e-12)


def test_separable_game_has_no_correction():
    g = QuadraticGame(-np.eye(2), np.zeros((2, 3)), np.eye(3), np.array([1.0, 2.0]), np.ones(3))
    t1, t2 = np.array([0.3, -0.2]), np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(total_derivative(g, t1, t2, 0.0, cg_iters=3), g.grad1(t1, t2), rtol=1e-14)


def test_fixed_point_is_unchanged():
    g = scalar_game()
    z = np.zeros(1)
    for t1, t2 in (stackelberg_step(g, z, z, StackelbergConfig()), simultaneous_step(g, z, z, 0.1, 0.1)):
        assert t1[0] == 0.0 and t2[0] == 0.0


def test_simultaneous_bilinear_step():
    g = GraphGame.from_function(lambda a, b: dc.vsum(dc.mul(a, b)), 1, 1)
    t1, t2 = simultaneous_step(g, one, one, 0.1, 0.1)
    assert (t1[0], t2[0]) == pytest.approx((1.1, 0.9))


def test_large_lambda_leader_step_matches_simultaneous_direction():
    rng = np.random.default_rng(0)
    g = random_instance(rng, 3, 4)
    t1, t2 = rng.normal(size=3), rng.normal(size=4)
    cfg = StackelbergConfig(0.1, 0.1, 1e12)
    a, _ = stackelberg_step(g, t1, t2, cfg)
    b, _ = simultaneous_step(g, t1, t2, 0.1, 0.1)
    assert angle(a - t1, b - t1) <= 1e-6


# conjugate gradient

def test_cg_identity_one_iteration():
    b = np.array([1.0, -2.0, 3.0])
    x, res = conjugate_gradient(lambda v: v, b, iters=1)
    np.testing.assert_allclose(x, b)
    assert res == 0.0


def test_cg_zero_rhs():
    x, res = conjugate_gradient(lambda v: 3 * v, np.zeros(4))
    assert np.all(x == 0) and res == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_cg_vs_dense_20x20(seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, 20, cond=20.0)
    b = rng.normal(size=20)
    x, _ = conjugate_gradient(lambda v: A @ v, b, iters=20, tol=1e-14)
    assert rel_err(x, np.linalg.solve(A, b)) <= 1e-6


def test_cg_stops_at_tolerance():
    A = np.diag([1.0, 1.0, 1.0, 5.0])
    calls = []

    def mv(v):
        calls.append(1)
        return A @ v

    _, res = conjugate_gradient(mv, np.ones(4), iters=50, tol=1e-10)
    assert res <= 1e-10
    assert len(calls) <= 3


def test_cg_reports_indefinite_and_non_finite():
    with pytest.raises(CGError) as info:
        conjugate_gradient(lambda v: -v, np.ones(3))
    assert info.value.iterations == 1
    with pytest.raises(CGError):
        conjugate_gradient(lambda v: v * np.nan, np.ones(3))


def test_singular_follower_fails_loudly_at_zero_lambda():
    g = GraphGame.from_function(lambda a, b: dc.vsum(dc.mul(a, b)), 1, 1)
    with pytest.raises(CGError):
        total_derivative(g, one, one, 0.0)


# DSE verification

def test_check_dse_scalar_game():
    g = scalar_game()
    r = check_dse(g, np.zeros(1), np.zeros(1))
    assert r.is_dse and r.leader_curvature_ok and r.follower_curvature_ok
    assert r.leader_curvature_eigs[0] == pytest.approx(-2.5, abs=1e-6)
    assert r.leader_cost_curvature_eigs[0] == pytest.approx(2.5, abs=1e-6)
    assert not check_dse(g, one, one).is_dse


def test_check_dse_degenerate_follower():
    g = GraphGame.from_function(lambda a, b: dc.vsum(dc.mul(a, b)), 1, 1)
    r = check_dse(g, np.zeros(1), np.zeros(1))
    assert not r.follower_curvature_ok
    assert not r.is_dse


def test_dse_report_consistency():
    rng = np.random.default_rng(7)
    g = random_instance(rng, 2, 3)
    t1, t2 = analytic_dse(g)
    r = check_dse(g, t1, t2)
    assert r.is_dse == (r.leader_total_grad_norm <= 1e-8 and r.follower_grad_norm <= 1e-8
                        and r.leader_curvature_ok and r.follower_curvature_ok)
    assert r.is_dse


# properties on random quadratics

@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(1, 4))
def test_stackelberg_dynamics_converge_to_dse(seed, d1, d2):
    rng = np.random.default_rng(seed)
    g = random_instance(rng, d1, d2)
    t1, t2 = analytic_dse(g)
    start1 = rng.uniform(-10, 10, d1) / np.sqrt(d1)
    start2 = rng.uniform(-10, 10, d2) / np.sqrt(d2)
    lr = stable_learning_rate(g, t1, t2, "stackelberg")
    est = StackelbergDynamics("stackelberg", lr, lr, cg_iters=2 * d2, max_iter=200_000,
                              tol=1e-13).fit(g, start1, start2)
    assert est.converged_
    np.testing.assert_allclose(est.theta1_, t1, atol=1e-6)
    np.testing.assert_allclose(est.theta2_, t2, atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(1, 4))
def test_leader_value_at_dse_not_below_nash(seed, d1, d2):
    g = random_instance(np.random.default_rng(seed), d1, d2)
    assert g.value(*analytic_dse(g)) >= g.value(*analytic_nash(g)) - 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_regularization_limits(seed):
    rng = np.random.default_rng(seed)
    g = random_instance(rng, 3, 3)
    t1, t2 = rng.normal(size=3), rng.normal(size=3)
    hnorm = np.linalg.norm(2 * g.C, 2)
    exact = total_derivative(g, t1, t2, 0.0, cg_iters=3)
    small = total_derivative(g, t1, t2, 1e-8 * hnorm, cg_iters=3)
    big = total_derivative(g, t1, t2, 1e12 * hnorm, cg_iters=3)
    assert rel_err(small, exact) <= 1e-6
    assert angle(big, g.grad1(t1, t2)) <= 1e-6


def test_dense_total_derivative_oracle():
    rng = np.random.default_rng(11)
    g = random_instance(rng, 5, 6)
    t1, t2 = rng.normal(size=5), rng.normal(size=6)
    H22, H12 = 2 * g.C, g.B
    dense = g.grad1(t1, t2) - H12 @ np.linalg.solve(H22, g.grad2(t1, t2))
    assert rel_err(total_derivative(g, t1, t2, 0.0, cg_iters=6), dense) <= 1e-8


def test_graph_game_matches_quadratic_game():
    rng = np.random.default_rng(2)
    q = random_instance(rng, 2, 3)
    A, B, C, a, c = map(np.asarray, (q.A, q.B, q.C, q.a, q.c))

    def fn(t1, t2):
        r1, r2 = dc.reshape(t1, (1, 2)), dc.reshape(t2, (3, 1))
        quad1 = dc.vsum(dc.matmul(dc.matmul(r1, A), r1.T))
        cross = dc.vsum(dc.matmul(dc.matmul(r1, B), r2))
        quad2 = dc.vsum(dc.matmul(dc.matmul(r2.T, C), r2))
        lin = dc.add(dc.vsum(dc.mul(t1, a)), dc.vsum(dc.mul(t2, c)))
        return dc.add(dc.add(quad1, cross), dc.add(quad2, lin))

    g = GraphGame.from_function(fn, 2, 3)
    t1, t2 = rng.normal(size=2), rng.normal(size=3)
    assert g.value(t1, t2) == pytest.approx(q.value(t1, t2), rel=1e-12)
    np.testing.assert_allclose(total_derivative(g, t1, t2, 0.5), total_derivative(q, t1, t2, 0.5),
                               rtol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        StackelbergConfig(leader_lr=0)
    with pytest.raises(ValueError):
        StackelbergConfig(regularization=-1)
    with pytest.raises(ValueError):
        StackelbergConfig(cg_iters=0)


def test_estimator_api():
    est = StackelbergDynamics(mode="simultaneous", leader_lr=0.05)
    assert est.get_params()["leader_lr"] == 0.05
    assert clone(est).get_params() == est.get_params()
    g = scalar_game(a=1.0)
    est.fit(g, np.zeros(1), np.zeros(1))
    t1, t2 = est.predict()
    nash = analytic_nash(g)
    np.testing.assert_allclose(t1, nash[0], atol=1e-8)
    np.testing.assert_allclose(t2, nash[1], atol=1e-8)
    with pytest.raises(ValueError):
        StackelbergDynamics(mode="nope").fit(g, np.zeros(1), np.zeros(1))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(1, 4))
def test_simultaneous_dynamics_converge_to_nash(seed, d1, d2):
    rng = np.random.default_rng(seed)
    g = random_instance(rng, d1, d2)
    t1, t2 = analytic_nash(g)
    lr = stable_learning_rate(g, t1, t2, "simultaneous")
    est = StackelbergDynamics("simultaneous", lr, lr, max_iter=200_000, tol=1e-13)
    est.fit(g, rng.uniform(-10, 10, d1) / np.sqrt(d1), rng.uniform(-10, 10, d2) / np.sqrt(d2))
    assert est.converged_
    np.testing.assert_allclose(est.theta1_, t1, atol=1e-6)
    np.testing.assert_allclose(est.theta2_, t2, atol=1e-6)


def test_stable_learning_rate_scalar_game():
    # stackelberg field is (-2.5 t1, -t1 - 2 t2): eigenvalues -2.5 and -2, bound 2/2.5
    g = scalar_game()
    assert stable_learning_rate(g, np.zeros(1), np.zeros(1), safety=0.5) == pytest.approx(0.4)
    bil = GraphGame.from_function(lambda a, b: dc.vsum(dc.mul(a, b)), 1, 1)
    with pytest.raises(ValueError):
        stable_learning_rate(bil, np.zeros(1), np.zeros(1), "simultaneous")
