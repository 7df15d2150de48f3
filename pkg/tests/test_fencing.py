import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from stmaddpg.fencing import (BatGeometry, FencingTick, RefereeState, closest_point,
                              closest_point_fraction, heuristic_defense_orientation,
                              heuristic_defense_position, read_ticks_csv, referee_run,
                              referee_step, referee_trace)

from fencing_fixtures import BLOCKED, HIT, STREAMS

ticks = st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans()), max_size=400)


@pytest.mark.parametrize("name,stream,once,per_tick", STREAMS, ids=[s[0] for s in STREAMS])
def test_hand_traced_streams(name, stream, once, per_tick):
    assert referee_run(stream, dwell_mode="once") == once
    assert referee_run(stream, dwell_mode="per_tick") == per_tick


def test_single_tick_rules():
    s, d = referee_step(RefereeState(), (True, True, False))
    assert d == -10 and s.score == -10
    s, d = referee_step(RefereeState(5, 17), (False, False, False))
    assert d == 0 and s == RefereeState(5, 0)
    s, d = referee_step(RefereeState(), FencingTick(True, False, True))
    assert d == 1 and s.dwell == 1


def test_horizon_and_mode_checks():
    with pytest.raises(ValueError):
        referee_run([HIT] * 11, horizon=10)
    with pytest.raises(ValueError):
        referee_step(RefereeState(), HIT, dwell_mode="sometimes")
    with pytest.raises(ValueError):
        RefereeState(0, -1)


@settings(max_examples=50, deadline=None)
@given(ticks, st.integers(0, 400), st.sampled_from(["once", "per_tick"]))
def test_fold_can_resume_anywhere(stream, cut, mode):
    cut = min(cut, len(stream))
    whole = referee_run(stream, dwell_mode=mode)
    state = RefereeState()
    for state, _ in referee_trace(stream[:cut], dwell_mode=mode):
        pass
    assert referee_run(stream[cut:], dwell_mode=mode, state=state) == whole


@settings(max_examples=50, deadline=None)
@given(ticks, st.integers(0, 399), st.sampled_from(["once", "per_tick"]))
def test_blocking_one_hit_costs_eleven(stream, i, mode):
    hits = [k for k, t in enumerate(stream) if t[0] and not t[1]]
    if not hits:
        return
    k = hits[i % len(hits)]
    edited = list(stream)
    edited[k] = (True, True, stream[k][2])
    assert referee_run(edited, dwell_mode=mode) - referee_run(stream, dwell_mode=mode) == -11


def test_dwell_counter_resets_when_bat_leaves():
    state = RefereeState()
    for t in [(False, False, True)] * 5 + [(True, False, False)]:
        state, _ = referee_step(state, t)
    assert state.dwell == 0


def test_tick_csv(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("t,bat_a_in_target,bats_contact,bat_p_in_target\n0,1,0,0\n1,true,TRUE,false\n")
    assert read_ticks_csv(path) == [FencingTick(*HIT), FencingTick(*BLOCKED)]
    path.write_text("t,bat_a_in_target,bats_contact,bat_p_in_target\n0,1,0,maybe\n")
    with pytest.raises(ValueError, match="line 2"):
        read_ticks_csv(path)
    path.write_text("time,a,b,c\n")
    with pytest.raises(ValueError):
        read_ticks_csv(path)


# geometry

def geom(tar, up=(0, 0, 1), low=(0, 0, 0), L=0.5):
    return BatGeometry(np.array(tar, float), np.array(up, float), np.array(low, float), L)


def test_ht_worked_examples():
    assert closest_point_fraction(geom((0, 0, 0))) == 0.0
    assert closest_point_fraction(geom((0, 0, 50))) == 1.0
    assert closest_point_fraction(geom((0, 0, 0.4))) == 0.4


def test_ht_uses_the_printed_denominator():
    # bat of length 1 with L_sword = 1: denominator 2 halves the projection
    assert closest_point_fraction(geom((0, 0, 0.8), L=1.0)) == pytest.approx(0.4, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(0.1, 3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(0.2, 5))
def test_ht_translation_and_scaling(pts, L, shift, scale):
    tar, up, low = np.array(pts[:3]), np.array(pts[3:6]), np.array(pts[6:])
    if np.linalg.norm(up - low) < 1e-3:
        return
    base = closest_point_fraction(BatGeometry(tar, up, low, L))
    moved = BatGeometry(tar + shift, up + shift, low + shift, L)
    assert closest_point_fraction(moved) == pytest.approx(base, abs=1e-9)
    # numerator scales with scale**2 and the denominator with scale
    raw = float(np.dot(tar - low, up - low)) / (2 * L)
    scaled = BatGeometry(tar * scale, up * scale, low * scale, L * scale)
    assert closest_point_fraction(scaled) == pytest.approx(min(1, max(0, raw * scale)), abs=1e-9)


def test_defense_position_examples():
    g = geom((0.3, 0.1, 0.4))
    np.testing.assert_array_equal(heuristic_defense_position(g, 1.0), closest_point(g))
    g2 = geom((0, 0, 0.4))
    np.testing.assert_allclose(heuristic_defense_position(g2, 0.7), g2.tar, atol=1e-15)
    with pytest.raises(ValueError):
        heuristic_defense_position(g, 0.4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9), st.floats(0.5, 1.0))
def test_defense_position_ratio_and_hull(pts, u):
    tar, up, low = np.array(pts[:3]), np.array(pts[3:6]), np.array(pts[6:])
    if np.linalg.norm(up - low) < 1e-3:
        return
    g = BatGeometry(tar, up, low, 0.5)
    hc = closest_point(g)
    if np.linalg.norm(hc - tar) < 1e-6:
        return
    bp = heuristic_defense_position(g, u)
    assert np.linalg.norm(bp - tar) / np.linalg.norm(hc - tar) == pytest.approx(u, abs=1e-12)
    # on the segment [tar, h_close]
    t = np.dot(bp - tar, hc - tar) / np.dot(hc - tar, hc - tar)
    assert 0 <= t <= 1 + 1e-12
    np.testing.assert_allclose(bp, tar + t * (hc - tar), atol=1e-12)


def test_degenerate_bat_rejected():
    with pytest.raises(ValueError):
        geom((0, 0, 0), up=(1, 1, 1), low=(1, 1, 1))
    with pytest.raises(ValueError):
        geom((0, 0, 0), L=0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_orientation_perpendicular_and_unit(v):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-3:
        return
    out = heuristic_defense_orientation(v)
    assert abs(np.dot(out, v / np.linalg.norm(v))) <= 1e-12
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("offsets", [(25, 0, 0), (0, -25, 0), (10, 20, -15)])
def test_orientation_rotation_against_matrix_oracle(offsets):
    axis = np.array([0.3, -0.5, 0.81])
    base = heuristic_defense_orientation(axis)
    # extrinsic x-y-z Euler angles compose as Rz Ry Rx
    expected = Rotation.from_euler("xyz", offsets, degrees=True).apply(base)
    np.testing.assert_allclose(heuristic_defense_orientation(axis, offsets), expected, atol=1e-10)


def test_orientation_input_checks():
    with pytest.raises(ValueError):
        heuristic_defense_orientation([0, 0, 0])
    with pytest.raises(ValueError):
        heuristic_defense_orientation([1, 0, 0], (26, 0, 0))
