"""Fencing game referee and the heuristic protector's pose geometry.

Pure functions only: no physics. Randomness (the ``uniform(0.5, 1)``
distance factor and the angular offsets) is supplied by the caller.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

__all__ = [
    "FencingTick",
    "RefereeState",
    "BatGeometry",
    "DWELL_LIMIT",
    "referee_step",
    "referee_run",
    "referee_trace",
    "read_ticks_csv",
    "closest_point_fraction",
    "closest_point",
    "heuristic_defense_position",
    "heuristic_defense_orientation",
    "rotation_matrix",
]

DWELL_LIMIT = 200
ATTACK_POINTS = 1
CONTACT_PENALTY = -10
DWELL_BONUS = 10
DWELL_MODES = ("once", "per_tick")


@dataclass(frozen=True)
class FencingTick:
    bat_a_in_target: bool
    bats_contact: bool
    bat_p_in_target: bool


@dataclass(frozen=True)
class RefereeState:
    score: int = 0
    dwell: int = 0

    def __post_init__(self):
        if self.dwell < 0:
            raise ValueError("dwell counter must be non-negative")


def _tick(t) -> FencingTick:
    return t if isinstance(t, FencingTick) else FencingTick(*(bool(x) for x in t))


def referee_step(state: RefereeState, tick, dwell_mode: str = "once") -> tuple[RefereeState, int]:
    """Advance the referee by one tick; returns ``(new_state, delta)``.

    The protector bonus is paid when its bat has stayed in the target for more
    than ``DWELL_LIMIT`` consecutive ticks: once per stay (on tick 201) by
    default, or on every tick past the limit with ``dwell_mode="per_tick"``.
    """
    if dwell_mode not in DWELL_MODES:
        raise ValueError(f"dwell_mode must be one of {DWELL_MODES}")
    tick = _tick(tick)
    delta = 0
    if tick.bat_a_in_target:
        delta += CONTACT_PENALTY if tick.bats_contact else ATTACK_POINTS
    dwell = state.dwell + 1 if tick.bat_p_in_target else 0
    if dwell > DWELL_LIMIT and (dwell_mode == "per_tick" or dwell == DWELL_LIMIT + 1):
        delta += DWELL_BONUS
    return RefereeState(state.score + delta, dwell), delta


def referee_trace(ticks: Iterable, state: RefereeState | None = None, dwell_mode: str = "once"):
    """Yield ``(state, delta)`` after every tick."""
    state = state or RefereeState()
    for t in ticks:
        state, delta = referee_step(state, t, dwell_mode)
        yield state, delta


def referee_run(ticks, horizon: int = 1000, dwell_mode: str = "once",
                state: RefereeState | None = None) -> int:
    ticks = list(ticks)
    if len(ticks) > horizon:
        raise ValueError(f"tick stream has {len(ticks)} ticks, horizon is {horizon}")
    final = state or RefereeState()
    for final, _ in referee_trace(ticks, final, dwell_mode):
        pass
    return final.score


_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _flag(text: str, line: int) -> bool:
    v = text.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"line {line}: not a boolean: {text!r}")


def read_ticks_csv(path) -> list[FencingTick]:
    """Read ``t, bat_a_in_target, bats_contact, bat_p_in_target`` rows."""
    ticks = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        want = ["t", "bat_a_in_target", "bats_contact", "bat_p_in_target"]
        if header is None or [h.strip() for h in header] != want:
            raise ValueError(f"expected header {','.join(want)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"line {line}: expected 4 fields, got {len(row)}")
            ticks.append(FencingTick(*(_flag(x, line) for x in row[1:])))
    return ticks


@dataclass(frozen=True)
class BatGeometry:
    tar: np.ndarray
    h_up: np.ndarray
    h_low: np.ndarray
    L_sword: float

    def __post_init__(self):
        for name in ("tar", "h_up", "h_low"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite 3-vector")
            object.__setattr__(self, name, v)
        if not self.L_sword > 0:
            raise ValueError("L_sword must be positive")
        if np.linalg.norm(self.h_up - self.h_low) == 0:
            raise ValueError("degenerate bat: h_up equals h_low")


def closest_point_fraction(g: BatGeometry) -> float:
    """``ht = clamp((tar - h_low) . (h_up - h_low) / (2 L_sword), 0, 1)``.

    The denominator is the bat length only when ``|h_up - h_low| = 2 L_sword``;
    the formula is kept as stated.
    """
    ht = float(np.dot(g.tar - g.h_low, g.h_up - g.h_low)) / (2.0 * g.L_sword)
    return max(0.0, min(1.0, ht))


def closest_point(g: BatGeometry) -> np.ndarray:
    return g.h_low + closest_point_fraction(g) * (g.h_up - g.h_low)


def heuristic_defense_position(g: BatGeometry, u: float) -> np.ndarray:
    """``b_p = tar + (h_close - tar) * u`` for a caller-drawn ``u`` in [0.5, 1]."""
    if not 0.5 <= u <= 1.0:
        raise ValueError("u must lie in [0.5, 1]")
    return g.tar + (closest_point(g) - g.tar) * u


def rotation_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """``Rz(az) @ Ry(ay) @ Rx(ax)``, angles in radians."""
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def heuristic_defense_orientation(bat_axis_opponent, offsets_deg=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Unit vector perpendicular to the opponent's bat axis, then rotated by
    the x, y, z offsets (degrees, each within +-25).

    The perpendicular is canonical: the opponent axis crossed with the
    coordinate axis it is least aligned with.
    """
    v = np.asarray(bat_axis_opponent, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ValueError("bat axis must be a finite non-zero vector")
    v = v / n
    offs = np.asarray(offsets_deg, dtype=np.float64).reshape(3)
    if np.any(np.abs(offs) > 25.0):
        raise ValueError("angular offsets must lie within [-25, 25] degrees")
    e = np.zeros(3)
    e[int(np.argmin(np.abs(v)))] = 1.0
    p = np.cross(v, e)
    p /= np.linalg.norm(p)
    out = rotation_matrix(*np.deg2rad(offs)) @ p
    return out / np.linalg.norm(out)
