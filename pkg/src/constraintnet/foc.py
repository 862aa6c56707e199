"""Follow-object controller with a safe demanded-acceleration interval.

Kinematics are one-dimensional: ``gap`` is front bumper to rear bumper,
``v_rel = v_target - v_ego`` and ``a_rel = a_target - a_ego``. The hot loops
run under numba; the closed-loop plant reuses the exact integration step of
the safety check, which makes "braking from the current acceleration is
safe" an inductive invariant of the constrained controller.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .constraints import Polytope, SchemaEntry
from .model import ConstraintNetModel, build_dense_model

__all__ = [
    "FocState",
    "FocLimits",
    "SafeInterval",
    "x_rel_set",
    "is_safe_accel",
    "safe_interval",
    "safe_interval_batch",
    "grid_search_a_max",
    "reference_controller",
    "ReferenceController",
    "ConstraintNetController",
    "build_foc_net",
    "foc_features",
    "Scenario",
    "ScenarioError",
    "parse_scenarios",
    "random_scenarios",
    "simulate",
    "simulate_campaign",
    "Trajectory",
    "imitation_dataset",
    "imitation_states",
    "label_states",
    "campaign_summary",
]

DEFAULT_DT = 0.01
HORIZON = 60.0
BISECTION_TOL = 1e-3


@dataclass(frozen=True)
class FocState:
    x_rel: float
    v_rel: float
    a_rel: float
    v_ego: float
    a_ego: float = 0.0

    def __post_init__(self):
        if not self.x_rel > 0:
            raise ValueError(f"x_rel must be positive, got {self.x_rel}")
        if self.v_ego < 0:
            raise ValueError(f"v_ego must be >= 0, got {self.v_ego}")

    @property
    def v_target(self) -> float:
        return max(self.v_ego + self.v_rel, 0.0)

    @property
    def a_target(self) -> float:
        return self.a_rel + self.a_ego

    def as_array(self) -> np.ndarray:
        return np.array([self.x_rel, self.v_rel, self.a_rel, self.v_ego, self.a_ego])


@dataclass(frozen=True)
class FocLimits:
    j_max: float = 2.5
    a_floor: float = -3.5
    d_min: float = 2.0
    a_cap: float = 3.0
    tau: float = 1.8
    # optional velocity-dependent lower bound: ((v, a_min), ...) interpolated linearly
    a_min_table: tuple | None = None

    def __post_init__(self):
        if not (self.j_max > 0 and self.a_floor < 0 < self.a_cap and self.d_min > 0 and self.tau > 0):
            raise ValueError(f"invalid FOC limits {self}")

    def a_min(self, v_ego):
        v = np.asarray(v_ego, dtype=np.float64)
        if self.a_min_table is None:
            return np.full_like(v, self.a_floor) if v.ndim else self.a_floor
        vs, amins = zip(*self.a_min_table)
        out = np.maximum(np.interp(v, vs, amins), self.a_floor)
        return out if v.ndim else float(out)


@dataclass(frozen=True)
class SafeInterval:
    a_min: float
    a_max: float

    @property
    def collapsed(self) -> bool:
        return self.a_min == self.a_max


def x_rel_set(v_ego, limits: FocLimits = FocLimits()):
    """Velocity-dependent set-point distance ``d_min + tau * v_ego``."""
    return limits.d_min + limits.tau * v_ego


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _advance(gap, v_e, v_t, a_e, a_t, dt):
    v_t = v_t + a_t * dt
    if v_t < 0.0:
        v_t = 0.0
    v_e = v_e + a_e * dt
    if v_e < 0.0:
        v_e = 0.0
    gap = gap + (v_t - v_e) * dt
    return gap, v_e, v_t


@njit(cache=True)
def _brake_safe(gap, v_e, v_t, a_t, a_dem, j_max, a_floor, d_min, dt, n_steps):
    if gap < d_min:
        return False
    a = a_dem
    for _ in range(n_steps):
        gap, v_e, v_t = _advance(gap, v_e, v_t, a, a_t, dt)
        if gap < d_min:
            return False
        a = a - j_max * dt
        if a < a_floor:
            a = a_floor
        if v_e <= 0.0 and a <= 0.0:
            return True  # ego stopped for good; gap can only grow
        a_t_eff = a_t if (v_t > 0.0 or a_t > 0.0) else 0.0
        if v_t >= v_e and a <= a_t_eff:
            return True  # gap opening and will keep opening
    return True


@njit(cache=True)
def _bisect(gap, v_e, v_t, a_t, a_lo, a_cap, j_max, a_floor, d_min, dt, n_steps, tol):
    if _brake_safe(gap, v_e, v_t, a_t, a_cap, j_max, a_floor, d_min, dt, n_steps):
        return a_cap
    if not _brake_safe(gap, v_e, v_t, a_t, a_lo, j_max, a_floor, d_min, dt, n_steps):
        return a_lo
    lo, hi = a_lo, a_cap
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _brake_safe(gap, v_e, v_t, a_t, mid, j_max, a_floor, d_min, dt, n_steps):
            lo = mid
        else:
            hi = mid
    return lo


@njit(cache=True)
def _bisect_batch(gap, v_e, v_t, a_t, a_lo, a_cap, j_max, a_floor, d_min, dt, n_steps, tol):
    out = np.empty(gap.shape[0])
    for i in range(gap.shape[0]):
        out[i] = _bisect(gap[i], v_e[i], v_t[i], a_t[i], a_lo[i], a_cap, j_max, a_floor, d_min, dt, n_steps, tol)
    return out


def _n_steps(dt: float) -> int:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return int(round(HORIZON / dt))


def is_safe_accel(a_dem: float, state: FocState, limits: FocLimits = FocLimits(), dt: float = DEFAULT_DT) -> bool:
    """Whether demanding ``a_dem`` now still allows braking without undershooting d_min.

    Ego starts at ``a_dem`` and ramps to ``a_floor`` at ``-j_max``; the
    target keeps its current absolute acceleration (speed clamped at 0).
    """
    n = _n_steps(dt)
    if not limits.a_floor - 1e-12 <= a_dem <= limits.a_cap + 1e-12:
        raise ValueError(f"a_dem={a_dem} outside [{limits.a_floor}, {limits.a_cap}]")
    return bool(
        _brake_safe(
            state.x_rel, state.v_ego, state.v_target, state.a_target, float(a_dem),
            limits.j_max, limits.a_floor, limits.d_min, dt, n,
        )
    )


def safe_interval(state: FocState, limits: FocLimits = FocLimits(), dt: float = DEFAULT_DT, tol: float = BISECTION_TOL) -> SafeInterval:
    a_min = float(limits.a_min(state.v_ego))
    a_max = _bisect(
        state.x_rel, state.v_ego, state.v_target, state.a_target, a_min, limits.a_cap,
        limits.j_max, limits.a_floor, limits.d_min, dt, _n_steps(dt), tol,
    )
    return SafeInterval(a_min, float(a_max))


def _absolute(states: np.ndarray):
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    gap, v_rel, a_rel, v_e, a_e = states.T
    return gap, v_e, np.maximum(v_e + v_rel, 0.0), a_rel + a_e


def safe_interval_batch(states, limits: FocLimits = FocLimits(), dt: float = DEFAULT_DT, tol: float = BISECTION_TOL) -> np.ndarray:
    """Rows ``(x_rel, v_rel, a_rel, v_ego, a_ego)`` -> rows ``(a_min, a_max)``."""
    gap, v_e, v_t, a_t = _absolute(states)
    return _intervals_abs(gap, v_e, v_t, a_t, limits, dt, tol)


def _intervals_abs(gap, v_e, v_t, a_t, limits, dt=DEFAULT_DT, tol=BISECTION_TOL):
    a_min = np.asarray(limits.a_min(v_e), dtype=np.float64)
    a_max = _bisect_batch(
        np.ascontiguousarray(gap), np.ascontiguousarray(v_e), np.ascontiguousarray(v_t),
        np.ascontiguousarray(a_t), np.ascontiguousarray(a_min), limits.a_cap,
        limits.j_max, limits.a_floor, limits.d_min, dt, _n_steps(dt), tol,
    )
    return np.stack([a_min, a_max], axis=1)


def grid_search_a_max(state: FocState, limits: FocLimits = FocLimits(), step: float = 0.01, dt: float = 0.002):
    """Brute-force a_max: simulate every grid acceleration at once in numpy.

    Independent of the numba kernels; returns ``(a_max, grid, safe_mask)``.
    ``a_max`` is the largest safe grid value (``a_floor`` if none is safe).
    """
    grid = np.round(np.arange(limits.a_floor, limits.a_cap + 0.5 * step, step), 10)
    n = grid.size
    safe = np.ones(n, dtype=bool)
    if state.x_rel < limits.d_min:
        safe[:] = False
        return float(limits.a_floor), grid, safe
    gap = np.full(n, state.x_rel)
    v_e = np.full(n, state.v_ego)
    v_t = np.full(n, state.v_target)
    a_t = state.a_target
    a = grid.copy()
    active = np.ones(n, dtype=bool)
    for _ in range(int(round(HORIZON / dt))):
        if not active.any():
            break
        v_t_new = np.maximum(v_t + a_t * dt, 0.0)
        v_e_new = np.maximum(v_e + a * dt, 0.0)
        gap_new = gap + (v_t_new - v_e_new) * dt
        v_t = np.where(active, v_t_new, v_t)
        v_e = np.where(active, v_e_new, v_e)
        gap = np.where(active, gap_new, gap)
        hit = active & (gap < limits.d_min)
        safe[hit] = False
        active &= ~hit
        a = np.where(active, np.maximum(a - limits.j_max * dt, limits.a_floor), a)
        a_t_eff = np.where((v_t > 0) | (a_t > 0), a_t, 0.0)
        done = ((v_e <= 0) & (a <= 0)) | ((v_t >= v_e) & (a <= a_t_eff))
        active &= ~done
    a_max = float(grid[safe].max()) if safe.any() else float(limits.a_floor)
    return a_max, grid, safe


# ---------------------------------------------------------------------------
# controllers


def reference_controller(state: FocState, limits: FocLimits = FocLimits(), k_d: float = 0.15, k_v: float = 0.8) -> float:
    err = state.x_rel - x_rel_set(state.v_ego, limits)
    return float(np.clip(k_d * err + k_v * state.v_rel, limits.a_floor, limits.a_cap))


@dataclass
class ReferenceController:
    """Vectorized reference; ignores the safe interval."""

    limits: FocLimits = FocLimits()
    k_d: float = 0.15
    k_v: float = 0.8
    constrained: bool = field(default=False, init=False)

    def __call__(self, states: np.ndarray, intervals: np.ndarray) -> np.ndarray:
        err = states[:, 0] - x_rel_set(states[:, 3], self.limits)
        return np.clip(self.k_d * err + self.k_v * states[:, 1], self.limits.a_floor, self.limits.a_cap)


def foc_features(states) -> np.ndarray:
    """Model input ``(x_rel, v_rel, a_rel, v_ego)`` from full state rows."""
    return np.atleast_2d(np.asarray(states, dtype=np.float64))[:, :4]


@dataclass
class ConstraintNetController:
    """Feeds ``s = (a_min, a_max)`` to a ConstraintNet each step."""

    model: ConstraintNetModel
    constrained: bool = field(default=True, init=False)
    last_raw: np.ndarray | None = field(default=None, init=False, repr=False)

    def __call__(self, states: np.ndarray, intervals: np.ndarray) -> np.ndarray:
        raw = self.model.predict(foc_features(states), intervals)[:, 0]
        self.last_raw = raw
        # guard output is a convex combination; clip only removes rounding
        return np.clip(raw, intervals[:, 0], intervals[:, 1])


def build_foc_net(limits: FocLimits = FocLimits(), hidden: Sequence[int] = (32, 32), seed: int = 0) -> ConstraintNetModel:
    """Dense net on (x_rel, v_rel, a_rel, v_ego) with g(s) appended to the input."""
    constraint = Polytope(
        2,
        1,
        [[0], [1]],
        (SchemaEntry("a_min", limits.a_floor, limits.a_cap), SchemaEntry("a_max", limits.a_floor, limits.a_cap)),
    )
    return build_dense_model(
        constraint,
        (4,),
        hidden,
        insertion_layer=0,
        input_scale=[1 / 100.0, 1 / 10.0, 1 / 3.0, 1 / 40.0],
        seed=seed,
        metadata={"task": "foc-imitation", "limits": asdict(limits)},
    )


# ---------------------------------------------------------------------------
# scenarios and closed-loop simulation


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    initial: FocState
    target_profile: list[tuple[float, float]]  # piecewise-constant target accel from time t on
    duration: float

    def target_accel(self, t: float) -> float:
        return float(self.target_accel_grid(np.array([t]))[0])

    def target_accel_grid(self, times: np.ndarray) -> np.ndarray:
        out = np.full(times.shape, self.initial.a_target)
        for t0, a0 in self.target_profile:
            out[times >= t0 - 1e-12] = a0
        return out

    def to_dict(self) -> dict:
        return {
            "initial": asdict(self.initial),
            "target_profile": [[float(t), float(a)] for t, a in self.target_profile],
            "duration": self.duration,
        }


def parse_scenarios(data) -> list[Scenario]:
    if not isinstance(data, list):
        raise ScenarioError("scenario file must hold a JSON list")
    out = []
    for i, entry in enumerate(data):
        try:
            init = entry["initial"]
            state = FocState(
                float(init["x_rel"]), float(init["v_rel"]), float(init.get("a_rel", 0.0)),
                float(init["v_ego"]), float(init.get("a_ego", 0.0)),
            )
            profile = [(float(t), float(a)) for t, a in entry.get("target_profile", [])]
            duration = float(entry["duration"])
            if duration < 0:
                raise ValueError("negative duration")
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"scenario entry {i}: {exc!r}") from None
        out.append(Scenario(state, sorted(profile), duration))
    return out


def random_scenarios(
    n: int,
    rng: np.random.Generator,
    limits: FocLimits = FocLimits(),
    duration: float = 30.0,
    target_accel: tuple[float, float] = (-3.0, 1.0),
    require_safe: bool = True,
) -> list[Scenario]:
    """Random starts (gap 5-150 m, speeds 0-40 m/s) with a constant target acceleration.

    With ``require_safe`` only starts where ``a_ego`` itself passes the
    safety check are kept.
    """
    out: list[Scenario] = []
    while len(out) < n:
        gap = rng.uniform(5.0, 150.0)
        v_e = rng.uniform(0.0, 40.0)
        v_t = rng.uniform(0.0, 40.0)
        a_e = rng.uniform(-1.0, 1.0)
        a_t = rng.uniform(*target_accel)
        state = FocState(gap, v_t - v_e, a_t - a_e, v_e, a_e)
        if require_safe and not is_safe_accel(float(np.clip(a_e, limits.a_floor, limits.a_cap)), state, limits):
            continue
        out.append(Scenario(state, [(0.0, a_t)], duration))
    return out


@dataclass
class Trajectory:
    t: np.ndarray
    x_rel: np.ndarray
    v_rel: np.ndarray
    v_ego: np.ndarray
    a_dem: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray
    violation: np.ndarray
    raw_out_of_interval: int = 0

    @property
    def collisions(self) -> int:
        return int(np.sum(self.x_rel <= 0))

    @property
    def violations(self) -> int:
        return int(np.sum(self.violation))

    def gap_error(self, limits: FocLimits = FocLimits()) -> np.ndarray:
        return self.x_rel - x_rel_set(self.v_ego, limits)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x_rel", "v_rel", "v_ego", "a_dem", "a_min", "a_max", "violation"])
        for row in zip(self.t, self.x_rel, self.v_rel, self.v_ego, self.a_dem, self.a_min, self.a_max, self.violation):
            w.writerow([f"{row[0]:.2f}"] + [repr(float(v)) for v in row[1:7]] + [int(row[7])])
        return buf.getvalue()


def simulate_campaign(
    controller: Callable[[np.ndarray, np.ndarray], np.ndarray],
    scenarios: Sequence[Scenario],
    limits: FocLimits = FocLimits(),
    dt: float = DEFAULT_DT,
    tol: float = BISECTION_TOL,
) -> list[Trajectory]:
    """Step all scenarios together; controller sees state rows and safe intervals.

    The ego actuator moves toward the demand at most ``j_max * dt`` per step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = len(scenarios)
    if n == 0:
        return []
    steps = [int(round(sc.duration / dt)) for sc in scenarios]
    n_steps = max(steps)
    gap = np.array([sc.initial.x_rel for sc in scenarios])
    v_e = np.array([sc.initial.v_ego for sc in scenarios])
    v_t = np.array([sc.initial.v_target for sc in scenarios])
    a_e = np.array([sc.initial.a_ego for sc in scenarios])
    times = np.arange(n_steps + 1) * dt
    accel = np.stack([sc.target_accel_grid(times) for sc in scenarios], axis=1)
    log = np.full((n_steps + 1, n, 7), np.nan)
    raw_bad = np.zeros(n, dtype=np.int64)
    constrained = getattr(controller, "constrained", False)
    for k in range(n_steps + 1):
        a_t = accel[k]
        states = np.stack([gap, v_t - v_e, a_t - a_e, v_e, a_e], axis=1)
        intervals = _intervals_abs(gap, v_e, v_t, a_t, limits, dt, tol)
        if k < n_steps:
            a_dem = np.asarray(controller(states, intervals), dtype=np.float64)
            raw = getattr(controller, "last_raw", None)
            if constrained and raw is not None:
                raw_bad += (raw < intervals[:, 0] - 1e-9) | (raw > intervals[:, 1] + 1e-9)
        else:
            a_dem = np.full(n, np.nan)
        log[k, :, 0] = gap
        log[k, :, 1] = v_t - v_e
        log[k, :, 2] = v_e
        log[k, :, 3] = a_dem
        log[k, :, 4:6] = intervals
        log[k, :, 6] = gap < limits.d_min
        if k == n_steps:
            break
        a_e = np.clip(a_dem, a_e - limits.j_max * dt, a_e + limits.j_max * dt)
        gap, v_e, v_t = _advance_vec(gap, v_e, v_t, a_e, a_t, dt)
    out = []
    for i, sc in enumerate(scenarios):
        m = steps[i] + 1
        rows = log[:m, i]
        out.append(
            Trajectory(
                t=np.arange(m) * dt,
                x_rel=rows[:, 0].copy(),
                v_rel=rows[:, 1].copy(),
                v_ego=rows[:, 2].copy(),
                a_dem=rows[:, 3].copy(),
                a_min=rows[:, 4].copy(),
                a_max=rows[:, 5].copy(),
                violation=rows[:, 6].astype(bool),
                raw_out_of_interval=int(raw_bad[i]),
            )
        )
    return out


def _advance_vec(gap, v_e, v_t, a_e, a_t, dt):
    # same arithmetic as _advance, elementwise
    v_t = np.maximum(v_t + a_t * dt, 0.0)
    v_e = np.maximum(v_e + a_e * dt, 0.0)
    gap = gap + (v_t - v_e) * dt
    return gap, v_e, v_t


def simulate(controller, initial: FocState, target_profile=(), limits: FocLimits = FocLimits(), duration: float = 30.0, dt: float = DEFAULT_DT) -> Trajectory:
    return simulate_campaign(controller, [Scenario(initial, list(target_profile), duration)], limits, dt)[0]


def campaign_summary(trajectories: Sequence[Trajectory], limits: FocLimits = FocLimits()) -> dict:
    errs = [np.abs(tr.gap_error(limits)) for tr in trajectories]
    return {
        "scenarios": len(trajectories),
        "collisions": int(sum(tr.collisions for tr in trajectories)),
        "violations": int(sum(tr.violations for tr in trajectories)),
        "demand_outside_interval": int(sum(tr.raw_out_of_interval for tr in trajectories)),
        "gap_error": {
            "mean_abs": float(np.mean(np.concatenate(errs))) if errs else 0.0,
            "max_abs": float(max(e.max() for e in errs)) if errs else 0.0,
            "final_mean_abs": float(np.mean([e[-1] for e in errs])) if errs else 0.0,
        },
    }


def imitation_states(n: int, rng: np.random.Generator, limits: FocLimits = FocLimits()) -> np.ndarray:
    """Random full state rows ``(x_rel, v_rel, a_rel, v_ego, a_ego)`` for imitation data."""
    gap = rng.uniform(limits.d_min + 0.5, 150.0, n)
    v_e = rng.uniform(0.0, 40.0, n)
    v_t = rng.uniform(0.0, 40.0, n)
    a_e = rng.uniform(-2.0, 2.0, n)
    a_t = rng.uniform(-3.0, 1.0, n)
    return np.stack([gap, v_t - v_e, a_t - a_e, v_e, a_e], axis=1)


def label_states(states, limits: FocLimits = FocLimits()):
    """Label states with the reference demand clipped into the safe interval.

    Returns ``(X, S, Y)``; ``S`` holds the one valid ``(a_min, a_max)`` per state.
    """
    states = np.asarray(states, dtype=np.float64).reshape(-1, 5)
    if len(states) == 0:
        return np.zeros((0, 4)), np.zeros((0, 2)), np.zeros((0, 1))
    intervals = safe_interval_batch(states, limits)
    ref = ReferenceController(limits)(states, intervals)
    y = np.clip(ref, intervals[:, 0], intervals[:, 1])[:, None]
    return foc_features(states), intervals, y


def imitation_dataset(n: int, rng: np.random.Generator, limits: FocLimits = FocLimits()):
    return label_states(imitation_states(n, rng, limits), limits)
