import math

import numpy as np
import pytest

from constraintnet import foc
from constraintnet.foc import FocLimits, FocState

L = FocLimits()


def literal_brake_safe(a_dem, st: FocState, limits=L, dt=0.01, horizon=60.0):
    """Plain-python braking check with no early exit: gap >= d_min over the whole horizon."""
    gap, v_e, v_t, a_t = st.x_rel, st.v_ego, st.v_target, st.a_target
    if gap < limits.d_min:
        return False
    a = a_dem
    for _ in range(int(round(horizon / dt))):
        v_t = max(v_t + a_t * dt, 0.0)
        v_e = max(v_e + a * dt, 0.0)
        gap += (v_t - v_e) * dt
        if gap < limits.d_min:
            return False
        a = max(a - limits.j_max * dt, limits.a_floor)
    return True


def random_state(rng, gap_hi=80.0):
    v_e = rng.uniform(0, 40)
    v_t = rng.uniform(0, 40)
    a_e = rng.uniform(-2, 2)
    a_t = rng.uniform(-3, 1)
    return FocState(rng.uniform(2.5, gap_hi), v_t - v_e, a_t - a_e, v_e, a_e)


def test_x_rel_set():
    assert foc.x_rel_set(0.0) == pytest.approx(2.0)
    assert foc.x_rel_set(10.0) == pytest.approx(20.0)
    v = np.linspace(0, 40, 50)
    assert np.all(np.diff(foc.x_rel_set(v)) >= 0)


def test_is_safe_matches_literal_oracle(rng):
    checked = 0
    for _ in range(40):
        st = random_state(rng)
        a_max, _, _ = foc.grid_search_a_max(st, step=0.05)
        for a in rng.uniform(L.a_floor, L.a_cap, 4):
            if abs(a - a_max) < 0.1:
                continue  # too close to the boundary for a dt-level comparison
            assert foc.is_safe_accel(a, st) == literal_brake_safe(a, st)
            checked += 1
    assert checked > 100


def test_spec_examples():
    far = FocState(1e4, -5.0, 0.0, 20.0, 0.0)
    assert foc.is_safe_accel(L.a_cap, far)
    assert foc.safe_interval(far).a_max == L.a_cap
    parked = FocState(50.0, 0.0, 0.0, 0.0, 0.0)
    assert foc.is_safe_accel(0.0, parked)
    tight = FocState(L.d_min, -10.0, 0.0, 20.0, 0.0)
    assert not foc.is_safe_accel(L.a_floor, tight)
    iv = foc.safe_interval(tight)
    assert iv.collapsed and iv.a_min == iv.a_max == L.a_floor


def test_monotone_in_a_dem(rng):
    grid = np.linspace(L.a_floor, L.a_cap, 41)
    for _ in range(30):
        st = random_state(rng)
        safe = [foc.is_safe_accel(a, st) for a in grid]
        # once unsafe, stays unsafe for larger a_dem
        first_bad = next((i for i, ok in enumerate(safe) if not ok), len(safe))
        assert not any(safe[first_bad:])


def test_bracketing(rng):
    for _ in range(50):
        st = random_state(rng)
        iv = foc.safe_interval(st)
        assert iv.a_min <= iv.a_max
        if iv.collapsed:
            continue
        assert foc.is_safe_accel(iv.a_max, st)
        if iv.a_max < L.a_cap:
            assert not foc.is_safe_accel(min(iv.a_max + 2 * foc.BISECTION_TOL, L.a_cap), st)


def test_a_max_monotone_in_gap(rng):
    for _ in range(20):
        st = random_state(rng)
        ladder = [
            foc.safe_interval(FocState(g, st.v_rel, st.a_rel, st.v_ego, st.a_ego)).a_max
            for g in np.linspace(2.5, 120, 12)
        ]
        # bisection tolerance allows tiny non-monotone jitter
        assert np.all(np.diff(ladder) >= -foc.BISECTION_TOL)


def test_batch_matches_scalar(rng):
    states = [random_state(rng) for _ in range(20)]
    batch = foc.safe_interval_batch(np.stack([s.as_array() for s in states]))
    for st, row in zip(states, batch):
        iv = foc.safe_interval(st)
        assert row[0] == iv.a_min and row[1] == iv.a_max


def test_input_errors():
    st = FocState(20.0, 0.0, 0.0, 10.0)
    with pytest.raises(ValueError):
        foc.is_safe_accel(L.a_cap + 1, st)
    with pytest.raises(ValueError):
        foc.is_safe_accel(0.0, st, dt=0.0)
    with pytest.raises(ValueError):
        FocState(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        FocState(1.0, 0.0, 0.0, -1.0)
    with pytest.raises(ValueError):
        FocLimits(j_max=-1)


def test_a_min_table_hook():
    limits = FocLimits(a_min_table=((0.0, -3.0), (40.0, -2.0)))
    assert limits.a_min(0.0) == pytest.approx(-3.0)
    assert limits.a_min(20.0) == pytest.approx(-2.5)
    iv = foc.safe_interval(FocState(500.0, 0.0, 0.0, 20.0), limits)
    assert iv.a_min == pytest.approx(-2.5)


def test_reference_controller():
    eq = FocState(foc.x_rel_set(15.0), 0.0, 0.0, 15.0)
    assert foc.reference_controller(eq) == pytest.approx(0.0)
    assert foc.reference_controller(FocState(500.0, 0.0, 0.0, 15.0)) == L.a_cap


def test_reference_equilibrium_holds_gap():
    v = 20.0
    eq = FocState(foc.x_rel_set(v), 0.0, 0.0, v, 0.0)
    tr = foc.simulate(foc.ReferenceController(), eq, duration=30.0)
    assert np.max(np.abs(tr.gap_error())) < 0.1


def test_reference_converges_from_random_starts(rng):
    sc = foc.random_scenarios(100, rng, duration=120.0, target_accel=(0.0, 0.0))
    # constant-speed target: an equilibrium exists at any speed
    trs = foc.simulate_campaign(foc.ReferenceController(), sc)
    final = np.array([abs(t.gap_error()[-1]) for t in trs])
    assert np.mean(final < 0.5) >= 0.95


def test_foc_net_properties(rng):
    net = foc.build_foc_net(seed=0)
    assert net.g_repr.insertion_layer == 0
    assert net.constraint.z_dim == 2
    # z = (0, 0) gives the midpoint
    s = np.array([-2.0, 1.0])
    y = net.constraint.guard(np.zeros(2), s).data
    assert y[0] == pytest.approx(-0.5)
    # collapsed interval gives a_min exactly
    x = foc.foc_features(random_state(rng).as_array())
    for a in (-3.5, -1.234567, 0.1):
        assert net.predict(x, [[a, a]])[0, 0] == a


def test_constrained_closed_loop(rng):
    sc = foc.random_scenarios(100, rng, duration=20.0)
    ctrl = foc.ConstraintNetController(foc.build_foc_net(seed=4))
    trs = foc.simulate_campaign(ctrl, sc)
    s = foc.campaign_summary(trs)
    assert s["collisions"] == 0 and s["violations"] == 0 and s["demand_outside_interval"] == 0
    for tr in trs:
        a = tr.a_dem[:-1]
        assert np.all(a >= tr.a_min[:-1]) and np.all(a <= tr.a_max[:-1])


def test_unconstrained_reference_can_collide():
    st = FocState(10.0, -15.0, -3.0, 30.0, 0.0)
    tr = foc.simulate(foc.ReferenceController(), st, [(0.0, -3.0)], duration=20.0)
    assert tr.collisions > 0


def test_actuator_is_jerk_limited():
    st = FocState(500.0, 0.0, 0.0, 10.0, 0.0)
    tr = foc.simulate(foc.ReferenceController(), st, duration=5.0)
    # a_ego reconstructed from ego speed follows the demand at most j_max per second
    a_e = np.diff(tr.v_ego) / 0.01
    assert np.max(np.abs(np.diff(a_e))) <= L.j_max * 0.01 + 1e-9


def test_scenario_parsing():
    data = [
        {"initial": {"x_rel": 30, "v_rel": -1, "v_ego": 10}, "target_profile": [[5, -1.0], [0, 0.5]], "duration": 10},
        {"initial": {"x_rel": 30, "v_rel": 0, "a_rel": 0.2, "v_ego": 10, "a_ego": -0.2}, "duration": 1},
    ]
    sc = foc.parse_scenarios(data)
    assert sc[0].target_profile == [(0.0, 0.5), (5.0, -1.0)]
    assert sc[0].target_accel(2.0) == 0.5 and sc[0].target_accel(7.0) == -1.0
    assert sc[1].target_accel(0.5) == pytest.approx(0.0)
    back = foc.parse_scenarios([s.to_dict() for s in sc])
    assert back == sc


@pytest.mark.parametrize(
    "bad",
    [
        [{"initial": {"x_rel": 30, "v_rel": 0, "v_ego": 1}, "duration": 1}, {"initial": {}, "duration": 1}],
        [{"initial": {"x_rel": 30, "v_rel": 0, "v_ego": 1}, "duration": 1}, {"initial": {"x_rel": -1, "v_rel": 0, "v_ego": 1}, "duration": 1}],
        [{"initial": {"x_rel": 30, "v_rel": 0, "v_ego": 1}, "duration": 1}, {"initial": {"x_rel": 3, "v_rel": 0, "v_ego": 1}}],
    ],
)
def test_scenario_errors_name_index(bad):
    with pytest.raises(foc.ScenarioError, match="entry 1"):
        foc.parse_scenarios(bad)
    with pytest.raises(foc.ScenarioError):
        foc.parse_scenarios({"not": "a list"})


def test_empty_campaign():
    assert foc.simulate_campaign(foc.ReferenceController(), []) == []
    s = foc.campaign_summary([])
    assert s["scenarios"] == 0 and s["collisions"] == 0


def test_trajectory_csv_columns():
    tr = foc.simulate(foc.ReferenceController(), FocState(30.0, 0.0, 0.0, 10.0), duration=0.05)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,x_rel,v_rel,v_ego,a_dem,a_min,a_max,violation"
    assert len(lines) == 1 + 6


def test_imitation_labels_inside_interval(rng):
    X, S, Y = foc.imitation_dataset(300, rng)
    assert X.shape == (300, 4) and S.shape == (300, 2) and Y.shape == (300, 1)
    assert np.all(Y[:, 0] >= S[:, 0]) and np.all(Y[:, 0] <= S[:, 1])


def test_grid_oracle_is_brute_force():
    st = FocState(40.0, -5.0, 0.0, 20.0, 0.0)
    a_max, grid, safe = foc.grid_search_a_max(st)
    assert math.isclose(grid[1] - grid[0], 0.01)
    assert safe[grid <= a_max].all() and not safe[grid > a_max].any()
