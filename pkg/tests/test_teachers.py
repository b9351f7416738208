import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydradistill.exceptions import FrameMismatch, MissingSubscore, NoReference, SchemaError
from hydradistill.geom import Polygon, Polyline, transform_poses
from hydradistill.scenario import AgentTrack, KinematicProfile, Phase, Scenario, generate_scenarios
from hydradistill.teachers import (
    METRICS,
    ScoreMatrix,
    SubScores,
    TeacherConfig,
    backward_displacement,
    dac_batch,
    ec_discrepancies,
    ec_from_discrepancies,
    ep_from_progress,
    ep_reference,
    epdms,
    evaluate_trajectory,
    nc_batch,
    pdms,
    profile_discrepancies,
    progress_batch,
    score_comfort,
    score_dac,
    score_ddc,
    score_ec,
    score_ep,
    score_lk,
    score_nc,
    score_tl,
    score_ttc,
    teach_many,
    teach_scenario,
    ttc_batch,
)
from hydradistill.vocab import kmeans, sample_trajectories

from scenes import arc, moving_agent, red_signal, scene, stationary_agent, straight

CFG = TeacherConfig()


def fnv1a_64_oracle(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) % 2**64
    return h


@pytest.fixture(scope="module")
def small_vocab():
    return kmeans(sample_trajectories(1500, 0), 24, 15, 0)


@pytest.fixture(scope="module")
def generated():
    return generate_scenarios(8, 21)


# --- aggregation ---------------------------------------------------------------

def ones(**kw):
    base = dict(nc=1.0, dac=1.0, ep=1.0, ttc=1.0, c=1.0, tl=1.0, ddc=1.0, lk=1.0, ec=1.0)
    base.update(kw)
    return SubScores(**base)


def test_pdms_spot_values():
    assert pdms(ones()) == 1.0
    assert pdms(ones(nc=0.0)) == 0.0
    assert abs(pdms(ones(ep=0.5)) - 0.7916666666666666) < 1e-9


def test_epdms_spot_values():
    assert epdms(ones()) == 1.0
    assert epdms(ones(tl=0.0)) == 0.0
    assert abs(epdms(ones(ep=0.8)) - 0.9545454545454546) < 1e-9


def test_formulas_against_hand_expansion():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = {m: float(rng.integers(0, 2)) for m in ("nc", "dac", "ttc", "c", "tl", "ddc", "lk", "ec")}
        v["ep"] = float(rng.uniform())
        s = SubScores(**v)
        p = v["nc"] * v["dac"] * (5 * v["ttc"] + 2 * v["c"] + 5 * v["ep"]) / 12
        e = v["nc"] * v["dac"] * v["ddc"] * v["tl"] * (
            5 * v["ttc"] + 2 * v["c"] + 5 * v["ep"] + 5 * v["lk"] + 5 * v["ec"]) / 22
        assert abs(pdms(s) - p) < 1e-9
        assert abs(epdms(s) - e) < 1e-9


def test_linear_form_with_zero_ttc_and_ep():
    assert pdms(ones(ttc=0.0, ep=0.0)) == pytest.approx(2 / 12)


def test_missing_subscore():
    with pytest.raises(MissingSubscore):
        pdms(SubScores(nc=1, dac=1, ttc=1, c=1))
    with pytest.raises(MissingSubscore):
        epdms(ones(ec=None))


unit = st.floats(0, 1)


@settings(max_examples=200, deadline=None)
@given(st.lists(unit, min_size=9, max_size=9), st.integers(0, 8), unit)
def test_aggregates_monotone(vals, which, bump):
    names = ("nc", "dac", "ep", "ttc", "c", "tl", "ddc", "lk", "ec")
    lo = SubScores(**dict(zip(names, vals)))
    hi_vals = list(vals)
    hi_vals[which] = max(vals[which], bump)
    hi = SubScores(**dict(zip(names, hi_vals)))
    assert epdms(hi) >= epdms(lo) - 1e-12
    assert pdms(hi) >= pdms(lo) - 1e-12


# --- NC ------------------------------------------------------------------------

def test_nc_empty_scene():
    assert score_nc(straight(5.0), scene()) == 1.0


def test_nc_frontal_collision():
    s = scene(agents=[stationary_agent(4.6 + 3.0)])
    assert score_nc(straight(5.0), s) == 0.0


def test_nc_not_at_fault_when_stationary():
    # an agent crosses the lane through a parked ego
    s = scene(agents=[moving_agent(0.0, -20.0, 0.0, 10.0)], velocity=0.0)
    parked = np.zeros((40, 3))
    assert score_nc(parked, s) == 1.0
    # step-by-step oracle: the boxes do overlap at some step
    from hydradistill.geom import OrientedBox, obb_intersects

    agent = s.agents[0]
    overlap = [obb_intersects(OrientedBox.from_dims(0, 0, 0, 4.6, 1.9),
                              OrientedBox.from_dims(*agent.poses[t], agent.length, agent.width)) for t in range(1, 41)]
    assert any(overlap)
    creeping = straight(0.1)
    assert score_nc(creeping, s) == 0.0


# --- DAC -----------------------------------------------------------------------

def test_dac_centerline_and_veer():
    s = scene()
    assert score_dac(straight(5.0), s) == 1.0
    veer = straight(5.0)
    veer[:, 1] = np.linspace(0, 10, 40)
    assert score_dac(veer, s) == 0.0


def test_dac_five_centimeter_clip():
    s = scene()
    edge = 6.0 - 1.9 / 2
    assert score_dac(straight(5.0, y=edge - 0.05), s) == 1.0
    clipped = straight(5.0, y=edge - 0.05)
    clipped[20, 1] = edge + 0.05
    assert score_dac(clipped, s) == 0.0


# --- TTC -----------------------------------------------------------------------

def test_ttc_empty_scene():
    assert score_ttc(straight(10.0), scene()) == 1.0


def test_ttc_fast_approach():
    s = scene(agents=[stationary_agent(4.6 + 5.0)])
    stop = np.tile([0.5, 0.0, 0.0], (40, 1))
    stop[0, 0] = 1.0  # 10 m/s at the first step, then parked short of the agent
    stop[1:, 0] = 1.0
    assert score_nc(stop, s) == 1.0
    assert score_ttc(stop, s) == 0.0


def test_ttc_slow_approach_is_safe():
    # ends 3 m short of a stopped agent at 2 m/s: the 1 s projection covers 2 m
    s = scene(agents=[stationary_agent(4.6 + 11.0)])
    assert score_nc(straight(2.0), s) == 1.0
    assert score_ttc(straight(2.0), s) == 1.0
    # same speed as a lead agent 5 m ahead: the gap never closes
    lead = scene(agents=[moving_agent(4.6 + 5.0, 0.0, 2.0, 0.0)])
    assert score_ttc(straight(2.0), lead) == 1.0


# --- comfort -------------------------------------------------------------------

def test_comfort_cases():
    assert score_comfort(straight(5.0)) == 1.0
    jump = straight(0.0)
    jump[20:, 0] += np.arange(1, 21) * 1.0  # 0 -> 10 m/s in one step
    assert score_comfort(jump) == 0.0
    # v^2 / R = 4.5 m/s^2
    v, r = 9.0, 18.0
    assert score_comfort(arc(v, r)) == 1.0
    assert score_comfort(arc(10.0, 18.0)) == 0.0  # 5.56 m/s^2


# --- EP ------------------------------------------------------------------------

def test_ep_ratio_cases():
    assert ep_from_progress(8.0, 16.0) == pytest.approx(0.5)
    assert ep_from_progress(0.0, 20.0) == 0.0
    assert ep_from_progress(3.0, 2.0) == 1.0
    assert ep_from_progress(-0.1, 2.0) == 0.0
    with pytest.raises(NoReference):
        ep_from_progress(1.0, None)


def test_ep_reference_trajectory_scores_one():
    s = scene()
    cands = np.stack([straight(v) for v in (2.0, 5.0, 8.0)])
    ref = ep_reference(cands, s)
    assert ref == pytest.approx(32.0)
    assert score_ep(cands[2], s, ref) == 1.0
    assert score_ep(np.zeros((40, 3)), s, ref) == 0.0
    assert np.allclose(progress_batch(cands, s), [8, 20, 32])


# --- TL ------------------------------------------------------------------------

def test_tl_no_signals():
    assert score_tl(straight(5.0), scene()) == 1.0


def test_tl_red_crossing():
    s = scene(signals=[red_signal(10.0, 14.0)])
    assert score_tl(straight(5.0), s) == 0.0


def test_tl_enter_after_green():
    # front bumper at 5 t + 2.3: inside from t = 2.4 s onwards
    x0 = 5.0 * 2.4 + 2.3 - 0.05
    sig = red_signal(x0, x0 + 4.0, phases=[Phase(0.0, 2.0, "Red"), Phase(2.0, 4.0, "Green")])
    assert score_tl(straight(5.0), scene(signals=[sig])) == 1.0
    early = red_signal(x0 - 5.0, x0 - 1.0, phases=[Phase(0.0, 2.0, "Red"), Phase(2.0, 4.0, "Green")])
    assert score_tl(straight(5.0), scene(signals=[early])) == 0.0


def test_tl_waiting_outside_is_compliant():
    s = scene(signals=[red_signal(12.0, 16.0)])
    wait = straight(0.0)
    wait[:, 0] = np.minimum(np.arange(1, 41) * 0.5, 8.0)
    assert score_tl(wait, s) == 1.0


# --- DDC -----------------------------------------------------------------------

def test_ddc_cases():
    s = scene()
    assert score_ddc(straight(5.0), s) == 1.0
    reverse = straight(0.0)
    reverse[:, 0] = -np.linspace(0.05, 2.0, 40)
    assert score_ddc(reverse, s) == 0.0
    # four backward steps of 0.1 m each: 0.4 m in total
    steps = np.full(40, 0.3)
    steps[[5, 15, 25, 35]] = -0.1
    osc = straight(0.0)
    osc[:, 0] = np.cumsum(steps)
    assert backward_displacement(osc[None], s)[0] == pytest.approx(0.4)
    assert score_ddc(osc, s) == 1.0


# --- LK ------------------------------------------------------------------------

def test_lk_cases():
    s = scene()
    assert score_lk(straight(5.0), s) == 1.0
    assert score_lk(straight(5.0, y=1.0), s) == 0.0


def test_lk_lane_change_between_parallel_lanes():
    lanes = [Polyline(np.array([[-30.0, 0.0], [200.0, 0.0]])), Polyline(np.array([[-30.0, 3.0], [200.0, 3.0]]))]
    s = scene(lanes=lanes)
    change = straight(5.0)
    change[:, 1] = 3.0 * (1 - np.cos(np.linspace(0, np.pi, 40))) / 2
    assert score_lk(change, s) == 0.0
    assert score_lk(straight(5.0, y=3.0), s) == 1.0


# --- EC ------------------------------------------------------------------------

def _frame_pair_plans(pos):
    """Preceding and current plans of one world motion ``pos(t) -> (x, y)``, plus the transform."""
    t_prev = -0.5 + 0.1 * np.arange(1, 41)
    t_curr = 0.1 * np.arange(1, 41)
    o_prev, o_curr = pos(np.array([-0.5]))[0], pos(np.array([0.0]))[0]
    prev = np.column_stack([pos(t_prev) - o_prev, np.zeros(40)])
    curr = np.column_stack([pos(t_curr) - o_curr, np.zeros(40)])
    return curr, prev, (o_prev[0] - o_curr[0], o_prev[1] - o_curr[1], 0.0)


def test_ec_identical_world_motion():
    curr, prev, tf = _frame_pair_plans(lambda t: np.column_stack([5 * t + 0.4 * t**2, 0 * t]))
    d = ec_discrepancies(curr, prev, tf)
    assert np.allclose(d, 0.0, atol=1e-9)
    assert score_ec(curr, prev, tf) == 1.0


def test_ec_opposite_swerves():
    left, right = arc(5.0, 12.0, left=True), arc(5.0, 12.0, left=False)
    d = ec_discrepancies(left, right, (-2.5, 0.0, 0.0))
    assert d[2] > 0.1
    assert score_ec(left, right, (-2.5, 0.0, 0.0)) == 0.0


def _profile(a, j, yr, ya, n=36):
    z = np.zeros(n)
    return KinematicProfile(z, np.full(n - 1, a), np.full(n - 2, j), np.full(n, yr), np.full(n - 1, ya), z)


def test_ec_threshold_edges():
    d = profile_discrepancies(_profile(0.69, 0.49, 0.09, 0.09), _profile(0, 0, 0, 0))
    assert np.allclose(d, (0.69, 0.49, 0.09, 0.09))
    assert ec_from_discrepancies(d) == 1.0
    d = profile_discrepancies(_profile(0.71, 0.0, 0.0, 0.0), _profile(0, 0, 0, 0))
    assert ec_from_discrepancies(d) == 0.0


def test_ec_without_prev_and_missing_transform():
    assert score_ec(straight(5.0), None, None) == 1.0
    with pytest.raises(FrameMismatch):
        score_ec(straight(5.0), straight(5.0), None)


# --- invariance ------------------------------------------------------------------

def _moved(s: Scenario, tf) -> Scenario:
    dx, dy, dth = tf
    return Scenario(
        id=s.id,
        lanes=[Polyline(transform_poses(l.points, *tf)) for l in s.lanes],
        route=Polyline(transform_poses(s.route.points, *tf)),
        drivable=[Polygon(transform_poses(p.vertices, *tf)) for p in s.drivable],
        agents=[AgentTrack(a.id, a.length, a.width, transform_poses(a.poses, *tf)) for a in s.agents],
        signals=s.signals,
        ego=s.ego,
        human=transform_poses(s.human, *tf),
    )


def test_rigid_transform_invariance(generated, small_vocab):
    tf = (13.0, -7.0, 0.7)
    for pair in generated[:4]:
        s = pair.curr
        trajs = np.concatenate([small_vocab.trajectories, s.human[None]])
        moved = _moved(s, tf)
        mt = transform_poses(trajs, *tf)
        assert np.array_equal(nc_batch(trajs, s), nc_batch(mt, moved, origin=tf))
        assert np.array_equal(dac_batch(trajs, s), dac_batch(mt, moved))
        assert np.array_equal(ttc_batch(trajs, s), ttc_batch(mt, moved, origin=tf))


# --- teaching ------------------------------------------------------------------

def test_teach_rows_match_single_calls(generated, small_vocab):
    rng = np.random.default_rng(0)
    for pair in generated[:5]:
        s = pair.curr
        sm = teach_scenario(s, small_vocab, CFG)
        assert sm.values.shape == (small_vocab.k, 8)
        assert np.all((sm.values >= 0) & (sm.values <= 1))
        for i in rng.choice(small_vocab.k, 10, replace=False):
            t = small_vocab.trajectories[i]
            row = sm.row(i)
            assert row.nc == score_nc(t, s)
            assert row.dac == score_dac(t, s)
            assert row.ttc == score_ttc(t, s)
            assert row.c == score_comfort(t)
            assert row.tl == score_tl(t, s)
            assert row.ddc == score_ddc(t, s)
            assert row.lk == score_lk(t, s)
            assert row.ep == score_ep(t, s, sm.ep_reference)


def test_teach_empty_scene_nc_column(small_vocab):
    sm = teach_scenario(scene(), small_vocab)
    assert np.all(sm.column("NC") == 1.0)


def test_human_appended_matches_direct_evaluation(generated, small_vocab):
    for pair in generated[:3]:
        s = pair.curr
        pool = np.concatenate([small_vocab.trajectories, s.human[None]])
        sm = teach_scenario(s, pool)
        direct = evaluate_trajectory(s.human, s, sm.ep_reference)
        row = sm.row(len(pool) - 1)
        for m in METRICS:
            assert getattr(row, m.lower()) == getattr(direct, m.lower())


def test_teach_many_is_order_stable(generated, small_vocab):
    scen = [p.curr for p in generated[:4]]
    a = teach_many(scen, small_vocab, CFG, jobs=1)
    b = teach_many(scen, small_vocab, CFG, jobs=2)
    for x, y in zip(a, b):
        assert x.scenario_id == y.scenario_id
        assert np.array_equal(x.values, y.values)


# --- config and binary format --------------------------------------------------

def test_config_hash_is_fnv1a_of_canonical_json():
    canon = json.dumps(CFG.canonical(), sort_keys=True, separators=(",", ":")).encode()
    assert CFG.config_hash() == f"{fnv1a_64_oracle(canon):016x}"
    assert fnv1a_64_oracle(b"") == 0xCBF29CE484222325
    assert fnv1a_64_oracle(b"a") == 0xAF63DC4C8601EC8C
    assert TeacherConfig(tau_D=0.6).config_hash() != CFG.config_hash()


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TeacherConfig(tau_A=0.0)
    with pytest.raises(ValueError):
        TeacherConfig(lon_accel_min=0.5)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"tau_D": 0.4}))
    assert TeacherConfig.load(p).tau_D == 0.4
    p.write_text(json.dumps({"tau_Q": 1}))
    with pytest.raises(SchemaError):
        TeacherConfig.load(p)


def test_score_matrix_binary_layout(tmp_path):
    values = np.random.default_rng(0).uniform(size=(5, 8))
    sm = ScoreMatrix("s0", values, METRICS, CFG.config_hash(), 12.5)
    path = tmp_path / "s0.hmdp"
    sm.save(path)
    raw = path.read_bytes()
    assert raw[:8] == b"HMDPSCR1"
    assert struct.unpack("<II", raw[8:16]) == (5, 8)
    assert np.array_equal(np.frombuffer(raw[16:], "<f4").reshape(5, 8), values.astype("<f4"))
    side = json.loads((tmp_path / "s0.hmdp.json").read_text())
    assert side["config_hash"] == CFG.config_hash()
    assert side["metric_names"] == list(METRICS)
    back = ScoreMatrix.load(path)
    assert np.array_equal(back.values, values.astype(np.float32).astype(float))
    assert back.scenario_id == "s0"


def test_score_matrix_bad_inputs(tmp_path):
    path = tmp_path / "x.hmdp"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 8)
    with pytest.raises(SchemaError):
        ScoreMatrix.load(path)
    path.write_bytes(b"HMDPSCR1" + struct.pack("<II", 2, 8) + b"\0" * 4)
    with pytest.raises(SchemaError):
        ScoreMatrix.load(path)
    with pytest.raises(ValueError):
        ScoreMatrix("s", np.full((2, 8), 1.5))
