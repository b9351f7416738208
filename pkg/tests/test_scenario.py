import json

import numpy as np
import pytest

from hydradistill.exceptions import InvalidTemplateMix, SchemaError
from hydradistill.scenario import (
    TEMPLATES,
    derive_kinematics,
    dumps_scenario,
    generate_pair,
    generate_scenarios,
    load_pairs,
    load_scenario,
    parse_template_mix,
    save_pairs,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
)
from hydradistill.teachers import dac_batch, nc_batch, score_tl

from scenes import arc, straight


@pytest.fixture(scope="module")
def pairs():
    return generate_scenarios(12, 42)


# --- kinematics --------------------------------------------------------------

def test_constant_velocity_kinematics():
    k = derive_kinematics(straight(5.0))
    assert np.allclose(k.speed, 5.0)
    assert np.allclose(k.lon_accel, 0.0, atol=1e-9)
    assert np.allclose(k.yaw_rate, 0.0)


def test_series_lengths():
    k = derive_kinematics(straight(5.0))
    lengths = [len(k.speed), len(k.lon_accel), len(k.lon_jerk), len(k.yaw_rate), len(k.yaw_accel), len(k.lat_accel)]
    assert lengths == [40, 39, 38, 40, 39, 40]


def test_circle_kinematics_analytic():
    k = derive_kinematics(arc(5.0, 20.0))
    assert np.allclose(k.yaw_rate, 0.25, rtol=0.02)
    assert np.allclose(k.lat_accel, 1.25, rtol=0.02)
    # chord speed differs from arc speed by < 0.01 %
    assert np.allclose(k.speed, 5.0, rtol=1e-3)


def test_constant_acceleration_kinematics():
    k = derive_kinematics(straight(0.0, accel=1.0))
    assert np.allclose(k.lon_accel, 1.0, atol=1e-6)
    assert np.allclose(k.lon_jerk, 0.0, atol=1e-6)


# --- generator ---------------------------------------------------------------

def test_generation_is_deterministic():
    a = [dumps_scenario(p.curr) + dumps_scenario(p.prev) for p in generate_scenarios(10, 42)]
    b = [dumps_scenario(p.curr) + dumps_scenario(p.prev) for p in generate_scenarios(10, 42)]
    assert a == b


def test_generation_is_index_addressable(pairs):
    # per-scenario seeding: a pair does not depend on how many came before it
    single = generate_pair(7, 42)
    assert dumps_scenario(single.curr) == dumps_scenario(pairs[7].curr)


def test_pairs_are_consistent(pairs):
    for p in pairs:
        assert p.curr.preceding_id == p.prev.id
        # the current ego origin sits on the preceding human plan, 0.5 s in
        dx, dy, dth = p.transform
        prev_pose_in_curr = np.array([p.prev.human[4, 0] * np.cos(dth) - p.prev.human[4, 1] * np.sin(dth) + dx,
                                      p.prev.human[4, 0] * np.sin(dth) + p.prev.human[4, 1] * np.cos(dth) + dy])
        assert np.allclose(prev_pose_in_curr, 0.0, atol=1e-6)


def test_every_template_appears():
    mix = {t: 1.0 / len(TEMPLATES) for t in TEMPLATES}
    names = {generate_pair(i, 3, mix).curr.id for i in range(4)}
    assert len(names) == 4
    for t in TEMPLATES:
        pair = generate_pair(0, 5, {t: 1.0})
        assert pair.curr.human.shape == (40, 3)


def test_straight_road_without_agents_is_clean():
    for i in range(5):
        p = generate_pair(i, 9, "StraightRoad=1")
        s = p.curr
        traj = s.human[None]
        assert nc_batch(traj, s)[0] == 1
        assert dac_batch(traj, s)[0] == 1
        assert score_tl(s.human, s) == 1


def test_human_rollouts_pass_collision_and_drivable(pairs):
    ok = 0
    for p in pairs:
        t = p.curr.human[None]
        ok += int(nc_batch(t, p.curr)[0] == 1 and dac_batch(t, p.curr)[0] == 1)
    assert ok / len(pairs) >= 0.95


def test_human_kinematics_finite(pairs):
    for p in pairs:
        k = derive_kinematics(p.curr.human, p.curr.ego)
        for series in (k.speed, k.lon_accel, k.lon_jerk, k.yaw_rate, k.yaw_accel, k.lat_accel):
            assert np.all(np.isfinite(series))


@pytest.mark.parametrize("mix", ["StraightRoad=0.5", "Bogus=1", {"StraightRoad": -1, "CurvedRoad": 2}, "x"])
def test_invalid_mix(mix):
    with pytest.raises(InvalidTemplateMix):
        parse_template_mix(mix)


def test_mix_forms():
    assert parse_template_mix("uniform") == {t: 0.25 for t in TEMPLATES}
    assert parse_template_mix("StraightRoad=0.5,LaneChange=0.5")["LaneChange"] == 0.5


# --- serialization -----------------------------------------------------------

def test_round_trip(tmp_path, pairs):
    for p in pairs:
        path = tmp_path / "s.json"
        save_scenario(p.curr, path)
        assert load_scenario(path) == p.curr
        assert dumps_scenario(load_scenario(path)) == dumps_scenario(p.curr)


def test_missing_human_field_named(pairs):
    d = scenario_to_dict(pairs[0].curr)
    del d["human"]
    with pytest.raises(SchemaError, match="human"):
        scenario_from_dict(d)


def test_short_human_cites_pose_count(pairs):
    d = scenario_to_dict(pairs[0].curr)
    d["human"] = d["human"][:39]
    with pytest.raises(SchemaError, match="40 poses"):
        scenario_from_dict(d)


def test_bad_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(SchemaError):
        load_scenario(path)


def test_pair_manifest_round_trip(tmp_path, pairs):
    manifest = save_pairs(pairs[:3], tmp_path)
    records = json.loads(manifest.read_text())
    assert set(records[0]) == {"prev", "curr", "transform"}
    assert set(records[0]["transform"]) == {"dx", "dy", "dtheta"}
    loaded = load_pairs(manifest)
    for a, b in zip(loaded, pairs[:3]):
        assert a.curr == b.curr and a.prev == b.prev
        assert a.transform == pytest.approx(b.transform, abs=0)
