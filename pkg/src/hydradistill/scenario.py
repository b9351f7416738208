"""Scene model, kinematics, synthetic scenario generation and JSON I/O.

Every scenario is expressed in the ego local frame at t = 0 (ego at the origin,
heading 0). Scenarios come in pairs 0.5 s apart so consecutive-frame metrics
can be computed; the pair stores the rigid transform from the preceding frame
into the current one.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .exceptions import InvalidTemplateMix, SchemaError
from .geom import (
    OrientedBox,
    Polygon,
    Polyline,
    Pose,
    project_points,
    relative_transform,
    transform_poses,
    wrap_angle,
)

DT = 0.1
HORIZON_STEPS = 40
AGENT_STEPS = HORIZON_STEPS + 1
FRAME_GAP_STEPS = 5  # 0.5 s between paired frames
EGO_LENGTH = 4.6
EGO_WIDTH = 1.9
LANE_WIDTH = 3.5

TEMPLATES = ("StraightRoad", "CurvedRoad", "SignalizedIntersection", "LaneChange")


class Command(str, enum.Enum):
    FOLLOW = "Follow"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"
    LANE_CHANGE_LEFT = "LaneChangeLeft"
    LANE_CHANGE_RIGHT = "LaneChangeRight"

    def features(self) -> tuple[float, float]:
        """Two-dim encoding: lateral intent (+1 left / -1 right / 0) and lane-change flag."""
        side = {"Follow": 0.0, "TurnLeft": 1.0, "TurnRight": -1.0, "LaneChangeLeft": 1.0, "LaneChangeRight": -1.0}
        return side[self.value], 1.0 if self.value.startswith("LaneChange") else 0.0


class SignalState(str, enum.Enum):
    RED = "Red"
    GREEN = "Green"


def check_trajectory(poses, name="trajectory", n_steps=HORIZON_STEPS) -> np.ndarray:
    """Validate a ``(n_steps, 3)`` pose array and return it as float64 with wrapped headings."""
    arr = np.asarray(poses, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise SchemaError(f"expected (n, 3) poses, got shape {arr.shape}", name)
    if arr.shape[0] != n_steps:
        raise SchemaError(f"trajectory must have exactly {n_steps} poses, got {arr.shape[0]}", name)
    if not np.all(np.isfinite(arr)):
        raise SchemaError("non-finite coordinates", name)
    arr = arr.copy()
    arr[:, 2] = wrap_angle(arr[:, 2])
    return arr


def _eq(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(np.asarray(a), np.asarray(b))
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_eq(x, y) for x, y in zip(a, b))
    return a == b


class _ArrayEqMixin:
    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return all(_eq(getattr(self, f), getattr(other, f)) for f in self.__dataclass_fields__)

    __hash__ = None


@dataclass(frozen=True)
class EgoState:
    velocity: float = 0.0
    acceleration: float = 0.0
    command: Command = Command.FOLLOW
    length: float = EGO_LENGTH
    width: float = EGO_WIDTH

    def __post_init__(self):
        if not self.velocity >= 0:
            raise SchemaError("velocity must be >= 0", "ego.velocity")
        object.__setattr__(self, "command", Command(self.command))

    @property
    def pose(self) -> Pose:
        return Pose(0.0, 0.0, 0.0)

    @property
    def half_extents(self) -> tuple[float, float]:
        return self.length / 2.0, self.width / 2.0


@dataclass(frozen=True, eq=False)
class AgentTrack(_ArrayEqMixin):
    id: str
    length: float
    width: float
    poses: np.ndarray  # (41, 3) at t = 0.0 ... 4.0 s

    def __post_init__(self):
        poses = check_trajectory(self.poses, f"agents[{self.id}].poses", AGENT_STEPS)
        step = np.linalg.norm(np.diff(poses[:, :2], axis=0), axis=1)
        if np.any(step >= 5.0):
            raise SchemaError("agent displacement between steps must be < 5 m", f"agents[{self.id}].poses")
        if not (self.length > 0 and self.width > 0):
            raise SchemaError("agent dimensions must be positive", f"agents[{self.id}]")
        poses.setflags(write=False)
        object.__setattr__(self, "poses", poses)

    def boxes(self) -> np.ndarray:
        """Packed boxes ``(41, 5)``."""
        n = len(self.poses)
        ext = np.tile([self.length / 2.0, self.width / 2.0], (n, 1))
        return np.concatenate([self.poses, ext], axis=1)


@dataclass(frozen=True)
class Phase:
    start: float
    end: float
    state: SignalState

    def __post_init__(self):
        object.__setattr__(self, "state", SignalState(self.state))


@dataclass(frozen=True, eq=False)
class SignalTimeline(_ArrayEqMixin):
    region: Polygon
    phases: tuple

    def __post_init__(self):
        phases = tuple(self.phases)
        if not phases:
            raise SchemaError("signal needs at least one phase", "signals.phases")
        if abs(phases[0].start) > 1e-9 or abs(phases[-1].end - 4.0) > 1e-9:
            raise SchemaError("phases must cover [0, 4] s", "signals.phases")
        for a, b in zip(phases, phases[1:]):
            if abs(a.end - b.start) > 1e-9:
                raise SchemaError("phases must be contiguous", "signals.phases")
        if any(p.end <= p.start for p in phases):
            raise SchemaError("phases must have positive duration", "signals.phases")
        object.__setattr__(self, "phases", phases)

    def state_at(self, t) -> np.ndarray:
        """Boolean array: True where the signal is red at time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        red = np.zeros(t.shape, dtype=bool)
        for i, p in enumerate(self.phases):
            last = i == len(self.phases) - 1
            inside = (t >= p.start) & ((t <= p.end) if last else (t < p.end))
            if p.state is SignalState.RED:
                red |= inside
        return red


@dataclass(frozen=True, eq=False)
class Scenario(_ArrayEqMixin):
    id: str
    lanes: tuple
    route: Polyline
    drivable: tuple
    agents: tuple
    signals: tuple
    ego: EgoState
    human: np.ndarray
    preceding_id: Optional[str] = None

    def __post_init__(self):
        human = check_trajectory(self.human, "human")
        human.setflags(write=False)
        object.__setattr__(self, "human", human)
        for name in ("lanes", "drivable", "agents", "signals"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.drivable:
            raise SchemaError("at least one drivable polygon required", "drivable")
        if not self.route.length > 0:
            raise SchemaError("route must have positive length", "route")


@dataclass(frozen=True)
class FramePair:
    prev: Scenario
    curr: Scenario
    transform: tuple  # (dx, dy, dtheta): preceding frame -> current frame


# --- kinematics --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KinematicProfile:
    speed: np.ndarray
    lon_accel: np.ndarray
    lon_jerk: np.ndarray
    yaw_rate: np.ndarray
    yaw_accel: np.ndarray
    lat_accel: np.ndarray


def kinematics_from_poses(poses, dt: float = DT) -> KinematicProfile:
    """Finite-difference kinematics over ``(..., n, 3)`` pose sequences (n - 1 intervals)."""
    p = np.asarray(poses, dtype=float)
    speed = np.linalg.norm(np.diff(p[..., :2], axis=-2), axis=-1) / dt
    lon_accel = np.diff(speed, axis=-1) / dt
    lon_jerk = np.diff(lon_accel, axis=-1) / dt
    yaw_rate = np.asarray(wrap_angle(np.diff(p[..., 2], axis=-1))) / dt
    yaw_accel = np.diff(yaw_rate, axis=-1) / dt
    return KinematicProfile(speed, lon_accel, lon_jerk, yaw_rate, yaw_accel, speed * yaw_rate)


def derive_kinematics(traj, initial: Optional[EgoState] = None, dt: float = DT) -> KinematicProfile:
    """Kinematics of a 40-pose plan with the ego origin prepended.

    Series lengths: speed 40, lon_accel 39, lon_jerk 38, yaw_rate 40,
    yaw_accel 39, lat_accel 40.
    """
    traj = check_trajectory(traj)
    start = np.zeros((1, 3)) if initial is None else initial.pose.as_array()[None, :]
    return kinematics_from_poses(np.concatenate([start, traj]), dt)


# --- generation --------------------------------------------------------------

def parse_template_mix(mix) -> dict:
    """Accept ``"uniform"``, a mapping, or ``"Name=w,Name=w"``; returns normalized weights."""
    if mix is None or mix == "uniform":
        return {t: 1.0 / len(TEMPLATES) for t in TEMPLATES}
    if isinstance(mix, str):
        try:
            mix = {k.strip(): float(v) for k, v in (item.split("=") for item in mix.split(",") if item.strip())}
        except ValueError as exc:
            raise InvalidTemplateMix(f"cannot parse template mix {mix!r}") from exc
    if not isinstance(mix, Mapping) or not mix:
        raise InvalidTemplateMix("template mix must be a non-empty mapping")
    unknown = set(mix) - set(TEMPLATES)
    if unknown:
        raise InvalidTemplateMix(f"unknown templates {sorted(unknown)}")
    weights = {t: float(mix.get(t, 0.0)) for t in TEMPLATES}
    if any(not math.isfinite(w) or w < 0 for w in weights.values()):
        raise InvalidTemplateMix("template weights must be finite and non-negative")
    if abs(sum(weights.values()) - 1.0) > 1e-6:
        raise InvalidTemplateMix(f"template weights sum to {sum(weights.values())}, expected 1")
    return weights


def _integrate_path(s_grid, curvature) -> np.ndarray:
    """Planar curve through the origin (heading 0 at s = 0) with the given curvature profile."""
    ds = np.diff(s_grid)
    kappa = curvature(s_grid)
    heading_mid = np.cumsum(0.5 * (kappa[:-1] + kappa[1:]) * ds)
    heading = np.concatenate([[0.0], heading_mid])
    zero = np.searchsorted(s_grid, 0.0)
    heading -= heading[zero]
    h_seg = 0.5 * (heading[:-1] + heading[1:])
    xy = np.concatenate([[[0.0, 0.0]], np.cumsum(np.stack([np.cos(h_seg) * ds, np.sin(h_seg) * ds], axis=1), axis=0)])
    xy -= xy[zero]
    return np.concatenate([xy, heading[:, None]], axis=1)


def _offset(path: np.ndarray, d: float) -> np.ndarray:
    normal = np.stack([-np.sin(path[:, 2]), np.cos(path[:, 2])], axis=1)
    return path[:, :2] + d * normal


class _Road:
    """World-frame road: reference lane through the world origin along +x."""

    def __init__(self, curvature, lane_offsets, reverse, s_min=-60.0, s_max=180.0, step=4.0):
        s = np.arange(s_min, s_max + 1e-9, step)
        self.s = s
        self.path = _integrate_path(s, curvature)
        self.lanes = []
        for off, rev in zip(lane_offsets, reverse):
            pts = _offset(self.path, off)
            self.lanes.append(Polyline(pts[::-1] if rev else pts))
        self.offsets = list(lane_offsets)
        self.reverse = list(reverse)
        self.left_edge = max(lane_offsets) + LANE_WIDTH / 2 + 0.75
        self.right_edge = min(lane_offsets) - LANE_WIDTH / 2 - 0.75

    def drivable(self, chunk=5) -> list:
        """Corridor split into abutting quads-strip polygons of ``chunk`` samples."""
        polys = []
        left = _offset(self.path, self.left_edge)
        right = _offset(self.path, self.right_edge)
        n = len(self.s)
        start = 0
        while start < n - 1:
            stop = min(start + chunk, n - 1)
            verts = np.concatenate([right[start : stop + 1], left[start : stop + 1][::-1]])
            polys.append(Polygon(verts))
            start = stop
        return polys

    def band(self, s0, s1, lo, hi) -> Polygon:
        """Polygon spanning arc [s0, s1] and lateral [lo, hi] of the reference lane."""
        ss = np.linspace(s0, s1, 5)
        path = np.stack([np.interp(ss, self.s, self.path[:, k]) for k in range(3)], axis=1)
        right = _offset(path, lo)
        left = _offset(path, hi)
        return Polygon(np.concatenate([right, left[::-1]]))


@dataclass
class _AgentPlan:
    id: str
    length: float
    width: float
    lane: int
    s0: float
    speed: float
    poses: np.ndarray = field(default=None)  # world frame, t = -0.5 ... 4.0


def _agent_world_poses(road: _Road, plan: _AgentPlan, times: np.ndarray) -> np.ndarray:
    lane = road.lanes[plan.lane]
    s = plan.s0 + plan.speed * (times - times[0])
    xy = lane.interpolate(s)
    tan = lane.tangent_at(s)
    return np.concatenate([xy, np.arctan2(tan[:, 1], tan[:, 0])[:, None]], axis=1)


def _idm_accel(v, v_des, gap=None, v_lead=0.0):
    a_max, b, t_head, s0 = 1.5, 2.0, 1.5, 2.5
    free = 1.0 - (v / max(v_des, 0.1)) ** 4
    if gap is None:
        return a_max * free
    s_star = s0 + max(0.0, v * t_head + v * (v - v_lead) / (2 * math.sqrt(a_max * b)))
    return a_max * (free - (s_star / max(gap, 0.1)) ** 2)


def _rollout(road: _Road, rng, agents, lane_plan, v0, v_des, signal=None, n_steps=45):
    """Pure-pursuit + IDM rollout from t = -0.5 s; returns (46, 4) [x, y, heading, v] and accel."""
    times = -0.5 + DT * np.arange(n_steps + 1)
    ref = road.lanes[0]
    state = np.array([*ref.interpolate(-road.s[0]), 0.0, v0])
    states = [state.copy()]
    accels = []
    half_len = EGO_LENGTH / 2.0
    for k in range(n_steps):
        t = times[k]
        target = road.lanes[lane_plan(t)]
        x, y, h, v = state
        arc, lat, _, _ = project_points(np.array([[x, y]]), target)
        arc = float(arc[0])
        gap, v_lead = None, 0.0
        for ag in agents:
            pa = ag.poses[k]
            a_arc, a_lat, _, _ = project_points(pa[None, :2], target)
            if a_lat[0] < 2.5 and a_arc[0] > arc:
                g = a_arc[0] - arc - half_len - ag.length / 2.0
                if gap is None or g < gap:
                    nxt = ag.poses[min(k + 1, len(ag.poses) - 1)]
                    gap, v_lead = g, float(np.linalg.norm(nxt[:2] - pa[:2]) / DT)
        if signal is not None:
            s_stop, red_at = signal
            g = s_stop - arc - half_len
            if red_at(t) and g > -0.5 and v * v / (2 * 4.0) < g + 0.5:
                if gap is None or g < gap:
                    gap, v_lead = max(g, 0.1), 0.0
        acc = float(np.clip(_idm_accel(v, v_des, gap, v_lead), -4.0, 2.0))
        look = max(6.0, 1.0 * v)
        tgt = target.interpolate(arc + look)
        alpha = wrap_angle(math.atan2(tgt[1] - y, tgt[0] - x) - h)
        kappa = float(np.clip(2.0 * math.sin(alpha) / look, -0.2, 0.2))
        v_new = max(0.0, v + acc * DT)
        v_avg = 0.5 * (v + v_new)
        acc = (v_new - v) / DT
        dh = v_avg * kappa * DT
        h_mid = h + 0.5 * dh
        state = np.array([x + v_avg * DT * math.cos(h_mid), y + v_avg * DT * math.sin(h_mid), wrap_angle(h + dh), v_new])
        states.append(state.copy())
        accels.append(acc)
    accels.append(accels[-1])
    return np.array(states), np.array(accels)


def _frame_phases(abs_phases, t0) -> tuple:
    """Clip absolute (start, end, state) phases to the frame window [t0, t0 + 4]."""
    out = []
    for start, end, state in abs_phases:
        lo, hi = max(start, t0), min(end, t0 + 4.0)
        if hi - lo > 1e-9:
            lo_r = round(float(lo - t0), 9)
            hi_r = round(float(hi - t0), 9)
            if out and out[-1].state.value == state:
                out[-1] = Phase(out[-1].start, hi_r, state)
            else:
                out.append(Phase(lo_r, hi_r, state))
    return tuple(out)


def _build_pair(index: int, seed: int, template: str, rng: np.random.Generator) -> FramePair:
    v_des = rng.uniform(6.0, 13.0)
    v0 = float(np.clip(v_des + rng.uniform(-4.0, 2.0), 2.0, 14.0))
    command = Command.FOLLOW
    with_oncoming = rng.random() < 0.6
    offsets, reverse = [0.0, LANE_WIDTH], [False, False]
    if with_oncoming:
        offsets.append(-LANE_WIDTH)
        reverse.append(True)
    if template == "CurvedRoad":
        k_max = rng.uniform(0.006, 0.02) * rng.choice([-1.0, 1.0])
        s_on = rng.uniform(0.0, 20.0)
        curvature = lambda s: k_max * np.clip((s - s_on) / 25.0, 0.0, 1.0)  # noqa: E731
        command = Command.TURN_LEFT if k_max > 0 else Command.TURN_RIGHT
    else:
        curvature = lambda s: np.zeros_like(s)  # noqa: E731
    road = _Road(curvature, offsets, reverse)
    times = -0.5 + DT * np.arange(46)

    # agents
    plans = []
    n = 0

    def new_agent(lane, s_ref, speed):
        # s_ref: position along the reference lane, measured from the ego start
        nonlocal n
        arc = s_ref - road.s[0]
        if road.reverse[lane]:
            arc = road.lanes[lane].length - arc
        plan = _AgentPlan(f"a{n}", rng.uniform(3.8, 5.2), rng.uniform(1.7, 2.1), lane, arc, speed)
        n += 1
        plan.poses = _agent_world_poses(road, plan, times)
        plans.append(plan)

    if template != "SignalizedIntersection" and rng.random() < 0.7:
        lead_v = rng.uniform(0.0, v_des)
        gap = v0 * v0 / (2 * 3.0) + rng.uniform(10.0, 35.0)
        new_agent(0, gap + 5.0, lead_v)
    if template != "LaneChange" and rng.random() < 0.6:
        new_agent(1, rng.uniform(-5.0, 50.0), rng.uniform(5.0, 12.0))
    if template == "LaneChange" and rng.random() < 0.5:
        new_agent(1, rng.uniform(60.0, 80.0), rng.uniform(12.0, 14.0))
    if with_oncoming:
        for _ in range(int(rng.integers(0, 3))):
            new_agent(2, rng.uniform(20.0, 140.0), rng.uniform(5.0, 12.0))

    lane_plan = lambda t: 0  # noqa: E731
    route_lane = 0
    if template == "LaneChange":
        t_lc = rng.uniform(-0.5, 1.0)
        lane_plan = lambda t: 1 if t >= t_lc else 0  # noqa: E731
        route_lane = 1
        command = Command.LANE_CHANGE_LEFT

    signal = None
    abs_phases = None
    region_world = None
    if template == "SignalizedIntersection":
        s_cw = v0 * 0.5 + rng.uniform(12.0, 35.0)
        region_world = road.band(s_cw, s_cw + 4.0, road.right_edge, road.left_edge)
        pattern = rng.integers(0, 4)
        switch = rng.uniform(0.5, 3.5)
        if pattern == 0:
            abs_phases = [(-0.5, switch, "Red"), (switch, 4.0, "Green")]
        elif pattern == 1:
            abs_phases = [(-0.5, switch, "Green"), (switch, 4.0, "Red")]
        elif pattern == 2:
            abs_phases = [(-0.5, 4.0, "Red")]
        else:
            abs_phases = [(-0.5, 4.0, "Green")]

        def red_at(t):
            return any(st == "Red" and a <= t < b for a, b, st in abs_phases)

        signal = (s_cw - 1.0 - road.s[0], red_at)

    states, accels = _rollout(road, rng, plans, lane_plan, v0, v_des, signal)

    frames = {}
    for name, k0 in (("prev", 0), ("curr", FRAME_GAP_STEPS)):
        origin = states[k0, :3]
        dx, dy, dth = relative_transform((0.0, 0.0, 0.0), origin)
        to_frame = lambda arr: transform_poses(arr, dx, dy, dth)  # noqa: E731
        human = to_frame(states[k0 + 1 : k0 + 1 + HORIZON_STEPS, :3])
        lanes = [Polyline(to_frame(l.points)) for l in road.lanes]
        route = lanes[route_lane]
        drivable = [Polygon(to_frame(p.vertices)) for p in road.drivable()]
        agents = [
            AgentTrack(p.id, p.length, p.width, to_frame(p.poses[k0 : k0 + AGENT_STEPS])) for p in plans
        ]
        signals = []
        if region_world is not None:
            t0 = times[k0]
            signals.append(SignalTimeline(Polygon(to_frame(region_world.vertices)), _frame_phases(abs_phases, t0)))
        ego = EgoState(float(states[k0, 3]), float(accels[k0]), command)
        frames[name] = dict(
            lanes=lanes, route=route, drivable=drivable, agents=agents, signals=signals, ego=ego, human=human
        )
    base = f"s{seed}-{index:05d}"
    prev = Scenario(id=f"{base}-prev", **frames["prev"])
    curr = Scenario(id=base, preceding_id=prev.id, **frames["curr"])
    transform = relative_transform(states[0, :3], states[FRAME_GAP_STEPS, :3])
    return FramePair(prev, curr, tuple(float(v) for v in transform))


def generate_pair(index: int, seed: int, template_mix=None) -> FramePair:
    """Single generated pair; seeded from ``(seed, index)`` so order of generation is irrelevant."""
    weights = parse_template_mix(template_mix)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    names = list(weights)
    template = names[int(rng.choice(len(names), p=np.array([weights[t] for t in names])))]
    return _build_pair(index, seed, template, rng)


def generate_scenarios(count: int, seed: int, template_mix=None) -> list:
    if count < 1:
        raise ValueError("count must be >= 1")
    parse_template_mix(template_mix)
    return [generate_pair(i, seed, template_mix) for i in range(count)]


# --- serialization -----------------------------------------------------------

def scenario_to_dict(s: Scenario) -> dict:
    return {
        "id": s.id,
        "preceding_id": s.preceding_id,
        "ego": {
            "velocity": s.ego.velocity,
            "acceleration": s.ego.acceleration,
            "command": s.ego.command.value,
            "length": s.ego.length,
            "width": s.ego.width,
        },
        "lanes": [l.points.tolist() for l in s.lanes],
        "route": s.route.points.tolist(),
        "drivable": [p.vertices.tolist() for p in s.drivable],
        "agents": [{"id": a.id, "length": a.length, "width": a.width, "poses": a.poses.tolist()} for a in s.agents],
        "signals": [
            {
                "region": sig.region.vertices.tolist(),
                "phases": [{"start": p.start, "end": p.end, "state": p.state.value} for p in sig.phases],
            }
            for sig in s.signals
        ],
        "human": s.human.tolist(),
    }


def _req(d, key, path):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError("missing required field", f"{path}.{key}" if path else key)
    return d[key]


def _wrap_errors(fn, path):
    try:
        return fn()
    except SchemaError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise SchemaError(str(exc), path) from exc


def scenario_from_dict(d: dict) -> Scenario:
    if not isinstance(d, dict):
        raise SchemaError("scenario must be a JSON object")
    sid = _req(d, "id", "")
    ego_d = _req(d, "ego", "")
    ego = _wrap_errors(
        lambda: EgoState(
            float(_req(ego_d, "velocity", "ego")),
            float(_req(ego_d, "acceleration", "ego")),
            Command(_req(ego_d, "command", "ego")),
            float(ego_d.get("length", EGO_LENGTH)),
            float(ego_d.get("width", EGO_WIDTH)),
        ),
        "ego",
    )
    lanes = [_wrap_errors(lambda l=l: Polyline(l), f"lanes[{i}]") for i, l in enumerate(_req(d, "lanes", ""))]
    route = _wrap_errors(lambda: Polyline(_req(d, "route", "")), "route")
    drivable = [
        _wrap_errors(lambda p=p: Polygon(p), f"drivable[{i}]") for i, p in enumerate(_req(d, "drivable", ""))
    ]
    agents = []
    for i, a in enumerate(_req(d, "agents", "")):
        path = f"agents[{i}]"
        agents.append(
            _wrap_errors(
                lambda a=a, path=path: AgentTrack(
                    str(_req(a, "id", path)),
                    float(_req(a, "length", path)),
                    float(_req(a, "width", path)),
                    np.asarray(_req(a, "poses", path), dtype=float),
                ),
                path,
            )
        )
    signals = []
    for i, sd in enumerate(_req(d, "signals", "")):
        path = f"signals[{i}]"
        signals.append(
            _wrap_errors(
                lambda sd=sd, path=path: SignalTimeline(
                    Polygon(_req(sd, "region", path)),
                    tuple(
                        Phase(float(_req(p, "start", path)), float(_req(p, "end", path)), _req(p, "state", path))
                        for p in _req(sd, "phases", path)
                    ),
                ),
                path,
            )
        )
    human_raw = _req(d, "human", "")
    human = check_trajectory(_wrap_errors(lambda: np.asarray(human_raw, dtype=float), "human"), "human")
    return Scenario(
        id=str(sid),
        lanes=lanes,
        route=route,
        drivable=drivable,
        agents=agents,
        signals=signals,
        ego=ego,
        human=human,
        preceding_id=d.get("preceding_id"),
    )


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), sort_keys=True)


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(s), encoding="utf-8")


def load_scenario(path) -> Scenario:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", str(path)) from exc
    return scenario_from_dict(d)


def save_pairs(pairs: Sequence[FramePair], out_dir, manifest_name="pairs.json") -> Path:
    """Write every scenario plus a manifest of ``{prev, curr, transform}`` records."""
    out = Path(out_dir)
    (out / "scenarios").mkdir(parents=True, exist_ok=True)
    records = []
    for pair in pairs:
        rec = {}
        for key, s in (("prev", pair.prev), ("curr", pair.curr)):
            rel = os.path.join("scenarios", f"{s.id}.json")
            save_scenario(s, out / rel)
            rec[key] = rel
        dx, dy, dth = pair.transform
        rec["transform"] = {"dx": dx, "dy": dy, "dtheta": dth}
        records.append(rec)
    manifest = out / manifest_name
    manifest.write_text(json.dumps(records, indent=1), encoding="utf-8")
    return manifest


def load_pairs(manifest) -> list:
    manifest = Path(manifest)
    try:
        records = json.loads(manifest.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", str(manifest)) from exc
    if not isinstance(records, list):
        raise SchemaError("manifest must be a JSON array", str(manifest))
    pairs = []
    for i, rec in enumerate(records):
        path = f"[{i}]"
        prev_name, curr_name, tr = (_req(rec, k, path) for k in ("prev", "curr", "transform"))
        transform = tuple(float(_req(tr, k, f"{path}.transform")) for k in ("dx", "dy", "dtheta"))
        prev = load_scenario(manifest.parent / prev_name)
        curr = load_scenario(manifest.parent / curr_name)
        pairs.append(FramePair(prev, curr, transform))
    return pairs
