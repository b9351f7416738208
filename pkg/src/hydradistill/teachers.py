"""Rule-based metric teachers, PDMS/EPDMS aggregation and score-matrix caches.

Batch scorers take trajectories ``(k, 40, 3)`` in the scenario frame and
return one value per trajectory; the single-trajectory ``score_*`` functions
wrap them. All decisions are computed with the ego at the frame origin at
t = 0 unless an explicit ``origin`` pose is given.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._hashing import hash_hex
from .exceptions import FrameMismatch, MissingSubscore, NoReference, SchemaError, ShapeMismatch
from .geom import box_corners, boxes_in_polygons, boxes_intersect, points_in_polygon, project_points, transform_poses
from .scenario import DT, HORIZON_STEPS, EgoState, Scenario, check_trajectory, kinematics_from_poses

METRICS = ("NC", "DAC", "EP", "TTC", "C", "TL", "DDC", "LK")
PENALTY_METRICS = ("NC", "DAC", "DDC", "TL")
EXTENDED_METRICS = ("TL", "DDC", "LK")
EC_SHIFT = 5  # frames are 0.5 s apart at 10 Hz


@dataclass(frozen=True)
class TeacherConfig:
    tau_D: float = 0.5
    tau_A: float = 0.7
    tau_J: float = 0.5
    tau_YR: float = 0.1
    tau_YA: float = 0.1
    ttc_horizon: float = 1.0
    ttc_step: float = 0.1
    lon_accel_min: float = -4.05
    lon_accel_max: float = 2.40
    lat_accel_max: float = 4.89
    lon_jerk_max: float = 4.13
    yaw_rate_max: float = 0.95
    yaw_accel_max: float = 1.93
    ep_min_ref: float = 5.0
    log_clamp_eps: float = 1e-6
    at_fault_speed: float = 0.05
    dac_samples_per_edge: int = 8

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "lon_accel_min":
                continue
            if not v > 0:
                raise ValueError(f"{f.name} must be > 0, got {v}")
        if not self.lon_accel_min < 0 < self.lon_accel_max:
            raise ValueError("lon_accel bounds must satisfy lower < 0 < upper")

    def canonical(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """64-bit FNV-1a of the canonical JSON serialization, as hex."""
        return hash_hex(self.canonical())

    @classmethod
    def from_dict(cls, d) -> "TeacherConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SchemaError(f"unknown config keys {sorted(unknown)}", "config")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise SchemaError(str(exc), "config") from exc

    @classmethod
    def load(cls, path) -> "TeacherConfig":
        if path is None:
            return cls()
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", str(path)) from exc


@dataclass
class SubScores:
    nc: Optional[float] = None
    dac: Optional[float] = None
    ep: Optional[float] = None
    ttc: Optional[float] = None
    c: Optional[float] = None
    tl: Optional[float] = None
    ddc: Optional[float] = None
    lk: Optional[float] = None
    ec: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)


def _require(s: SubScores, names):
    missing = [n for n in names if getattr(s, n) is None]
    if missing:
        raise MissingSubscore(f"missing subscores {missing}")


def pdms(s: SubScores) -> float:
    _require(s, ("nc", "dac", "ttc", "c", "ep"))
    return s.nc * s.dac * (5.0 * s.ttc + 2.0 * s.c + 5.0 * s.ep) / 12.0


def epdms(s: SubScores) -> float:
    _require(s, ("nc", "dac", "ddc", "tl", "ttc", "c", "ep", "lk", "ec"))
    penalty = s.nc * s.dac * s.ddc * s.tl
    return penalty * (5.0 * s.ttc + 2.0 * s.c + 5.0 * s.ep + 5.0 * s.lk + 5.0 * s.ec) / 22.0


# --- helpers -----------------------------------------------------------------

def _as_batch(trajs) -> np.ndarray:
    arr = np.asarray(trajs, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (HORIZON_STEPS, 3):
        raise ShapeMismatch(f"expected (k, {HORIZON_STEPS}, 3) trajectories, got {arr.shape}")
    return arr


def _with_origin(trajs, origin=None) -> np.ndarray:
    o = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    start = np.broadcast_to(o, (len(trajs), 1, 3))
    return np.concatenate([start, trajs], axis=1)


def _ego_boxes(trajs, ego: EgoState) -> np.ndarray:
    hl, hw = ego.half_extents
    ext = np.broadcast_to([hl, hw], trajs.shape[:-1] + (2,))
    return np.concatenate([trajs, ext], axis=-1)


def _step_speeds(trajs, origin=None) -> np.ndarray:
    full = _with_origin(trajs, origin)
    return np.linalg.norm(np.diff(full[..., :2], axis=1), axis=-1) / DT


def _radius(boxes) -> np.ndarray:
    return np.hypot(boxes[..., 3], boxes[..., 4])


def _pairwise_hits(ego_boxes, agent_boxes) -> np.ndarray:
    """Overlap of ``ego_boxes (..., 5)`` against ``agent_boxes`` broadcast to the same
    leading shape; a circle prefilter limits the exact test to nearby pairs."""
    e, a = np.broadcast_arrays(ego_boxes, agent_boxes)
    reach = _radius(e) + _radius(a) + 1e-6
    near = np.hypot(e[..., 0] - a[..., 0], e[..., 1] - a[..., 1]) <= reach
    hits = np.zeros(near.shape, dtype=bool)
    if near.any():
        hits[near] = boxes_intersect(e[near], a[near])
    return hits


# --- individual metrics (batched) --------------------------------------------

def nc_batch(trajs, scenario: Scenario, cfg: TeacherConfig = TeacherConfig(), origin=None) -> np.ndarray:
    trajs = _as_batch(trajs)
    out = np.ones(len(trajs))
    if not scenario.agents:
        return out
    ego = _ego_boxes(trajs, scenario.ego)  # (k, 40, 5)
    agents = np.stack([a.boxes()[1:] for a in scenario.agents], axis=1)  # (40, A, 5)
    hits = _pairwise_hits(ego[:, :, None, :], agents[None])  # (k, 40, A)
    moving = _step_speeds(trajs, origin) >= cfg.at_fault_speed
    at_fault = hits.any(axis=2) & moving
    out[at_fault.any(axis=1)] = 0.0
    return out


def dac_batch(trajs, scenario: Scenario, cfg: TeacherConfig = TeacherConfig()) -> np.ndarray:
    trajs = _as_batch(trajs)
    ok = boxes_in_polygons(_ego_boxes(trajs, scenario.ego), scenario.drivable, cfg.dac_samples_per_edge)
    return ok.all(axis=1).astype(float)


def ttc_batch(trajs, scenario: Scenario, cfg: TeacherConfig = TeacherConfig(), origin=None) -> np.ndarray:
    """Constant-velocity projection of the ego box from every step over the horizon."""
    trajs = _as_batch(trajs)
    out = np.ones(len(trajs))
    if not scenario.agents:
        return out
    n_sub = int(round(cfg.ttc_horizon / cfg.ttc_step))
    deltas = cfg.ttc_step * np.arange(1, n_sub + 1)  # (J,)
    speed = _step_speeds(trajs, origin)  # (k, 40)
    h = trajs[..., 2]
    dist = speed[..., None] * deltas  # (k, 40, J)
    proj = np.empty(trajs.shape[:2] + (n_sub, 3))
    proj[..., 0] = trajs[..., None, 0] + dist * np.cos(h)[..., None]
    proj[..., 1] = trajs[..., None, 1] + dist * np.sin(h)[..., None]
    proj[..., 2] = h[..., None]
    ego = _ego_boxes(proj, scenario.ego)  # (k, 40, J, 5)
    agent_all = np.stack([a.boxes() for a in scenario.agents], axis=1)  # (41, A, 5)
    steps = np.arange(1, HORIZON_STEPS + 1)
    t_idx = np.rint(steps[:, None] + deltas[None, :] / DT).astype(int)
    t_idx = np.minimum(t_idx, HORIZON_STEPS)  # agents hold their final pose past 4 s
    agents = agent_all[t_idx]  # (40, J, A, 5)
    hits = _pairwise_hits(ego[..., None, :], agents[None])  # (k, 40, J, A)
    out[hits.reshape(len(trajs), -1).any(axis=1)] = 0.0
    return out


def comfort_batch(trajs, cfg: TeacherConfig = TeacherConfig(), origin=None) -> np.ndarray:
    trajs = _as_batch(trajs)
    kp = kinematics_from_poses(_with_origin(trajs, origin))
    ok = (
        np.all((kp.lon_accel >= cfg.lon_accel_min) & (kp.lon_accel <= cfg.lon_accel_max), axis=1)
        & np.all(np.abs(kp.lat_accel) <= cfg.lat_accel_max, axis=1)
        & np.all(np.abs(kp.lon_jerk) <= cfg.lon_jerk_max, axis=1)
        & np.all(np.abs(kp.yaw_rate) <= cfg.yaw_rate_max, axis=1)
        & np.all(np.abs(kp.yaw_accel) <= cfg.yaw_accel_max, axis=1)
    )
    return ok.astype(float)


def progress_batch(trajs, scenario: Scenario, origin=None) -> np.ndarray:
    """Arc-length gain along the route between the origin and each final pose."""
    trajs = _as_batch(trajs)
    o = np.zeros(2) if origin is None else np.asarray(origin, dtype=float)[:2]
    arc_end, _, _, _ = project_points(trajs[:, -1, :2], scenario.route)
    arc_start, _, _, _ = project_points(o[None], scenario.route)
    return arc_end - arc_start[0]


def ep_reference(trajs, scenario: Scenario, cfg: TeacherConfig = TeacherConfig(), nc=None, dac=None) -> float:
    """Best progress among candidates passing NC and DAC (0 when none passes)."""
    trajs = _as_batch(trajs)
    nc = nc_batch(trajs, scenario, cfg) if nc is None else nc
    dac = dac_batch(trajs, scenario, cfg) if dac is None else dac
    ok = (nc == 1.0) & (dac == 1.0)
    if not ok.any():
        return 0.0
    return float(np.max(progress_batch(trajs[ok], scenario)))


def ep_from_progress(progress, reference, cfg: TeacherConfig = TeacherConfig()) -> np.ndarray:
    if reference is None:
        raise NoReference("ego progress needs a reference progress from the vocabulary")
    progress = np.asarray(progress, dtype=float)
    if reference < cfg.ep_min_ref:
        return (progress >= 0.0).astype(float)
    return np.clip(progress / reference, 0.0, 1.0)


def tl_batch(trajs, scenario: Scenario, cfg: TeacherConfig = TeacherConfig()) -> np.ndarray:
    trajs = _as_batch(trajs)
    out = np.ones(len(trajs))
    if not scenario.signals:
        return out
    hl = scenario.ego.half_extents[0]
    front = trajs[..., :2] + hl * np.stack([np.cos(trajs[..., 2]), np.sin(trajs[..., 2])], axis=-1)
    times = DT * np.arange(1, HORIZON_STEPS + 1)
    for sig in scenario.signals:
        inside = points_in_polygon(front, sig.region)  # (k, 40)
        entering = inside.copy()
        entering[:, 1:] &= ~inside[:, :-1]  # step 1 counts as entering when inside
        red = sig.state_at(times)
        out[(entering & red[None, :]).any(axis=1)] = 0.0
    return out


def _nearest_lane(points, lanes):
    """Lateral distance and tangent of the closest lane segment (first lane wins ties)."""
    best_lat = None
    best_tan = None
    for lane in lanes:
        _, lat, _, tan = project_points(points, lane)
        if best_lat is None:
            best_lat, best_tan = lat, tan
        else:
            closer = lat < best_lat
            best_lat = np.where(closer, lat, best_lat)
            best_tan = np.where(closer[..., None], tan, best_tan)
    return best_lat, best_tan


def backward_displacement(trajs, scenario: Scenario, origin=None) -> np.ndarray:
    """Total displacement against the local lane direction, per trajectory."""
    trajs = _as_batch(trajs)
    if not scenario.lanes:
        return np.zeros(len(trajs))
    pts = _with_origin(trajs, origin)[..., :2]
    step = np.diff(pts, axis=1)
    mid = 0.5 * (pts[:, 1:] + pts[:, :-1])
    _, tan = _nearest_lane(mid, scenario.lanes)
    along = np.einsum("kij,kij->ki", step, tan)
    return np.maximum(0.0, -along).sum(axis=1)


def ddc_batch(trajs, scenario: Scenario, cfg: TeacherConfig = TeacherConfig(), origin=None) -> np.ndarray:
    return (backward_displacement(trajs, scenario, origin) <= cfg.tau_D).astype(float)


def lane_deviation(trajs, scenario: Scenario) -> np.ndarray:
    """Per-step distance to the nearest lane centerline, ``(k, 40)``."""
    trajs = _as_batch(trajs)
    if not scenario.lanes:
        raise ValueError("lane keeping needs at least one lane")
    lat, _ = _nearest_lane(trajs[..., :2], scenario.lanes)
    return lat


def lk_batch(trajs, scenario: Scenario, cfg: TeacherConfig = TeacherConfig()) -> np.ndarray:
    return np.all(lane_deviation(trajs, scenario) <= cfg.tau_D, axis=1).astype(float)


# --- single-trajectory API ---------------------------------------------------

def score_nc(traj, scenario, cfg=TeacherConfig(), origin=None) -> float:
    return float(nc_batch(check_trajectory(traj)[None], scenario, cfg, origin)[0])


def score_dac(traj, scenario, cfg=TeacherConfig()) -> float:
    return float(dac_batch(check_trajectory(traj)[None], scenario, cfg)[0])


def score_ttc(traj, scenario, cfg=TeacherConfig(), origin=None) -> float:
    return float(ttc_batch(check_trajectory(traj)[None], scenario, cfg, origin)[0])


def score_comfort(traj, ego: Optional[EgoState] = None, cfg=TeacherConfig()) -> float:
    return float(comfort_batch(check_trajectory(traj)[None], cfg)[0])


def score_ep(traj, scenario, reference, cfg=TeacherConfig()) -> float:
    """``reference`` is the in-scenario best progress (see :func:`ep_reference`)."""
    prog = progress_batch(check_trajectory(traj)[None], scenario)
    return float(ep_from_progress(prog, reference, cfg)[0])


def score_tl(traj, scenario, cfg=TeacherConfig()) -> float:
    return float(tl_batch(check_trajectory(traj)[None], scenario, cfg)[0])


def score_ddc(traj, scenario, cfg=TeacherConfig()) -> float:
    return float(ddc_batch(check_trajectory(traj)[None], scenario, cfg)[0])


def score_lk(traj, scenario, cfg=TeacherConfig()) -> float:
    return float(lk_batch(check_trajectory(traj)[None], scenario, cfg)[0])


# --- extended comfort ---------------------------------------------------------

def ec_discrepancies(curr_traj, prev_traj, pair_transform) -> tuple:
    """RMS differences (accel, jerk, yaw rate, yaw accel) over the shared 3.5 s window."""
    if pair_transform is None:
        raise FrameMismatch("extended comfort needs the preceding-to-current transform")
    curr = check_trajectory(curr_traj)
    prev = check_trajectory(prev_traj, "prev_traj")
    dx, dy, dth = pair_transform
    prev_now = transform_poses(prev, dx, dy, dth)
    n = HORIZON_STEPS - EC_SHIFT
    curr_seq = np.concatenate([np.zeros((1, 3)), curr[:n]])
    prev_seq = prev_now[EC_SHIFT - 1 :]  # anchored at the current frame's t = 0
    return profile_discrepancies(kinematics_from_poses(curr_seq), kinematics_from_poses(prev_seq))


def profile_discrepancies(curr, prev) -> tuple:
    def rms(a, b):
        return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))

    return (
        rms(curr.lon_accel, prev.lon_accel),
        rms(curr.lon_jerk, prev.lon_jerk),
        rms(curr.yaw_rate, prev.yaw_rate),
        rms(curr.yaw_accel, prev.yaw_accel),
    )


def ec_from_discrepancies(d, cfg: TeacherConfig = TeacherConfig()) -> float:
    d_a, d_j, d_yr, d_ya = d
    ok = d_a <= cfg.tau_A and d_j <= cfg.tau_J and d_yr <= cfg.tau_YR and d_ya <= cfg.tau_YA
    return 1.0 if ok else 0.0


def score_ec(curr_traj, prev_traj, pair_transform, ego=None, cfg=TeacherConfig()) -> float:
    if prev_traj is None:
        return 1.0
    return ec_from_discrepancies(ec_discrepancies(curr_traj, prev_traj, pair_transform), cfg)


# --- whole-vocabulary teaching -------------------------------------------------

@dataclass(eq=False)
class ScoreMatrix:
    scenario_id: str
    values: np.ndarray  # (k, 8)
    metric_names: tuple = METRICS
    config_hash: str = ""
    ep_reference: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.metric_names = tuple(self.metric_names)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.metric_names):
            raise ShapeMismatch(f"score matrix shape {self.values.shape} vs {len(self.metric_names)} metrics")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("score values must lie in [0, 1]")

    @property
    def k(self) -> int:
        return len(self.values)

    def column(self, name) -> np.ndarray:
        return self.values[:, self.metric_names.index(name)]

    def row(self, i) -> SubScores:
        return SubScores(**{m.lower(): float(v) for m, v in zip(self.metric_names, self.values[i])})

    def save(self, path) -> None:
        """Binary ``HMDPSCR1`` payload plus a ``.json`` sidecar."""
        path = Path(path)
        k, m = self.values.shape
        payload = b"HMDPSCR1" + struct.pack("<II", k, m) + self.values.astype("<f4").tobytes(order="C")
        path.write_bytes(payload)
        sidecar = {"scenario_id": self.scenario_id, "metric_names": list(self.metric_names),
                   "config_hash": self.config_hash, "ep_reference": self.ep_reference, **self.extra}
        sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ScoreMatrix":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < 16 or raw[:8] != b"HMDPSCR1":
            raise SchemaError("bad magic, expected HMDPSCR1", str(path))
        k, m = struct.unpack("<II", raw[8:16])
        if len(raw) != 16 + 4 * k * m:
            raise SchemaError(f"payload size mismatch for k={k}, m={m}", str(path))
        values = np.frombuffer(raw[16:], dtype="<f4").reshape(k, m).astype(float)
        try:
            meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise SchemaError("missing JSON sidecar", str(sidecar_path(path))) from exc
        for key in ("scenario_id", "metric_names", "config_hash"):
            if key not in meta:
                raise SchemaError("missing required field", f"{sidecar_path(path)}:{key}")
        if len(meta["metric_names"]) != m:
            raise SchemaError("metric_names length disagrees with payload", "metric_names")
        extra = {k_: v for k_, v in meta.items()
                 if k_ not in ("scenario_id", "metric_names", "config_hash", "ep_reference")}
        return cls(meta["scenario_id"], values, tuple(meta["metric_names"]), meta["config_hash"],
                   float(meta.get("ep_reference", 0.0)), extra)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _vocab_array(vocab) -> np.ndarray:
    return _as_batch(getattr(vocab, "trajectories", vocab))


def teach_scenario(scenario: Scenario, vocab, cfg: TeacherConfig = TeacherConfig()) -> ScoreMatrix:
    """Score every vocabulary trajectory on the 8 distillation metrics (EC excluded)."""
    trajs = _vocab_array(vocab)
    nc = nc_batch(trajs, scenario, cfg)
    dac = dac_batch(trajs, scenario, cfg)
    ref = ep_reference(trajs, scenario, cfg, nc, dac)
    cols = {
        "NC": nc,
        "DAC": dac,
        "EP": ep_from_progress(progress_batch(trajs, scenario), ref, cfg),
        "TTC": ttc_batch(trajs, scenario, cfg),
        "C": comfort_batch(trajs, cfg),
        "TL": tl_batch(trajs, scenario, cfg),
        "DDC": ddc_batch(trajs, scenario, cfg),
        "LK": lk_batch(trajs, scenario, cfg),
    }
    values = np.stack([cols[m] for m in METRICS], axis=1)
    return ScoreMatrix(scenario.id, values, METRICS, cfg.config_hash(), ref)


def evaluate_trajectory(
    traj,
    scenario: Scenario,
    reference: float,
    cfg: TeacherConfig = TeacherConfig(),
    prev_traj=None,
    pair_transform=None,
) -> SubScores:
    """All nine subscores of one trajectory; EC is 1 without a preceding prediction."""
    t = check_trajectory(traj)[None]
    return SubScores(
        nc=float(nc_batch(t, scenario, cfg)[0]),
        dac=float(dac_batch(t, scenario, cfg)[0]),
        ep=float(ep_from_progress(progress_batch(t, scenario), reference, cfg)[0]),
        ttc=float(ttc_batch(t, scenario, cfg)[0]),
        c=float(comfort_batch(t, cfg)[0]),
        tl=float(tl_batch(t, scenario, cfg)[0]),
        ddc=float(ddc_batch(t, scenario, cfg)[0]),
        lk=float(lk_batch(t, scenario, cfg)[0]),
        ec=score_ec(t[0], prev_traj, pair_transform, scenario.ego, cfg),
    )


def teach_many(scenarios: Sequence[Scenario], vocab, cfg: TeacherConfig = TeacherConfig(), jobs: int = 1) -> list:
    """Teach every scenario; results are returned in input order regardless of ``jobs``."""
    if jobs <= 1 or len(scenarios) <= 1:
        return [teach_scenario(s, vocab, cfg) for s in scenarios]
    from concurrent.futures import ProcessPoolExecutor

    trajs = np.asarray(_vocab_array(vocab))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(teach_scenario, scenarios, [trajs] * len(scenarios), [cfg] * len(scenarios)))
