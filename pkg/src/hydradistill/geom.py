"""Planar geometry primitives used by the metric teachers.

Scalar entry points (``obb_intersects``, ``point_in_polygon``, ...) follow the
domain types; the ``*_batch``/vectorized variants take packed numpy arrays and
are what the teachers call in their inner loops. A packed box is the 5-vector
``[x, y, heading, half_length, half_width]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import GeometryError

_EPS = 1e-9


def wrap_angle(theta):
    """Wrap angle(s) into (-pi, pi]. Values already in range are returned unchanged."""
    theta = np.asarray(theta, dtype=float)
    out_of_range = (theta > np.pi) | (theta <= -np.pi)
    wrapped = np.where(out_of_range, np.pi - np.mod(np.pi - theta, 2.0 * np.pi), theta)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise GeometryError(f"non-finite pose {self.x, self.y, self.heading}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])


@dataclass(frozen=True)
class OrientedBox:
    center: Pose
    half_length: float
    half_width: float

    def __post_init__(self):
        if not (self.half_length > 0 and self.half_width > 0):
            raise GeometryError("box half extents must be positive")

    @classmethod
    def from_dims(cls, x, y, heading, length, width) -> "OrientedBox":
        return cls(Pose(x, y, heading), length / 2.0, width / 2.0)

    def as_array(self) -> np.ndarray:
        c = self.center
        return np.array([c.x, c.y, c.heading, self.half_length, self.half_width])

    def corners(self) -> np.ndarray:
        return box_corners(self.as_array())


def _array_eq(a, b) -> bool:
    return np.array_equal(np.asarray(a), np.asarray(b))


@dataclass(frozen=True, eq=False)
class Polyline:
    """Directed polyline with cached cumulative arc lengths."""

    points: np.ndarray
    cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise GeometryError("polyline needs >= 2 points of shape (n, 2)")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("polyline has non-finite coordinates")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 0.0):
            raise GeometryError("polyline has repeated consecutive points")
        pts.setflags(write=False)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        cum.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "cumulative", cum)

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    def __eq__(self, other):
        return isinstance(other, Polyline) and _array_eq(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def interpolate(self, s) -> np.ndarray:
        """Points at arc length(s) ``s``, extrapolating linearly past the ends."""
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self.cumulative, s, side="right") - 1, 0, len(self.points) - 2)
        p0 = self.points[idx]
        d = self.points[idx + 1] - p0
        seg_len = self.cumulative[idx + 1] - self.cumulative[idx]
        frac = (s - self.cumulative[idx]) / seg_len
        return p0 + d * frac[..., None]

    def tangent_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self.cumulative, s, side="right") - 1, 0, len(self.points) - 2)
        d = self.points[idx + 1] - self.points[idx]
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Polygon:
    """Simple polygon, vertices counter-clockwise, no closing duplicate."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise GeometryError("polygon needs >= 3 vertices of shape (n, 2)")
        if not np.all(np.isfinite(v)):
            raise GeometryError("polygon has non-finite coordinates")
        if signed_area(v) <= 0.0:
            raise GeometryError("polygon must be counter-clockwise with positive area")
        if _self_intersects(v):
            raise GeometryError("polygon is not simple")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __eq__(self, other):
        return isinstance(other, Polygon) and _array_eq(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def centroid(self) -> np.ndarray:
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
        a = cross.sum() / 2.0
        return np.array([((v[:, 0] + w[:, 0]) * cross).sum(), ((v[:, 1] + w[:, 1]) * cross).sum()]) / (6.0 * a)


def signed_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    w = np.roll(v, -1, axis=0)
    return float(0.5 * np.sum(v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]))


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _self_intersects(v: np.ndarray) -> bool:
    n = len(v)
    a0 = v
    a1 = np.roll(v, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    # adjacent through the closing edge
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    if len(i) == 0:
        return False
    p, r = a0[i], a1[i] - a0[i]
    q, s = a0[j], a1[j] - a0[j]
    denom = _cross2(r, s)
    qp = q - p
    d1 = _cross2(qp, s)
    d2 = _cross2(qp, r)
    parallel = np.abs(denom) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        t = d1 / denom
        u = d2 / denom
    proper = ~parallel & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    collinear = parallel & (np.abs(d2) < 1e-12)
    if np.any(collinear):
        # overlapping collinear segments
        rr = np.einsum("ij,ij->i", r, r)
        t0 = np.einsum("ij,ij->i", qp, r) / rr
        t1 = t0 + np.einsum("ij,ij->i", s, r) / rr
        lo, hi = np.minimum(t0, t1), np.maximum(t0, t1)
        collinear &= (hi >= 0) & (lo <= 1)
    return bool(np.any(proper | collinear))


# --- oriented boxes --------------------------------------------------------

def box_corners(boxes) -> np.ndarray:
    """Corners of packed boxes ``(..., 5)`` as ``(..., 4, 2)``, counter-clockwise."""
    b = np.asarray(boxes, dtype=float)
    c, s = np.cos(b[..., 2]), np.sin(b[..., 2])
    fwd = np.stack([c, s], axis=-1) * b[..., 3:4]
    left = np.stack([-s, c], axis=-1) * b[..., 4:5]
    ctr = b[..., :2]
    return np.stack([ctr + fwd - left, ctr + fwd + left, ctr - fwd + left, ctr - fwd - left], axis=-2)


def boxes_intersect(a, b) -> np.ndarray:
    """Separating-axis overlap test on packed boxes, broadcasting ``a`` against ``b``.

    Closed rectangles: boxes that only touch are reported as intersecting.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    ca, cb = box_corners(a), box_corners(b)
    axes = []
    for box in (a, b):
        c, s = np.cos(box[..., 2]), np.sin(box[..., 2])
        axes.append(np.stack([c, s], axis=-1))
        axes.append(np.stack([-s, c], axis=-1))
    overlap = np.ones(a.shape[:-1], dtype=bool)
    for ax in axes:
        pa = np.einsum("...kj,...j->...k", ca, ax)
        pb = np.einsum("...kj,...j->...k", cb, ax)
        overlap &= (pa.max(axis=-1) >= pb.min(axis=-1) - _EPS) & (pb.max(axis=-1) >= pa.min(axis=-1) - _EPS)
    return overlap


def obb_intersects(a: OrientedBox, b: OrientedBox) -> bool:
    return bool(boxes_intersect(a.as_array(), b.as_array()))


# --- polygons ----------------------------------------------------------------

def points_in_polygon(points, poly: Polygon) -> np.ndarray:
    """Even-odd ray casting; points on the boundary count as inside."""
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, 2)
    inside = np.zeros(len(pts), dtype=bool)
    x0, y0, x1, y1 = poly.bounds
    cand = (
        (pts[:, 0] >= x0 - _EPS) & (pts[:, 0] <= x1 + _EPS) & (pts[:, 1] >= y0 - _EPS) & (pts[:, 1] <= y1 + _EPS)
    )
    idx = np.nonzero(cand)[0]
    if len(idx) == 0:
        return inside.reshape(shape)
    px, py = pts[idx, 0], pts[idx, 1]
    v0 = poly.vertices
    v1 = np.roll(v0, -1, axis=0)
    odd = np.zeros(len(idx), dtype=bool)
    for (ax, ay), (bx, by) in zip(v0, v1):
        if ay == by:
            continue
        straddle = (ay > py) != (by > py)
        xcross = ax + (py - ay) * ((bx - ax) / (by - ay))
        odd ^= straddle & (px < xcross)
    # boundary test only where ray casting said outside
    out = np.nonzero(~odd)[0]
    if len(out):
        qx, qy = px[out], py[out]
        on_edge = np.zeros(len(out), dtype=bool)
        for (ax, ay), (bx, by) in zip(v0, v1):
            ex, ey = bx - ax, by - ay
            t = np.clip(((qx - ax) * ex + (qy - ay) * ey) / (ex * ex + ey * ey), 0.0, 1.0)
            dx = qx - (ax + t * ex)
            dy = qy - (ay + t * ey)
            on_edge |= dx * dx + dy * dy <= _EPS * _EPS
        odd[out] = on_edge
    inside[idx] = odd
    return inside.reshape(shape)


def point_in_polygon(p, poly: Polygon) -> bool:
    return bool(points_in_polygon(np.asarray(p, dtype=float)[None, :], poly)[0])


def points_in_union(points, polys: Sequence[Polygon]) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    inside = np.zeros(pts.shape[:-1], dtype=bool)
    for poly in polys:
        inside |= points_in_polygon(pts, poly)
    return inside


def box_sample_points(boxes, samples_per_edge: int = 8) -> np.ndarray:
    """Corners plus ``samples_per_edge`` interior points per edge: ``(..., 4 + 4S, 2)``."""
    corners = box_corners(boxes)
    nxt = np.roll(corners, -1, axis=-2)
    frac = np.arange(1, samples_per_edge + 1) / (samples_per_edge + 1.0)
    edge = corners[..., :, None, :] + (nxt - corners)[..., :, None, :] * frac[:, None]
    edge = edge.reshape(*corners.shape[:-2], 4 * samples_per_edge, 2)
    return np.concatenate([corners, edge], axis=-2)


def boxes_in_polygons(boxes, polys: Sequence[Polygon], samples_per_edge: int = 8) -> np.ndarray:
    pts = box_sample_points(boxes, samples_per_edge)
    return points_in_union(pts, polys).all(axis=-1)


def box_in_polygons(box: OrientedBox, polys: Sequence[Polygon], samples_per_edge: int = 8) -> bool:
    return bool(boxes_in_polygons(box.as_array(), polys, samples_per_edge))


# --- polylines ---------------------------------------------------------------

class Projection(NamedTuple):
    arc_length: float
    lateral: float
    segment_index: int
    tangent: np.ndarray


def project_points(points, line: Polyline):
    """Vectorized closest-point projection.

    Returns ``(arc_length, lateral, segment_index, tangent)`` arrays; lateral is
    the unsigned distance to the polyline. The hosting segment is located with
    an expanded-square search, then the distance is recomputed exactly on it.
    """
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    p = pts.reshape(-1, 2)
    a = line.points[:-1]
    d = np.diff(line.points, axis=0)
    seg_len = np.diff(line.cumulative)
    ll = seg_len**2
    # shift to a local origin to limit cancellation in the expanded form
    c0 = p.mean(axis=0) if len(p) else np.zeros(2)
    pl, al = p - c0, a - c0
    pd = pl @ d.T
    ad = np.einsum("ij,ij->i", al, d)
    t = np.clip((pd - ad) / ll, 0.0, 1.0)
    p_sq = np.einsum("ij,ij->i", pl, pl)[:, None]
    rel_sq = p_sq - 2.0 * (pl @ al.T) + np.einsum("ij,ij->i", al, al)[None, :]
    dist2 = rel_sq - 2.0 * t * (pd - ad) + t * t * ll
    # exact refinement over near-tied candidates
    best = dist2.min(axis=1, keepdims=True)
    tol = 1e-7 * (1.0 + p_sq + np.abs(best))
    cand = dist2 <= best + tol
    rows, cols = np.nonzero(cand)
    rel = p[rows] - a[cols]
    tt = np.clip(np.einsum("ij,ij->i", rel, d[cols]) / ll[cols], 0.0, 1.0)
    diff = rel - tt[:, None] * d[cols]
    exact = np.einsum("ij,ij->i", diff, diff)
    refined = np.full(dist2.shape, np.inf)
    refined[rows, cols] = exact
    seg = np.argmin(refined, axis=1)
    rel = p - a[seg]
    tt = np.clip(np.einsum("ij,ij->i", rel, d[seg]) / ll[seg], 0.0, 1.0)
    diff = rel - tt[:, None] * d[seg]
    lateral = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    arc = line.cumulative[seg] + tt * seg_len[seg]
    tangent = d[seg] / seg_len[seg][:, None]
    return arc.reshape(shape), lateral.reshape(shape), seg.reshape(shape), tangent.reshape(*shape, 2)


def project_onto_polyline(p, line: Polyline) -> Projection:
    arc, lat, seg, tan = project_points(np.asarray(p, dtype=float)[None, :], line)
    return Projection(float(arc[0]), float(lat[0]), int(seg[0]), tan[0])


def signed_lateral(points, line: Polyline) -> np.ndarray:
    """Lateral offset with sign (+ left of the travel direction)."""
    pts = np.asarray(points, dtype=float)
    arc, lat, seg, tan = project_points(pts, line)
    foot = line.points[seg]
    side = np.sign(_cross2(tan, pts - foot))
    return lat * np.where(side == 0, 1.0, side)


# --- rigid transforms --------------------------------------------------------

def transform_poses(poses, dx: float, dy: float, dtheta: float) -> np.ndarray:
    """Apply ``p -> R(dtheta) p + (dx, dy)`` to ``(..., 3)`` poses or ``(..., 2)`` points."""
    arr = np.asarray(poses, dtype=float)
    c, s = math.cos(dtheta), math.sin(dtheta)
    out = arr.copy()
    out[..., 0] = c * arr[..., 0] - s * arr[..., 1] + dx
    out[..., 1] = s * arr[..., 0] + c * arr[..., 1] + dy
    if arr.shape[-1] >= 3:
        out[..., 2] = wrap_angle(arr[..., 2] + dtheta)
    return out


def relative_transform(from_pose, to_pose) -> tuple[float, float, float]:
    """Transform mapping coordinates in the frame of ``from_pose`` into the frame of
    ``to_pose``, both given in a common world frame."""
    fx, fy, fh = from_pose
    tx, ty, th = to_pose
    dtheta = wrap_angle(fh - th)
    c, s = math.cos(-th), math.sin(-th)
    ox, oy = fx - tx, fy - ty
    return c * ox - s * oy, s * ox + c * oy, dtheta
