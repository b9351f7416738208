"""Planning vocabulary: trajectory sampling, K-means clustering, imitation targets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._hashing import fnv1a_64
from .exceptions import InsufficientData, SchemaError
from .geom import wrap_angle
from .scenario import DT, HORIZON_STEPS, check_trajectory

FLAT_DIM = 3 * HORIZON_STEPS


def _as_traj_batch(trajs) -> np.ndarray:
    arr = np.asarray(trajs, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (HORIZON_STEPS, 3):
        raise ValueError(f"expected trajectories of shape (n, {HORIZON_STEPS}, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("trajectories contain non-finite values")
    return arr


def unwrap_headings(headings) -> np.ndarray:
    """Unwrap along the last axis, continuing from the ego heading 0 at t = 0."""
    h = np.asarray(headings, dtype=float)
    padded = np.concatenate([np.zeros(h.shape[:-1] + (1,)), h], axis=-1)
    return np.unwrap(padded, axis=-1)[..., 1:]


def flatten(traj) -> np.ndarray:
    """``[x1, y1, th1, ..., x40, y40, th40]`` with headings unwrapped."""
    return flatten_many(check_trajectory(traj)[None])[0]


def flatten_many(trajs) -> np.ndarray:
    arr = _as_traj_batch(trajs).copy()
    arr[..., 2] = unwrap_headings(arr[..., 2])
    return arr.reshape(len(arr), FLAT_DIM)


def unflatten_many(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=float).reshape(-1, HORIZON_STEPS, 3).copy()
    arr[..., 2] = wrap_angle(arr[..., 2])
    return arr


def _dim_weight_vector(dim_weights) -> np.ndarray:
    if dim_weights is None:
        return np.ones(FLAT_DIM)
    w = np.asarray(dim_weights, dtype=float)
    if w.shape == (3,):
        w = np.tile(w, HORIZON_STEPS)
    if w.shape != (FLAT_DIM,) or np.any(w < 0):
        raise ValueError("dim_weights must be 3 or 120 non-negative values")
    return w


@dataclass(frozen=True, eq=False)
class Vocabulary:
    trajectories: np.ndarray  # (k, 40, 3)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = _as_traj_batch(self.trajectories).copy()
        t[..., 2] = wrap_angle(t[..., 2])
        if len(t) < 2:
            raise ValueError("vocabulary needs k >= 2")
        flat = t.reshape(len(t), -1)
        if len(np.unique(flat, axis=0)) != len(t):
            raise ValueError("vocabulary contains duplicate trajectories")
        t.setflags(write=False)
        object.__setattr__(self, "trajectories", t)

    @property
    def k(self) -> int:
        return len(self.trajectories)

    def flat(self) -> np.ndarray:
        return flatten_many(self.trajectories)

    def to_dict(self) -> dict:
        m = self.meta
        return {
            "k": self.k,
            "seed": m.get("seed"),
            "iterations": m.get("iterations"),
            "final_sse": m.get("final_sse"),
            "source_count": m.get("source_count"),
            "trajectories": self.trajectories.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Vocabulary":
        if not isinstance(d, dict) or "trajectories" not in d:
            raise SchemaError("missing required field", "trajectories")
        trajs = np.asarray(d["trajectories"], dtype=float)
        if trajs.ndim != 3 or trajs.shape[1:] != (HORIZON_STEPS, 3):
            raise SchemaError(f"expected k x {HORIZON_STEPS} x 3 poses, got {trajs.shape}", "trajectories")
        if "k" in d and d["k"] != len(trajs):
            raise SchemaError(f"k={d['k']} disagrees with {len(trajs)} trajectories", "k")
        meta = {key: d.get(key) for key in ("seed", "iterations", "final_sse", "source_count")}
        try:
            return cls(trajs, meta)
        except ValueError as exc:
            raise SchemaError(str(exc), "trajectories") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", str(path)) from exc
        return cls.from_dict(d)

    def fingerprint(self) -> str:
        return f"{fnv1a_64(self.trajectories.tobytes()):016x}"


# --- sampling ----------------------------------------------------------------

def sample_trajectories(count: int, seed: int, max_speed: float = 15.0, max_curvature: float = 0.2) -> np.ndarray:
    """Random unicycle rollouts: speed ramps to a target in [0, max_speed], curvature
    interpolated between three random knots (biased towards gentle curves).

    Returns ``(count, 40, 3)`` poses in the ego frame.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    t = DT * np.arange(HORIZON_STEPS + 1)
    v0 = rng.uniform(0.0, max_speed, count)
    v1 = rng.uniform(0.0, max_speed, count)
    ramp = rng.uniform(0.5, 4.0, count)
    frac = np.clip(t[None, :] / ramp[:, None], 0.0, 1.0)
    speed = v0[:, None] + (v1 - v0)[:, None] * frac
    knots = max_curvature * rng.uniform(-1.0, 1.0, (count, 3)) ** 3
    kappa = np.stack([np.interp(t, [0.0, 2.0, 4.0], k) for k in knots])
    # keep lateral acceleration plausible at speed
    lat_cap = rng.uniform(2.0, 6.0, count)[:, None] / np.maximum(speed, 1.0) ** 2
    kappa = np.clip(kappa, -np.minimum(lat_cap, max_curvature), np.minimum(lat_cap, max_curvature))
    v_avg = 0.5 * (speed[:, :-1] + speed[:, 1:])
    k_avg = 0.5 * (kappa[:, :-1] + kappa[:, 1:])
    dh = v_avg * k_avg * DT
    heading = np.cumsum(dh, axis=1)
    h_mid = heading - 0.5 * dh
    x = np.cumsum(v_avg * DT * np.cos(h_mid), axis=1)
    y = np.cumsum(v_avg * DT * np.sin(h_mid), axis=1)
    return np.stack([x, y, wrap_angle(heading)], axis=-1)


# --- k-means -----------------------------------------------------------------

def _sq_dists(x, c, x_sq=None) -> np.ndarray:
    x_sq = np.einsum("ij,ij->i", x, x) if x_sq is None else x_sq
    c_sq = np.einsum("ij,ij->i", c, c)
    d = x_sq[:, None] - 2.0 * x @ c.T + c_sq[None, :]
    return np.maximum(d, 0.0)


def _direct_sq(x, centers, labels) -> np.ndarray:
    diff = x - centers[labels]
    return np.einsum("ij,ij->i", diff, diff)


def _kmeans_pp(x, k, rng) -> np.ndarray:
    n = len(x)
    first = int(rng.integers(n))
    centers = [x[first]]
    closest = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            raise InsufficientData(f"fewer than k={k} distinct trajectories")
        idx = int(rng.choice(n, p=closest / total))
        centers.append(x[idx])
        closest = np.minimum(closest, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


@dataclass
class KMeansResult:
    centers: np.ndarray  # flattened, unweighted space
    labels: np.ndarray
    sse_history: list  # SSE after each full Lloyd iteration
    step_sse: list  # SSE after every assignment and every update step
    n_iter: int


def lloyd(x, k: int, iterations: int = 50, seed: int = 0, dim_weights=None) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding on flattened vectors ``x``."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < k:
        raise InsufficientData(f"need at least k={k} trajectories, got {n}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    scale = np.sqrt(_dim_weight_vector(dim_weights))
    xs = x * scale
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(xs, k, rng)
    x_sq = np.einsum("ij,ij->i", xs, xs)
    labels = np.argmin(_sq_dists(xs, centers, x_sq), axis=1)
    point_d = _direct_sq(xs, centers, labels)
    sse_history, step_sse = [], []
    n_iter = 0
    for n_iter in range(1, iterations + 1):
        # assignment; a label only moves when its exact distance strictly drops
        cand = np.argmin(_sq_dists(xs, centers, x_sq), axis=1)
        cand_d = _direct_sq(xs, centers, cand)
        move = cand_d < point_d
        labels = np.where(move, cand, labels)
        point_d = np.where(move, cand_d, point_d)
        changed = n_iter == 1 or bool(move.any())
        counts = np.bincount(labels, minlength=k)
        for empty in np.nonzero(counts == 0)[0]:
            far = int(np.argmax(point_d))
            centers[empty] = xs[far]
            labels[far] = empty
            point_d[far] = 0.0
            counts = np.bincount(labels, minlength=k)
            changed = True
        step_sse.append(float(point_d.sum()))
        # update; a center only moves when its cluster's exact SSE does not grow
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, xs)
        means = sums / counts[:, None]
        new_d = _direct_sq(xs, means, labels)
        old_sse = np.bincount(labels, weights=point_d, minlength=k)
        new_sse = np.bincount(labels, weights=new_d, minlength=k)
        keep = new_sse <= old_sse
        centers = np.where(keep[:, None], means, centers)
        point_d = np.where(keep[labels], new_d, point_d)
        sse = float(point_d.sum())
        step_sse.append(sse)
        sse_history.append(sse)
        if not changed:
            break
    with np.errstate(divide="ignore", invalid="ignore"):
        unscaled = np.where(scale > 0, centers / scale, 0.0)
    # zero-weight dims do not influence assignment; use plain means there
    if np.any(scale == 0):
        sums = np.zeros((k, x.shape[1]))
        np.add.at(sums, labels, x)
        means = sums / np.bincount(labels, minlength=k)[:, None]
        unscaled[:, scale == 0] = means[:, scale == 0]
    return KMeansResult(unscaled, labels, sse_history, step_sse, n_iter)


def kmeans(trajs, k: int, iterations: int = 50, seed: int = 0, dim_weights=None) -> Vocabulary:
    x = flatten_many(trajs)
    res = lloyd(x, k, iterations, seed, dim_weights)
    meta = {
        "source_count": len(x),
        "seed": seed,
        "iterations": res.n_iter,
        "final_sse": res.sse_history[-1],
    }
    return Vocabulary(unflatten_many(res.centers), meta)


# --- imitation targets --------------------------------------------------------

def squared_distances(humans, vocab_flat, dim_weights=None) -> np.ndarray:
    """Weighted squared L2 between flattened humans ``(n, 120)`` and vocabulary ``(k, 120)``."""
    w = _dim_weight_vector(dim_weights)
    diff = np.asarray(humans, dtype=float)[:, None, :] - np.asarray(vocab_flat, dtype=float)[None, :, :]
    return np.einsum("nkj,nkj,j->nk", diff, diff, w)


def softmax_neg(d2) -> np.ndarray:
    """Row-wise ``exp(-d2) / sum exp(-d2)``, shifted by the row minimum."""
    d2 = np.atleast_2d(np.asarray(d2, dtype=float))
    z = np.exp(-(d2 - d2.min(axis=1, keepdims=True)))
    return z / z.sum(axis=1, keepdims=True)


def imitation_targets(human, vocab: Vocabulary, dim_weights=None) -> np.ndarray:
    """Soft imitation target over the vocabulary for one human trajectory."""
    d2 = squared_distances(flatten(human)[None], vocab.flat(), dim_weights)
    return softmax_neg(d2)[0]


class TrajectoryVocabulary(TransformerMixin, BaseEstimator):
    """K-means vocabulary as an estimator.

    ``fit`` clusters trajectories ``(n, 40, 3)``; ``transform`` maps human
    trajectories to imitation targets ``(n, k)``; ``predict`` returns the
    nearest vocabulary index.
    """

    def __init__(self, n_clusters=256, max_iter=50, random_state=0, dim_weights=None):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.random_state = random_state
        self.dim_weights = dim_weights

    def fit(self, X, y=None):
        x = flatten_many(X)
        res = lloyd(x, self.n_clusters, self.max_iter, self.random_state, self.dim_weights)
        self.cluster_centers_ = unflatten_many(res.centers)
        self.labels_ = res.labels
        self.sse_history_ = res.sse_history
        self.n_iter_ = res.n_iter
        self.vocabulary_ = Vocabulary(
            self.cluster_centers_,
            {"source_count": len(x), "seed": self.random_state, "iterations": res.n_iter,
             "final_sse": res.sse_history[-1]},
        )
        return self

    def _d2(self, X):
        check_is_fitted(self, "vocabulary_")
        return squared_distances(flatten_many(X), self.vocabulary_.flat(), self.dim_weights)

    def transform(self, X):
        return softmax_neg(self._d2(X))

    def predict(self, X):
        return np.argmin(self._d2(X), axis=1)
