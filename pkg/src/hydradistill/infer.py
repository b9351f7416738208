"""Assembled-cost trajectory selection and grid-searched confidence weights."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import EmptyGrid, SchemaError
from .scenario import FramePair
from .student import ForwardOutput, StudentModel, encode_scene, ego_features, encode_pair, forward_many
from .teachers import (
    METRICS,
    ScoreMatrix,
    SubScores,
    TeacherConfig,
    ec_discrepancies,
    ec_from_discrepancies,
    epdms,
    pdms,
)

WEIGHT_NAMES = ("k_im", "k_nc", "k_dac", "k_ddc", "k_tl", "k_w")
PENALTY_TERMS = ("NC", "DAC", "DDC", "TL")
SOFT_WEIGHTS = {"TTC": 5.0, "C": 2.0, "EP": 5.0, "LK": 5.0}
DEFAULT_GRID_VALUES = (0.1, 0.3, 1.0, 3.0, 10.0)
SCORE_EPS = 1e-6


@dataclass(frozen=True)
class InferenceWeights:
    k_im: float = 1.0
    k_nc: float = 1.0
    k_dac: float = 1.0
    k_ddc: float = 1.0
    k_tl: float = 1.0
    k_w: float = 1.0

    def __post_init__(self):
        vals = self.as_array()
        if np.any(~np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("inference weights must be finite and non-negative")
        if not np.any(vals > 0):
            raise ValueError("at least one inference weight must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in WEIGHT_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "InferenceWeights":
        return cls(*(float(v) for v in values))

    @classmethod
    def imitation_only(cls) -> "InferenceWeights":
        return cls(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def uniform(cls) -> "InferenceWeights":
        return cls()

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path, grid_table_path: Optional[str] = None) -> None:
        d = {**self.to_dict(), "grid_table_path": grid_table_path}
        Path(path).write_text(json.dumps(d, sort_keys=True, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "InferenceWeights":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", str(path)) from exc
        for name in WEIGHT_NAMES:
            if not isinstance(d.get(name), (int, float)) or isinstance(d.get(name), bool):
                raise SchemaError("expected a number", name)
        try:
            return cls(*(float(d[n]) for n in WEIGHT_NAMES))
        except ValueError as exc:
            raise SchemaError(str(exc), str(path)) from exc


@dataclass(frozen=True, eq=False)
class SelectionResult:
    chosen_index: int
    costs: np.ndarray
    per_term: dict
    prev_index: Optional[int] = None


def _im_probs(out: ForwardOutput) -> np.ndarray:
    return out.im_probs


def cost_features(out: ForwardOutput, metric_weights=SOFT_WEIGHTS, eps: float = SCORE_EPS) -> np.ndarray:
    """Per-trajectory negative log terms, one column per entry of ``WEIGHT_NAMES``."""
    s = np.clip(out.metric_scores, eps, 1.0)
    cols = [-np.log(np.clip(_im_probs(out), eps, 1.0))]
    for m in PENALTY_TERMS:
        cols.append(-np.log(s[:, METRICS.index(m)]))
    total = sum(metric_weights.values())
    soft = sum(w * s[:, METRICS.index(m)] for m, w in metric_weights.items()) / total
    cols.append(-np.log(soft))
    return np.stack(cols, axis=1)


def assembled_cost(out: ForwardOutput, w: InferenceWeights, metric_weights=SOFT_WEIGHTS,
                   eps: float = SCORE_EPS) -> np.ndarray:
    """Weighted sum of negative log scores; lower is better."""
    return cost_features(out, metric_weights, eps) @ w.as_array()


def select_index(costs) -> int:
    # np.argmin returns the first minimum, i.e. the lowest index on ties
    return int(np.argmin(costs))


def _breakdown(out, w, metric_weights=SOFT_WEIGHTS):
    f = cost_features(out, metric_weights) * w.as_array()
    return {name: f[:, i] for i, name in enumerate(WEIGHT_NAMES)}


def pair_inputs(pair: FramePair, temporal: bool = True):
    """``(ego, tokens)`` for the current frame and for the preceding frame on its own."""
    curr = (ego_features(pair.curr.ego), encode_pair(pair, temporal).tokens)
    prev = (ego_features(pair.prev.ego), encode_scene(pair.prev).tokens)
    return curr, prev


def select(model: StudentModel, vocab, pair: FramePair, w: InferenceWeights, temporal: bool = True) -> SelectionResult:
    """Lowest-cost trajectory for the current frame, plus the preceding frame's choice."""
    curr_in, prev_in = pair_inputs(pair, temporal)
    out_c, out_p = forward_many(model, vocab, [curr_in, prev_in])
    costs = assembled_cost(out_c, w)
    return SelectionResult(select_index(costs), costs, _breakdown(out_c, w), select_index(assembled_cost(out_p, w)))


# --- evaluation of selections ---------------------------------------------------

@dataclass(eq=False)
class ValidationItem:
    """Cached network outputs and teacher scores for one frame pair."""

    scenario_id: str
    features_curr: np.ndarray  # (k, 6)
    features_prev: np.ndarray  # (k, 6)
    scores: np.ndarray  # (k, 8) teacher values for the current frame
    transform: tuple
    _ec_cache: dict = field(default_factory=dict)


def prepare_items(model: StudentModel, vocab, pairs: Sequence[FramePair], score_matrices: Sequence[ScoreMatrix],
                  temporal: bool = True) -> list:
    inputs = []
    for pair in pairs:
        inputs.extend(pair_inputs(pair, temporal))
    outs = forward_many(model, vocab, inputs)
    items = []
    for i, (pair, sm) in enumerate(zip(pairs, score_matrices)):
        items.append(ValidationItem(pair.curr.id, cost_features(outs[2 * i]), cost_features(outs[2 * i + 1]),
                                    sm.values, tuple(pair.transform)))
    return items


def _ec(item: ValidationItem, trajs, ic: int, ip: int, cfg: TeacherConfig) -> float:
    key = (ic, ip)
    if key not in item._ec_cache:
        item._ec_cache[key] = ec_from_discrepancies(ec_discrepancies(trajs[ic], trajs[ip], item.transform), cfg)
    return item._ec_cache[key]


def selected_subscores(item: ValidationItem, trajs, ic: int, ip: int, cfg: TeacherConfig) -> SubScores:
    row = item.scores[ic]
    s = SubScores(**{m.lower(): float(v) for m, v in zip(METRICS, row)})
    s.ec = _ec(item, trajs, ic, ip, cfg)
    return s


def _epdms_parts(scores):
    """Penalty product and weighted numerator without EC, vectorized over rows."""
    col = {m: scores[..., i] for i, m in enumerate(METRICS)}
    penalty = col["NC"] * col["DAC"] * col["DDC"] * col["TL"]
    soft = 5.0 * col["TTC"] + 2.0 * col["C"] + 5.0 * col["EP"] + 5.0 * col["LK"]
    return penalty, soft


def evaluate_weights(items: Sequence[ValidationItem], vocab, weight_matrix, cfg: TeacherConfig = TeacherConfig()):
    """Mean EPDMS and PDMS over ``items`` for each row of ``weight_matrix`` (G, 6)."""
    trajs = np.asarray(getattr(vocab, "trajectories", vocab))
    W = np.atleast_2d(np.asarray(weight_matrix, dtype=float))
    g = len(W)
    e_sum = np.zeros(g)
    p_sum = np.zeros(g)
    for item in items:
        sel_c = np.argmin(item.features_curr @ W.T, axis=0)
        sel_p = np.argmin(item.features_prev @ W.T, axis=0)
        rows = item.scores[sel_c]
        penalty, soft = _epdms_parts(rows)
        ec = np.array([_ec(item, trajs, int(a), int(b), cfg) for a, b in zip(sel_c, sel_p)])
        e_sum += penalty * (soft + 5.0 * ec) / 22.0
        col = {m: rows[:, i] for i, m in enumerate(METRICS)}
        p_sum += col["NC"] * col["DAC"] * (5.0 * col["TTC"] + 2.0 * col["C"] + 5.0 * col["EP"]) / 12.0
    n = max(len(items), 1)
    return e_sum / n, p_sum / n


def parse_grid(spec) -> dict:
    """Grid from a dict, a JSON file path, ``"default"``, or a comma list applied to every weight."""
    if spec is None or spec == "default":
        return {n: list(DEFAULT_GRID_VALUES) for n in WEIGHT_NAMES}
    if isinstance(spec, dict):
        grid = spec
    else:
        text = str(spec)
        p = Path(text)
        if p.suffix == ".json" or p.exists():
            try:
                grid = json.loads(p.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise SchemaError(f"cannot read grid: {exc}", text) from exc
        else:
            try:
                vals = [float(v) for v in text.split(",") if v.strip()]
            except ValueError as exc:
                raise SchemaError("grid must be a JSON file or comma-separated numbers", text) from exc
            grid = {n: vals for n in WEIGHT_NAMES}
    out = {}
    for n in WEIGHT_NAMES:
        vals = grid.get(n)
        if not isinstance(vals, list) or not vals:
            raise EmptyGrid(f"grid for {n} is empty or missing", weight=n)
        if any(not isinstance(v, (int, float)) or v < 0 for v in vals):
            raise SchemaError("grid values must be non-negative numbers", n)
        out[n] = sorted({float(v) for v in vals})
    return out


def grid_points(grid: dict) -> np.ndarray:
    pts = np.array(list(itertools.product(*(grid[n] for n in WEIGHT_NAMES))), dtype=float)
    pts = pts[np.any(pts > 0, axis=1)]
    if len(pts) == 0:
        raise EmptyGrid("grid has no point with a positive weight")
    return pts


@dataclass(frozen=True, eq=False)
class GridResult:
    best: InferenceWeights
    points: np.ndarray  # (G, 6), lexicographic order
    epdms: np.ndarray
    pdms: np.ndarray

    @property
    def best_epdms(self) -> float:
        return float(self.epdms[self.best_index])

    @property
    def best_index(self) -> int:
        return int(np.flatnonzero(np.all(self.points == self.best.as_array(), axis=1))[0])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow([*WEIGHT_NAMES, "mean_epdms", "mean_pdms"])
            for p, e, q in zip(self.points, self.epdms, self.pdms):
                wr.writerow([*(repr(float(v)) for v in p), f"{e:.10f}", f"{q:.10f}"])


def grid_search(items: Sequence[ValidationItem], vocab, grid_spec=None, cfg: TeacherConfig = TeacherConfig(),
                chunk: int = 2048) -> GridResult:
    """Exhaustive search for the weights maximizing mean EPDMS on ``items``.

    Ties go to the lexicographically smallest weight vector; points are
    enumerated in lexicographic order, so that is the first maximum.
    """
    if not items:
        raise ValueError("validation set is empty")
    pts = grid_points(parse_grid(grid_spec))
    e_parts, p_parts = [], []
    for start in range(0, len(pts), chunk):
        e, p = evaluate_weights(items, vocab, pts[start : start + chunk], cfg)
        e_parts.append(e)
        p_parts.append(p)
    e_all = np.concatenate(e_parts)
    best = int(np.flatnonzero(e_all == e_all.max())[0])
    return GridResult(InferenceWeights.from_array(pts[best]), pts, e_all, np.concatenate(p_parts))


class WeightCalibrator(BaseEstimator):
    """Grid-search calibrator over precomputed :class:`ValidationItem` lists."""

    def __init__(self, vocabulary=None, grid=None, teacher_config=None):
        self.vocabulary = vocabulary
        self.grid = grid
        self.teacher_config = teacher_config

    def fit(self, X, y=None):
        cfg = self.teacher_config or TeacherConfig()
        self.result_ = grid_search(X, self.vocabulary, self.grid, cfg)
        self.weights_ = self.result_.best
        self.best_score_ = self.result_.best_epdms
        return self

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "weights_")
        cfg = self.teacher_config or TeacherConfig()
        return float(evaluate_weights(X, self.vocabulary, self.weights_.as_array(), cfg)[0][0])


# --- benchmark -----------------------------------------------------------------

@dataclass(eq=False)
class BenchmarkRow:
    scenario_id: str
    chosen_index: int
    prev_index: int
    scores: SubScores

    @property
    def pdms(self) -> float:
        return pdms(self.scores)

    @property
    def epdms(self) -> float:
        return epdms(self.scores)


def benchmark_items(items: Sequence[ValidationItem], vocab, w: InferenceWeights,
                    cfg: TeacherConfig = TeacherConfig()) -> list:
    """Select under ``w`` and re-score each selection with the teachers."""
    trajs = np.asarray(getattr(vocab, "trajectories", vocab))
    wv = w.as_array()
    rows = []
    for item in items:
        costs_c = item.features_curr @ wv
        ic = select_index(costs_c)
        ip = select_index(item.features_prev @ wv)
        if costs_c[ic] > costs_c.min() or np.any(costs_c[:ic] <= costs_c[ic]):
            raise AssertionError(f"selection for {item.scenario_id} is not the first argmin")
        rows.append(BenchmarkRow(item.scenario_id, ic, ip, selected_subscores(item, trajs, ic, ip, cfg)))
    return rows


def aggregate(rows: Sequence[BenchmarkRow]) -> dict:
    """Percent means per metric plus PDMS and EPDMS."""
    if not rows:
        return {}
    out = {}
    for name in ("nc", "dac", "ddc", "tl", "ep", "ttc", "c", "lk", "ec"):
        out[name.upper()] = 100.0 * float(np.mean([getattr(r.scores, name) for r in rows]))
    out["PDMS"] = 100.0 * float(np.mean([r.pdms for r in rows]))
    out["EPDMS"] = 100.0 * float(np.mean([r.epdms for r in rows]))
    return out
