"""Learnable planner: scene tokens, vocabulary-query attention network, losses,
hand-written backpropagation, AdamW training and finite-difference checks.

Shapes for one sample: vocabulary ``(k, 120)``, tokens ``(n, d_raw)``, ego
features ``(4,)``; outputs are imitation logits ``(k,)`` and metric
probabilities ``(k, 8)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._hashing import fnv1a_64
from .exceptions import NonFiniteLoss, SchemaError, ShapeMismatch
from .geom import Polygon, points_in_union, transform_poses
from .scenario import DT, EgoState, FramePair, Scenario
from .teachers import METRICS, ScoreMatrix
from .vocab import Vocabulary, flatten_many, imitation_targets

N_METRICS = len(METRICS)
TOKEN_TYPES = ("agent", "lane", "signal", "boundary")


# --- scene encoding ------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    d_raw: int = 16
    pos_scale: float = 50.0
    vel_scale: float = 10.0
    dim_scale: float = 5.0
    sample_spacing: float = 6.0
    x_range: tuple = (-10.0, 70.0)
    y_range: tuple = (-40.0, 40.0)


@dataclass(frozen=True, eq=False)
class SceneTokens:
    tokens: np.ndarray  # (n, d_raw)
    token_types: tuple

    @property
    def n(self) -> int:
        return len(self.tokens)


def _in_window(pts, cfg: EncoderConfig) -> np.ndarray:
    return (
        (pts[:, 0] >= cfg.x_range[0]) & (pts[:, 0] <= cfg.x_range[1])
        & (pts[:, 1] >= cfg.y_range[0]) & (pts[:, 1] <= cfg.y_range[1])
    )


def _resample(points, spacing):
    """Points every ``spacing`` meters along an open polyline, with unit tangents."""
    seg = np.diff(points, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.arange(0.0, cum[-1] + 1e-9, spacing)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / seg_len[idx]
    pts = points[idx] + seg[idx] * frac[:, None]
    tan = seg[idx] / seg_len[idx, None]
    return pts, tan


def _row(cfg: EncoderConfig, kind: str, frame_tag: float, xy, heading_vec, **extra):
    r = np.zeros(cfg.d_raw)
    r[TOKEN_TYPES.index(kind)] = 1.0
    r[4] = frame_tag
    r[5:7] = np.asarray(xy) / cfg.pos_scale
    r[7:9] = heading_vec
    for slot, value in extra.items():
        r[int(slot[1:])] = value
    return r


def encode_scene(scenario: Scenario, transform=None, frame_tag: float = 0.0,
                 cfg: EncoderConfig = EncoderConfig()) -> SceneTokens:
    """Deterministic symbolic featurization of a scenario.

    Layout per row: type one-hot (4) | frame tag | x, y | cos, sin heading |
    vx, vy | length, width | red now | time to next switch | red fraction.
    ``transform`` re-expresses the scene in another frame (used for the
    preceding frame of a pair).
    """
    if cfg.d_raw < 16:
        raise ValueError("d_raw must be >= 16")
    tf = (0.0, 0.0, 0.0) if transform is None else transform

    def to_frame(arr):
        return transform_poses(arr, *tf)

    rows, kinds = [], []
    for agent in scenario.agents:
        p = to_frame(agent.poses[:2])
        if not _in_window(p[:1, :2], cfg)[0]:
            continue
        vel = (p[1, :2] - p[0, :2]) / DT
        rows.append(_row(cfg, "agent", frame_tag, p[0, :2], [math.cos(p[0, 2]), math.sin(p[0, 2])],
                         s9=vel[0] / cfg.vel_scale, s10=vel[1] / cfg.vel_scale,
                         s11=agent.length / cfg.dim_scale, s12=agent.width / cfg.dim_scale))
        kinds.append("agent")
    for lane in scenario.lanes:
        pts, tan = _resample(to_frame(lane.points), cfg.sample_spacing)
        keep = _in_window(pts, cfg)
        for p, t in zip(pts[keep], tan[keep]):
            rows.append(_row(cfg, "lane", frame_tag, p, t))
            kinds.append("lane")
    for sig in scenario.signals:
        c = to_frame(sig.region.centroid()[None])[0]
        times = np.linspace(0.0, 4.0, 41)
        red = sig.state_at(times)
        switch = next((p.end for p in sig.phases if p.end < 4.0), 4.0)
        rows.append(_row(cfg, "signal", frame_tag, c, [1.0, 0.0],
                         s13=float(red[0]), s14=switch / 4.0, s15=float(red.mean())))
        kinds.append("signal")
    # outer boundary only: skip edges shared between abutting drivable pieces
    polys = [Polygon(to_frame(p.vertices)) for p in scenario.drivable]
    for poly in polys:
        v = poly.vertices
        ring = np.concatenate([v, v[:1]])
        pts, tan = _resample(ring, cfg.sample_spacing)
        outward = np.stack([tan[:, 1], -tan[:, 0]], axis=1)
        keep = _in_window(pts, cfg) & ~points_in_union(pts + 0.05 * outward, polys)
        for p, t in zip(pts[keep], tan[keep]):
            rows.append(_row(cfg, "boundary", frame_tag, p, t))
            kinds.append("boundary")
    if not rows:
        rows.append(np.zeros(cfg.d_raw))
        kinds.append("boundary")
    return SceneTokens(np.array(rows), tuple(kinds))


def encode_pair(pair: FramePair, temporal: bool = True, cfg: EncoderConfig = EncoderConfig()) -> SceneTokens:
    """Current-frame tokens, followed by preceding-frame tokens tagged with frame 1."""
    cur = encode_scene(pair.curr, cfg=cfg)
    if not temporal:
        return cur
    prev = encode_scene(pair.prev, transform=pair.transform, frame_tag=1.0, cfg=cfg)
    return SceneTokens(np.concatenate([cur.tokens, prev.tokens]), cur.token_types + prev.token_types)


def ego_features(ego: EgoState) -> np.ndarray:
    side, lane_change = ego.command.features()
    return np.array([ego.velocity / 10.0, ego.acceleration / 3.0, side, lane_change])


# --- model -------------------------------------------------------------------

VOCAB_SCALE = np.tile([0.05, 0.1, 1.0], 40)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_hidden: int = 128
    d_raw: int = 16
    d_ego: int = 4
    n_encoder_layers: int = 1
    n_decoder_layers: int = 1
    n_metrics: int = N_METRICS


def _param_shapes(cfg: ModelConfig) -> dict:
    d = cfg.d_model
    shapes = {
        "vocab.W1": (120, cfg.d_hidden), "vocab.b1": (cfg.d_hidden,),
        "vocab.W2": (cfg.d_hidden, d), "vocab.b2": (d,),
        "ego.W": (cfg.d_ego, d), "ego.b": (d,),
        "scene.W": (cfg.d_raw, d), "scene.b": (d,),
    }
    for prefix, n in (("enc", cfg.n_encoder_layers), ("dec", cfg.n_decoder_layers)):
        for i in range(n):
            p = f"{prefix}{i}."
            for name in ("Wq", "Wk", "Wv", "Wo"):
                shapes[p + name] = (d, d)
            shapes[p + "ff.W1"] = (d, 2 * d)
            shapes[p + "ff.b1"] = (2 * d,)
            shapes[p + "ff.W2"] = (2 * d, d)
            shapes[p + "ff.b2"] = (d,)
    # no imitation bias: a shared offset cancels in the softmax
    shapes["head.im.W"] = (d, 1)
    shapes["head.metric.W"] = (d, cfg.n_metrics)
    shapes["head.metric.b"] = (cfg.n_metrics,)
    return shapes


@dataclass(eq=False)
class StudentModel:
    config: ModelConfig
    params: dict
    seed: int = 0
    training_log: list = field(default_factory=list)

    @classmethod
    def init(cls, config: ModelConfig = ModelConfig(), seed: int = 0, zero_heads: bool = False) -> "StudentModel":
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization."""
        rng = np.random.default_rng(seed)
        params = {}
        shapes = _param_shapes(config)
        for name, shape in shapes.items():
            if len(shape) == 2:
                fan_in = shape[0]
            else:
                head, leaf = name.rsplit(".", 1)
                fan_in = shapes[f"{head}.{leaf.replace('b', 'W', 1)}"][0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
        if zero_heads:
            for name in ("head.im.W", "head.metric.W", "head.metric.b"):
                params[name] = np.zeros(shapes[name])
        return cls(config, params, seed)

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "StudentModel":
        return StudentModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed,
                            list(self.training_log))

    def fingerprint(self) -> str:
        h = b"".join(self.params[k].tobytes() for k in sorted(self.params))
        return f"{fnv1a_64(h):016x}"

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": self.seed,
            "params": {k: v.tolist() for k, v in self.params.items()},
            "training_log": self.training_log,
        }

    @classmethod
    def from_dict(cls, d) -> "StudentModel":
        for key in ("config", "params"):
            if key not in d:
                raise SchemaError("missing required field", key)
        try:
            cfg = ModelConfig(**d["config"])
        except TypeError as exc:
            raise SchemaError(str(exc), "config") from exc
        shapes = _param_shapes(cfg)
        params = {}
        for name, shape in shapes.items():
            if name not in d["params"]:
                raise SchemaError("missing parameter block", f"params.{name}")
            arr = np.asarray(d["params"][name], dtype=float)
            if arr.shape != shape:
                raise SchemaError(f"expected shape {shape}, got {arr.shape}", f"params.{name}")
            params[name] = arr
        return cls(cfg, params, int(d.get("seed", 0)), list(d.get("training_log", [])))


@dataclass(frozen=True, eq=False)
class ForwardOutput:
    im_logits: np.ndarray  # (k,)
    metric_scores: np.ndarray  # (k, 8), sigmoid outputs
    metric_logits: Optional[np.ndarray] = None

    @property
    def im_probs(self) -> np.ndarray:
        z = np.exp(self.im_logits - self.im_logits.max())
        return z / z.sum()


def _softmax_rows(s):
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _attn_fwd(p, prefix, xq, xkv):
    d = xq.shape[1]
    sc = 1.0 / math.sqrt(d)
    Q = xq @ p[prefix + "Wq"]
    K = xkv @ p[prefix + "Wk"]
    V = xkv @ p[prefix + "Wv"]
    A = _softmax_rows((Q @ K.T) * sc)
    H = A @ V
    x1 = xq + H @ p[prefix + "Wo"]
    Z = x1 @ p[prefix + "ff.W1"] + p[prefix + "ff.b1"]
    R = np.maximum(Z, 0.0)
    x2 = x1 + R @ p[prefix + "ff.W2"] + p[prefix + "ff.b2"]
    return x2, (xq, xkv, Q, K, V, A, H, x1, Z, R, sc)


def _attn_bwd(p, g, prefix, cache, dx2):
    xq, xkv, Q, K, V, A, H, x1, Z, R, sc = cache
    g[prefix + "ff.W2"] += R.T @ dx2
    g[prefix + "ff.b2"] += dx2.sum(axis=0)
    dZ = (dx2 @ p[prefix + "ff.W2"].T) * (Z > 0)
    g[prefix + "ff.W1"] += x1.T @ dZ
    g[prefix + "ff.b1"] += dZ.sum(axis=0)
    dx1 = dx2 + dZ @ p[prefix + "ff.W1"].T
    g[prefix + "Wo"] += H.T @ dx1
    dH = dx1 @ p[prefix + "Wo"].T
    dA = dH @ V.T
    dV = A.T @ dH
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * sc
    dQ = dS @ K
    dK = dS.T @ Q
    g[prefix + "Wq"] += xq.T @ dQ
    g[prefix + "Wk"] += xkv.T @ dK
    g[prefix + "Wv"] += xkv.T @ dV
    dxq = dx1 + dQ @ p[prefix + "Wq"].T
    dxkv = dK @ p[prefix + "Wk"].T + dV @ p[prefix + "Wv"].T
    return dxq, dxkv


def _encode_vocab(model: StudentModel, vocab_flat):
    p = model.params
    x = vocab_flat * VOCAB_SCALE
    z1 = x @ p["vocab.W1"] + p["vocab.b1"]
    h1 = np.maximum(z1, 0.0)
    h = h1 @ p["vocab.W2"] + p["vocab.b2"]
    caches = []
    for i in range(model.config.n_encoder_layers):
        h, c = _attn_fwd(p, f"enc{i}.", h, h)
        caches.append(c)
    return h, (x, z1, h1, caches)


def _encode_vocab_bwd(model, g, cache, dh):
    p = model.params
    x, z1, h1, caches = cache
    for i in reversed(range(model.config.n_encoder_layers)):
        dq, dkv = _attn_bwd(p, g, f"enc{i}.", caches[i], dh)
        dh = dq + dkv
    g["vocab.W2"] += h1.T @ dh
    g["vocab.b2"] += dh.sum(axis=0)
    dz1 = (dh @ p["vocab.W2"].T) * (z1 > 0)
    g["vocab.W1"] += x.T @ dz1
    g["vocab.b1"] += dz1.sum(axis=0)


def _decode(model: StudentModel, enc, ego_feat, tokens, frozen_scene=None):
    p = model.params
    e = ego_feat @ p["ego.W"] + p["ego.b"]
    y = enc + e
    mem = tokens @ p["scene.W"] + p["scene.b"]
    if frozen_scene is not None:
        # stop-gradient semantics for finite differences: preceding rows use fixed weights
        old = tokens[:, 4] != 0.0
        mem[old] = tokens[old] @ frozen_scene[0] + frozen_scene[1]
    caches = []
    for i in range(model.config.n_decoder_layers):
        y, c = _attn_fwd(p, f"dec{i}.", y, mem)
        caches.append(c)
    im = (y @ p["head.im.W"])[:, 0]
    ml = y @ p["head.metric.W"] + p["head.metric.b"]
    return im, ml, (ego_feat, tokens, y, caches)


def _decode_bwd(model, g, cache, d_im, d_ml):
    """Returns the gradient w.r.t. the encoder output for this sample."""
    p = model.params
    ego_feat, tokens, y, caches = cache
    g["head.im.W"] += y.T @ d_im[:, None]
    g["head.metric.W"] += y.T @ d_ml
    g["head.metric.b"] += d_ml.sum(axis=0)
    dy = np.outer(d_im, p["head.im.W"][:, 0]) + d_ml @ p["head.metric.W"].T
    dmem = np.zeros((len(tokens), model.config.d_model))
    for i in reversed(range(model.config.n_decoder_layers)):
        dy, dkv = _attn_bwd(p, g, f"dec{i}.", caches[i], dy)
        dmem += dkv
    # preceding-frame tokens (frame tag set) are detached from the scene projection
    live = tokens[:, 4] == 0.0
    g["scene.W"] += tokens[live].T @ dmem[live]
    g["scene.b"] += dmem[live].sum(axis=0)
    de = dy.sum(axis=0)
    g["ego.W"] += np.outer(ego_feat, de)
    g["ego.b"] += de
    return dy


def _check_shapes(model, vocab_flat, ego_feat, tokens):
    cfg = model.config
    if vocab_flat.ndim != 2 or vocab_flat.shape[1] != 120:
        raise ShapeMismatch(f"vocabulary must be (k, 120), got {vocab_flat.shape}")
    if ego_feat.shape != (cfg.d_ego,):
        raise ShapeMismatch(f"ego features must be ({cfg.d_ego},), got {ego_feat.shape}")
    if tokens.ndim != 2 or tokens.shape[1] != cfg.d_raw or len(tokens) < 1:
        raise ShapeMismatch(f"tokens must be (n >= 1, {cfg.d_raw}), got {tokens.shape}")


def _vocab_flat(vocab) -> np.ndarray:
    if isinstance(vocab, Vocabulary):
        return vocab.flat()
    arr = np.asarray(vocab, dtype=float)
    return flatten_many(arr) if arr.ndim == 3 else arr


def forward(model: StudentModel, vocab, ego, tokens) -> ForwardOutput:
    """Score every vocabulary trajectory for one scene."""
    vf = _vocab_flat(vocab)
    ef = ego_features(ego) if isinstance(ego, EgoState) else np.asarray(ego, dtype=float)
    tk = tokens.tokens if isinstance(tokens, SceneTokens) else np.asarray(tokens, dtype=float)
    _check_shapes(model, vf, ef, tk)
    enc, _ = _encode_vocab(model, vf)
    im, ml, _ = _decode(model, enc, ef, tk)
    return ForwardOutput(im, _sigmoid(ml), ml)


def forward_many(model: StudentModel, vocab, samples) -> list:
    """Forward for many ``(ego_features, tokens)`` samples sharing one vocabulary encoding."""
    vf = _vocab_flat(vocab)
    enc, _ = _encode_vocab(model, vf)
    outs = []
    for ef, tk in samples:
        _check_shapes(model, vf, ef, tk)
        im, ml, _ = _decode(model, enc, ef, tk)
        outs.append(ForwardOutput(im, _sigmoid(ml), ml))
    return outs


# --- losses --------------------------------------------------------------------

def loss_imitation(im_logits, target, eps: float = 1e-6) -> float:
    """Cross-entropy of ``softmax(im_logits)`` against the soft target, log clamped at ``eps``."""
    z = np.asarray(im_logits, dtype=float)
    y = np.asarray(target, dtype=float)
    if z.shape != y.shape:
        raise ShapeMismatch(f"logits {z.shape} vs target {y.shape}")
    logp = z - z.max() - np.log(np.sum(np.exp(z - z.max())))
    return float(-np.sum(y * np.maximum(logp, math.log(eps))))


def loss_distill(metric_scores, target_matrix, eps: float = 1e-6, metric_mask=None) -> float:
    """Binary cross-entropy summed over metrics, averaged over trajectories."""
    s = np.asarray(metric_scores, dtype=float)
    t = target_matrix.values if isinstance(target_matrix, ScoreMatrix) else np.asarray(target_matrix, dtype=float)
    if s.shape != t.shape:
        raise ShapeMismatch(f"scores {s.shape} vs targets {t.shape}")
    s = np.clip(s, eps, 1.0 - eps)
    bce = -(t * np.log(s) + (1.0 - t) * np.log(1.0 - s))
    if metric_mask is not None:
        bce = bce * np.asarray(metric_mask, dtype=float)
    return float(bce.sum() / len(s))


def _imitation_grad(z, y, eps):
    logp = z - z.max() - np.log(np.sum(np.exp(z - z.max())))
    live = logp >= math.log(eps)
    loss = -np.sum(y * np.maximum(logp, math.log(eps)))
    p = np.exp(logp)
    grad = p * np.sum(y[live]) - np.where(live, y, 0.0)
    return loss, grad


def _distill_grad(x, t, eps, mask):
    k = len(x)
    ls, l1s = _log_sigmoid(x), _log_sigmoid(-x)
    floor = math.log(eps)
    loss_terms = -(t * np.maximum(ls, floor) + (1.0 - t) * np.maximum(l1s, floor))
    s = _sigmoid(x)
    grad = -t * (ls > floor) * (1.0 - s) + (1.0 - t) * (l1s > floor) * s
    loss_terms = loss_terms * mask
    grad = grad * mask
    return loss_terms.sum() / k, grad / k


@dataclass
class Sample:
    """One training example: scene inputs plus imitation and distillation targets."""

    ego: np.ndarray
    tokens: np.ndarray
    imitation: np.ndarray
    scores: np.ndarray
    scenario_id: str = ""


def batch_loss_and_grad(model: StudentModel, vocab_flat, batch: Sequence[Sample], eps: float = 1e-6,
                        metric_mask=None, need_grad: bool = True, frozen_scene=None):
    """Mean total loss over ``batch`` and its gradient dict; also the mean
    imitation and distillation components."""
    mask = np.ones(model.config.n_metrics) if metric_mask is None else np.asarray(metric_mask, dtype=float)
    enc, enc_cache = _encode_vocab(model, vocab_flat)
    g = {k: np.zeros_like(v) for k, v in model.params.items()} if need_grad else None
    denc = np.zeros_like(enc)
    l_im = l_kd = 0.0
    nb = len(batch)
    for smp in batch:
        im, ml, cache = _decode(model, enc, smp.ego, smp.tokens, frozen_scene)
        a, da = _imitation_grad(im, smp.imitation, eps)
        b, db = _distill_grad(ml, smp.scores, eps, mask)
        l_im += a / nb
        l_kd += b / nb
        if need_grad:
            denc += _decode_bwd(model, g, cache, da / nb, db / nb)
    if need_grad:
        _encode_vocab_bwd(model, g, enc_cache, denc)
    return float(l_im + l_kd), g, float(l_im), float(l_kd)


# --- optimization --------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 20
    batch: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_clamp_eps: float = 1e-6


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = params[k] - self.lr * (update + self.weight_decay * params[k])


def build_samples(pairs: Sequence[FramePair], vocab: Vocabulary, score_matrices=None,
                  temporal: bool = True, enc_cfg: EncoderConfig = EncoderConfig()) -> list:
    samples = []
    for i, pair in enumerate(pairs):
        sm = None if score_matrices is None else score_matrices[i]
        if sm is not None and sm.k != vocab.k:
            raise ShapeMismatch(f"score matrix {sm.scenario_id} has k={sm.k}, vocabulary k={vocab.k}")
        samples.append(Sample(
            ego=ego_features(pair.curr.ego),
            tokens=encode_pair(pair, temporal, enc_cfg).tokens,
            imitation=imitation_targets(pair.curr.human, vocab),
            scores=None if sm is None else sm.values,
            scenario_id=pair.curr.id,
        ))
    return samples


def train(model: StudentModel, vocab, samples: Sequence[Sample], hyper: TrainConfig = TrainConfig(),
          metric_mask=None, callback=None) -> StudentModel:
    """AdamW training on ``L_im + L_kd``; returns a new model, ``training_log``
    holds per-epoch mean losses."""
    if not samples:
        raise ValueError("training set is empty")
    model = model.copy()
    vf = _vocab_flat(vocab)
    rng = np.random.default_rng(np.random.SeedSequence([int(hyper.seed), 1]))
    opt = AdamW(model.params, hyper.lr, (hyper.beta1, hyper.beta2), hyper.adam_eps, hyper.weight_decay)
    log = []
    batch_id = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(samples))
        tot_im = tot_kd = 0.0
        for start in range(0, len(order), hyper.batch):
            batch = [samples[i] for i in order[start : start + hyper.batch]]
            # divergence is reported through NonFiniteLoss, not numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                loss, g, l_im, l_kd = batch_loss_and_grad(model, vf, batch, hyper.log_clamp_eps, metric_mask)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in g.values()):
                raise NonFiniteLoss(f"non-finite loss in batch {batch_id}", batch=batch_id)
            opt.step(model.params, g)
            tot_im += l_im * len(batch)
            tot_kd += l_kd * len(batch)
            batch_id += 1
        entry = {"epoch": epoch + 1, "loss_im": float(tot_im / len(samples)),
                 "loss_kd": float(tot_kd / len(samples))}
        log.append(entry)
        if callback is not None:
            callback(entry)
    model.training_log = model.training_log + log
    return model


def evaluate_losses(model: StudentModel, vocab, samples, eps=1e-6, metric_mask=None) -> tuple:
    """Mean (imitation, distillation) losses without gradients."""
    _, _, l_im, l_kd = batch_loss_and_grad(model, _vocab_flat(vocab), samples, eps, metric_mask, need_grad=False)
    return l_im, l_kd


# --- gradient verification -----------------------------------------------------

def grad_check(model: StudentModel, vocab, batch: Sequence[Sample], epsilon: float = 1e-5,
               blocks=None, max_entries: int = 48, seed: int = 0, metric_mask=None) -> dict:
    """Central-difference check of the analytic gradient.

    For each parameter block, up to ``max_entries`` random entries are
    perturbed; the block's relative error is
    ``||g_a - g_n|| / max(1e-8, ||g_a|| + ||g_n||)``. Returns
    ``{block: rel_err}`` plus ``"max"``.
    """
    vf = _vocab_flat(vocab)
    _, g, _, _ = batch_loss_and_grad(model, vf, batch, metric_mask=metric_mask)
    rng = np.random.default_rng(seed)
    names = list(model.params) if blocks is None else list(blocks)
    report = {}
    work = model.copy()
    frozen = (model.params["scene.W"].copy(), model.params["scene.b"].copy())
    for name in names:
        p = work.params[name]
        flat_idx = np.arange(p.size)
        if p.size > max_entries:
            flat_idx = np.sort(rng.choice(p.size, max_entries, replace=False))
        ga, gn = [], []
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + epsilon
            lp = batch_loss_and_grad(work, vf, batch, metric_mask=metric_mask, need_grad=False,
                                     frozen_scene=frozen)[0]
            p[idx] = orig - epsilon
            lm = batch_loss_and_grad(work, vf, batch, metric_mask=metric_mask, need_grad=False,
                                     frozen_scene=frozen)[0]
            p[idx] = orig
            ga.append(g[name][idx])
            gn.append((lp - lm) / (2.0 * epsilon))
        ga, gn = np.array(ga), np.array(gn)
        report[name] = float(np.linalg.norm(ga - gn) / max(1e-8, np.linalg.norm(ga) + np.linalg.norm(gn)))
    report["max"] = max(report.values()) if report else 0.0
    return report


def numeric_gradient(model: StudentModel, vocab, batch, name, index, epsilon):
    vf = _vocab_flat(vocab)
    work = model.copy()
    frozen = (model.params["scene.W"].copy(), model.params["scene.b"].copy())
    p = work.params[name]
    orig = p[index]
    p[index] = orig + epsilon
    lp = batch_loss_and_grad(work, vf, batch, need_grad=False, frozen_scene=frozen)[0]
    p[index] = orig - epsilon
    lm = batch_loss_and_grad(work, vf, batch, need_grad=False, frozen_scene=frozen)[0]
    return (lp - lm) / (2.0 * epsilon)


# --- persistence ---------------------------------------------------------------

def save_model(model: StudentModel, path, vocab: Optional[Vocabulary] = None, extra: Optional[dict] = None) -> None:
    d = model.to_dict()
    if vocab is not None:
        d["vocabulary"] = vocab.to_dict()
        d["vocab_hash"] = vocab.fingerprint()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, sort_keys=True), encoding="utf-8")


def load_model(path):
    """Returns ``(model, vocabulary or None, raw dict)``."""
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", str(path)) from exc
    model = StudentModel.from_dict(d)
    vocab = Vocabulary.from_dict(d["vocabulary"]) if "vocabulary" in d else None
    return model, vocab, d


# --- estimator -----------------------------------------------------------------

class HydraPlanner(BaseEstimator):
    """Vocabulary-scoring planner with imitation and per-metric distillation heads.

    ``fit(pairs, score_matrices)`` trains on frame pairs whose current frames
    were scored by the teachers; ``predict_scores`` returns a
    :class:`ForwardOutput` per pair and ``predict`` the selected indices under
    ``weights`` (imitation-only when None).
    """

    def __init__(self, vocabulary=None, d_model=64, d_hidden=128, n_encoder_layers=1, n_decoder_layers=1,
                 lr=1e-4, weight_decay=0.0, epochs=20, batch_size=32, random_state=0, distill_metrics=METRICS,
                 temporal=True):
        self.vocabulary = vocabulary
        self.d_model = d_model
        self.d_hidden = d_hidden
        self.n_encoder_layers = n_encoder_layers
        self.n_decoder_layers = n_decoder_layers
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.distill_metrics = distill_metrics
        self.temporal = temporal

    def _metric_mask(self):
        unknown = set(self.distill_metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}")
        return np.array([m in self.distill_metrics for m in METRICS], dtype=float)

    def fit(self, X, y, samples=None):
        """``X``: frame pairs; ``y``: aligned score matrices. Pre-built ``samples``
        may be passed to skip re-encoding."""
        if self.vocabulary is None:
            raise ValueError("HydraPlanner needs a vocabulary")
        if samples is None:
            if len(X) != len(y):
                raise ShapeMismatch(f"{len(X)} pairs vs {len(y)} score matrices")
            samples = build_samples(X, self.vocabulary, y, self.temporal)
        cfg = ModelConfig(self.d_model, self.d_hidden, n_encoder_layers=self.n_encoder_layers,
                          n_decoder_layers=self.n_decoder_layers)
        init = StudentModel.init(cfg, self.random_state)
        hyper = TrainConfig(self.lr, self.weight_decay, self.epochs, self.batch_size, self.random_state)
        self.model_ = train(init, self.vocabulary, samples, hyper, self._metric_mask())
        self.loss_curve_ = list(self.model_.training_log)
        return self

    def predict_scores(self, X) -> list:
        check_is_fitted(self, "model_")
        inputs = []
        for pair in X:
            tokens = encode_pair(pair, self.temporal).tokens
            inputs.append((ego_features(pair.curr.ego), tokens))
        return forward_many(self.model_, self.vocabulary, inputs)

    def predict(self, X, weights=None) -> np.ndarray:
        from .infer import InferenceWeights, assembled_cost, select_index

        w = InferenceWeights.imitation_only() if weights is None else weights
        return np.array([select_index(assembled_cost(out, w)) for out in self.predict_scores(X)])
