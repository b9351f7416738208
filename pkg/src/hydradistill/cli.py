"""Command-line driver: ``hydradistill <command> ...``.

Exit codes: 0 ok, 1 other failure, 2 schema error, 3 config-hash mismatch,
4 numeric failure. Failures print ``{"error": ..., "context": ...}`` on
stderr and remove any output written by the failing command.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigHashMismatch, HydraError, SchemaError, ShapeMismatch
from .infer import (
    InferenceWeights,
    aggregate,
    benchmark_items,
    grid_search,
    prepare_items,
)
from .scenario import check_trajectory, generate_scenarios, load_pairs, load_scenario, save_pairs
from .student import METRICS, ModelConfig, StudentModel, TrainConfig, build_samples, load_model, save_model, train
from .teachers import (
    ScoreMatrix,
    TeacherConfig,
    ep_reference,
    epdms,
    evaluate_trajectory,
    pdms,
    teach_many,
)
from .vocab import Vocabulary, kmeans, sample_trajectories

SCORE_SUFFIX = ".hmdp"


class _Outputs:
    """Tracks files and directories created by a command so failures leave nothing behind."""

    def __init__(self):
        self._paths = []

    def claim(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self._paths.append(path)
        return path

    def rollback(self) -> None:
        for p in reversed(self._paths):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _write_text(outputs: _Outputs, path, text: str) -> None:
    path = outputs.claim(path)
    path.write_text(text, encoding="utf-8")


def _teacher_config(path) -> TeacherConfig:
    return TeacherConfig.load(path) if path else TeacherConfig()


def _score_path(out_dir, scenario_id) -> Path:
    return Path(out_dir) / f"{scenario_id}{SCORE_SUFFIX}"


def _load_scores(scores_dir, pairs, vocab: Vocabulary):
    mats = []
    hashes = set()
    for pair in pairs:
        path = _score_path(scores_dir, pair.curr.id)
        if not path.exists():
            raise SchemaError("no score matrix for scenario", str(path))
        sm = ScoreMatrix.load(path)
        if sm.scenario_id != pair.curr.id:
            raise SchemaError(f"score matrix is for {sm.scenario_id}", str(path))
        if sm.k != vocab.k:
            raise ShapeMismatch(f"score matrix k={sm.k} but vocabulary k={vocab.k}", path=str(path))
        vh = sm.extra.get("vocab_hash")
        if vh is not None and vh != vocab.fingerprint():
            raise ConfigHashMismatch("score matrix was produced with a different vocabulary",
                                     path=str(path), expected=vocab.fingerprint(), found=vh)
        hashes.add(sm.config_hash)
        mats.append(sm)
    if len(hashes) > 1:
        raise ConfigHashMismatch("score matrices disagree on teacher config", hashes=sorted(hashes))
    return mats


def _model_and_vocab(path):
    model, vocab, raw = load_model(path)
    if vocab is None:
        raise SchemaError("model file has no embedded vocabulary", "vocabulary")
    return model, vocab, raw


def _check_teacher_hash(raw: dict, cfg: TeacherConfig) -> None:
    expected = raw.get("teacher_config_hash")
    if expected is not None and expected != cfg.config_hash():
        raise ConfigHashMismatch("teacher config differs from the one used for training",
                                 expected=expected, found=cfg.config_hash())


def _items(model, vocab, pairs, cfg, jobs, temporal):
    mats = teach_many([p.curr for p in pairs], vocab, cfg, jobs)
    return prepare_items(model, vocab, pairs, mats, temporal)


# --- commands ------------------------------------------------------------------

def cmd_gen(args, outputs: _Outputs) -> dict:
    out = Path(args.out)
    outputs.claim(out)
    pairs = generate_scenarios(args.count, args.seed, args.mix)
    manifest = save_pairs(pairs, out)
    written = {"all": str(manifest)}
    if args.split:
        sizes = [int(v) for v in args.split.split(",")]
        if sum(sizes) != len(pairs) or any(s < 0 for s in sizes):
            raise ValueError(f"--split sizes must sum to --count ({len(pairs)})")
        names = ("train", "val", "test")[: len(sizes)]
        start = 0
        for name, size in zip(names, sizes):
            written[name] = str(save_pairs(pairs[start : start + size], out, f"{name}.json"))
            start += size
    return {"pairs": len(pairs), "manifests": written}


def cmd_vocab(args, outputs: _Outputs) -> dict:
    trajs = sample_trajectories(args.samples, args.seed)
    vocab = kmeans(trajs, args.k, args.iters, args.seed)
    _write_text(outputs, args.out, vocab.dumps())
    return {"k": vocab.k, "final_sse": vocab.meta["final_sse"], "fingerprint": vocab.fingerprint()}


def cmd_teach(args, outputs: _Outputs) -> dict:
    pairs = load_pairs(args.scenarios)
    vocab = Vocabulary.load(args.vocab)
    cfg = _teacher_config(args.config)
    mats = teach_many([p.curr for p in pairs], vocab, cfg, args.jobs)
    out = outputs.claim(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sm in mats:
        sm.extra["vocab_hash"] = vocab.fingerprint()
        path = _score_path(out, sm.scenario_id)
        outputs.claim(path)
        outputs.claim(Path(str(path) + ".json"))
        sm.save(path)
    return {"scenarios": len(mats), "config_hash": cfg.config_hash()}


def cmd_train(args, outputs: _Outputs) -> dict:
    pairs = load_pairs(args.scenarios)
    vocab = Vocabulary.load(args.vocab)
    mats = _load_scores(args.scores, pairs, vocab)
    ablate = [m.strip().upper() for m in args.ablate.split(",")] if args.ablate else []
    unknown = set(ablate) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics in --ablate: {sorted(unknown)}")
    mask = np.array([0.0 if m in ablate else 1.0 for m in METRICS])
    temporal = not args.no_temporal
    samples = build_samples(pairs, vocab, mats, temporal)
    cfg = ModelConfig(d_model=args.d_model, d_hidden=args.d_hidden)
    hyper = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, epochs=args.epochs, batch=args.batch,
                        seed=args.seed)
    model = train(StudentModel.init(cfg, args.seed), vocab, samples, hyper, mask)
    extra = {
        "teacher_config_hash": mats[0].config_hash,
        "hyper": {"lr": hyper.lr, "weight_decay": hyper.weight_decay, "epochs": hyper.epochs,
                  "batch": hyper.batch, "seed": hyper.seed},
        "distilled_metrics": [m for m in METRICS if m not in ablate],
        "temporal": temporal,
    }
    outputs.claim(args.out)
    save_model(model, args.out, vocab, extra)
    return {"final": model.training_log[-1], "fingerprint": model.fingerprint()}


def cmd_calibrate(args, outputs: _Outputs) -> dict:
    model, vocab, raw = _model_and_vocab(args.model)
    cfg = _teacher_config(args.config)
    _check_teacher_hash(raw, cfg)
    pairs = load_pairs(args.scenarios)
    items = _items(model, vocab, pairs, cfg, args.jobs, raw.get("temporal", True))
    result = grid_search(items, vocab, args.grid, cfg)
    out = Path(args.out)
    table = out.with_name(out.stem + "_grid.csv")
    outputs.claim(table)
    result.write_csv(table)
    outputs.claim(out)
    result.best.save(out, table.name)
    return {"weights": result.best.to_dict(), "mean_epdms": 100.0 * result.best_epdms,
            "grid_points": len(result.points)}


def _report_rows(run, rows):
    return [{"run": run, "scenario_id": r.scenario_id, "chosen_index": r.chosen_index,
             "prev_index": r.prev_index, **{k: v for k, v in r.scores.as_dict().items()},
             "pdms": r.pdms, "epdms": r.epdms} for r in rows]


def cmd_benchmark(args, outputs: _Outputs) -> dict:
    model, vocab, raw = _model_and_vocab(args.model)
    cfg = _teacher_config(args.config)
    _check_teacher_hash(raw, cfg)
    weights = InferenceWeights.load(args.weights)
    pairs = load_pairs(args.scenarios)
    items = _items(model, vocab, pairs, cfg, args.jobs, raw.get("temporal", True))
    runs = {"calibrated": (weights, benchmark_items(items, vocab, weights, cfg))}
    if args.compare == "imitation-only":
        w = InferenceWeights.imitation_only()
        runs["imitation-only"] = (w, benchmark_items(items, vocab, w, cfg))
    report = {
        "version": __version__,
        "teacher_config_hash": cfg.config_hash(),
        "vocab_hash": vocab.fingerprint(),
        "model_hash": model.fingerprint(),
        "model_seed": model.seed,
        "scenarios": len(pairs),
        "notes": "EC is evaluated on consecutive selections but has no predicted head, so it is "
                 "not part of the weighted inference term.",
        "runs": {name: {"weights": w.to_dict(), "aggregate": aggregate(rows),
                        "rows": _report_rows(name, rows)} for name, (w, rows) in runs.items()},
    }
    out = outputs.claim(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(outputs, out / "benchmark.json", json.dumps(report, sort_keys=True, indent=1))
    buf = io.StringIO()
    fields = ["run", "scenario_id", "chosen_index", "prev_index", "nc", "dac", "ep", "ttc", "c", "tl", "ddc",
              "lk", "ec", "pdms", "epdms"]
    wr = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    wr.writeheader()
    for name, (_, rows) in runs.items():
        for r in _report_rows(name, rows):
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    _write_text(outputs, out / "benchmark.csv", buf.getvalue())
    return {name: report["runs"][name]["aggregate"] for name in runs}


def _read_trajectory(path, name):
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", str(path)) from exc
    if isinstance(d, dict):
        if "poses" not in d:
            raise SchemaError("missing required field", "poses")
        d = d["poses"]
    return check_trajectory(d, name)


def cmd_eval(args, outputs: _Outputs) -> dict:
    scenario = load_scenario(args.scenario)
    traj = _read_trajectory(args.trajectory, "trajectory")
    vocab = Vocabulary.load(args.vocab)
    cfg = _teacher_config(args.config)
    # the progress reference comes from the vocabulary with this trajectory appended
    pool = np.concatenate([vocab.trajectories, traj[None]])
    ref = ep_reference(pool, scenario, cfg)
    prev = _read_trajectory(args.prev_trajectory, "prev_trajectory") if args.prev_trajectory else None
    transform = None
    if args.transform:
        transform = tuple(float(v) for v in args.transform.split(","))
        if len(transform) != 3:
            raise SchemaError("expected dx,dy,dtheta", "transform")
    s = evaluate_trajectory(traj, scenario, ref, cfg, prev, transform)
    return {"scenario_id": scenario.id, "subscores": s.as_dict(), "pdms": pdms(s), "epdms": epdms(s),
            "ep_reference": ref}


def _color(v: float) -> str:
    v = min(max(v, 0.0), 1.0)
    return f"rgb({int(round(220 * (1 - v)))},{int(round(170 * v + 30))},60)"


def render_svg(scenario, trajectories, values, metric: str, scale: float = 6.0) -> str:
    """Static top-down view; candidates drawn worst-first so good ones stay visible."""
    x0, x1, y0, y1 = -15.0, 85.0, -40.0, 40.0
    w, h = (x1 - x0) * scale, (y1 - y0) * scale

    def pt(x, y):
        return f"{(x - x0) * scale:.1f},{(y1 - y) * scale:.1f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h + 40:.0f}" '
             f'viewBox="0 0 {w:.0f} {h + 40:.0f}">',
             f'<rect width="{w:.0f}" height="{h:.0f}" fill="#f4f4f4"/>']
    for poly in scenario.drivable:
        pts = " ".join(pt(x, y) for x, y in poly.vertices)
        parts.append(f'<polygon points="{pts}" fill="#d0d0d0" stroke="none"/>')
    for sig in scenario.signals:
        pts = " ".join(pt(x, y) for x, y in sig.region.vertices)
        fill = "#e06060" if bool(sig.state_at(0.0)) else "#60c060"
        parts.append(f'<polygon points="{pts}" fill="{fill}" fill-opacity="0.4"/>')
    for lane in scenario.lanes:
        pts = " ".join(pt(x, y) for x, y in lane.points)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#ffffff" stroke-dasharray="6,6"/>')
    for agent in scenario.agents:
        from .geom import box_corners

        c = box_corners(np.array([[*agent.poses[0], agent.length / 2, agent.width / 2]]))[0]
        pts = " ".join(pt(x, y) for x, y in c)
        parts.append(f'<polygon points="{pts}" fill="#4060c0"/>')
    for i in np.argsort(values, kind="stable"):
        pts = " ".join(pt(x, y) for x, y, _ in trajectories[i])
        parts.append(f'<polyline points="{pt(0, 0)} {pts}" fill="none" stroke="{_color(values[i])}" '
                     f'stroke-width="1" stroke-opacity="0.7"/>')
    hp = " ".join(pt(x, y) for x, y, _ in scenario.human)
    parts.append(f'<polyline points="{pt(0, 0)} {hp}" fill="none" stroke="#000000" stroke-width="2"/>')
    ego = box_corners(np.array([[0.0, 0.0, 0.0, scenario.ego.length / 2, scenario.ego.width / 2]]))[0]
    parts.append(f'<polygon points="{" ".join(pt(x, y) for x, y in ego)}" fill="#202020"/>')
    # legend: color ramp for the metric, human in black
    for j in range(11):
        parts.append(f'<rect x="{10 + 18 * j}" y="{h + 12:.0f}" width="18" height="14" fill="{_color(j / 10)}"/>')
    parts.append(f'<text x="{215}" y="{h + 24:.0f}" font-family="sans-serif" font-size="12">'
                 f'{metric}: 0 to 1 (k={len(values)}); black = human; blue = agents</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_render(args, outputs: _Outputs) -> dict:
    scenario = load_scenario(args.scenario)
    vocab = Vocabulary.load(args.vocab)
    sm = ScoreMatrix.load(args.scores)
    if sm.k != vocab.k:
        raise ShapeMismatch(f"score matrix k={sm.k} but vocabulary k={vocab.k}")
    metric = args.metric.upper()
    if metric not in sm.metric_names:
        raise SchemaError(f"unknown metric {args.metric}", "metric")
    _write_text(outputs, args.out, render_svg(scenario, vocab.trajectories, sm.column(metric), metric))
    return {"out": str(args.out), "metric": metric}


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hydradistill", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate frame pairs")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--mix", default="uniform")
    g.add_argument("--split", help="comma-separated train,val,test sizes")
    g.set_defaults(func=cmd_gen)

    v = sub.add_parser("vocab", help="cluster a trajectory vocabulary")
    v.add_argument("--samples", type=int, default=20000)
    v.add_argument("--k", type=int, default=256)
    v.add_argument("--iters", type=int, default=50)
    v.add_argument("--seed", type=int, required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_vocab)

    t = sub.add_parser("teach", help="score the vocabulary with the rule-based teachers")
    t.add_argument("--scenarios", required=True)
    t.add_argument("--vocab", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(func=cmd_teach)

    tr = sub.add_parser("train", help="distill the teachers into the student")
    tr.add_argument("--scenarios", required=True)
    tr.add_argument("--scores", required=True)
    tr.add_argument("--vocab", required=True)
    tr.add_argument("--epochs", type=int, default=20)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--batch", type=int, default=32)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--weight-decay", type=float, default=0.0)
    tr.add_argument("--d-model", type=int, default=64)
    tr.add_argument("--d-hidden", type=int, default=128)
    tr.add_argument("--ablate", help="comma-separated metric heads to leave out of distillation")
    tr.add_argument("--no-temporal", action="store_true", help="drop preceding-frame tokens")
    tr.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="grid-search inference weights on validation pairs")
    c.add_argument("--model", required=True)
    c.add_argument("--scenarios", required=True)
    c.add_argument("--grid", default="default")
    c.add_argument("--out", required=True)
    c.add_argument("--config")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_calibrate)

    b = sub.add_parser("benchmark", help="select and re-score on test pairs")
    b.add_argument("--model", required=True)
    b.add_argument("--weights", required=True)
    b.add_argument("--scenarios", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--compare", choices=["imitation-only"])
    b.add_argument("--config")
    b.set_defaults(func=cmd_benchmark)

    e = sub.add_parser("eval", help="score one trajectory against one scenario")
    e.add_argument("--scenario", required=True)
    e.add_argument("--trajectory", required=True)
    e.add_argument("--vocab", required=True)
    e.add_argument("--config")
    e.add_argument("--prev-trajectory")
    e.add_argument("--transform", help="dx,dy,dtheta from the preceding frame")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="SVG of candidates colored by one metric")
    r.add_argument("--scenario", required=True)
    r.add_argument("--vocab", required=True)
    r.add_argument("--scores", required=True)
    r.add_argument("--metric", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def _fail(kind: str, context: dict, code: int) -> int:
    print(json.dumps({"error": kind, "context": context}, sort_keys=True, default=_json_default), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    outputs = _Outputs()
    try:
        result = args.func(args, outputs)
    except HydraError as exc:
        outputs.rollback()
        return _fail(type(exc).__name__, {"message": str(exc), "command": args.command, **exc.context},
                     exc.exit_code)
    except FloatingPointError as exc:
        outputs.rollback()
        return _fail("NumericFailure", {"message": str(exc), "command": args.command}, 4)
    except (OSError, ValueError, KeyError) as exc:
        outputs.rollback()
        return _fail(type(exc).__name__, {"message": str(exc), "command": args.command}, 1)
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
