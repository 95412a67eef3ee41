"""End-to-end path synthesis: retrieve, align, refine twice, evaluate."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .bfgs import LineSearchConfig, optimize_batch
from .curves import Curve, CurveError, load_curve, preprocess, resample_equidistant, rotation_matrix
from .index import EmbeddingIndex, query
from .layers import CollisionGeometry, LayerAssignment, assign_layers, detect_collisions
from .mechanism import Mechanism, PaddedBatch, pad_batch, validate
from .solver import simulate, thetas_for
from .training import Checkpoint

logger = logging.getLogger(__name__)


class EmptyRetrieval(LookupError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    n_retrieve: int = 500
    stage2_steps: int = 10
    keep_fraction: float = 0.10
    stage3_steps: int = 150
    rotation_angles: int = 200
    rotation_points: int = 50
    smoothing_freqs: int = 7
    eval_points: int = 2000
    solver_T: int = 2000
    opt_timesteps: int = 200
    opt_points: int = 200
    weights: metrics.ObjectiveWeights = metrics.ObjectiveWeights()
    max_joints: int | None = 20
    manufacturable: bool = False
    geometry: CollisionGeometry = CollisionGeometry()
    collision_T: int = 360
    index_path: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.n_retrieve * self.keep_fraction < 1:
            raise ValueError("n_retrieve * keep_fraction must keep at least one candidate")

    @property
    def n_keep(self) -> int:
        return max(1, int(round(self.n_retrieve * self.keep_fraction)))


@dataclass
class Solution:
    mechanism: Mechanism  # placed in the target's frame
    curve: np.ndarray  # traced path in the target's frame, eval_points x 2
    chamfer: float
    ordered: float
    combined: float
    rotation: float
    source_id: int
    layers: LayerAssignment | None = None

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "chamfer": self.chamfer,
            "ordered_distance": self.ordered,
            "combined": self.combined,
            "rotation": self.rotation,
            "mechanism": self.mechanism.to_dict(),
            "layers": None if self.layers is None else json.loads(self.layers.to_json()),
        }


@dataclass
class SolutionSet:
    solutions: list[Solution]
    timings: dict[str, float] = field(default_factory=dict)
    stage2_objective: dict[int, float] = field(default_factory=dict)
    stage3_objective: dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.solutions)

    @property
    def best(self) -> Solution:
        return self.solutions[0]

    def to_json(self) -> str:
        return json.dumps({"solutions": [s.to_dict() for s in self.solutions],
                           "timings": self.timings}, sort_keys=True)


def _rotate_all(points: np.ndarray, angles: np.ndarray) -> np.ndarray:
    c, s = np.cos(angles), np.sin(angles)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    return np.einsum("bij,nj->bni", rot, points)


def _normalized_paths(batch: PaddedBatch, T: int, n_points: int):
    P, feas, _ = simulate(batch.positions, batch.plan, batch.fixed_mask, batch.node_count, thetas_for(T))
    paths = P[np.arange(batch.size), batch.target]
    even = np.full((batch.size, n_points, 2), np.nan)
    curves = np.full((batch.size, n_points, 2), np.nan)
    if feas.any():
        even[feas], _ = metrics.equidistant_forward(paths[feas], n_points)
        curves[feas], _ = metrics.normalize_forward(even[feas])
    return P, even, curves, feas


def align(target: np.ndarray, curves: np.ndarray, n_angles: int, n_points: int) -> np.ndarray:
    """Per-candidate grid angle rotating ``target`` onto each curve, by Chamfer distance
    on an evenly strided subset of ``n_points`` points."""
    stride = max(1, target.shape[0] // n_points)
    return metrics.batch_best_rotation(
        np.broadcast_to(target[::stride], (len(curves),) + target[::stride].shape).copy(),
        curves[:, ::stride], n_angles,
    )


def _center_scale(points: np.ndarray) -> tuple[np.ndarray, float]:
    mu = points.mean(axis=0)
    return mu, math.sqrt(((points - mu) ** 2).sum() / len(points))


def place_in_frame(mech: Mechanism, path: np.ndarray, target_points: np.ndarray, angle: float) -> Mechanism:
    """Similarity transform taking the mechanism's path onto the target's frame.

    Both point sets are equidistant samples; ``angle`` rotates the normalized
    target onto the normalized path.
    """
    mu_p, s_p = _center_scale(path)
    mu_t, s_t = _center_scale(target_points)
    R = rotation_matrix(-angle)
    X = mu_t + (s_t / s_p) * (mech.positions - mu_p) @ R.T
    return mech.with_positions(X)


def synthesize(target: Curve, index: EmbeddingIndex, checkpoint: Checkpoint,
               lookup, config: PipelineConfig = PipelineConfig()) -> SolutionSet:
    """Synthesize mechanisms tracing ``target``.

    ``lookup`` maps an index id to its (normalized) dataset mechanism.
    """
    cfg = config
    times: dict[str, float] = {}
    t = time.perf_counter()
    tgt = preprocess(target, cfg.opt_points).points  # original curve, never smoothed
    times["preprocess"] = time.perf_counter() - t

    t = time.perf_counter()
    hits = query(index, target, checkpoint, cfg.n_retrieve, cfg.max_joints, cfg.smoothing_freqs)
    if not hits:
        raise EmptyRetrieval("retrieval returned no candidates")
    ids = np.array([h[0] for h in hits])
    batch = pad_batch([lookup(int(i)) for i in ids])
    times["retrieve"] = time.perf_counter() - t

    t = time.perf_counter()
    _, _, curves, feas = _normalized_paths(batch, cfg.opt_timesteps, cfg.opt_points)
    if not feas.any():
        raise EmptyRetrieval("no retrieved mechanism completes a full turn")
    keep = np.nonzero(feas)[0]
    batch, ids, curves = batch.subset(keep), ids[keep], curves[keep]
    angles = align(tgt, curves, cfg.rotation_angles, cfg.rotation_points)
    times["align"] = time.perf_counter() - t

    t = time.perf_counter()
    targets = _rotate_all(tgt, angles)
    res2 = optimize_batch(batch, targets, cfg.stage2_steps, cfg.weights, LineSearchConfig(),
                          cfg.opt_timesteps)
    times["stage2"] = time.perf_counter() - t

    t = time.perf_counter()
    order = np.lexsort((ids, res2.objective))[: cfg.n_keep]
    order = order[np.isfinite(res2.objective[order])]
    b3 = res2.batch.subset(order)
    ids3, ang3, f2 = ids[order], angles[order], res2.objective[order]
    # re-align on the refined paths; keep the old angle where it scores better
    _, _, c3, _ = _normalized_paths(b3, cfg.opt_timesteps, cfg.opt_points)
    new_ang = align(tgt, c3, cfg.rotation_angles, cfg.rotation_points)
    f_new, _ = metrics.batch_objective(c3, _rotate_all(tgt, new_ang), cfg.weights)
    f_old, _ = metrics.batch_objective(c3, _rotate_all(tgt, ang3), cfg.weights)
    ang3 = np.where(f_new < f_old, new_ang, ang3)
    res3 = optimize_batch(b3, _rotate_all(tgt, ang3), cfg.stage3_steps, cfg.weights,
                          LineSearchConfig(), cfg.opt_timesteps)
    times["stage3"] = time.perf_counter() - t

    t = time.perf_counter()
    solutions = evaluate_candidates(res3.batch, ids3, ang3, target, cfg)
    times["evaluate"] = time.perf_counter() - t

    t = time.perf_counter()
    if cfg.manufacturable:
        solutions = manufacturable_first(solutions, cfg)
    times["layers"] = time.perf_counter() - t
    times["total"] = sum(times.values())
    return SolutionSet(
        solutions, times,
        {int(i): float(v) for i, v in zip(ids3, f2)},
        {int(i): float(v) for i, v in zip(ids3, res3.objective)},
    )


def evaluate_candidates(batch: PaddedBatch, ids, angles, target: Curve, cfg: PipelineConfig) -> list[Solution]:
    """Score refined candidates at ``eval_points`` on normalized curves, best first."""
    tgt_even = resample_equidistant(target, cfg.eval_points).points
    mu_t, s_t = _center_scale(tgt_even)
    tgt_eval = (tgt_even - mu_t) / s_t
    _, even, curves, feas = _normalized_paths(batch, cfg.solver_T, cfg.eval_points)
    out = []
    mechs = batch.to_mechanisms()
    for r in np.nonzero(feas)[0]:
        m = mechs[r]
        if not validate(m).accepted:
            continue
        tr = tgt_eval @ rotation_matrix(float(angles[r])).T
        od, _, _, _ = metrics.batch_ordered_distance(curves[r : r + 1], tr[None])
        cd = metrics.chamfer(tr, curves[r])
        combined = cfg.weights.w_od * float(od[0]) + cfg.weights.w_cd * cd
        placed = place_in_frame(m, even[r], tgt_even, float(angles[r]))
        traced = mu_t + s_t * curves[r] @ rotation_matrix(-float(angles[r])).T
        out.append(Solution(placed, traced, cd, float(od[0]), combined, float(angles[r]), int(ids[r])))
    out.sort(key=lambda s: (s.combined, s.source_id))
    return out


def manufacturable_first(solutions: list[Solution], cfg: PipelineConfig) -> list[Solution]:
    """Check layer feasibility best-first; drop failures until one passes."""
    kept = []
    for n, s in enumerate(solutions):
        b = pad_batch([s.mechanism])
        P, feas, _ = simulate(b.positions, b.plan, b.fixed_mask, b.node_count, thetas_for(cfg.collision_T))
        if not feas[0]:
            continue
        # collision geometry is defined in normalized units (actuator arm 0.05)
        arm = float(np.hypot(*(s.mechanism.positions[1] - s.mechanism.positions[0])))
        sets = detect_collisions(s.mechanism, P[0] * (0.05 / arm), cfg.geometry)
        try:
            la = assign_layers(sets)
        except RuntimeError:
            logger.warning("layer search budget exceeded for candidate %d", s.source_id)
            continue
        if la.feasible:
            s.layers = la
            kept.append(s)
            return kept + solutions[n + 1 :]
    return kept


# -- benchmark --------------------------------------------------------------------

BENCH_FIELDS = ["curve", "chamfer", "ordered_distance", "combined", "seconds", "source_id"]


def evaluate_benchmark(curve_dir, index: EmbeddingIndex, checkpoint: Checkpoint, lookup,
                       config: PipelineConfig = PipelineConfig()) -> dict:
    """Synthesize every curve file in ``curve_dir``; returns rows plus a summary.

    Unreadable files are skipped with a warning. Raises FileNotFoundError when
    nothing could be read.
    """
    files = sorted(p for p in Path(curve_dir).iterdir() if p.suffix.lower() in (".csv", ".json"))
    rows, skipped = [], []
    for p in files:
        try:
            c = load_curve(p)
        except (OSError, ValueError, KeyError, CurveError) as e:
            logger.warning("skipping %s: %s", p.name, e)
            skipped.append(p.name)
            continue
        t = time.perf_counter()
        sol = synthesize(c, index, checkpoint, lookup, config)
        el = time.perf_counter() - t
        if len(sol) == 0:
            rows.append({"curve": p.name, "chamfer": None, "ordered_distance": None,
                         "combined": None, "seconds": el, "source_id": None})
            continue
        b = sol.best
        rows.append({"curve": p.name, "chamfer": b.chamfer, "ordered_distance": b.ordered,
                     "combined": b.combined, "seconds": el, "source_id": b.source_id})
    if not rows:
        raise FileNotFoundError(f"no readable curve files in {curve_dir}")
    return {"rows": rows, "summary": summarize(rows), "skipped": skipped}


def summarize(rows: list[dict]) -> dict:
    out = {}
    for key in ("chamfer", "ordered_distance", "seconds"):
        v = np.array([r[key] for r in rows if r[key] is not None], dtype=float)
        out[key] = {"mean": float(v.mean()) if v.size else None,
                    "std": float(v.std()) if v.size else None,
                    "formatted": f"{v.mean():.4f} ± {v.std():.4f}" if v.size else "n/a"}
    return out


def benchmark_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in report["rows"]:
        w.writerow(r)
    s = report["summary"]
    w.writerow({"curve": "mean ± std", "chamfer": s["chamfer"]["formatted"],
                "ordered_distance": s["ordered_distance"]["formatted"],
                "combined": "", "seconds": s["seconds"]["formatted"], "source_id": ""})
    return buf.getvalue()
