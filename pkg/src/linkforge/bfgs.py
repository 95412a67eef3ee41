"""Batched BFGS with a feasibility-guarded Wolfe backtracking line search.

Every problem in the batch keeps its own iterate and inverse-Hessian
estimate; the objective is always evaluated for all problems that still need
it in one vectorized call.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import metrics
from .mechanism import PaddedBatch
from .solver import backward, simulate, thetas_for

logger = logging.getLogger(__name__)

# (x (b, n), rows (b,)) -> (values (b,), grads, feasible (b,)); grads is a (b, n)
# array or a callable mapping local row indices (k,) to their (k, n) gradients
ObjectiveFn = Callable[[np.ndarray, np.ndarray], tuple]


def _take_grads(grads, sel: np.ndarray) -> np.ndarray:
    return np.asarray(grads(sel), float) if callable(grads) else np.asarray(grads, float)[sel]

CURVATURE_EPS = 1e-10


class NotDescentDirection(ValueError):
    pass


class NoAdmissibleStep(RuntimeError):
    pass


@dataclass(frozen=True)
class LineSearchConfig:
    c1: float = 1e-4
    c2: float = 0.9
    max_trials: int = 20
    initial_step: float = 1.0
    backtrack: float = 0.5
    # shrink by the minimizer of the quadratic through f(0), f'(0), f(a), kept
    # within [min_shrink, backtrack] of the rejected step; False halves blindly
    interpolate: bool = True
    min_shrink: float = 0.01

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class OptState:
    x: np.ndarray
    H: np.ndarray
    f: np.ndarray
    g: np.ndarray
    converged: np.ndarray
    failed: np.ndarray
    history: list = field(default_factory=list)

    @classmethod
    def start(cls, x0: np.ndarray, objective_fn: ObjectiveFn) -> OptState:
        x0 = np.array(x0, dtype=float)
        B, n = x0.shape
        f, g, feas = objective_fn(x0, np.arange(B))
        if not np.all(feas):
            raise ValueError(f"initial point infeasible for rows {np.nonzero(~feas)[0].tolist()}")
        H = np.broadcast_to(np.eye(n), (B, n, n)).copy()
        return cls(x0, H, np.asarray(f, float), _take_grads(g, np.arange(B)),
                   np.zeros(B, bool), np.zeros(B, bool), [np.asarray(f, float).copy()])


@dataclass
class LineSearchResult:
    step: np.ndarray  # (b,), 0 where rejected
    accepted: np.ndarray
    wolfe: np.ndarray  # both conditions held (else Armijo only)
    x: np.ndarray
    f: np.ndarray
    g: np.ndarray


def wolfe_guarded_search(
    x: np.ndarray,
    f: np.ndarray,
    g: np.ndarray,
    direction: np.ndarray,
    objective_fn: ObjectiveFn,
    config: LineSearchConfig = LineSearchConfig(),
    rows: np.ndarray | None = None,
    initial: np.ndarray | None = None,
) -> LineSearchResult:
    """Backtrack from ``initial_step`` until the trial is feasible and improving.

    The largest step that is feasible and satisfies the sufficient-decrease
    condition is taken; ``wolfe`` reports whether the curvature condition
    also held there. Rows with no admissible step keep their iterate.
    ``initial`` overrides the first trial step per row.
    """
    x = np.atleast_2d(np.asarray(x, float))
    g = np.atleast_2d(np.asarray(g, float))
    d = np.atleast_2d(np.asarray(direction, float))
    f = np.atleast_1d(np.asarray(f, float))
    B = x.shape[0]
    rows = np.arange(B) if rows is None else np.asarray(rows)
    gd = (g * d).sum(axis=1)
    if np.any(gd >= 0):
        raise NotDescentDirection(f"g.d >= 0 for rows {rows[gd >= 0].tolist()}")
    alpha = np.full(B, config.initial_step) if initial is None else np.array(initial, float)
    out = LineSearchResult(np.zeros(B), np.zeros(B, bool), np.zeros(B, bool),
                           x.copy(), f.copy(), g.copy())
    pending = np.arange(B)
    for _ in range(config.max_trials):
        if pending.size == 0:
            break
        a = alpha[pending]
        xt = x[pending] + a[:, None] * d[pending]
        ft, gt, feas = objective_fn(xt, rows[pending])
        ft = np.asarray(ft, float)
        ok = feas & np.isfinite(ft) & (ft <= f[pending] + config.c1 * a * gd[pending])
        hit = pending[ok]
        if hit.size:
            gt_ok = _take_grads(gt, np.nonzero(ok)[0])
            out.step[hit] = a[ok]
            out.accepted[hit] = True
            out.wolfe[hit] = (gt_ok * d[hit]).sum(axis=1) >= config.c2 * gd[hit]
            out.x[hit] = xt[ok]
            out.f[hit] = ft[ok]
            out.g[hit] = gt_ok
        miss = ~ok
        pending = pending[miss]
        shrink = np.full(pending.size, config.backtrack)
        if config.interpolate:
            fa, aa, g0 = ft[miss], a[miss], gd[pending]
            with np.errstate(all="ignore"):
                curv = (fa - f[pending] - g0 * aa) / (aa * aa)
                q = -g0 / (2 * curv * aa)
            good = feas[miss] & np.isfinite(q) & (curv > 0)
            shrink[good] = np.clip(q[good], config.min_shrink, config.backtrack)
        alpha[pending] *= shrink
    return out


def line_search(x, f, g, direction, objective_fn, config: LineSearchConfig = LineSearchConfig()) -> float:
    """Single-problem wrapper; raises NoAdmissibleStep on rejection."""
    res = wolfe_guarded_search(
        np.atleast_2d(x), np.atleast_1d(f), np.atleast_2d(g), np.atleast_2d(direction),
        objective_fn, config,
    )
    if not res.accepted[0]:
        raise NoAdmissibleStep("no feasible, improving step found")
    return float(res.step[0])


def bfgs_update(H: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Inverse-Hessian BFGS update for stacked problems; rows with s.y <= eps are skipped."""
    sy = (s * y).sum(axis=1)
    ok = sy > CURVATURE_EPS
    H = H.copy()
    if not ok.any():
        return H
    Hs, s_, y_, syo = H[ok], s[ok], y[ok], sy[ok]
    n = s.shape[1]
    rho = 1.0 / syo
    I = np.eye(n)[None]
    V = I - rho[:, None, None] * s_[:, :, None] * y_[:, None, :]
    Hn = V @ Hs @ V.transpose(0, 2, 1) + rho[:, None, None] * s_[:, :, None] * s_[:, None, :]
    H[ok] = 0.5 * (Hn + Hn.transpose(0, 2, 1))
    return H


def minimize_batch(
    objective_fn: ObjectiveFn,
    x0: np.ndarray,
    steps: int,
    config: LineSearchConfig = LineSearchConfig(),
    gtol: float = 1e-12,
    stall_gtol: float = 1e-8,
    state: OptState | None = None,
    log: Callable[[dict], None] | None = None,
) -> OptState:
    st = state if state is not None else OptState.start(x0, objective_fn)
    B, n = st.x.shape
    for it in range(steps):
        live = np.nonzero(~st.converged & ~st.failed)[0]
        if live.size == 0:
            break
        d = -np.einsum("bij,bj->bi", st.H[live], st.g[live])
        gd = (d * st.g[live]).sum(axis=1)
        bad = gd >= 0
        if bad.any():
            # curvature information went stale; restart from steepest descent
            st.H[live[bad]] = np.eye(n)
            d[bad] = -st.g[live[bad]]
        res = wolfe_guarded_search(st.x[live], st.f[live], st.g[live], d, objective_fn, config, live)
        acc = live[res.accepted]
        rej = live[~res.accepted]
        if acc.size:
            s = res.x[res.accepted] - st.x[acc]
            y = res.g[res.accepted] - st.g[acc]
            st.H[acc] = bfgs_update(st.H[acc], s, y)
            st.x[acc] = res.x[res.accepted]
            st.f[acc] = res.f[res.accepted]
            st.g[acc] = res.g[res.accepted]
        if rej.size:
            # frozen for this iteration; a second failure from steepest descent is final
            plain = np.all(st.H[rej] == np.eye(n), axis=(1, 2))
            flat = np.abs(st.g[rej]).max(axis=1) <= stall_gtol
            st.converged[rej[flat]] = True
            st.failed[rej[plain & ~flat]] = True
            st.H[rej] = np.eye(n)
        st.converged[live] |= np.abs(st.g[live]).max(axis=1) <= gtol
        st.history.append(st.f.copy())
        if log is not None:
            for r, b in enumerate(live):
                log({"mech_id": int(b), "step": it, "objective": float(st.f[b]),
                     "step_size": float(res.step[r]), "feasible": bool(res.accepted[r])})
    return st


# -- mechanism objective ----------------------------------------------------


class MechanismObjective:
    """Combined shape objective of each mechanism's normalized target-joint path
    against a fixed (normalized, pre-rotated) target with the same point count.

    With ``equidistant`` the traced path is resampled by arc length before
    comparison, which removes the crank's timing from the objective.
    """

    def __init__(self, batch: PaddedBatch, targets: np.ndarray, timesteps: int,
                 weights: metrics.ObjectiveWeights = metrics.ObjectiveWeights(),
                 equidistant: bool = True):
        self.batch = batch
        self.targets = np.asarray(targets, float)
        self.T = timesteps
        self.thetas = thetas_for(timesteps)
        self.weights = weights
        self.equidistant = equidistant
        self.n_evals = 0
        if not equidistant and self.targets.shape[1] != timesteps:
            raise ValueError("targets must have one point per timestep")

    @property
    def shape(self) -> tuple[int, int]:
        return self.batch.n_max, 2

    def paths(self, x: np.ndarray, rows: np.ndarray, record: bool = False):
        b = self.batch
        x0 = x.reshape(len(rows), b.n_max, 2)
        return simulate(x0, b.plan[rows], b.fixed_mask[rows], b.node_count[rows], self.thetas,
                        record=record)

    def _curves(self, P: np.ndarray, rows: np.ndarray):
        path = P[np.arange(len(rows)), self.batch.target[rows]]
        rcache = None
        if self.equidistant:
            path, rcache = metrics.equidistant_forward(path, self.targets.shape[1])
        nq, ncache = metrics.normalize_forward(path)
        return nq, rcache, ncache

    def __call__(self, x: np.ndarray, rows: np.ndarray):
        """Values and feasibility now; gradients on request for feasible rows only."""
        rows = np.asarray(rows)
        self.n_evals += len(rows)
        P, feas, _ = self.paths(x, rows)
        vals = np.full(len(rows), np.inf)
        ok = np.nonzero(feas)[0]
        if ok.size:
            nq, _, _ = self._curves(P[ok], rows[ok])
            vals[ok], _ = metrics.batch_objective(nq, self.targets[rows[ok]], self.weights, need_grad=False)
        return vals, lambda sel: self.gradient(x[sel], rows[sel]), feas & np.isfinite(vals)

    def gradient(self, x: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Objective gradient w.r.t. all joint coordinates, for feasible rows."""
        rows = np.asarray(rows)
        if rows.size == 0:
            return np.zeros_like(x)
        P, feas, tape = self.paths(x, rows, record=True)
        if not feas.all():
            raise ValueError("gradient requested for an infeasible row")
        nq, rcache, ncache = self._curves(P, rows)
        _, gq = metrics.batch_objective(nq, self.targets[rows], self.weights)
        gq = metrics.normalize_backward(ncache, gq)
        if self.equidistant:
            gq = metrics.equidistant_backward(rcache, gq)
        down = np.zeros_like(P)
        down[np.arange(len(rows)), self.batch.target[rows]] = gq
        return backward(tape, down).reshape(len(rows), -1)


@dataclass
class OptimizationResult:
    batch: PaddedBatch
    objective: np.ndarray
    histories: list
    state: OptState
    n_evals: int


def optimize_batch(
    batch: PaddedBatch,
    targets: np.ndarray,
    steps: int,
    weights: metrics.ObjectiveWeights = metrics.ObjectiveWeights(),
    lsconfig: LineSearchConfig = LineSearchConfig(),
    timesteps: int | None = None,
    equidistant: bool = True,
    log_path=None,
) -> OptimizationResult:
    """Refine all joint positions of every mechanism against its own target.

    ``targets`` is (B, M, 2) of normalized curves (or Curve objects).
    """
    targets = np.stack([getattr(t, "points", t) for t in targets]).astype(float)
    T = timesteps if timesteps is not None else targets.shape[1]
    obj = MechanismObjective(batch, targets, T, weights, equidistant)
    x0 = batch.positions.reshape(batch.size, -1)
    fh = open(log_path, "a") if log_path else None
    try:
        log = (lambda rec: fh.write(json.dumps(rec) + "\n")) if fh else None
        st = minimize_batch(obj, x0, steps, lsconfig, log=log)
    finally:
        if fh:
            fh.close()
    out = batch.with_positions(st.x.reshape(batch.positions.shape))
    hist = [np.array([h[b] for h in st.history]) for b in range(batch.size)]
    return OptimizationResult(out, st.f.copy(), hist, st, obj.n_evals)
