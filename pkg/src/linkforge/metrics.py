"""Shape distances between traced and target curves.

The scalar functions enumerate exactly and serve reporting and tests. The
``batch_*`` functions are the optimizer's workhorses: they return values plus
gradients with respect to the traced curve, holding the minimizing
correspondence fixed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .curves import Curve

TWO_PI = 2 * math.pi


class MetricError(ValueError):
    pass


class EmptySet(MetricError):
    pass


class LengthMismatch(MetricError):
    pass


@dataclass(frozen=True)
class ObjectiveWeights:
    w_od: float = 1.0
    w_cd: float = 0.25

    def __post_init__(self):
        if self.w_od < 0 or self.w_cd < 0 or (self.w_od == 0 and self.w_cd == 0):
            raise ValueError("weights must be non-negative and not both zero")


@dataclass(frozen=True)
class Ordering:
    shift: int
    direction: int  # +1 forward, -1 reversed

    def indices(self, n: int) -> np.ndarray:
        return (self.shift + self.direction * np.arange(n)) % n


def _pts(c) -> np.ndarray:
    return c.points if isinstance(c, Curve) else np.asarray(c, dtype=float)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[..., :, None, 0] - b[..., None, :, 0]
    dy = a[..., :, None, 1] - b[..., None, :, 1]
    return dx * dx + dy * dy


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(_pairwise_sq(a, b))


def chamfer(S1, S2) -> float:
    a, b = _pts(S1), _pts(S2)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet("chamfer distance needs two non-empty sets")
    d2 = _pairwise_sq(a, b)
    return float(np.mean(np.sqrt(d2.min(axis=1))) + np.mean(np.sqrt(d2.min(axis=0))))


def orderings(n: int) -> np.ndarray:
    """All 2n cyclic orderings as an index array, in tie-break order."""
    shifts = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    fwd = (shifts + i) % n
    rev = (shifts - i) % n
    return np.stack([fwd, rev], axis=1).reshape(2 * n, n)


def ordered_distance(coupler, target) -> tuple[float, Ordering]:
    a, b = _pts(coupler), _pts(target)
    n = len(b)
    if len(a) != n:
        raise LengthMismatch(f"{len(a)} vs {n} points")
    idx = orderings(n)
    best, best_s = math.inf, 0
    # chunked to bound memory at large n
    chunk = max(1, 2_000_000 // max(n, 1))
    for lo in range(0, 2 * n, chunk):
        sel = a[idx[lo : lo + chunk]]
        diff = sel - b[None]
        sq = (diff * diff).sum(axis=-1).sum(axis=-1)
        m = int(np.argmin(sq))
        if sq[m] < best:
            best, best_s = float(sq[m]), lo + m
    shift, rev = divmod(best_s, 2)
    return TWO_PI / n * best, Ordering(shift, -1 if rev else 1)


def combined_objective(coupler, target, w: ObjectiveWeights = ObjectiveWeights()) -> float:
    od, _ = ordered_distance(coupler, target)
    return w.w_od * od + w.w_cd * chamfer(target, coupler)


def rotations(n_angles: int) -> np.ndarray:
    return TWO_PI * np.arange(n_angles) / n_angles


def best_rotation(target, candidate, n_angles: int = 200) -> float:
    """Grid angle rotating ``target`` closest (in Chamfer distance) to ``candidate``."""
    angles = rotations(n_angles)
    scores = _rotation_scores(_pts(target)[None], _pts(candidate)[None], angles)[0]
    return float(angles[int(np.argmin(scores))])


def _rotation_scores(targets: np.ndarray, cands: np.ndarray, angles: np.ndarray) -> np.ndarray:
    c, s = np.cos(angles), np.sin(angles)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (A, 2, 2)
    out = np.empty((targets.shape[0], len(angles)))
    for b in range(targets.shape[0]):
        rt = np.einsum("aij,nj->ani", rot, targets[b])
        # sqrt is monotone, so the minima of squared distances pick the same points
        d2 = _pairwise_sq(rt, cands[b][None])
        out[b] = np.sqrt(d2.min(axis=2)).mean(axis=1) + np.sqrt(d2.min(axis=1)).mean(axis=1)
    return out


def batch_best_rotation(targets: np.ndarray, cands: np.ndarray, n_angles: int = 200) -> np.ndarray:
    angles = rotations(n_angles)
    return angles[np.argmin(_rotation_scores(targets, cands, angles), axis=1)]


@dataclass
class MetricReport:
    chamfer: float
    ordered: float
    combined: float
    shift: int
    direction: int
    rotation: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def report(coupler, target, w: ObjectiveWeights = ObjectiveWeights(), rotation: float = 0.0) -> MetricReport:
    od, o = ordered_distance(coupler, target)
    cd = chamfer(target, coupler)
    return MetricReport(cd, od, w.w_od * od + w.w_cd * cd, o.shift, o.direction, rotation)


# -- batched, differentiable -------------------------------------------------


def batch_chamfer(curves: np.ndarray, targets: np.ndarray, chunk: int = 64, need_grad: bool = True):
    """Chamfer(target, curve) per row and its gradient w.r.t. ``curves`` (None
    unless ``need_grad``)."""
    B, n, _ = curves.shape
    m = targets.shape[1]
    vals = np.empty(B)
    grads = np.zeros_like(curves) if need_grad else None
    rows = np.arange(n)
    for lo in range(0, B, chunk):
        a = curves[lo : lo + chunk]
        t = targets[lo : lo + chunk]
        d2 = _pairwise_sq(t, a)  # (b, m, n)
        nn_t = d2.argmin(axis=2)  # nearest curve point for each target point
        nn_a = d2.argmin(axis=1)  # nearest target point for each curve point
        bi = np.arange(a.shape[0])[:, None]
        dt = np.sqrt(d2[bi, np.arange(m)[None], nn_t])
        da = np.sqrt(d2[bi, nn_a, rows[None]])
        vals[lo : lo + chunk] = dt.mean(axis=1) + da.mean(axis=1)
        if not need_grad:
            continue
        g = np.zeros_like(a)
        with np.errstate(invalid="ignore", divide="ignore"):
            v1 = (a[bi, nn_t] - t) / dt[..., None]
            v2 = (a - t[bi, nn_a]) / da[..., None]
        v1 = np.nan_to_num(v1, nan=0.0, posinf=0.0, neginf=0.0) / m
        v2 = np.nan_to_num(v2, nan=0.0, posinf=0.0, neginf=0.0) / n
        for r in range(a.shape[0]):
            np.add.at(g[r], nn_t[r], v1[r])
        g += v2
        grads[lo : lo + chunk] = g
    return vals, grads


def batch_ordered_distance(curves: np.ndarray, targets: np.ndarray):
    """Ordered distance per row via FFT cross-correlation, with gradient.

    Returns (values, shift, direction, grads).
    """
    B, n, _ = curves.shape
    za = curves[..., 0] + 1j * curves[..., 1]
    zb = targets[..., 0] + 1j * targets[..., 1]
    energy = (np.abs(za) ** 2).sum(axis=1) + (np.abs(zb) ** 2).sum(axis=1)
    Fb = np.conj(np.fft.fft(zb, axis=1))
    fwd = np.fft.ifft(np.fft.fft(za, axis=1) * Fb, axis=1).real  # sum_i a[s+i].b[i]
    zr = za[:, (-np.arange(n)) % n]  # zr[m] = a[-m]
    rr = np.fft.ifft(np.fft.fft(zr, axis=1) * Fb, axis=1).real  # sum_i a[s-i']... at -s
    rev = rr[:, (-np.arange(n)) % n]  # rev[s] = sum_i a[s-i].b[i]
    both = np.stack([fwd, rev], axis=2).reshape(B, 2 * n)
    sq = energy[:, None] - 2 * both
    best = np.argmin(sq, axis=1)
    shift, r = np.divmod(best, 2)
    direction = np.where(r == 1, -1, 1)
    idx = (shift[:, None] + direction[:, None] * np.arange(n)[None]) % n
    bi = np.arange(B)[:, None]
    diff = curves[bi, idx] - targets
    vals = TWO_PI / n * (diff * diff).sum(axis=(1, 2))
    grads = np.zeros_like(curves)
    grads[bi, idx] = 2 * TWO_PI / n * diff
    return vals, shift, direction, grads


def batch_objective(curves: np.ndarray, targets: np.ndarray, w: ObjectiveWeights = ObjectiveWeights(),
                    need_grad: bool = True):
    """Combined objective per row and gradient w.r.t. ``curves`` (None unless ``need_grad``)."""
    vals = np.zeros(curves.shape[0])
    grads = np.zeros_like(curves) if need_grad else None
    if w.w_od:
        od, _, _, god = batch_ordered_distance(curves, targets)
        vals += w.w_od * od
        if need_grad:
            grads += w.w_od * god
    if w.w_cd:
        cd, gcd = batch_chamfer(curves, targets, need_grad=need_grad)
        vals += w.w_cd * cd
        if need_grad:
            grads += w.w_cd * gcd
    return vals, grads


# -- differentiable curve transforms --------------------------------------


def equidistant_forward(paths: np.ndarray, m: int):
    """Resample closed (B, T, 2) polylines to m equidistant points.

    Returns (points, cache) where cache feeds :func:`equidistant_backward`.
    """
    B, T, _ = paths.shape
    e = np.roll(paths, -1, axis=1) - paths
    ell = np.hypot(e[..., 0], e[..., 1])  # (B, T)
    cum = np.concatenate([np.zeros((B, 1)), np.cumsum(ell, axis=1)], axis=1)
    L = cum[:, -1]
    frac = np.arange(m) / m
    sigma = L[:, None] * frac[None]
    k = np.empty((B, m), dtype=np.int64)
    for b in range(B):
        k[b] = np.searchsorted(cum[b], sigma[b], side="right") - 1
    k = np.clip(k, 0, T - 1)
    bi = np.arange(B)[:, None]
    lk = ell[bi, k]
    safe = np.where(lk > 0, lk, 1.0)
    w = np.where(lk > 0, (sigma - cum[bi, k]) / safe, 0.0)
    q = paths[bi, k] + w[..., None] * e[bi, k]
    return q, (paths, e, ell, k, w, safe, lk > 0, frac)


def equidistant_backward(cache, g: np.ndarray) -> np.ndarray:
    paths, e, ell, k, w, safe, live, frac = cache
    B, T, _ = paths.shape
    bi = np.arange(B)[:, None]
    gp = np.zeros_like(paths)
    ge = np.zeros_like(e)
    bk = np.broadcast_to(bi, k.shape)
    np.add.at(gp, (bk, k), g)
    np.add.at(ge, (bk, k), g * w[..., None])
    gw = np.where(live, (g * e[bi, k]).sum(axis=-1), 0.0)
    gsig = gw / safe
    gL = (gsig * frac[None]).sum(axis=1)
    gcum_k = -gsig  # d w / d cum[k]
    gell = np.zeros_like(ell)
    np.add.at(gell, (bk, k), np.where(live, -gw * w / safe, 0.0))
    # cum[k] = sum_{t<k} ell[t]
    gcum = np.zeros((B, T + 1))
    np.add.at(gcum, (bk, k), gcum_k)
    gell += np.cumsum(gcum[:, ::-1], axis=1)[:, ::-1][:, 1:]
    gell += gL[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(ell[..., None] > 0, e / np.where(ell > 0, ell, 1.0)[..., None], 0.0)
    ge += gell[..., None] * unit
    # e[t] = p[t+1] - p[t]
    gp += np.roll(ge, 1, axis=1) - ge
    return gp


def normalize_forward(q: np.ndarray):
    mu = q.mean(axis=1, keepdims=True)
    c = q - mu
    s = np.sqrt((c * c).sum(axis=(1, 2)) / q.shape[1])
    return c / s[:, None, None], (c, s)


def normalize_backward(cache, g: np.ndarray) -> np.ndarray:
    c, s = cache
    m = c.shape[1]
    gs = -(g * c).sum(axis=(1, 2)) / s ** 2
    gc = g / s[:, None, None] + (gs / (s * m))[:, None, None] * c
    return gc - gc.mean(axis=1, keepdims=True)
