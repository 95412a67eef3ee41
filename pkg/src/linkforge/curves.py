"""Curve preprocessing: resampling, normalization, smoothing, partial cuts."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CurveError(ValueError):
    pass


class DegenerateCurve(CurveError):
    pass


class OpenCurveUnsupported(CurveError):
    pass


@dataclass(frozen=True, eq=False)
class Curve:
    points: np.ndarray
    closed: bool = True
    equidistant: bool = False

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise CurveError(f"curve needs an (N>=3, 2) point array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise CurveError("curve has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points, **kw) -> Curve:
        kw.setdefault("closed", self.closed)
        kw.setdefault("equidistant", False)
        return Curve(points, **kw)


def arc_length(points: np.ndarray, closed: bool) -> float:
    seg = np.diff(points, axis=0, append=points[:1]) if closed else np.diff(points, axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def points_at_arclength(points: np.ndarray, closed: bool, s: np.ndarray) -> np.ndarray:
    """Linear interpolation of a polyline at cumulative arc positions ``s``."""
    pts = np.vstack([points, points[:1]]) if closed else points
    seg = np.diff(pts, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cum[-1]
    if total < 1e-12:
        raise DegenerateCurve("curve has zero arc length")
    s = np.mod(s, total) if closed else np.clip(s, 0.0, total)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(lengths[k] > 0, (s - cum[k]) / lengths[k], 0.0)
    return pts[k] + w[:, None] * seg[k]


def resample_equidistant(curve: Curve, n: int) -> Curve:
    if n < 3:
        raise CurveError("resampling needs n >= 3")
    total = arc_length(curve.points, curve.closed)
    if total < 1e-12:
        raise DegenerateCurve("curve has zero arc length")
    if curve.closed:
        s = total * np.arange(n) / n
    else:
        s = total * np.arange(n) / (n - 1)
    out = points_at_arclength(curve.points, curve.closed, s)
    if not curve.closed:
        out[-1] = curve.points[-1]
    return Curve(out, closed=curve.closed, equidistant=True)


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Center on the mean and divide by the RMS distance to it; works on (..., N, 2)."""
    centered = points - points.mean(axis=-2, keepdims=True)
    scale = np.sqrt((centered ** 2).sum(axis=(-1, -2), keepdims=True) / points.shape[-2])
    return centered / scale


def normalize_curve(curve: Curve) -> Curve:
    centered = curve.points - curve.points.mean(axis=0)
    denom = math.sqrt(float((centered ** 2).sum()) / len(curve))
    if denom < 1e-12:
        raise DegenerateCurve("curve has zero spread")
    return Curve(centered / denom, closed=curve.closed, equidistant=curve.equidistant)


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotate_curve(curve: Curve, angle: float) -> Curve:
    return Curve(
        curve.points @ rotation_matrix(angle).T, closed=curve.closed, equidistant=curve.equidistant
    )


def fft_smooth(curve: Curve, n_freq: int = 7) -> Curve:
    """Low-pass a closed curve, keeping Fourier indices 0, +-1, ..., +-n_freq."""
    if not curve.closed:
        raise OpenCurveUnsupported("Fourier smoothing needs a closed curve")
    z = curve.points[:, 0] + 1j * curve.points[:, 1]
    n = len(z)
    coef = np.fft.fft(z)
    keep = np.zeros(n, dtype=bool)
    keep[: n_freq + 1] = True
    keep[n - n_freq:] = True
    coef[~keep] = 0
    out = np.fft.ifft(coef)
    return Curve(np.stack([out.real, out.imag], axis=1), closed=True, equidistant=curve.equidistant)


def random_partial(curve: Curve, rng, f_min: float = 0.10, f_max: float = 1.00) -> Curve:
    """Random contiguous arc of a closed curve, resampled and normalized."""
    frac = float(rng.uniform(f_min, f_max))
    start = float(rng.uniform(0.0, 1.0))
    return partial_arc(curve, frac, start)


def partial_arc(curve: Curve, frac: float, start: float) -> Curve:
    """Arc covering ``frac`` of the perimeter from perimeter fraction ``start``."""
    n = len(curve)
    total = arc_length(curve.points, True)
    if frac >= 1.0:
        s = total * (start + np.arange(n) / n)
        pts = points_at_arclength(curve.points, True, s)
        return normalize_curve(resample_equidistant(Curve(pts, closed=True), n))
    s = total * (start + frac * np.arange(n) / (n - 1))
    pts = points_at_arclength(curve.points, True, s)
    return normalize_curve(resample_equidistant(Curve(pts, closed=False), n))


def preprocess(curve: Curve, n: int) -> Curve:
    """Resample to n equidistant points, then normalize."""
    return normalize_curve(resample_equidistant(curve, n))


# -- file formats --------------------------------------------------------


def curve_to_csv(curve: Curve) -> str:
    buf = io.StringIO()
    buf.write("x,y\n")
    for x, y in curve.points:
        buf.write(f"{float(x)!r},{float(y)!r}\n")
    return buf.getvalue()


def curve_from_csv(text: str, closed: bool = True) -> Curve:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if [h.strip().lower() for h in header] != ["x", "y"]:
        raise CurveError(f"expected header 'x,y', got {header}")
    pts = [(float(r[0]), float(r[1])) for r in reader if r]
    return Curve(np.array(pts), closed=closed)


def curve_to_json(curve: Curve) -> str:
    return json.dumps({"points": curve.points.tolist(), "closed": curve.closed})


def curve_from_json(text: str) -> Curve:
    data = json.loads(text)
    return Curve(np.array(data["points"], dtype=float), closed=bool(data.get("closed", True)))


def load_curve(path, closed: bool | None = None) -> Curve:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        c = curve_from_json(text)
        return c if closed is None else Curve(c.points, closed=closed)
    return curve_from_csv(text, closed=True if closed is None else closed)


def save_curve(curve: Curve, path) -> None:
    path = Path(path)
    path.write_text(curve_to_json(curve) if path.suffix.lower() == ".json" else curve_to_csv(curve))


def batch_partial(points: np.ndarray, fracs: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`partial_arc` for (B, n, 2) closed curves with fracs < 1."""
    B, n, _ = points.shape
    ext = np.concatenate([points, points[:, :1]], axis=1)
    seg = np.diff(ext, axis=1)
    lengths = np.hypot(seg[..., 0], seg[..., 1])
    cum = np.concatenate([np.zeros((B, 1)), np.cumsum(lengths, axis=1)], axis=1)
    total = cum[:, -1:]
    s = total * (starts[:, None] + fracs[:, None] * np.arange(n)[None] / (n - 1))
    s = np.mod(s, total)
    k = np.empty((B, n), dtype=np.int64)
    for b in range(B):
        k[b] = np.searchsorted(cum[b], s[b], side="right") - 1
    k = np.clip(k, 0, n - 1)
    bi = np.arange(B)[:, None]
    lk = lengths[bi, k]
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(lk > 0, (s - cum[bi, k]) / lk, 0.0)
    arc = ext[bi, k] + w[..., None] * seg[bi, k]
    # resample the cut arc to equal spacing along itself, then normalize
    return normalize_points(_resample_open_batch(arc))


def _resample_open_batch(arc: np.ndarray) -> np.ndarray:
    B, n, _ = arc.shape
    seg = np.diff(arc, axis=1)
    lengths = np.hypot(seg[..., 0], seg[..., 1])
    cum = np.concatenate([np.zeros((B, 1)), np.cumsum(lengths, axis=1)], axis=1)
    s = cum[:, -1:] * np.arange(n)[None] / (n - 1)
    k = np.empty((B, n), dtype=np.int64)
    for b in range(B):
        k[b] = np.searchsorted(cum[b], s[b], side="right") - 1
    k = np.clip(k, 0, n - 2)
    bi = np.arange(B)[:, None]
    lk = lengths[bi, k]
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(lk > 0, (s - cum[bi, k]) / lk, 0.0)
    out = arc[bi, k] + w[..., None] * seg[bi, k]
    out[:, -1] = arc[:, -1]
    return out

