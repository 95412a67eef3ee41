"""Dense embedding index for contrastive retrieval, and the brute-force baseline."""
from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .curves import Curve, fft_smooth, preprocess
from .ghop import GraphStore
from .metrics import TWO_PI
from .training import Checkpoint, CheckpointMismatch

INDEX_MAGIC = b"LFINDEX\x01"
INDEX_VERSION = 1
QUERY_POINTS = 200


class EmptyIndex(LookupError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingIndex:
    ids: np.ndarray  # (M,) int64
    matrix: np.ndarray  # (M, D) float32, unit rows
    fingerprint: str
    joint_counts: np.ndarray  # (M,) int32

    def __post_init__(self):
        if len(self.ids) != len(self.matrix) or len(self.ids) != len(self.joint_counts):
            raise ValueError("ids, matrix and joint counts disagree in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def to_bytes(self) -> bytes:
        header = {"version": INDEX_VERSION, "M": self.size, "D": self.dim, "fingerprint": self.fingerprint}
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return b"".join([
            INDEX_MAGIC,
            struct.pack("<Q", len(hb)),
            hb,
            np.ascontiguousarray(self.matrix, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.ids, dtype="<i8").tobytes(),
            np.ascontiguousarray(self.joint_counts, dtype="<i4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, blob: bytes) -> EmbeddingIndex:
        if not blob.startswith(INDEX_MAGIC):
            raise ValueError("not an index file")
        p = len(INDEX_MAGIC)
        (hl,) = struct.unpack("<Q", blob[p : p + 8])
        header = json.loads(blob[p + 8 : p + 8 + hl].decode())
        if header["version"] != INDEX_VERSION:
            raise ValueError(f"unsupported index version {header['version']}")
        M, D = int(header["M"]), int(header["D"])
        off = p + 8 + hl
        need = off + 4 * M * D + 8 * M + 4 * M
        if len(blob) != need:
            raise ValueError(f"index file has {len(blob)} bytes, expected {need}")
        mat = np.frombuffer(blob, "<f4", M * D, off).reshape(M, D)
        off += 4 * M * D
        ids = np.frombuffer(blob, "<i8", M, off)
        off += 8 * M
        counts = np.frombuffer(blob, "<i4", M, off)
        return cls(ids, mat, header["fingerprint"], counts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> EmbeddingIndex:
        return cls.from_bytes(Path(path).read_bytes())


def build_index(ids, mechanisms, checkpoint: Checkpoint, batch_size: int = 1024) -> EmbeddingIndex:
    model = checkpoint.model
    store = GraphStore(list(mechanisms), model.cfg.coord_scale)
    emb = model.embed_mechanisms(store, batch_size).astype(np.float32)
    if emb.shape[1] != checkpoint.emb_dim:
        raise CheckpointMismatch("model output width differs from the checkpoint header")
    counts = np.array([m.n for m in mechanisms], dtype=np.int32)
    return EmbeddingIndex(np.asarray(ids, dtype=np.int64), emb, checkpoint.fingerprint, counts)


def query_points(curve: Curve, n: int = QUERY_POINTS, smooth_freqs: int = 7) -> np.ndarray:
    """Encoder input for a target: resampled and normalized; closed curves are also low-passed."""
    c = preprocess(curve, n)
    if curve.closed:
        c = preprocess(fft_smooth(c, smooth_freqs), n)
    return c.points


def embed_query(curve: Curve, checkpoint: Checkpoint, smooth_freqs: int = 7) -> np.ndarray:
    pts = query_points(curve, checkpoint.model.cfg.curve_points, smooth_freqs)
    return checkpoint.model.embed_curves(pts[None], closed=curve.closed)[0].astype(np.float32)


def rank(index: EmbeddingIndex, embedding: np.ndarray, k: int, max_joints: int | None = None):
    """Top-k (id, similarity) by descending cosine similarity, ties by id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if index.size == 0:
        raise EmptyIndex("index is empty")
    sims = index.matrix @ np.asarray(embedding, dtype=np.float32)
    rows = np.arange(index.size)
    if max_joints is not None:
        rows = rows[index.joint_counts <= max_joints]
        if rows.size == 0:
            raise EmptyIndex(f"no indexed mechanism has at most {max_joints} joints")
    s = sims[rows]
    order = rows[np.lexsort((index.ids[rows], -s))][:k]
    return [(int(index.ids[r]), float(sims[r])) for r in order]


def query(index: EmbeddingIndex, curve: Curve, checkpoint: Checkpoint, k: int,
          max_joints: int | None = None, smooth_freqs: int = 7):
    if checkpoint.fingerprint != index.fingerprint:
        raise CheckpointMismatch("index was built with a different checkpoint")
    return rank(index, embed_query(curve, checkpoint, smooth_freqs), k, max_joints)


def ordered_distances(traces: np.ndarray, target: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Ordered distance of ``target`` (n, 2) against every row of ``traces`` (M, n, 2).

    Candidate orderings are scored with FFT cross-correlation; the value
    reported for each row is then recomputed directly at the winning ordering.
    """
    M, n, _ = traces.shape
    zb = target[:, 0] + 1j * target[:, 1]
    Fb = np.conj(np.fft.fft(zb))
    eb = float((np.abs(zb) ** 2).sum())
    ar = np.arange(n)
    out = np.empty(M)
    for lo in range(0, M, chunk):
        a = traces[lo : lo + chunk]
        za = a[..., 0] + 1j * a[..., 1]
        ea = (np.abs(za) ** 2).sum(axis=1)
        fwd = np.fft.ifft(np.fft.fft(za, axis=1) * Fb, axis=1).real
        zr = za[:, (-ar) % n]
        rev = np.fft.ifft(np.fft.fft(zr, axis=1) * Fb, axis=1).real[:, (-ar) % n]
        both = np.stack([fwd, rev], axis=2).reshape(len(a), 2 * n)
        best = np.argmin(ea[:, None] + eb - 2 * both, axis=1)
        shift, r = np.divmod(best, 2)
        direction = np.where(r == 1, -1, 1)
        idx = (shift[:, None] + direction[:, None] * ar[None]) % n
        diff = a[np.arange(len(a))[:, None], idx] - target[None]
        out[lo : lo + len(a)] = TWO_PI / n * (diff * diff).sum(axis=(1, 2))
    return out


def brute_force_search(ids, traces: np.ndarray, curve: Curve | np.ndarray, k: int):
    """Rank stored traces by ordered distance to the target; ties by id."""
    traces = np.asarray(traces, dtype=float)
    n = traces.shape[1]
    target = preprocess(curve, n).points if isinstance(curve, Curve) else np.asarray(curve, float)
    d = ordered_distances(traces, target)
    ids = np.asarray(ids, dtype=np.int64)
    order = np.lexsort((ids, d))[:k]
    return [(int(ids[r]), float(d[r])) for r in order]


@dataclass
class TimingReport:
    contrastive_seconds: float
    brute_force_seconds: float
    index_size: int

    @property
    def speedup(self) -> float:
        return self.brute_force_seconds / max(self.contrastive_seconds, 1e-12)

    def to_dict(self) -> dict:
        return {"contrastive_seconds": self.contrastive_seconds,
                "brute_force_seconds": self.brute_force_seconds,
                "index_size": self.index_size, "speedup": self.speedup}


def timing_report(index: EmbeddingIndex, checkpoint: Checkpoint, traces: np.ndarray,
                  curve: Curve, k: int = 10, repeats: int = 3) -> TimingReport:
    """Best-of-``repeats`` wall clock for a contrastive query and a brute-force scan."""
    tq, tb = [], []
    for _ in range(repeats):
        t = time.perf_counter()
        query(index, curve, checkpoint, k)
        tq.append(time.perf_counter() - t)
        t = time.perf_counter()
        brute_force_search(index.ids, traces, curve, k)
        tb.append(time.perf_counter() - t)
    return TimingReport(min(tq), min(tb), index.size)
