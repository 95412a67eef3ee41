"""Contrastive training loop and the binary checkpoint format."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .curves import batch_partial
from .ghop import ContrastiveConfig, GraphStore, LinkageModel, ModelConfig, clip_loss, total_loss

logger = logging.getLogger(__name__)

MAGIC = b"LFCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointMismatch(ValueError):
    pass


class Divergence(RuntimeError):
    def __init__(self, message: str, last_state: dict | None, epoch: int):
        super().__init__(message)
        self.last_state = last_state
        self.epoch = epoch


def configure_threads() -> int:
    """Apply LINKFORGE_THREADS (default 1) to torch's intra-op pool."""
    n = int(os.environ.get("LINKFORGE_THREADS", "1") or 1)
    torch.set_num_threads(max(1, n))
    return n


@dataclass
class TrainConfig:
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    val_fraction: float = 0.05
    partial_min: float = 0.10
    partial_max: float = 1.00
    random_reverse: bool = True

    def to_dict(self) -> dict:
        return {
            "contrastive": asdict(self.contrastive),
            "model": self.model.to_dict(),
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "partial_min": self.partial_min,
            "partial_max": self.partial_max,
            "random_reverse": self.random_reverse,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        c = ContrastiveConfig(**d.pop("contrastive", {}))
        m = ModelConfig.from_dict(d.pop("model", {}))
        return cls(contrastive=c, model=m, **d)


@dataclass
class TrainResult:
    model: LinkageModel
    log: list[dict]
    config: TrainConfig


def augment(curves: np.ndarray, rng: np.random.Generator, reverse: bool) -> np.ndarray:
    """Random rotation per curve, and random traversal direction if ``reverse``."""
    B = curves.shape[0]
    ang = rng.uniform(0, 2 * np.pi, B)
    c, s = np.cos(ang), np.sin(ang)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    out = np.einsum("bij,bnj->bni", rot, curves)
    if reverse:
        flip = rng.random(B) < 0.5
        out[flip] = out[flip, ::-1]
    return out


def draw_partials(curves: np.ndarray, rng: np.random.Generator, f_min: float, f_max: float) -> np.ndarray:
    B = curves.shape[0]
    fracs = np.minimum(rng.uniform(f_min, f_max, B), 0.999)
    starts = rng.uniform(0.0, 1.0, B)
    return batch_partial(curves, fracs, starts)


def _batch_losses(model, store, curves, partials, idx, cfg: TrainConfig):
    dtype = next(model.parameters()).dtype
    Fm = model.mech(store.batch(idx, dtype))
    G = model.full(torch.as_tensor(curves[idx], dtype=dtype))
    H = model.partial(torch.as_tensor(partials[idx], dtype=dtype))
    c = cfg.contrastive
    clip1 = clip_loss(Fm, G, model.tau, c.symmetric)
    total = clip1 + c.gamma * clip_loss(G, H, model.tau, c.symmetric)
    return total, clip1


@torch.no_grad()
def evaluate(model, store, curves, partials, cfg: TrainConfig) -> tuple[float, float]:
    """Mean total loss and CLIP1 over fixed, consecutive batches."""
    model.eval()
    bs = cfg.contrastive.batch_size
    tot, c1, w = 0.0, 0.0, 0
    for lo in range(0, len(store), bs):
        idx = np.arange(lo, min(lo + bs, len(store)))
        if len(idx) < 2:
            continue
        t, c = _batch_losses(model, store, curves, partials, idx, cfg)
        tot += float(t) * len(idx)
        c1 += float(c) * len(idx)
        w += len(idx)
    return tot / max(w, 1), c1 / max(w, 1)


def train(mechanisms, curves: np.ndarray, config: TrainConfig = TrainConfig(),
          log_fn=None) -> TrainResult:
    """Train mechanism and curve encoders on aligned (mechanism, curve) pairs.

    ``curves`` are normalized 200-point target curves. A tail slice of
    ``val_fraction`` of the items is held out for validation. Epoch 0 in the
    log is the untrained model.
    """
    cfg = config
    cc = cfg.contrastive
    configure_threads()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    curves = np.asarray(curves, dtype=np.float64)
    n = len(mechanisms)
    n_val = max(2, int(round(n * cfg.val_fraction))) if cfg.val_fraction > 0 else 0
    n_tr = n - n_val
    if n_tr < 2:
        raise ValueError("not enough items to train on")
    store_tr = GraphStore(list(mechanisms[:n_tr]), cfg.model.coord_scale)
    cur_tr = curves[:n_tr]
    store_va = GraphStore(list(mechanisms[n_tr:]), cfg.model.coord_scale)
    vrng = np.random.default_rng([cfg.seed, 1])
    cur_va = augment(curves[n_tr:], vrng, cfg.random_reverse)
    par_va = draw_partials(cur_va, vrng, cfg.partial_min, cfg.partial_max)

    model = LinkageModel(cfg.model, cc.tau0)
    opt = torch.optim.Adam(model.parameters(), lr=cc.lr)
    log: list[dict] = []

    def record(epoch, train_loss, t0):
        vl, vc = evaluate(model, store_va, cur_va, par_va, cfg) if n_val else (math.nan, math.nan)
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": vl, "val_clip1": vc,
               "tau": float(model.tau.detach()), "seconds": time.perf_counter() - t0}
        log.append(rec)
        logger.info("epoch %d train %.4f val %.4f clip1 %.4f", epoch, train_loss, vl, vc)
        if log_fn is not None:
            log_fn(rec)

    t0 = time.perf_counter()
    record(0, math.nan, t0)
    last_good = {k: v.clone() for k, v in model.state_dict().items()}
    for epoch in range(1, cc.epochs + 1):
        model.train()
        full = augment(cur_tr, rng, cfg.random_reverse)
        partials = draw_partials(full, rng, cfg.partial_min, cfg.partial_max)
        perm = rng.permutation(n_tr)
        losses = []
        for lo in range(0, n_tr, cc.batch_size):
            idx = perm[lo : lo + cc.batch_size]
            if len(idx) < 2:
                continue
            loss, _ = _batch_losses(model, store_tr, full, partials, idx, cfg)
            if not torch.isfinite(loss):
                raise Divergence(f"non-finite loss in epoch {epoch}", last_good, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        last_good = {k: v.clone() for k, v in model.state_dict().items()}
        record(epoch, float(np.mean(losses)), t0)
    return TrainResult(model, log, cfg)


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path, model: LinkageModel, config: TrainConfig | None = None,
                    extra: dict | None = None) -> str:
    """Write a checkpoint and return its fingerprint (sha256 of the file)."""
    arrays = model.parameter_arrays()
    names = sorted(arrays)
    payload = b"".join(np.ascontiguousarray(arrays[k], dtype="<f4").tobytes() for k in names)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": config.to_dict() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "emb_dim": model.cfg.emb_dim,
        "arrays": [{"name": k, "shape": list(arrays[k].shape)} for k in names],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = MAGIC + struct.pack("<Q", len(hb)) + hb + payload
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    model: LinkageModel
    header: dict
    fingerprint: str

    @property
    def emb_dim(self) -> int:
        return int(self.header["emb_dim"])


def read_checkpoint_bytes(blob: bytes) -> Checkpoint:
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8:
        raise CheckpointMismatch("not a checkpoint file")
    (hl,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start : start + hl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointMismatch(f"unreadable checkpoint header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {header.get('format_version')}")
    payload = blob[start + hl :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointMismatch("checkpoint payload does not match its checksum")
    arrays = {}
    off = 0
    for a in header["arrays"]:
        shape = tuple(a["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if off + nbytes > len(payload):
            raise CheckpointMismatch("checkpoint payload is truncated")
        arrays[a["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)
        off += nbytes
    if off != len(payload):
        raise CheckpointMismatch("checkpoint payload has trailing bytes")
    cfg = ModelConfig.from_dict(header["model_config"])
    if cfg.emb_dim != header["emb_dim"]:
        raise CheckpointMismatch("embedding dimension disagrees with the model config")
    model = LinkageModel(cfg)
    try:
        model.load_arrays(arrays)
    except ValueError as e:
        raise CheckpointMismatch(str(e)) from None
    model.eval()
    return Checkpoint(model, header, hashlib.sha256(blob).hexdigest())


def load_checkpoint(path) -> Checkpoint:
    return read_checkpoint_bytes(Path(path).read_bytes())
