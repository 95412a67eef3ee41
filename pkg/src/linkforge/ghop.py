"""Contrastive embedding models for mechanisms and curves.

The mechanism encoder runs K GIN layers, then a multi-head GAT over the
concatenated per-layer node states to form a query, then per-node attention
over the K layer states ("hop attention"), and finally attention pooling over
nodes. Curve encoders are 1-D convolution stacks over 200-point normalized
curves. All embeddings are unit rows.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .mechanism import Mechanism

NODE_FEATURES = 5


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 64
    emb_dim: int = 64
    gat_heads: int = 4
    hop_heads: int = 4
    coord_scale: float = 10.0
    curve_points: int = 200
    curve_channels: tuple[int, ...] = (32, 64, 128)
    curve_kernel: int = 5
    curve_hidden: int = 128
    invariant_features: bool = True

    def __post_init__(self):
        if self.hidden % self.gat_heads or self.hidden % self.hop_heads:
            raise ValueError("hidden width must be divisible by the head counts")
        object.__setattr__(self, "curve_channels", tuple(int(c) for c in self.curve_channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve_channels"] = list(self.curve_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["curve_channels"] = tuple(d.get("curve_channels", cls.curve_channels))
        return cls(**d)


# -- graph batching -----------------------------------------------------------


@dataclass
class GraphBatch:
    x: torch.Tensor  # (nodes, 5)
    src: torch.Tensor  # (edges,) both directions, no self loops
    dst: torch.Tensor
    graph: torch.Tensor  # (nodes,) owning graph
    n_graphs: int

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]


def node_features(m: Mechanism, coord_scale: float = 10.0) -> np.ndarray:
    out = np.zeros((m.n, NODE_FEATURES))
    for i, j in enumerate(m.joints):
        out[i] = (j.is_fixed, j.is_actuated, j.is_target, j.x0 * coord_scale, j.y0 * coord_scale)
    return out


class GraphStore:
    """Concatenated node features and edges of a mechanism list, for fast batching."""

    def __init__(self, mechanisms: list[Mechanism], coord_scale: float = 10.0):
        feats = [node_features(m, coord_scale) for m in mechanisms]
        edges = [np.array(m.sorted_linkages(), dtype=np.int64).reshape(-1, 2) for m in mechanisms]
        self.n_nodes = np.array([len(f) for f in feats], dtype=np.int64)
        self.n_edges = np.array([len(e) for e in edges], dtype=np.int64)
        self.node_off = np.concatenate([[0], np.cumsum(self.n_nodes)])
        self.edge_off = np.concatenate([[0], np.cumsum(self.n_edges)])
        self.feats = np.concatenate(feats) if feats else np.zeros((0, NODE_FEATURES))
        self.edges = np.concatenate(edges) if edges else np.zeros((0, 2), np.int64)

    def __len__(self) -> int:
        return len(self.n_nodes)

    def batch(self, idx, dtype=torch.float32) -> GraphBatch:
        idx = np.asarray(idx, dtype=np.int64)
        nn_ = self.n_nodes[idx]
        ne = self.n_edges[idx]
        new_off = np.concatenate([[0], np.cumsum(nn_)])
        node_rows = _ranges(self.node_off[idx], nn_)
        edge_rows = _ranges(self.edge_off[idx], ne)
        shift = np.repeat(new_off[:-1], ne)
        e = self.edges[edge_rows] + shift[:, None]
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        return GraphBatch(
            torch.as_tensor(self.feats[node_rows], dtype=dtype),
            torch.as_tensor(src),
            torch.as_tensor(dst),
            torch.as_tensor(np.repeat(np.arange(len(idx)), nn_)),
            len(idx),
        )


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offs = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    return np.arange(total) + offs


def graph_batch(mechanisms: list[Mechanism], coord_scale: float = 10.0, dtype=torch.float32) -> GraphBatch:
    return GraphStore(mechanisms, coord_scale).batch(np.arange(len(mechanisms)), dtype)


# -- segment softmax ------------------------------------------------------------


def segment_softmax(scores: torch.Tensor, seg: torch.Tensor, n_seg: int) -> torch.Tensor:
    """Softmax of ``scores`` (E, ...) within groups given by ``seg`` (E,)."""
    shape = (n_seg,) + scores.shape[1:]
    idx = seg.view(-1, *([1] * (scores.dim() - 1))).expand_as(scores)
    mx = torch.full(shape, -math.inf, dtype=scores.dtype).scatter_reduce(
        0, idx, scores, reduce="amax", include_self=True
    )
    ex = torch.exp(scores - mx.gather(0, idx).detach())
    den = torch.zeros(shape, dtype=scores.dtype).index_add(0, seg, ex)
    return ex / den.gather(0, idx)


# -- mechanism encoder ------------------------------------------------------------


class GINLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.eps = nn.Parameter(torch.zeros(()))
        self.lin1 = nn.Linear(d_in, d_out)
        self.lin2 = nn.Linear(d_out, d_out)

    def forward(self, h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
        agg = torch.zeros_like(h).index_add(0, dst, h[src])
        x = (1 + self.eps) * h + agg
        return F.relu(self.lin2(F.relu(self.lin1(x))))


class GATLayer(nn.Module):
    """Additive attention over neighbors plus self; heads concatenated after ELU."""

    def __init__(self, d_in: int, d_out: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = d_out // heads
        self.W = nn.Linear(d_in, heads * self.d_head, bias=False)
        self.a_src = nn.Parameter(torch.empty(heads, self.d_head))
        self.a_dst = nn.Parameter(torch.empty(heads, self.d_head))
        nn.init.xavier_uniform_(self.a_src)
        nn.init.xavier_uniform_(self.a_dst)
        self.last_alpha: torch.Tensor | None = None

    def forward(self, h: torch.Tensor, src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
        n = h.shape[0]
        loop = torch.arange(n)
        s = torch.cat([src, loop])
        d = torch.cat([dst, loop])
        z = self.W(h).view(n, self.heads, self.d_head)
        e = F.leaky_relu((z[s] * self.a_src).sum(-1) + (z[d] * self.a_dst).sum(-1), 0.2)
        alpha = segment_softmax(e, d, n)  # (E + n, heads)
        self.last_alpha = alpha.detach()
        out = torch.zeros_like(z).index_add(0, d, alpha[..., None] * z[s])
        return F.elu(out).reshape(n, self.heads * self.d_head)


class HopAttention(nn.Module):
    """Per node, the GAT output queries that node's K layer states."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_k = d // heads
        self.Wq = nn.Linear(d, d, bias=False)
        self.Wk = nn.Linear(d, d, bias=False)
        self.Wv = nn.Linear(d, d, bias=False)
        self.Wo = nn.Linear(d, d, bias=False)
        self.last_alpha: torch.Tensor | None = None

    def forward(self, query: torch.Tensor, layers: torch.Tensor) -> torch.Tensor:
        n, K, d = layers.shape
        q = self.Wq(query).view(n, self.heads, 1, self.d_k)
        k = self.Wk(layers).view(n, K, self.heads, self.d_k).transpose(1, 2)
        v = self.Wv(layers).view(n, K, self.heads, self.d_k).transpose(1, 2)
        att = torch.softmax((q @ k.transpose(-1, -2)) / math.sqrt(self.d_k), dim=-1)  # (n, h, 1, K)
        self.last_alpha = att.detach()
        out = (att @ v).reshape(n, self.heads * self.d_k)
        return self.Wo(out)


class AttentionPool(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.proj = nn.Linear(d, d)
        self.score = nn.Linear(d, 1, bias=False)
        self.last_alpha: torch.Tensor | None = None

    def forward(self, h: torch.Tensor, graph: torch.Tensor, n_graphs: int) -> torch.Tensor:
        s = self.score(torch.tanh(self.proj(h)))[:, 0]
        alpha = segment_softmax(s, graph, n_graphs)
        self.last_alpha = alpha.detach()
        return torch.zeros(n_graphs, h.shape[1], dtype=h.dtype).index_add(0, graph, alpha[:, None] * h)


class GHopEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden
        self.gin = nn.ModuleList(
            [GINLayer(NODE_FEATURES if k == 0 else H, H) for k in range(cfg.layers)]
        )
        self.gat = GATLayer(cfg.layers * H, H, cfg.gat_heads)
        self.hop = HopAttention(H, cfg.hop_heads)
        self.pool = AttentionPool(H)
        self.out = nn.Linear(H, cfg.emb_dim)

    def forward(self, g: GraphBatch) -> torch.Tensor:
        if g.x.dim() != 2 or g.x.shape[1] != NODE_FEATURES:
            raise ShapeMismatch(f"node features must be (nodes, {NODE_FEATURES}), got {tuple(g.x.shape)}")
        h = g.x
        states = []
        for layer in self.gin:
            h = layer(h, g.src, g.dst)
            states.append(h)
        query = self.gat(torch.cat(states, dim=1), g.src, g.dst)
        node = self.hop(query, torch.stack(states, dim=1))
        pooled = self.pool(node, g.graph, g.n_graphs)
        return F.normalize(self.out(pooled), dim=1)


# -- curve encoder ------------------------------------------------------------------


def curve_features(points: torch.Tensor, closed: bool, invariant: bool = True) -> torch.Tensor:
    """(B, n, 2) points -> (B, C, n) per-point channels.

    The invariant channels (distance to centroid, radial and tangential
    components, turning sine/cosine, local spacing) do not change under
    rotation of the curve.
    """
    if points.dim() != 3 or points.shape[-1] != 2:
        raise ShapeMismatch(f"curves must be (B, n, 2), got {tuple(points.shape)}")
    if not invariant:
        return points.transpose(1, 2)
    n = points.shape[1]
    c = points - points.mean(dim=1, keepdim=True)
    if closed:
        nxt = torch.roll(points, -1, dims=1)
        prv = torch.roll(points, 1, dims=1)
    else:
        nxt = torch.cat([points[:, 1:], points[:, -1:]], dim=1)
        prv = torch.cat([points[:, :1], points[:, :-1]], dim=1)
    t = nxt - prv
    tl = torch.sqrt((t * t).sum(-1) + 1e-12)
    tn = t / tl[..., None]
    r = torch.sqrt((c * c).sum(-1) + 1e-12)
    radial = (c * tn).sum(-1)
    tang = c[..., 0] * tn[..., 1] - c[..., 1] * tn[..., 0]
    e_in = points - prv
    e_out = nxt - points
    li = torch.sqrt((e_in * e_in).sum(-1) + 1e-12)
    lo = torch.sqrt((e_out * e_out).sum(-1) + 1e-12)
    cos_turn = (e_in * e_out).sum(-1) / (li * lo)
    sin_turn = (e_in[..., 0] * e_out[..., 1] - e_in[..., 1] * e_out[..., 0]) / (li * lo)
    spacing = tl * (n / (4 * math.pi))
    return torch.stack([r, radial, tang, cos_turn, sin_turn, spacing], dim=1)


class CurveEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), closed: bool = True):
        super().__init__()
        self.cfg = cfg
        self.closed = closed
        c_in = 6 if cfg.invariant_features else 2
        convs = []
        for c_out in cfg.curve_channels:
            convs.append(nn.Conv1d(c_in, c_out, cfg.curve_kernel))
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        self.fc1 = nn.Linear(2 * c_in, cfg.curve_hidden)
        self.fc2 = nn.Linear(cfg.curve_hidden, cfg.emb_dim)

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.curve_kernel // 2
        return F.pad(x, (p, p), mode="circular" if self.closed else "replicate")

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        if points.dim() != 3 or points.shape[1] != self.cfg.curve_points:
            raise ShapeMismatch(
                f"curves must be (B, {self.cfg.curve_points}, 2), got {tuple(points.shape)}"
            )
        x = curve_features(points, self.closed, self.cfg.invariant_features)
        for n, conv in enumerate(self.convs):
            x = F.relu(conv(self._pad(x)))
            if n < len(self.convs) - 1 and x.shape[-1] >= 2:
                x = F.avg_pool1d(x, 2)
        pooled = torch.cat([x.mean(dim=-1), x.amax(dim=-1)], dim=1)
        return F.normalize(self.fc2(F.relu(self.fc1(pooled))), dim=1)


class LinkageModel(nn.Module):
    """Mechanism encoder, full-curve and partial-curve encoders, and log temperature."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), tau0: float = 0.07):
        super().__init__()
        self.cfg = cfg
        self.mech = GHopEncoder(cfg)
        self.full = CurveEncoder(cfg, closed=True)
        self.partial = CurveEncoder(cfg, closed=False)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau0)))

    @property
    def tau(self) -> torch.Tensor:
        return torch.exp(self.log_tau)

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(arrays):
            raise ShapeMismatch("parameter names do not match the model layout")
        state = {}
        for k, v in own.items():
            if tuple(arrays[k].shape) != tuple(v.shape):
                raise ShapeMismatch(f"{k}: expected {tuple(v.shape)}, got {arrays[k].shape}")
            state[k] = torch.as_tensor(np.array(arrays[k]), dtype=v.dtype)
        self.load_state_dict(state)

    @torch.no_grad()
    def embed_mechanisms(self, store: GraphStore, batch_size: int = 1024) -> np.ndarray:
        self.eval()
        dtype = next(self.parameters()).dtype
        out = []
        for lo in range(0, len(store), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(store)))
            out.append(self.mech(store.batch(idx, dtype)).cpu().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.cfg.emb_dim))

    @torch.no_grad()
    def embed_curves(self, points: np.ndarray, closed: bool = True, batch_size: int = 1024) -> np.ndarray:
        self.eval()
        enc = self.full if closed else self.partial
        dtype = next(self.parameters()).dtype
        pts = np.array(points)  # copy: torch wants writable memory
        out = [enc(torch.as_tensor(pts[lo : lo + batch_size], dtype=dtype)).cpu().numpy()
               for lo in range(0, len(pts), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.emb_dim))


# -- losses -------------------------------------------------------------------------


def cosine_similarity_matrix(Fm: torch.Tensor, G: torch.Tensor) -> torch.Tensor:
    Fn = Fm / Fm.norm(dim=1, keepdim=True)
    Gn = G / G.norm(dim=1, keepdim=True)
    return Fn @ Gn.T


def clip_loss(Fm: torch.Tensor, G: torch.Tensor, tau, symmetric: bool = False) -> torch.Tensor:
    """Mean cross-entropy of matching row i of F to row i of G among all rows of G."""
    if Fm.shape != G.shape:
        raise ShapeMismatch(f"{tuple(Fm.shape)} vs {tuple(G.shape)}")
    logits = cosine_similarity_matrix(Fm, G) / tau
    labels = torch.arange(Fm.shape[0])
    loss = F.cross_entropy(logits, labels)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, labels))
    return loss


def total_loss(Fm, G, H, tau, gamma: float = 1.0, symmetric: bool = False) -> torch.Tensor:
    return clip_loss(Fm, G, tau, symmetric) + gamma * clip_loss(G, H, tau, symmetric)


@dataclass
class ContrastiveConfig:
    tau0: float = 0.07
    gamma: float = 1.0
    batch_size: int = 256
    lr: float = 1e-3
    epochs: int = 30
    symmetric: bool = False

    def __post_init__(self):
        if self.tau0 <= 0 or self.gamma < 0:
            raise ValueError("need tau > 0 and gamma >= 0")
