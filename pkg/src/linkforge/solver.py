"""Batched geometric forward kinematics and its reverse-mode gradient.

Each free joint i is placed from two already-solved neighbors j, k by
rotating the unit vector j->k by the angle phi that the law of cosines gives
for the rigid lengths |i-j|, |i-k| measured at t=0. The sign of phi is frozen
from the t=0 orientation of the triangle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mechanism import PaddedBatch


class SolverError(ArithmeticError):
    pass


class Singular(SolverError):
    pass


class InfeasibleState(SolverError):
    pass


@dataclass(frozen=True)
class TraceBatch:
    positions: np.ndarray  # (B, N, T, 2)
    feasible: np.ndarray  # (B,)
    thetas: np.ndarray  # (T,)

    def target_paths(self, batch: PaddedBatch) -> np.ndarray:
        return self.positions[np.arange(self.positions.shape[0]), batch.target]


def thetas_for(T: int) -> np.ndarray:
    return 2 * np.pi * np.arange(T) / T


def orientation(xi, xj, xk):
    """Signed area term of the (i; j, k) triangle; positive when i lies
    counter-clockwise of the ray j->k."""
    return (xk[..., 0] - xj[..., 0]) * (xi[..., 1] - xj[..., 1]) - (
        xk[..., 1] - xj[..., 1]
    ) * (xi[..., 0] - xj[..., 0])


def solve_joint(xi0, xj0, xk0, xjT, xkT) -> np.ndarray:
    """Position of joint i given its neighbors' current positions."""
    xi0, xj0, xk0, xjT, xkT = (np.asarray(v, dtype=float) for v in (xi0, xj0, xk0, xjT, xkT))
    lij = math.hypot(*(xi0 - xj0))
    lik = math.hypot(*(xi0 - xk0))
    d = xkT - xjT
    djk = math.hypot(*d)
    if djk == 0.0:
        raise Singular("neighbors coincide")
    c = (djk ** 2 + lij ** 2 - lik ** 2) / (2 * djk * lij)
    if abs(c) > 1.0:
        raise Singular(f"triangle inequality violated (cos phi = {c:.6g})")
    s = float(np.sign(orientation(xi0, xj0, xk0))) * math.sqrt(1.0 - c * c)
    u = d / djk
    return xjT + lij * np.array([c * u[0] - s * u[1], s * u[0] + c * u[1]])


# -- batched forward/backward -------------------------------------------


@dataclass
class _Step:
    rows: np.ndarray  # batch rows active in this step
    i: np.ndarray
    j: np.ndarray
    k: np.ndarray
    u: np.ndarray  # (b, T, 2)
    D: np.ndarray  # (b, T)
    c: np.ndarray
    sn: np.ndarray
    lij: np.ndarray  # (b,)
    lik: np.ndarray
    eij: np.ndarray  # (b, 2) unit vectors X0_i - X0_j
    eik: np.ndarray


@dataclass
class Tape:
    x0: np.ndarray
    thetas: np.ndarray
    steps: list
    plan: np.ndarray
    fixed: np.ndarray
    true_mask: np.ndarray


def simulate(
    x0: np.ndarray,
    plan: np.ndarray,
    fixed: np.ndarray,
    node_count: np.ndarray,
    thetas: np.ndarray,
    record: bool = False,
):
    """Forward kinematics for (B, N, 2) initial positions.

    Returns (positions (B, N, T, 2), feasible (B,), tape or None).
    """
    B, N, _ = x0.shape
    T = thetas.shape[0]
    P = np.repeat(x0[:, :, None, :], T, axis=2)
    cos_t, sin_t = np.cos(thetas), np.sin(thetas)
    arm = x0[:, 1] - x0[:, 0]  # (B, 2)
    P[:, 1, :, 0] = x0[:, 0, None, 0] + cos_t * arm[:, None, 0] - sin_t * arm[:, None, 1]
    P[:, 1, :, 1] = x0[:, 0, None, 1] + sin_t * arm[:, None, 0] + cos_t * arm[:, None, 1]
    steps = []
    with np.errstate(all="ignore"):
        for s in range(plan.shape[1]):
            rows = np.nonzero(plan[:, s, 0] >= 0)[0]
            if rows.size == 0:
                continue
            i, j, k = plan[rows, s, 0], plan[rows, s, 1], plan[rows, s, 2]
            xi, xj, xk = x0[rows, i], x0[rows, j], x0[rows, k]
            vij = xi - xj
            vik = xi - xk
            lij = np.hypot(vij[:, 0], vij[:, 1])
            lik = np.hypot(vik[:, 0], vik[:, 1])
            sign = np.sign(orientation(xi, xj, xk))
            pj, pk = P[rows, j], P[rows, k]
            d = pk - pj
            D = np.hypot(d[..., 0], d[..., 1])
            u = d / D[..., None]
            c = (D ** 2 + (lij ** 2 - lik ** 2)[:, None]) / (2 * D * lij[:, None])
            sn = sign[:, None] * np.sqrt(1.0 - c ** 2)
            q = np.stack([c * u[..., 0] - sn * u[..., 1], sn * u[..., 0] + c * u[..., 1]], axis=-1)
            P[rows, i] = pj + lij[:, None, None] * q
            if record:
                steps.append(_Step(rows, i, j, k, u, D, c, sn, lij, lik,
                                   vij / lij[:, None], vik / lik[:, None]))
    true_mask = np.arange(N)[None, :] < node_count[:, None]
    finite = np.isfinite(P).all(axis=(2, 3))
    feasible = np.where(true_mask, finite, True).all(axis=1)
    tape = Tape(x0, thetas, steps, plan, fixed, true_mask) if record else None
    return P, feasible, tape


def backward(tape: Tape, grad: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product: (B, N, T, 2) trace cotangent -> (B, N, 2)."""
    G = np.array(grad, dtype=float, copy=True)
    G[~tape.true_mask] = 0.0
    gx0 = np.zeros_like(tape.x0)
    for st in reversed(tape.steps):
        rows = st.rows
        g = G[rows, st.i]  # (b, T, 2)
        G[rows, st.i] = 0.0
        u, D, c, sn = st.u, st.D, st.c, st.sn
        lij, lik = st.lij[:, None], st.lik[:, None]
        uperp = np.stack([-u[..., 1], u[..., 0]], axis=-1)
        q = c[..., None] * u + sn[..., None] * uperp
        g_lij = np.einsum("btd,btd->b", g, q)
        gq = lij[..., None] * g
        g_c = np.einsum("btd,btd->bt", gq, u)
        g_sn = np.einsum("btd,btd->bt", gq, uperp)
        g_u = c[..., None] * gq + sn[..., None] * np.stack([gq[..., 1], -gq[..., 0]], axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            g_c = g_c + np.where(sn != 0, g_sn * (-c / sn), 0.0)
        # c = D/(2 lij) + lij/(2 D) - lik^2/(2 D lij)
        dc_dD = 1.0 / (2 * lij) - (lij ** 2 - lik ** 2) / (2 * D ** 2 * lij)
        dc_dlij = -D / (2 * lij ** 2) + 1.0 / (2 * D) + lik ** 2 / (2 * D * lij ** 2)
        dc_dlik = -lik / (D * lij)
        g_D = g_c * dc_dD
        g_lij = g_lij + (g_c * dc_dlij).sum(axis=1)
        g_lik = (g_c * dc_dlik).sum(axis=1)
        # u = d / D, D = |d|
        ug = np.einsum("btd,btd->bt", g_u, u)
        g_d = (g_u - u * ug[..., None]) / D[..., None] + u * g_D[..., None]
        G[rows, st.k] += g_d
        G[rows, st.j] += g - g_d
        gi = g_lij[:, None] * st.eij + g_lik[:, None] * st.eik
        gx0[rows, st.i] += gi
        gx0[rows, st.j] -= g_lij[:, None] * st.eij
        gx0[rows, st.k] -= g_lik[:, None] * st.eik
    # crank: p1 = X0 + R(theta) (X1 - X0)
    cos_t, sin_t = np.cos(tape.thetas), np.sin(tape.thetas)
    g1 = G[:, 1]
    rt_g = np.stack(
        [cos_t * g1[..., 0] + sin_t * g1[..., 1], -sin_t * g1[..., 0] + cos_t * g1[..., 1]],
        axis=-1,
    ).sum(axis=1)
    gx0[:, 1] += rt_g
    gx0[:, 0] += g1.sum(axis=1) - rt_g
    G[:, 1] = 0.0
    # everything left is a fixed joint holding its initial position
    static = tape.fixed & tape.true_mask
    gx0 += np.where(static[..., None], G.sum(axis=2), 0.0)
    gx0[~tape.true_mask] = 0.0
    return gx0


def solve_batch(batch: PaddedBatch, T: int, positions: np.ndarray | None = None) -> TraceBatch:
    if T < 2:
        raise ValueError("need at least two timesteps")
    x0 = batch.positions if positions is None else positions
    thetas = thetas_for(T)
    P, feasible, _ = simulate(x0, batch.plan, batch.fixed_mask, batch.node_count, thetas)
    return TraceBatch(P, feasible, thetas)


def trace_gradient(batch: PaddedBatch, T: int, downstream_gradient: np.ndarray,
                   positions: np.ndarray | None = None) -> np.ndarray:
    x0 = batch.positions if positions is None else positions
    thetas = thetas_for(T)
    _, feasible, tape = simulate(
        x0, batch.plan, batch.fixed_mask, batch.node_count, thetas, record=True
    )
    if not feasible.all():
        bad = np.nonzero(~feasible)[0].tolist()
        raise InfeasibleState(f"gradient requested on infeasible mechanisms {bad}")
    return backward(tape, downstream_gradient)


# -- export ------------------------------------------------------------------


def trace_to_csv(positions: np.ndarray, n_joints: int | None = None) -> str:
    """CSV rows t,joint,x,y for one mechanism's (N, T, 2) trace."""
    N, T, _ = positions.shape
    n = N if n_joints is None else n_joints
    lines = ["t,joint,x,y"]
    for t in range(T):
        for j in range(n):
            x, y = positions[j, t]
            lines.append(f"{t},{j},{float(x)!r},{float(y)!r}")
    return "\n".join(lines) + "\n"


def path_to_svg(path: np.ndarray, size: int = 400, stroke: str = "black",
                extra: list[np.ndarray] | None = None) -> str:
    """SVG polyline of a closed path (and optional overlays), fit to the canvas."""
    curves = [path] + list(extra or [])
    allp = np.vstack(curves)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    scale = 0.9 * size / max(float((hi - lo).max()), 1e-12)
    colors = [stroke, "red", "blue", "green"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for n, c in enumerate(curves):
        xy = (c - lo) * scale + 0.05 * size
        pts = " ".join(f"{x:.3f},{size - y:.3f}" for x, y in xy)
        parts.append(
            f'<polygon points="{pts}" fill="none" stroke="{colors[n % len(colors)]}" '
            'stroke-width="1"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
