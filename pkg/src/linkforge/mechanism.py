"""Mechanism graph model: validity, solve ordering, normalization, batching.

A mechanism is an undirected graph of revolute joints. Joint 0 is the fixed
pivot of the actuator, joint 1 the crank tip driven around it. Every other
free joint is solved from exactly two joints that precede it in the solve
order (dyadic construction).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

ACTUATOR_ARM = 0.05
COLLINEAR_TOL = 1e-9


class MechanismError(ValueError):
    pass


class Unsolvable(MechanismError):
    pass


class ZeroArm(MechanismError):
    pass


class EmptyBatch(MechanismError):
    pass


class GenerationExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class Joint:
    x0: float
    y0: float
    is_fixed: bool = False
    is_actuated: bool = False
    is_target: bool = False


@dataclass(frozen=True)
class Mechanism:
    joints: tuple[Joint, ...]
    linkages: frozenset[tuple[int, int]]
    target_joint: int
    solution_order: tuple[int, ...] = ()

    def __post_init__(self):
        n = len(self.joints)
        if n < 2:
            raise MechanismError("a mechanism needs at least two joints")
        links = set()
        for a, b in self.linkages:
            if a == b:
                raise MechanismError(f"self-loop on joint {a}")
            if not (0 <= a < n and 0 <= b < n):
                raise MechanismError(f"linkage ({a}, {b}) out of range")
            links.add((min(a, b), max(a, b)))
        object.__setattr__(self, "linkages", frozenset(links))
        if not self.joints[0].is_fixed or self.joints[1].is_fixed:
            raise MechanismError("joint 0 must be fixed and joint 1 free")
        if (0, 1) not in links:
            raise MechanismError("the actuated linkage (0, 1) is missing")
        if sum(j.is_actuated for j in self.joints) != 1 or not self.joints[1].is_actuated:
            raise MechanismError("joint 1 must be the only actuated joint")
        if sum(j.is_target for j in self.joints) != 1 or not self.joints[self.target_joint].is_target:
            raise MechanismError("exactly one joint must be the target")

    @classmethod
    def build(
        cls,
        positions: Sequence[Sequence[float]],
        fixed: Sequence[bool],
        linkages: Iterable[tuple[int, int]],
        target: int | None = None,
    ) -> Mechanism:
        """Construct from plain arrays; the target defaults to the last free joint."""
        if target is None:
            target = max(i for i, f in enumerate(fixed) if not f)
        joints = tuple(
            Joint(float(p[0]), float(p[1]), bool(f), i == 1, i == target)
            for i, (p, f) in enumerate(zip(positions, fixed))
        )
        return cls(joints, frozenset(tuple(l) for l in linkages), target)

    @property
    def n(self) -> int:
        return len(self.joints)

    @property
    def positions(self) -> np.ndarray:
        return np.array([[j.x0, j.y0] for j in self.joints], dtype=float)

    @property
    def fixed(self) -> np.ndarray:
        return np.array([j.is_fixed for j in self.joints], dtype=bool)

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in self.joints]
        for a, b in sorted(self.linkages):
            nbrs[a].append(b)
            nbrs[b].append(a)
        return [sorted(x) for x in nbrs]

    def sorted_linkages(self) -> list[tuple[int, int]]:
        return sorted(self.linkages)

    def with_positions(self, positions: np.ndarray) -> Mechanism:
        joints = tuple(
            replace(j, x0=float(p[0]), y0=float(p[1])) for j, p in zip(self.joints, positions)
        )
        return replace(self, joints=joints)

    def with_order(self) -> Mechanism:
        return replace(self, solution_order=tuple(compute_solution_order(self)))

    def solve_plan(self) -> list[tuple[int, int, int]]:
        """(solved, neighbor_j, neighbor_k) triples in solve order, j < k."""
        order = self.solution_order or tuple(compute_solution_order(self))
        nbrs = self.neighbors()
        seen: set[int] = set()
        plan = []
        for i in order:
            if not self.joints[i].is_fixed and i != 1:
                j, k = sorted(n for n in nbrs[i] if n in seen)
                plan.append((i, j, k))
            seen.add(i)
        return plan

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "joints": [
                {"x": j.x0, "y": j.y0, "fixed": j.is_fixed, "target": j.is_target}
                for j in self.joints
            ],
            "linkages": [list(l) for l in self.sorted_linkages()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> Mechanism:
        joints = data["joints"]
        targets = [i for i, j in enumerate(joints) if j.get("target", False)]
        if len(targets) != 1:
            raise MechanismError("mechanism JSON must mark exactly one target joint")
        return cls.build(
            [(j["x"], j["y"]) for j in joints],
            [bool(j["fixed"]) for j in joints],
            [tuple(l) for l in data["linkages"]],
            target=targets[0],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> Mechanism:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ValidationReport:
    dof_ok: bool
    solvable: bool
    degenerate_triangles: list[tuple[int, int, int]] = field(default_factory=list)
    messages: list[str] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.dof_ok and self.solvable and not self.degenerate_triangles


def compute_solution_order(mechanism: Mechanism) -> list[int]:
    """Greedy solve order: fixed joints and the crank first, then free joints
    one at a time, lowest index first among those with two known neighbors.

    Raises Unsolvable when a free joint never gets two known neighbors, or is
    over-constrained (three or more known neighbors when it is reached).
    """
    joints = mechanism.joints
    nbrs = mechanism.neighbors()
    order = [i for i, j in enumerate(joints) if j.is_fixed] + [1]
    known = set(order)
    extra = [n for n in nbrs[1] if joints[n].is_fixed and n != 0]
    if extra:
        raise Unsolvable(f"crank joint 1 is over-constrained by fixed joints {extra}")
    pending = sorted(i for i in range(len(joints)) if i not in known)
    while pending:
        for i in pending:
            count = sum(n in known for n in nbrs[i])
            if count >= 2:
                if count > 2:
                    raise Unsolvable(f"joint {i} has {count} known neighbors (over-constrained)")
                break
        else:
            raise Unsolvable(f"joints {pending} never acquire two known neighbors")
        order.append(i)
        known.add(i)
        pending.remove(i)
    return order


def _cross0(p: np.ndarray, i: int, j: int, k: int) -> float:
    a = p[i] - p[j]
    b = p[k] - p[j]
    return float(b[0] * a[1] - b[1] * a[0])


def validate(mechanism: Mechanism) -> ValidationReport:
    msgs = []
    nfree = int((~mechanism.fixed).sum())
    moving_links = sum(
        1 for a, b in mechanism.linkages
        if not (mechanism.joints[a].is_fixed and mechanism.joints[b].is_fixed)
    )
    dof = 2 * nfree - moving_links
    dof_ok = dof == 1
    if not dof_ok:
        msgs.append(f"degrees of freedom = {dof}, expected 1")
    try:
        order = compute_solution_order(mechanism)
        solvable = True
    except Unsolvable as exc:
        solvable = False
        msgs.append(str(exc))
    degenerate = []
    if solvable:
        p = mechanism.positions
        for i, j, k in replace(mechanism, solution_order=tuple(order)).solve_plan():
            if abs(_cross0(p, i, j, k)) <= COLLINEAR_TOL:
                degenerate.append((i, j, k))
        if degenerate:
            msgs.append(f"collinear solve triangles at t=0: {degenerate}")
    return ValidationReport(dof_ok, solvable, degenerate, msgs)


def normalize_mechanism(mechanism: Mechanism) -> Mechanism:
    """Similarity transform putting joint 0 at the origin and joint 1 at (0.05, 0)."""
    p = mechanism.positions
    arm = p[1] - p[0]
    length = math.hypot(arm[0], arm[1])
    if length < 1e-15:
        raise ZeroArm("joints 0 and 1 coincide")
    c, s = arm / length
    rot = np.array([[c, s], [-s, c]])
    q = (p - p[0]) @ rot.T * (ACTUATOR_ARM / length)
    q[0] = 0.0
    q[1] = (ACTUATOR_ARM, 0.0)
    return mechanism.with_positions(q)


# -- batching ------------------------------------------------------------


@dataclass(frozen=True)
class PaddedBatch:
    """Mechanisms padded to a common joint count.

    ``plan`` is (B, S, 3) with rows (solved, j, k); inactive rows are -1.
    """

    positions: np.ndarray
    plans: tuple[tuple[tuple[int, int, int], ...], ...]
    node_count: np.ndarray
    fixed_mask: np.ndarray
    target: np.ndarray
    plan: np.ndarray
    mechanisms: tuple[Mechanism, ...]

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def n_max(self) -> int:
        return self.positions.shape[1]

    @property
    def true_mask(self) -> np.ndarray:
        return np.arange(self.n_max)[None, :] < self.node_count[:, None]

    def with_positions(self, positions: np.ndarray) -> PaddedBatch:
        return replace(self, positions=np.asarray(positions, dtype=float))

    def subset(self, idx) -> PaddedBatch:
        idx = np.asarray(idx)
        return PaddedBatch(
            self.positions[idx], tuple(self.plans[i] for i in idx), self.node_count[idx],
            self.fixed_mask[idx], self.target[idx], self.plan[idx],
            tuple(self.mechanisms[i] for i in idx),
        )

    def to_mechanisms(self) -> list[Mechanism]:
        return [
            m.with_positions(self.positions[b, : m.n]) for b, m in enumerate(self.mechanisms)
        ]


def pad_batch(mechanisms: Sequence[Mechanism]) -> PaddedBatch:
    if not mechanisms:
        raise EmptyBatch("cannot batch zero mechanisms")
    n_max = max(m.n for m in mechanisms)
    plans = tuple(tuple(m.solve_plan()) for m in mechanisms)
    steps = max(1, max(len(p) for p in plans))
    B = len(mechanisms)
    pos = np.zeros((B, n_max, 2))
    fixed = np.ones((B, n_max), dtype=bool)
    plan = np.full((B, steps, 3), -1, dtype=np.int64)
    for b, m in enumerate(mechanisms):
        pos[b, : m.n] = m.positions
        fixed[b, : m.n] = m.fixed
        if plans[b]:
            plan[b, : len(plans[b])] = plans[b]
    return PaddedBatch(
        positions=pos,
        plans=plans,
        node_count=np.array([m.n for m in mechanisms]),
        fixed_mask=fixed,
        target=np.array([m.target_joint for m in mechanisms]),
        plan=plan,
        mechanisms=tuple(mechanisms),
    )


# -- random generation ---------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    n_joints_max: int = 10
    n_joints_min: int = 4
    rng_seed: int | None = None
    box: float = 0.3
    retries: int = 100
    dyad_tries: int = 30
    timesteps: int = 360
    p_fixed: float = 0.5
    min_path: float = 1e-3
    # target paths closer than this (relative to their extent) to a circle are redrawn
    min_circle_residual: float = 0.01


def circle_residual(path: np.ndarray) -> float:
    """Max deviation of a path from its least-squares circle, relative to the path extent.

    Zero for full circles and for arcs swept back and forth by a rocker.
    """
    c = path - path.mean(axis=0)
    extent = float(np.ptp(c, axis=0).max())
    if extent < 1e-15:
        return 0.0
    c = c / extent
    A = np.c_[2 * c, np.ones(len(c))]
    sol, *_ = np.linalg.lstsq(A, (c * c).sum(axis=1), rcond=None)
    r = math.sqrt(max(sol[2] + sol[0] ** 2 + sol[1] ** 2, 0.0))
    return float(np.abs(np.hypot(*(c - sol[:2]).T) - r).max())


def _dyad_trace(pj, pk, xi, xj, xk):
    """Trace of a joint solved from two moving neighbors; NaN where locked."""
    d = pk - pj
    D = np.hypot(d[:, 0], d[:, 1])
    lij = math.hypot(*(xi - xj))
    lik = math.hypot(*(xi - xk))
    cross = (xk[0] - xj[0]) * (xi[1] - xj[1]) - (xk[1] - xj[1]) * (xi[0] - xj[0])
    c = (D ** 2 + lij ** 2 - lik ** 2) / (2 * D * lij)
    sn = np.sign(cross) * np.sqrt(1 - c ** 2)
    u = d / D[:, None]
    return pj + lij * np.stack([c * u[:, 0] - sn * u[:, 1], sn * u[:, 0] + c * u[:, 1]], axis=1)


def generate_random(config: GeneratorConfig = GeneratorConfig(), rng=None) -> Mechanism:
    """Random valid mechanism built dyad by dyad, checked over a full crank turn."""
    if config.n_joints_max < 4:
        raise ValueError("n_joints_max must be at least 4")
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    T = config.timesteps
    theta = 2 * np.pi * np.arange(T) / T
    rot = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    box = config.box
    with np.errstate(all="ignore"):
        for _ in range(config.retries):
            n_target = int(rng.integers(config.n_joints_min, config.n_joints_max + 1))
            # four joints cannot give a coupler path, so the circle filter starts at five
            strict = n_target >= 5 and config.min_circle_residual > 0
            pos = [rng.uniform(-box, box, 2), rng.uniform(-box, box, 2)]
            arm = pos[1] - pos[0]
            if math.hypot(*arm) < 0.02:
                continue
            c_, s_ = rot[:, 0], rot[:, 1]
            crank = pos[0] + np.stack(
                [c_ * arm[0] - s_ * arm[1], s_ * arm[0] + c_ * arm[1]], axis=1
            )
            fixed = [True, False]
            links = [(0, 1)]
            traces = [np.broadcast_to(pos[0], (T, 2)), crank]
            ok = True
            while len(pos) < n_target and ok:
                room = n_target - len(pos)
                # a fixed parent makes the target sweep an arc, so the last dyad hangs off moving joints
                add_fixed = room >= (3 if strict else 2) and rng.random() < config.p_fixed
                ok = False
                for _ in range(config.dyad_tries):
                    if add_fixed:
                        xf = rng.uniform(-box, box, 2)
                        moving = [i for i, f in enumerate(fixed) if not f]
                        j = int(rng.choice(moving))
                        parents = (j, len(pos))
                        cand_pos = pos + [xf]
                        cand_traces = traces + [np.broadcast_to(xf, (T, 2))]
                    else:
                        moving = [i for i, f in enumerate(fixed) if not f]
                        j = int(rng.choice(moving))
                        others = [i for i in range(len(pos)) if i != j and not (strict and room == 1 and fixed[i])]
                        if not others:
                            break
                        k = int(rng.choice(others))
                        parents = (j, k)
                        cand_pos = pos
                        cand_traces = traces
                    xi = rng.uniform(-box, box, 2)
                    a, b = sorted(parents)
                    xa, xb = cand_pos[a], cand_pos[b]
                    cross = (xb[0] - xa[0]) * (xi[1] - xa[1]) - (xb[1] - xa[1]) * (xi[0] - xa[0])
                    if abs(cross) < 1e-4:
                        continue
                    tr = _dyad_trace(cand_traces[a], cand_traces[b], xi, xa, xb)
                    if not np.all(np.isfinite(tr)):
                        continue
                    last = len(pos) + (2 if add_fixed else 1) == n_target
                    if strict and last and circle_residual(tr) < config.min_circle_residual:
                        continue
                    if add_fixed:
                        pos.append(xf)
                        fixed.append(True)
                        traces.append(np.broadcast_to(xf, (T, 2)))
                    pos.append(xi)
                    fixed.append(False)
                    traces.append(tr)
                    links += [(a, len(pos) - 1), (b, len(pos) - 1)]
                    ok = True
                    break
            if not ok or len(pos) < config.n_joints_min:
                continue
            path = traces[-1]
            if np.ptp(path, axis=0).max() < config.min_path:
                continue
            mech = Mechanism.build(pos, fixed, links, target=len(pos) - 1).with_order()
            if validate(mech).accepted:
                return mech
    raise GenerationExhausted(f"no valid mechanism after {config.retries} attempts")
